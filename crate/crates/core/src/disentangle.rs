//! Class-specific maps by Grad-CAM and the weighted pooling that turns them
//! into one feature vector per (video, class, modality).

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::multitask::ClassifierHead;

/// Below this total mass a map is treated as empty and pooling falls back to uniform weights.
pub const MIN_MAP_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

/// Nonnegative per-class maps for a batch, `(B, U, V)`, detached from the graph.
#[derive(Debug, Clone)]
pub struct ClassActivationMap {
    pub map: Tensor,
    pub class_id: usize,
    pub modality: Modality,
    /// Per sample: the score had zero gradient everywhere, so the map is all zeros.
    pub disconnected: Vec<bool>,
}

/// Disentangled vectors of one video in one modality.
#[derive(Debug, Clone)]
pub struct ClassFeatureSet {
    pub video_id: u64,
    pub modality: Modality,
    /// `class_id -> (D,)`, differentiable with respect to the final map.
    pub features: BTreeMap<usize, Tensor>,
    pub valid_classes: Vec<usize>,
}

/// Raw Grad-CAM: channel weights are the spatial mean of the score gradient,
/// the map is `relu(sum_k alpha_k F_k)`.
///
/// `score` maps the (detached) feature tensor `(B, K, U, V)` to one score per
/// sample, `(B,)`. Samples must not interact inside `score`.
pub fn grad_cam_with<F>(feature: &Tensor, score: F) -> Result<(Tensor, Vec<bool>)>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (b, _k, _u, _v) = feature.dims4()?;
    let leaf = Var::from_tensor(&feature.detach())?;
    let scores = score(leaf.as_tensor())?;
    if scores.dims() != [b] {
        return Err(Error::shape(format!("Grad-CAM score must be ({b},), got {:?}", scores.dims())));
    }
    let grads = scores.sum_all()?.backward()?;
    let grad = match grads.get(leaf.as_tensor()) {
        Some(g) => g.clone(),
        None => leaf.as_tensor().zeros_like()?,
    };
    let alpha = grad.mean_keepdim(3)?.mean_keepdim(2)?;
    let map = leaf.as_tensor().broadcast_mul(&alpha)?.sum(1)?.relu()?.detach();
    let mass: Vec<f64> = grad.abs()?.sum((1, 2, 3))?.to_dtype(DType::F64)?.to_vec1()?;
    let disconnected: Vec<bool> = mass.iter().map(|&m| m == 0.0).collect();
    if disconnected.iter().any(|&d| d) {
        log::warn!("Grad-CAM score has no gradient for {} sample(s)", disconnected.iter().filter(|&&d| d).count());
    }
    Ok((map, disconnected))
}

/// Grad-CAM of class `class_id` of `head` over `final_map`.
pub fn grad_cam(final_map: &Tensor, head: &ClassifierHead, class_id: usize, modality: Modality) -> Result<ClassActivationMap> {
    let (map, disconnected) = grad_cam_with(final_map, |f| Ok(head.logits(f)?.narrow(1, class_id, 1)?.squeeze(1)?))?;
    Ok(ClassActivationMap {
        map,
        class_id,
        modality,
        disconnected,
    })
}

/// Normalised pooling weights `(B, 1, U, V)`; empty maps become uniform.
fn pooling_weights(weights: &Tensor) -> Result<Tensor> {
    let (b, u, v) = weights.dims3()?;
    let host: Vec<f64> = weights.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    if host.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("pooling weights must be finite and nonnegative"));
    }
    let cells = u * v;
    let mut out = Vec::with_capacity(host.len());
    for row in host.chunks_exact(cells) {
        let total: f64 = row.iter().sum();
        if total < MIN_MAP_MASS {
            out.extend(std::iter::repeat_n(1.0 / cells as f64, cells));
        } else {
            out.extend(row.iter().map(|w| w / total));
        }
    }
    Ok(Tensor::from_vec(out, (b, 1, u, v), weights.device())?.to_dtype(weights.dtype())?)
}

/// `f = sum E(u,v) W(u,v) / sum W(u,v)`, `(B, D, U, V) x (B, U, V) -> (B, D)`.
/// Gradients flow into `E` only.
pub fn weighted_pool(final_map: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, _d, u, v) = final_map.dims4()?;
    if weights.dims() != [b, u, v] {
        return Err(Error::shape(format!(
            "weights {:?} not aligned with feature map {:?}",
            weights.dims(),
            final_map.dims()
        )));
    }
    let w = pooling_weights(weights)?;
    Ok(final_map.broadcast_mul(&w)?.sum((2, 3))?)
}

/// `{c : p_c >= threshold}` (inclusive).
pub fn select_valid_classes(probs: &[f32], threshold: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&c| probs[c] as f64 >= threshold).collect()
}

/// Disentangles a batch: for every sample, one Grad-CAM + pooled vector per
/// class listed in `valid[i]`. Grad-CAM runs once per class over the whole batch.
pub fn disentangle_batch(
    final_map: &Tensor,
    head: &ClassifierHead,
    valid: &[Vec<usize>],
    video_ids: &[u64],
    modality: Modality,
) -> Result<Vec<ClassFeatureSet>> {
    let b = final_map.dim(0)?;
    if valid.len() != b || video_ids.len() != b {
        return Err(Error::shape("one valid-class list and video id per sample required"));
    }
    let mut sets: Vec<ClassFeatureSet> = (0..b)
        .map(|i| ClassFeatureSet {
            video_id: video_ids[i],
            modality,
            features: BTreeMap::new(),
            valid_classes: valid[i].clone(),
        })
        .collect();
    let mut classes: Vec<usize> = valid.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let cam = grad_cam(final_map, head, c, modality)?;
        let pooled = weighted_pool(final_map, &cam.map)?;
        for (i, set) in sets.iter_mut().enumerate() {
            if valid[i].contains(&c) {
                set.features.insert(c, pooled.get(i)?);
            }
        }
    }
    Ok(sets)
}

/// Single-sample disentanglement from a forward pass.
pub fn disentangle_sample(
    final_map: &Tensor,
    head: &ClassifierHead,
    probs: &[f32],
    threshold: f64,
    video_id: u64,
    modality: Modality,
) -> Result<ClassFeatureSet> {
    let map = if final_map.rank() == 3 { final_map.unsqueeze(0)? } else { final_map.clone() };
    if map.dim(0)? != 1 {
        return Err(Error::shape("disentangle_sample takes a single sample"));
    }
    let valid = select_valid_classes(probs, threshold);
    Ok(disentangle_batch(&map, head, &[valid], &[video_id], modality)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn unit_feature_unit_gradient_gives_unit_map() {
        let f = Tensor::ones((1, 1, 3, 4), DType::F64, &dev()).unwrap();
        // score = sum of F => dscore/dF = 1 everywhere.
        let (map, flags) = grad_cam_with(&f, |x| Ok(x.sum((1, 2, 3))?)).unwrap();
        assert!(map.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(flags, vec![false]);
    }

    #[test]
    fn negated_score_rectifies_the_other_sign() {
        let f = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev()).unwrap();
        let score = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_mul(&w)?.sum((1, 2, 3))?) };
        let (pos, _) = grad_cam_with(&f, score).unwrap();
        let (neg, _) = grad_cam_with(&f, |x| Ok(score(x)?.neg()?)).unwrap();
        // pre-ReLU maps are negatives of each other.
        let alpha = w.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        let pre = f.broadcast_mul(&alpha).unwrap().sum(1).unwrap();
        let want_pos = pre.relu().unwrap();
        let want_neg = pre.neg().unwrap().relu().unwrap();
        let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff(&pos, &want_pos) < 1e-12);
        assert!(diff(&neg, &want_neg) < 1e-12);
    }

    #[test]
    fn disconnected_score_gives_flagged_zero_map() {
        let f = Tensor::randn(0f64, 1.0, (2, 2, 3, 3), &dev()).unwrap();
        let c = Tensor::ones(2, DType::F64, &dev()).unwrap();
        let (map, flags) = grad_cam_with(&f, |x| Ok((x.sum((1, 2, 3))? * 0.0)?.add(&c)?)).unwrap();
        assert_eq!(map.sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(flags, vec![true, true]);
    }

    #[test]
    fn pooling_special_cases() {
        let e = Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &dev()).unwrap();
        let uniform = Tensor::ones((1, 2, 2), DType::F64, &dev()).unwrap();
        let mean = e.mean((2, 3)).unwrap();
        let pooled = weighted_pool(&e, &uniform).unwrap();
        let d = (pooled - &mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);

        let onehot = Tensor::new(&[[[0.0f64, 0.0], [0.0, 2.5]]], &dev()).unwrap();
        let pooled = weighted_pool(&e, &onehot).unwrap().to_vec2::<f64>().unwrap();
        let cell = e.narrow(2, 1, 1).unwrap().narrow(3, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for k in 0..3 {
            assert!((pooled[0][k] - cell[k]).abs() < 1e-12);
        }

        let zeros = Tensor::zeros((1, 2, 2), DType::F64, &dev()).unwrap();
        let pooled = weighted_pool(&e, &zeros).unwrap();
        let d = (pooled - &mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);

        let misaligned = Tensor::ones((1, 3, 2), DType::F64, &dev()).unwrap();
        assert!(weighted_pool(&e, &misaligned).is_err());
    }

    #[test]
    fn valid_class_threshold_is_inclusive() {
        assert_eq!(select_valid_classes(&[0.9, 0.1], 0.5), vec![0]);
        assert_eq!(select_valid_classes(&[0.2, 0.1, 0.0], 0.0), vec![0, 1, 2]);
        assert_eq!(select_valid_classes(&[0.5, 0.5], 0.5), vec![0, 1]);
    }

    #[test]
    fn sample_disentanglement_counts() {
        let s = ParamStore::new(0, DType::F64);
        let head = ClassifierHead::new(&s.root(ParamGroup::Head), 4, 3).unwrap();
        let e = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &dev()).unwrap();
        let none = disentangle_sample(&e, &head, &[0.1, 0.2, 0.3], 0.5, 7, Modality::Audio).unwrap();
        assert!(none.features.is_empty());
        let one = disentangle_sample(&e, &head, &[0.1, 0.9, 0.3], 0.5, 7, Modality::Audio).unwrap();
        assert_eq!(one.features.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(one.features[&1].dims(), &[4]);
    }

    #[test]
    fn disjoint_class_regions_give_distinct_vectors() {
        // Two channels, each active on its own half of the grid; the head maps
        // channel k to class k, so each class map covers one half.
        let s = ParamStore::new(0, DType::F64);
        let head = ClassifierHead::new(&s.root(ParamGroup::Head), 4, 2).unwrap();
        let w = Tensor::new(&[[1.0f64, 0.0, 0.3, 0.1], [0.0, 1.0, 0.1, 0.3]], &dev()).unwrap();
        s.get("weight").unwrap().var.set(&w).unwrap();
        let mut data = vec![0.0f64; 4 * 4 * 4];
        for u in 0..4 {
            for v in 0..4 {
                let ch = if v < 2 { 0 } else { 1 };
                data[(ch * 4 + u) * 4 + v] = 1.0;
                data[(2 * 4 + u) * 4 + v] = if v < 2 { 0.8 } else { 0.1 };
                data[(3 * 4 + u) * 4 + v] = if v < 2 { 0.1 } else { 0.8 };
            }
        }
        let e = Tensor::from_vec(data, (1, 4, 4, 4), &dev()).unwrap();
        let set = disentangle_sample(&e, &head, &[0.9, 0.9], 0.5, 0, Modality::Visual).unwrap();
        let a = set.features[&0].to_vec1::<f64>().unwrap();
        let b = set.features[&1].to_vec1::<f64>().unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let cos = dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(cos < 0.99, "cosine {cos}");
    }
}
