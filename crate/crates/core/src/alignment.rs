//! Projection heads, the cross-modal distance, the contrastive alignment
//! objective and nearest-neighbour retrieval in the shared space.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::disentangle::ClassFeatureSet;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

/// Floor on squared distances before the square root in the hinge term.
pub const DIST_SQ_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Margin of the negative hinge.
    pub margin: f64,
    /// Weight of the alignment loss in the stage-two objective.
    pub beta: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Classes with predicted probability at or above this are valid.
    pub valid_threshold: f64,
    /// During training, ground-truth labels are added to the valid set.
    pub train_with_labels: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            beta: 1.0,
            hidden_dim: 128,
            embed_dim: 32,
            valid_threshold: 0.5,
            train_with_labels: true,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.valid_threshold) {
            return Err(Error::config("valid_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(init: &Init, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&init.pp("fc1"), in_dim, hidden_dim)?,
            fc2: Linear::new(&init.pp("fc2"), hidden_dim, out_dim)?,
        })
    }

    /// `(..., D) -> (..., E)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }

    /// Same weights applied at every cell: `(B, D, U, V) -> (B, U, V, E)`.
    pub fn forward_map(&self, map: &Tensor) -> Result<Tensor> {
        map.dims4()?;
        self.forward(&map.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }
}

/// `||g_a(f_a) - g_v(f_v)||` for single vectors or matching batches.
pub fn pair_distance(g_a: &ProjectionHead, g_v: &ProjectionHead, f_a: &Tensor, f_v: &Tensor) -> Result<Tensor> {
    if f_a.dims() != f_v.dims() {
        return Err(Error::shape(format!("f_a {:?} vs f_v {:?}", f_a.dims(), f_v.dims())));
    }
    let diff = (g_a.forward(f_a)? - g_v.forward(f_v)?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?.sqrt()?)
}

/// Squared distances between every row of `a` `(N, E)` and every row of `b` `(M, E)`.
pub fn pairwise_sq_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, e) = a.dims2()?;
    let (m, e2) = b.dims2()?;
    if e != e2 {
        return Err(Error::shape(format!("embedding widths differ: {e} vs {e2}")));
    }
    let diff = a.unsqueeze(1)?.broadcast_sub(&b.unsqueeze(0)?)?;
    let d2 = diff.sqr()?.sum(D::Minus1)?;
    debug_assert_eq!(d2.dims(), &[n, m]);
    Ok(d2)
}

/// Embedded (video, class) entries of one modality.
#[derive(Debug, Clone)]
pub struct EmbeddedEntries {
    /// `(N, E)`.
    pub embeddings: Tensor,
    /// `(video_id, class_id)` per row.
    pub keys: Vec<(u64, usize)>,
}

/// Keeps, per video, only the classes valid in both modalities, then projects
/// them. Audio and visual sets must describe the same videos in the same order.
pub fn embed_matched(
    audio_sets: &[ClassFeatureSet],
    visual_sets: &[ClassFeatureSet],
    g_a: &ProjectionHead,
    g_v: &ProjectionHead,
) -> Result<Option<(EmbeddedEntries, EmbeddedEntries)>> {
    if audio_sets.len() != visual_sets.len() {
        return Err(Error::shape("audio and visual feature sets differ in length"));
    }
    let mut keys = Vec::new();
    let mut fa = Vec::new();
    let mut fv = Vec::new();
    for (a, v) in audio_sets.iter().zip(visual_sets) {
        if a.video_id != v.video_id {
            return Err(Error::invalid(format!("video ids differ: {} vs {}", a.video_id, v.video_id)));
        }
        for (c, feat) in &a.features {
            if let Some(vf) = v.features.get(c) {
                keys.push((a.video_id, *c));
                fa.push(feat.clone());
                fv.push(vf.clone());
            }
        }
    }
    if keys.is_empty() {
        return Ok(None);
    }
    let ea = g_a.forward(&Tensor::stack(&fa, 0)?)?;
    let ev = g_v.forward(&Tensor::stack(&fv, 0)?)?;
    Ok(Some((
        EmbeddedEntries {
            embeddings: ea,
            keys: keys.clone(),
        },
        EmbeddedEntries { embeddings: ev, keys },
    )))
}

/// Mean over all audio x visual entry pairs of
/// `delta D^2 + (1 - delta) max(margin - D, 0)^2`, `delta = 1` iff the pair
/// shares both video and class.
pub fn contrastive_loss_embedded(audio: &EmbeddedEntries, visual: &EmbeddedEntries, margin: f64) -> Result<Tensor> {
    let d2 = pairwise_sq_distances(&audio.embeddings, &visual.embeddings)?;
    let (n, m) = d2.dims2()?;
    let delta: Vec<f64> = audio
        .keys
        .iter()
        .flat_map(|ka| visual.keys.iter().map(move |kv| if ka == kv { 1.0 } else { 0.0 }))
        .collect();
    if !delta.iter().any(|&d| d > 0.0) {
        log::warn!("contrastive batch has no positive pairs");
    }
    let delta = Tensor::from_vec(delta, (n, m), d2.device())?.to_dtype(d2.dtype())?;
    let dist = d2.maximum(DIST_SQ_FLOOR)?.sqrt()?;
    let hinge = (margin - dist)?.relu()?.sqr()?;
    let pos = (&delta * &d2)?;
    let neg = ((1.0 - &delta)? * hinge)?;
    Ok((pos + neg)?.mean_all()?)
}

/// Contrastive loss over disentangled feature sets; zero when no class is
/// valid in both modalities anywhere in the batch.
pub fn contrastive_loss(
    audio_sets: &[ClassFeatureSet],
    visual_sets: &[ClassFeatureSet],
    g_a: &ProjectionHead,
    g_v: &ProjectionHead,
    margin: f64,
) -> Result<Option<Tensor>> {
    match embed_matched(audio_sets, visual_sets, g_a, g_v)? {
        Some((a, v)) => Ok(Some(contrastive_loss_embedded(&a, &v, margin)?)),
        None => Ok(None),
    }
}

/// `L_total = L_mul + beta * L_ava`.
pub fn stage_two_loss(l_mul: &Tensor, l_ava: &Tensor, beta: f64) -> Result<Tensor> {
    Ok((l_mul + (l_ava * beta)?)?)
}

/// Indices of the `k` gallery items nearest to `query`, ascending by distance,
/// ties to the lower index. `k` larger than the gallery gives the full ranking.
pub fn retrieve_cross_modal(query: &[f64], gallery: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.len() != query.len() {
            return Err(Error::shape(format!("gallery item {i} has width {}, query {}", g.len(), query.len())));
        }
        let d: f64 = g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        scored.push((d, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn entries(rows: Vec<Vec<f64>>, keys: Vec<(u64, usize)>) -> EmbeddedEntries {
        let e = rows[0].len();
        let n = rows.len();
        EmbeddedEntries {
            embeddings: Tensor::from_vec(rows.concat(), (n, e), &dev()).unwrap(),
            keys,
        }
    }

    #[test]
    fn three_four_five() {
        let a = entries(vec![vec![3.0, 0.0, 0.0]], vec![(0, 0)]);
        let v = entries(vec![vec![0.0, 4.0, 0.0]], vec![(0, 0)]);
        let d2 = scalar(&pairwise_sq_distances(&a.embeddings, &v.embeddings).unwrap().squeeze(0).unwrap().squeeze(0).unwrap());
        assert_eq!(d2.sqrt(), 5.0);
        // symmetric
        let back = scalar(&pairwise_sq_distances(&v.embeddings, &a.embeddings).unwrap().sum_all().unwrap());
        assert_eq!(back, d2);
    }

    #[test]
    fn loss_special_cases() {
        let a = entries(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![(0, 1), (1, 1)]);
        let v = entries(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![(0, 1), (1, 1)]);
        // positives at zero, negatives far beyond the margin
        let l = scalar(&contrastive_loss_embedded(&a, &v, 1.0).unwrap());
        assert_eq!(l, 0.0);

        let a = entries(vec![vec![0.0, 0.0]], vec![(0, 0)]);
        let v = entries(vec![vec![0.0, 0.0]], vec![(1, 0)]);
        let l = scalar(&contrastive_loss_embedded(&a, &v, 1.0).unwrap());
        assert!((l - 1.0).abs() < 1e-9, "{l}");

        let v = entries(vec![vec![3.0, 0.0]], vec![(1, 0)]);
        assert_eq!(scalar(&contrastive_loss_embedded(&a, &v, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn stage_two_identity() {
        let l = stage_two_loss(&Tensor::new(1.0f64, &dev()).unwrap(), &Tensor::new(2.0f64, &dev()).unwrap(), 0.5).unwrap();
        assert_eq!(scalar(&l), 2.0);
        let l = stage_two_loss(&Tensor::new(1.25f64, &dev()).unwrap(), &Tensor::new(7.0f64, &dev()).unwrap(), 0.0).unwrap();
        assert_eq!(scalar(&l), 1.25);
    }

    #[test]
    fn negatives_beyond_margin_have_zero_gradient() {
        let near = candle_core::Var::new(&[[0.1f64, 0.2]], &dev()).unwrap();
        let far = candle_core::Var::new(&[[9.0f64, -7.0]], &dev()).unwrap();
        let a = EmbeddedEntries {
            embeddings: Tensor::cat(&[near.as_tensor(), far.as_tensor()], 0).unwrap(),
            keys: vec![(0, 0), (1, 0)],
        };
        let v = entries(vec![vec![0.3, 0.1]], vec![(0, 0)]);
        let loss = contrastive_loss_embedded(&a, &v, 1.0).unwrap();
        let grads = loss.backward().unwrap();
        let g_far = grads.get(far.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g_far, vec![0.0, 0.0]);
        let g_near = grads.get(near.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // d/dx of (x - y)^2 / 2 pairs
        assert!((g_near[0] - (0.1 - 0.3)).abs() < 1e-12);
        assert!((g_near[1] - (0.2 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn retrieval_examples() {
        let gallery = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(retrieve_cross_modal(&[0.0, 0.0], &gallery, 1).unwrap(), vec![0]);
        assert_eq!(retrieve_cross_modal(&[3.0, 4.0], &gallery, 5).unwrap(), vec![1, 0]);
        let tied = vec![vec![1.0], vec![-1.0], vec![1.0]];
        assert_eq!(retrieve_cross_modal(&[0.0], &tied, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn spatial_projection_matches_cellwise() {
        let s = ParamStore::new(3, DType::F64);
        let g = ProjectionHead::new(&s.root(ParamGroup::Head), 4, 6, 3).unwrap();
        let map = Tensor::randn(0f64, 1.0, (2, 4, 3, 2), &dev()).unwrap();
        let out = g.forward_map(&map).unwrap();
        assert_eq!(out.dims(), &[2, 3, 2, 3]);
        for b in 0..2 {
            for u in 0..3 {
                for v in 0..2 {
                    let cell = map.get(b).unwrap().narrow(1, u, 1).unwrap().narrow(2, v, 1).unwrap().flatten_all().unwrap();
                    let want = g.forward(&cell.unsqueeze(0).unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                    let got = out.get(b).unwrap().get(u).unwrap().get(v).unwrap().to_vec1::<f64>().unwrap();
                    for k in 0..3 {
                        assert!((want[k] - got[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_monotone_in_margin(
            xs in proptest::collection::vec(-2.0f64..2.0, 12),
            ys in proptest::collection::vec(-2.0f64..2.0, 12),
            m1 in 0.1f64..2.0,
            dm in 0.0f64..2.0,
        ) {
            let a = entries(xs.chunks(3).map(|c| c.to_vec()).collect(), vec![(0, 0), (0, 1), (1, 0), (2, 2)]);
            let v = entries(ys.chunks(3).map(|c| c.to_vec()).collect(), vec![(0, 0), (0, 1), (1, 0), (2, 2)]);
            let l1 = scalar(&contrastive_loss_embedded(&a, &v, m1).unwrap());
            let l2 = scalar(&contrastive_loss_embedded(&a, &v, m1 + dm).unwrap());
            prop_assert!(l1 >= 0.0);
            prop_assert!(l2 >= l1 - 1e-12);
        }

        #[test]
        fn retrieval_matches_sort(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gallery: Vec<Vec<f64>> = (0..100).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = retrieve_cross_modal(&q, &gallery, 10).unwrap();
            let mut all: Vec<(f64, usize)> = gallery.iter().enumerate()
                .map(|(i, g)| (g.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all.iter().take(10).map(|p| p.1).collect();
            prop_assert_eq!(got, want);
        }
    }
}
