//! Stage-one objectives: per-modality multi-label classification, the
//! audiovisual correspondence network and their weighted sum.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, sigmoid, MapNorm, Conv2d, Init, Linear, ResidualBlock};

/// Probability clamp used by the multi-label loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiTaskConfig {
    /// Weight of the correspondence loss.
    pub lambda: f64,
    /// Positive:negative correspondence pairs per step is fixed at 1:1.
    pub negative_policy: NegativePolicy,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            negative_policy: NegativePolicy::UniformOther,
        }
    }
}

impl MultiTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// For each video `i`, pair its audio with the image of a uniformly drawn `j != i`.
    UniformOther,
}

/// Pre-activation class scores and their sigmoids, `(B, C)`.
#[derive(Debug, Clone)]
pub struct ClassPrediction {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Two-way correspondence output, `(B, 2)`; column 1 means "corresponds".
#[derive(Debug, Clone)]
pub struct CorrespondencePrediction {
    pub logits: Tensor,
    pub q: Tensor,
}

/// Global average pooling followed by a linear layer; one per modality.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(init: &Init, embed_dim: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, embed_dim, num_classes)?,
        })
    }

    pub fn logits(&self, final_map: &Tensor) -> Result<Tensor> {
        self.linear.forward(&global_avg_pool(final_map)?)
    }

    pub fn classify(&self, final_map: &Tensor) -> Result<ClassPrediction> {
        let logits = self.logits(final_map)?;
        let probs = sigmoid(&logits)?;
        Ok(ClassPrediction { logits, probs })
    }
}

/// Stride-2 convolution along frequency only, kernel `2 x 1`.
///
/// Adjacent frequency rows are folded into channels and mixed by a 1x1
/// convolution, which is exactly a `(2, 1)` kernel with stride `(2, 1)`.
#[derive(Debug, Clone)]
struct FreqStrideConv {
    conv: Conv2d,
}

impl FreqStrideConv {
    fn new(init: &Init, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, 2 * in_ch, out_ch, (1, 1), 1, 1, [0; 4])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, f, _) = x.dims4()?;
        let x = if f % 2 == 1 { x.pad_with_zeros(2, 0, 1)? } else { x.clone() };
        let (b, c, f, t) = x.dims4()?;
        let folded = x
            .reshape((b, c, f / 2, 2, t))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((b, 2 * c, f / 2, t))?;
        self.conv.forward(&folded)
    }
}

/// Correspondence network over the intermediate audio and visual maps.
#[derive(Debug, Clone)]
pub struct CorrespondenceNet {
    a_conv1: Conv2d,
    a_norm1: MapNorm,
    a_conv2: FreqStrideConv,
    a_norm2: MapNorm,
    a_conv3: Conv2d,
    a_norm3: MapNorm,
    v_block: ResidualBlock,
    fc1: Linear,
    fc2: Linear,
}

impl CorrespondenceNet {
    pub fn new(init: &Init, audio_ch: usize, visual_ch: usize, embed_dim: usize) -> Result<Self> {
        let d = embed_dim;
        Ok(Self {
            // 1x3 along time, dilation 2.
            a_conv1: Conv2d::new(&init.pp("audio.conv1"), audio_ch, d, (1, 3), 1, 2, [0, 0, 2, 2])?,
            a_norm1: MapNorm::new(&init.pp("audio.norm1"), d)?,
            a_conv2: FreqStrideConv::new(&init.pp("audio.conv2"), d, d)?,
            a_norm2: MapNorm::new(&init.pp("audio.norm2"), d)?,
            a_conv3: Conv2d::new(&init.pp("audio.conv3"), d, d, (1, 3), 1, 1, [0, 0, 1, 1])?,
            a_norm3: MapNorm::new(&init.pp("audio.norm3"), d)?,
            v_block: ResidualBlock::new(&init.pp("visual.block"), visual_ch, d, 2)?,
            fc1: Linear::new(&init.pp("fc1"), 2 * d, 2 * d)?,
            fc2: Linear::new(&init.pp("fc2"), 2 * d, 2)?,
        })
    }

    pub fn audio_vector(&self, f_a: &Tensor) -> Result<Tensor> {
        let h = self.a_norm1.forward(&self.a_conv1.forward(f_a)?)?.relu()?;
        let h = self.a_norm2.forward(&self.a_conv2.forward(&h)?)?.relu()?;
        let h = self.a_norm3.forward(&self.a_conv3.forward(&h)?)?.relu()?;
        global_avg_pool(&h)
    }

    pub fn visual_vector(&self, o_v: &Tensor) -> Result<Tensor> {
        global_avg_pool(&self.v_block.forward(o_v)?.relu()?)
    }

    /// Pre-softmax logits, `(B, 2)`.
    pub fn logits(&self, f_a: &Tensor, o_v: &Tensor) -> Result<Tensor> {
        if f_a.dim(0)? != o_v.dim(0)? {
            return Err(Error::shape(format!(
                "audio batch {} vs visual batch {}",
                f_a.dim(0)?,
                o_v.dim(0)?
            )));
        }
        let joint = Tensor::cat(&[self.audio_vector(f_a)?, self.visual_vector(o_v)?], 1)?;
        self.fc2.forward(&self.fc1.forward(&joint)?.relu()?)
    }

    pub fn forward(&self, f_a: &Tensor, o_v: &Tensor) -> Result<CorrespondencePrediction> {
        let logits = self.logits(f_a, o_v)?;
        let q = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(CorrespondencePrediction { logits, q })
    }
}

/// `-sum_c [y log p + (1 - y) log(1 - p)]`, summed over classes and averaged
/// over the batch, with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_multilabel(labels: &Tensor, probs: &Tensor) -> Result<Tensor> {
    if labels.dims() != probs.dims() {
        return Err(Error::shape(format!("labels {:?} vs probs {:?}", labels.dims(), probs.dims())));
    }
    let host: Vec<f64> = probs.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    if host.iter().any(|p| p.is_nan()) {
        return Err(Error::invalid("NaN probability passed to the multi-label loss"));
    }
    let probs = if probs.rank() == 1 { probs.unsqueeze(0)? } else { probs.clone() };
    let labels = if labels.rank() == 1 { labels.unsqueeze(0)? } else { labels.clone() };
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (&labels * p.log()?)?;
    let neg = ((1.0 - &labels)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.sum(1)?.mean(0)?.neg()?)
}

/// Audio plus visual multi-label loss.
pub fn classification_loss(
    labels_audio: &Tensor,
    audio: &ClassPrediction,
    labels_visual: &Tensor,
    visual: &ClassPrediction,
) -> Result<Tensor> {
    Ok((bce_multilabel(labels_audio, &audio.probs)? + bce_multilabel(labels_visual, &visual.probs)?)?)
}

/// Categorical cross entropy `-log q[target]` averaged over the batch;
/// `targets` holds 1 for corresponding pairs and 0 otherwise.
pub fn correspondence_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, targets)?)
}

/// Scalar form of the categorical cross entropy for a one-hot `delta`.
pub fn cce(delta: [f64; 2], q: [f64; 2]) -> f64 {
    let target = if delta[1] > delta[0] { 1 } else { 0 };
    -q[target].ln()
}

/// `L_mul = L_cls + lambda * L_avc`.
pub fn multitask_loss(l_cls: &Tensor, l_avc: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_cls + (l_avc * lambda)?)?)
}

/// For each `i` in `0..n`, a partner `j != i` drawn uniformly.
pub fn sample_negatives<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid("negative sampling needs a batch of at least 2"));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::Device;
    use rand::SeedableRng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let e = PROB_EPS;
        assert!(scalar(&bce_multilabel(&t1(&[1.0, 0.0]), &t1(&[1.0 - e, e])).unwrap()) < 1e-6);
        let v = scalar(&bce_multilabel(&t1(&[1.0]), &t1(&[0.5])).unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = scalar(&bce_multilabel(&t1(&[0.0, 1.0]), &t1(&[0.5, 0.5])).unwrap());
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_nan() {
        assert!(matches!(
            bce_multilabel(&t1(&[1.0]), &t1(&[f64::NAN])),
            Err(Error::InvalidInput(_))
        ));
        assert!(bce_multilabel(&t1(&[1.0, 0.0]), &t1(&[0.5])).is_err());
    }

    #[test]
    fn zero_map_zero_bias_gives_half_probabilities() {
        let s = ParamStore::new(0, DType::F64);
        let head = ClassifierHead::new(&s.root(ParamGroup::Head), 4, 3).unwrap();
        let e = Tensor::zeros((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let p = head.classify(&e).unwrap();
        assert!(p.logits.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
        assert!(p.probs.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_map_logit_is_linear() {
        let s = ParamStore::new(4, DType::F64);
        let head = ClassifierHead::new(&s.root(ParamGroup::Head), 4, 3).unwrap();
        let k = 1.7;
        let e = (Tensor::ones((1, 4, 2, 5), DType::F64, &Device::Cpu).unwrap() * k).unwrap();
        let logits = head.logits(&e).unwrap().to_vec2::<f64>().unwrap();
        let w = head.linear.weight.to_vec2::<f64>().unwrap();
        let b = head.linear.bias.to_vec1::<f64>().unwrap();
        for c in 0..3 {
            let want = k * w[c].iter().sum::<f64>() + b[c];
            assert!((logits[0][c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_vector_is_grid_mean() {
        let e = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let pooled = global_avg_pool(&e).unwrap().to_vec2::<f64>().unwrap();
        let flat = e.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for u in 0..4 {
                    for v in 0..5 {
                        acc += flat[((b * 3 + c) * 4 + u) * 5 + v];
                    }
                }
                assert!((pooled[b][c] - acc / 20.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correspondence_output_is_a_distribution() {
        let s = ParamStore::new(2, DType::F64);
        let net = CorrespondenceNet::new(&s.root(ParamGroup::Head), 5, 6, 8).unwrap();
        let fa = Tensor::randn(0f64, 1.0, (3, 5, 7, 6), &Device::Cpu).unwrap();
        let ov = Tensor::randn(0f64, 1.0, (3, 6, 8, 8), &Device::Cpu).unwrap();
        let q = net.forward(&fa, &ov).unwrap().q.to_vec2::<f64>().unwrap();
        for row in q {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        let wrong = Tensor::randn(0f64, 1.0, (2, 6, 8, 8), &Device::Cpu).unwrap();
        assert!(net.forward(&fa, &wrong).is_err());
    }

    #[test]
    fn cce_properties() {
        assert_eq!(cce([0.0, 1.0], [0.0, 1.0]), 0.0);
        assert!((cce([1.0, 0.0], [0.25, 0.75]) - 4f64.ln()).abs() < 1e-15);
        let logits = Tensor::new(&[[0.3f64, -1.2], [2.0, 0.5]], &Device::Cpu).unwrap();
        let targets = Tensor::new(&[1u32, 0], &Device::Cpu).unwrap();
        let l = scalar(&correspondence_loss(&logits, &targets).unwrap());
        let q = candle_nn::ops::softmax(&logits, D::Minus1).unwrap().to_vec2::<f64>().unwrap();
        let want = (cce([0.0, 1.0], [q[0][0], q[0][1]]) + cce([1.0, 0.0], [q[1][0], q[1][1]])) / 2.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn multitask_identity() {
        let l = multitask_loss(&t1(&[0.5]).squeeze(0).unwrap(), &t1(&[0.3]).squeeze(0).unwrap(), 1.0).unwrap();
        assert!((scalar(&l) - 0.8).abs() < 1e-15);
        let l = multitask_loss(&t1(&[0.5]).squeeze(0).unwrap(), &t1(&[0.3]).squeeze(0).unwrap(), 0.0).unwrap();
        assert_eq!(scalar(&l), 0.5);
    }

    #[test]
    fn negatives_never_pick_self() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(2, &mut rng).unwrap(), vec![1, 0]);
        assert!(sample_negatives(1, &mut rng).is_err());
        for _ in 0..100 {
            let js = sample_negatives(5, &mut rng).unwrap();
            assert!(js.iter().enumerate().all(|(i, &j)| i != j && j < 5));
        }
    }

    #[test]
    fn negatives_are_uniform_over_others() {
        // Monte Carlo: each j != i should appear with frequency 1/7.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let draws = 10_000;
        let mut counts = vec![vec![0usize; n]; n];
        for _ in 0..draws {
            for (i, j) in sample_negatives(n, &mut rng).unwrap().into_iter().enumerate() {
                counts[i][j] += 1;
            }
        }
        for (i, row) in counts.iter().enumerate() {
            assert_eq!(row[i], 0);
            for (j, &c) in row.iter().enumerate() {
                if j != i {
                    let f = c as f64 / draws as f64;
                    assert!((f - 1.0 / 7.0).abs() < 0.02, "({i},{j}) freq {f}");
                }
            }
        }
    }
}
