//! Visually guided mix-and-separate: sample construction, a small U-Net with
//! guidance modulation at the bottleneck, mask targets, reconstruction and
//! projection-based SDR/SIR/SAR.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disentangle::{disentangle_batch, select_valid_classes, weighted_pool, Modality};
use crate::dsp::{ComplexSpectrogram, Stft};
use crate::error::{Error, Result};
use crate::localization::{localize, normalize, Heatmap};
use crate::model::{AvModel, Batch};
use crate::multitask::PROB_EPS;
use crate::nn::{sigmoid, MapNorm, Conv2d, Init, Linear, ParamGroup, ParamStore};
use crate::optim::{OptimizerConfig, Sgd};
use crate::scene_synth::{render_source, SceneConfig, ScenePair};

/// Metric values are clipped to `[-CAP, CAP]` dB.
pub const METRIC_CAP_DB: f64 = 80.0;
/// Added to the denominator of ratio masks.
pub const MASK_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationConfig {
    /// FFT size; the network sees `n_fft / 2` bins (Nyquist dropped) and as many frames.
    pub n_fft: usize,
    pub channels: usize,
    /// Regress binary instead of ratio masks.
    pub binary_mask: bool,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            n_fft: 256,
            channels: 8,
            binary_mask: false,
            train_pairs: 400,
            test_pairs: 50,
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerConfig {
                lr_head: 0.05,
                lr_backbone: 0.05,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

impl SeparationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 16 || !self.n_fft.is_power_of_two() {
            return Err(Error::config("separation n_fft must be a power of two >= 16"));
        }
        if self.channels == 0 || self.batch_size == 0 {
            return Err(Error::config("separation channels and batch size must be positive"));
        }
        self.optimizer.validate()
    }

    /// Spectrogram side: bins fed to the network and frames per clip.
    pub fn side(&self) -> usize {
        self.n_fft / 2
    }

    pub fn stft(&self) -> Result<Stft> {
        Stft::with_quarter_hop(self.n_fft)
    }

    /// Samples per clip so that the centred transform yields exactly `side()` frames.
    pub fn clip_len(&self) -> usize {
        (self.side() - 1) * (self.n_fft / 4)
    }
}

/// Two dry solo sources and their sum.
#[derive(Debug, Clone)]
pub struct SeparationSample {
    pub video_ids: [u64; 2],
    pub classes: [usize; 2],
    pub solos: [Vec<f32>; 2],
    pub mixture: Vec<f32>,
}

/// Sum of a scene's sounding sources re-rendered at `len` samples or more.
pub fn dry_source(scene: &ScenePair, scene_cfg: &SceneConfig, len: usize) -> Vec<f32> {
    let hop = scene_cfg.hop_samples();
    let win = scene_cfg.window_samples();
    let frames = len.saturating_sub(win).div_ceil(hop) + 1;
    let long = SceneConfig {
        spec_frames: frames.max(scene_cfg.spec_frames),
        ..scene_cfg.clone()
    };
    let mut out = vec![0.0f32; long.clip_samples()];
    for s in scene.sources.iter().filter(|s| s.sounding) {
        for (o, v) in out.iter_mut().zip(render_source(s, &long)) {
            *o += v;
        }
    }
    out
}

fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum()
}

/// Mixes the sounding sources of two single-class scenes over the window of
/// `cfg.clip_len()` samples where the weaker source is loudest.
pub fn build_sample(a: &ScenePair, b: &ScenePair, scene_cfg: &SceneConfig, cfg: &SeparationConfig) -> Result<SeparationSample> {
    let class = |s: &ScenePair| -> Result<usize> {
        match s.sounding_classes().as_slice() {
            [c] => Ok(*c),
            _ => Err(Error::invalid(format!("scene {} is not a single-class scene", s.video_id))),
        }
    };
    let (ca, cb) = (class(a)?, class(b)?);
    let len = cfg.clip_len();
    let long_a = dry_source(a, scene_cfg, 2 * len);
    let long_b = dry_source(b, scene_cfg, 2 * len);
    let span = long_a.len().min(long_b.len());
    let step = cfg.n_fft / 4;
    let mut best = (f64::NEG_INFINITY, 0);
    let mut off = 0;
    while off + len <= span {
        let e = energy(&long_a[off..off + len]).min(energy(&long_b[off..off + len]));
        if e > best.0 {
            best = (e, off);
        }
        off += step;
    }
    let o = best.1;
    let sa = long_a[o..o + len].to_vec();
    let sb = long_b[o..o + len].to_vec();
    if energy(&sa) == 0.0 || energy(&sb) == 0.0 {
        return Err(Error::invalid("a solo source is silent over the whole clip"));
    }
    let mixture = sa.iter().zip(&sb).map(|(x, y)| x + y).collect();
    Ok(SeparationSample {
        video_ids: [a.video_id, b.video_id],
        classes: [ca, cb],
        solos: [sa, sb],
        mixture,
    })
}

/// Deterministic pairs of single-class scenes with different classes.
pub fn pair_scenes(scenes: &[ScenePair], n_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let single: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].sounding_classes().len() == 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pairs);
    if single.len() < 2 {
        return out;
    }
    let mut guard = 0;
    while out.len() < n_pairs && guard < 100 * n_pairs.max(1) {
        guard += 1;
        let mut pick = single.clone();
        pick.shuffle(&mut rng);
        for w in pick.chunks_exact(2) {
            if out.len() == n_pairs {
                break;
            }
            if scenes[w[0]].sounding_classes() != scenes[w[1]].sounding_classes() {
                out.push((w[0], w[1]));
            }
        }
    }
    out
}

/// Magnitude and phase of a waveform with the Nyquist bin dropped from the magnitude.
pub struct SpecView {
    pub full: ComplexSpectrogram,
    /// `side x side`, bin-major.
    pub magnitude: Vec<f64>,
}

pub fn analyse(stft: &Stft, x: &[f32], side: usize) -> Result<SpecView> {
    let full = stft.forward(x);
    if full.frames != side || full.bins != side + 1 {
        return Err(Error::shape(format!(
            "spectrogram {}x{} does not fit a {side}x{side} network input",
            full.bins, full.frames
        )));
    }
    let mag = full.magnitude();
    Ok(SpecView {
        magnitude: mag[..side * side].to_vec(),
        full,
    })
}

/// `|S_k| / (|S_1| + |S_2| + eps)`, or its binary version.
pub fn ideal_mask(target: &[f64], other: &[f64], binary: bool) -> Vec<f64> {
    target
        .iter()
        .zip(other)
        .map(|(&t, &o)| {
            if binary {
                if t >= o && t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (t / (t + o + MASK_EPS)).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Weighted pooling of the visual map `(1, D, U, V)` by the positive part of a normalised map.
pub fn visual_guidance(e_v: &Tensor, k_normalized: &Heatmap) -> Result<Tensor> {
    let w: Vec<f64> = k_normalized.data.iter().map(|v| v.max(0.0)).collect();
    let w = Tensor::from_vec(w, (1, k_normalized.height, k_normalized.width), e_v.device())?.to_dtype(e_v.dtype())?;
    Ok(weighted_pool(e_v, &w)?.squeeze(0)?)
}

/// Guidance vectors of scenes under a frozen localizer: the top predicted
/// audio class is localized and the visual map pooled by that map.
pub fn guidance_for_scenes(model: &AvModel, scenes: &[&ScenePair]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(32) {
        let batch = Batch::from_scenes(chunk, &model.dims, model.dtype())?;
        let (fa, fv) = model.encode(&batch)?;
        let probs: Vec<Vec<f32>> = model.audio_cls.classify(&fa.final_map)?.probs.to_dtype(DType::F32)?.to_vec2()?;
        let top: Vec<Vec<usize>> = probs
            .iter()
            .map(|p| {
                let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
                let mut v = select_valid_classes(p, 1.0 + f64::EPSILON);
                v.push(best);
                v
            })
            .collect();
        let sets = disentangle_batch(&fa.final_map, &model.audio_cls, &top, &batch.video_ids, Modality::Audio)?;
        let e_v = fv.final_map.detach();
        for (i, set) in sets.iter().enumerate() {
            let c = top[i][0];
            let ev_i = e_v.narrow(0, i, 1)?;
            let k = localize(&ev_i, &set.features[&c].detach().unsqueeze(0)?, &model.proj_a, &model.proj_v)?.get(0)?;
            let (h, w) = k.dims2()?;
            let raw = Heatmap::new(h, w, k.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)?;
            let g = visual_guidance(&ev_i, &normalize(&raw)?)?;
            out.push(g.to_dtype(DType::F32)?.to_vec1()?);
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    norm: MapNorm,
}

impl ConvUnit {
    fn new(init: &Init, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::square(&init.pp("conv"), in_ch, out_ch, 3, stride)?,
            norm: MapNorm::new(&init.pp("norm"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Two-level encoder-decoder over the log-magnitude mixture with skip
/// connections; the guidance vector scales and shifts bottleneck channels.
#[derive(Debug, Clone)]
pub struct GuidedUNet {
    enc1: ConvUnit,
    down1: ConvUnit,
    down2: ConvUnit,
    film_scale: Linear,
    film_shift: Linear,
    up2: ConvUnit,
    up1: ConvUnit,
    out: Conv2d,
    side: usize,
}

impl GuidedUNet {
    pub fn new(init: &Init, channels: usize, guidance_dim: usize, side: usize) -> Result<Self> {
        if !side.is_multiple_of(4) {
            return Err(Error::config("separator input side must be divisible by 4"));
        }
        let c = channels;
        Ok(Self {
            enc1: ConvUnit::new(&init.pp("enc1"), 1, c, 1)?,
            down1: ConvUnit::new(&init.pp("down1"), c, 2 * c, 2)?,
            down2: ConvUnit::new(&init.pp("down2"), 2 * c, 4 * c, 2)?,
            film_scale: Linear::new(&init.pp("film_scale"), guidance_dim, 4 * c)?,
            film_shift: Linear::new(&init.pp("film_shift"), guidance_dim, 4 * c)?,
            up2: ConvUnit::new(&init.pp("up2"), 6 * c, 2 * c, 1)?,
            up1: ConvUnit::new(&init.pp("up1"), 3 * c, c, 1)?,
            out: Conv2d::new(&init.pp("out"), c, 1, (1, 1), 1, 1, [0; 4])?,
            side,
        })
    }

    /// `mixture`: `(B, 1, S, S)` linear magnitudes; `guidance`: `(B, D)`.
    /// Returns a mask `(B, 1, S, S)` in `[0, 1]`.
    pub fn predict_mask(&self, mixture: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        let (b, ch, f, t) = mixture.dims4()?;
        if ch != 1 || f != self.side || t != self.side {
            return Err(Error::shape(format!(
                "separator expects (B, 1, {s}, {s}), got {:?}",
                mixture.dims(),
                s = self.side
            )));
        }
        if guidance.dim(0)? != b {
            return Err(Error::shape("one guidance vector per mixture required"));
        }
        let x = (mixture.abs()? + 1.0)?.log()?;
        let e1 = self.enc1.forward(&x)?;
        let d1 = self.down1.forward(&e1)?;
        let d2 = self.down2.forward(&d1)?;
        let scale = (self.film_scale.forward(guidance)? + 1.0)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = self.film_shift.forward(guidance)?.unsqueeze(2)?.unsqueeze(3)?;
        let z = d2.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let u2 = self.up2.forward(&Tensor::cat(&[&upsample2(&z)?, &d1], 1)?)?;
        let u1 = self.up1.forward(&Tensor::cat(&[&upsample2(&u2)?, &e1], 1)?)?;
        sigmoid(&self.out.forward(&u1)?)
    }
}

/// Mean per-bin binary cross entropy with the prediction clamped away from 0 and 1.
pub fn separation_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    if predicted.dims() != target.dims() {
        return Err(Error::shape(format!("mask {:?} vs target {:?}", predicted.dims(), target.dims())));
    }
    let p = predicted.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// `istft(mask * X)` with the mixture phase; the Nyquist bin gets the last mask row.
pub fn reconstruct(stft: &Stft, mixture: &ComplexSpectrogram, mask: &[f64], len: usize) -> Result<Vec<f32>> {
    let (bins, frames) = (mixture.bins, mixture.frames);
    let rows = mask.len() / frames.max(1);
    if rows * frames != mask.len() || rows + 1 < bins || rows > bins {
        return Err(Error::shape(format!("mask of {} values for a {bins}x{frames} spectrogram", mask.len())));
    }
    let mut out = mixture.clone();
    for k in 0..bins {
        let r = k.min(rows - 1);
        for t in 0..frames {
            out.data[k * frames + t] *= mask[r * frames + t];
        }
    }
    stft.inverse(&out, len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Solves the small symmetric system `G x = b` by Gaussian elimination with partial pivoting.
fn solve(mut g: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .unwrap_or(col);
        if g[piv][col].abs() < 1e-12 * g[col][col].abs().max(1e-300) || g[piv][col] == 0.0 {
            return Err(Error::invalid("reference signals are linearly dependent"));
        }
        g.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = g[row][col] / g[col][col];
            for k in col..n {
                g[row][k] -= f * g[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| g[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / g[row][row];
    }
    Ok(x)
}

/// Time-invariant gain decomposition of `estimate` into target, interference
/// and artifact parts; all ratios in dB, clipped to `±METRIC_CAP_DB`.
pub fn bss_metrics(estimate: &[f32], references: &[Vec<f32>], target: usize) -> Result<BssMetrics> {
    if target >= references.len() {
        return Err(Error::invalid("target index out of range"));
    }
    if references.iter().any(|r| r.len() != estimate.len()) {
        return Err(Error::shape("estimate and references differ in length"));
    }
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64).collect();
    let refs: Vec<Vec<f64>> = references.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    if dot(&e, &e) == 0.0 {
        return Err(Error::invalid("estimate has zero energy"));
    }
    if refs.iter().any(|r| dot(r, r) == 0.0) {
        return Err(Error::invalid("a reference has zero energy"));
    }
    let st = &refs[target];
    let g_t = dot(&e, st) / dot(st, st);
    let s_target: Vec<f64> = st.iter().map(|v| g_t * v).collect();

    let gram: Vec<Vec<f64>> = refs.iter().map(|a| refs.iter().map(|b| dot(a, b)).collect()).collect();
    let rhs: Vec<f64> = refs.iter().map(|r| dot(r, &e)).collect();
    let coef = solve(gram, rhs)?;
    let mut proj = vec![0.0; e.len()];
    for (c, r) in coef.iter().zip(&refs) {
        for (p, v) in proj.iter_mut().zip(r) {
            *p += c * v;
        }
    }
    let e_interf: Vec<f64> = proj.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = e.iter().zip(&proj).map(|(x, p)| x - p).collect();
    let n2 = |v: &[f64]| dot(v, v);
    let s2 = n2(&s_target);
    let i2 = n2(&e_interf);
    let a2 = n2(&e_artif);
    // The three parts are mutually orthogonal, so energies add.
    Ok(BssMetrics {
        sdr: db(s2, i2 + a2),
        sir: db(s2, i2),
        sar: db(s2 + i2, a2),
    })
}

/// A separator together with its parameters.
pub struct Separator {
    pub store: ParamStore,
    pub net: GuidedUNet,
    pub cfg: SeparationConfig,
}

impl Separator {
    pub fn new(cfg: &SeparationConfig, guidance_dim: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let net = GuidedUNet::new(&store.root(ParamGroup::Head).pp("sep"), cfg.channels, guidance_dim, cfg.side())?;
        Ok(Self {
            store,
            net,
            cfg: cfg.clone(),
        })
    }
}

/// Tensors for one separation training/eval item: mixture magnitude, target
/// mask and guidance, one row per (sample, source).
pub struct PreparedItems {
    pub mixtures: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
    pub guidance: Vec<Vec<f32>>,
}

/// Expands each mixture into its two (mixture, guidance, target mask) rows.
pub fn prepare_items(
    samples: &[SeparationSample],
    guidance: &[[Vec<f32>; 2]],
    cfg: &SeparationConfig,
) -> Result<PreparedItems> {
    let stft = cfg.stft()?;
    let side = cfg.side();
    let mut items = PreparedItems {
        mixtures: Vec::new(),
        targets: Vec::new(),
        guidance: Vec::new(),
    };
    for (s, g) in samples.iter().zip(guidance) {
        let mix = analyse(&stft, &s.mixture, side)?;
        let a = analyse(&stft, &s.solos[0], side)?;
        let b = analyse(&stft, &s.solos[1], side)?;
        let mf: Vec<f32> = mix.magnitude.iter().map(|&v| v as f32).collect();
        for (k, (t, o)) in [(&a, &b), (&b, &a)].into_iter().enumerate() {
            items.mixtures.push(mf.clone());
            items
                .targets
                .push(ideal_mask(&t.magnitude, &o.magnitude, cfg.binary_mask).iter().map(|&v| v as f32).collect());
            items.guidance.push(g[k].clone());
        }
    }
    Ok(items)
}

fn stack(rows: &[&Vec<f32>], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Mix-and-separate training; one JSON line per step.
pub fn train_separator<W: Write>(sep: &Separator, items: &PreparedItems, log: &mut W) -> Result<()> {
    let n = items.mixtures.len();
    if n == 0 {
        return Err(Error::invalid("no separation training items"));
    }
    let s = sep.cfg.side();
    let d = items.guidance[0].len();
    let dtype = sep.store.dtype();
    let mut opt = Sgd::new(sep.cfg.optimizer.clone())?;
    for epoch in 0..sep.cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sep.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(sep.cfg.batch_size).enumerate() {
            let b = chunk.len();
            let x = stack(&chunk.iter().map(|&i| &items.mixtures[i]).collect::<Vec<_>>(), &[b, 1, s, s], dtype)?;
            let y = stack(&chunk.iter().map(|&i| &items.targets[i]).collect::<Vec<_>>(), &[b, 1, s, s], dtype)?;
            let g = stack(&chunk.iter().map(|&i| &items.guidance[i]).collect::<Vec<_>>(), &[b, d], dtype)?;
            let loss = separation_loss(&sep.net.predict_mask(&x, &g)?, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "separation".into(),
                    epoch,
                    step,
                    detail: format!("loss {value}"),
                });
            }
            let grads = loss.backward()?;
            opt.step(&sep.store, &grads, epoch)?;
            writeln!(log, "{}", serde_json::json!({"stage": "separation", "epoch": epoch, "step": step, "loss": value}))?;
        }
        log::info!("separation epoch {epoch} done");
    }
    Ok(())
}

/// Per-source result of separating one mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceResult {
    pub video_id: u64,
    pub class_id: usize,
    pub separated: BssMetrics,
    /// The mixture itself scored as the estimate.
    pub mixture_baseline: BssMetrics,
    pub ideal_mask: BssMetrics,
}

/// Separates both sources of every sample; returns the metrics and the waveforms.
pub fn separate_samples(
    sep: &Separator,
    samples: &[SeparationSample],
    guidance: &[[Vec<f32>; 2]],
) -> Result<(Vec<SourceResult>, Vec<[Vec<f32>; 2]>)> {
    let stft = sep.cfg.stft()?;
    let side = sep.cfg.side();
    let dtype = sep.store.dtype();
    let mut results = Vec::new();
    let mut waves = Vec::new();
    for (s, g) in samples.iter().zip(guidance) {
        let mix = analyse(&stft, &s.mixture, side)?;
        let solo: Vec<SpecView> = s.solos.iter().map(|x| analyse(&stft, x, side)).collect::<Result<_>>()?;
        let refs = vec![s.solos[0].clone(), s.solos[1].clone()];
        let mut pair = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let x = stack(&[&mix.magnitude.iter().map(|&v| v as f32).collect()], &[1, 1, side, side], dtype)?;
            let gv = stack(&[&g[k]], &[1, g[k].len()], dtype)?;
            let mask: Vec<f64> = sep.net.predict_mask(&x, &gv)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let est = reconstruct(&stft, &mix.full, &mask, s.mixture.len())?;
            let ideal = ideal_mask(&solo[k].full.magnitude(), &solo[1 - k].full.magnitude(), false);
            let ideal_est = reconstruct(&stft, &mix.full, &ideal, s.mixture.len())?;
            results.push(SourceResult {
                video_id: s.video_ids[k],
                class_id: s.classes[k],
                separated: bss_metrics(&est, &refs, k)?,
                mixture_baseline: bss_metrics(&s.mixture, &refs, k)?,
                ideal_mask: bss_metrics(&ideal_est, &refs, k)?,
            });
            pair[k] = est;
        }
        waves.push(pair);
    }
    Ok((results, waves))
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &v in samples {
        w.write_sample((v.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
