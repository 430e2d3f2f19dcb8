//! Procedural audiovisual scenes with exact ground truth.
//!
//! Every class owns a disjoint harmonic stack and a colour; every class has
//! a few "entities" that share the class colour and band but differ in stripe
//! orientation and harmonic balance, so that two objects of the same class can
//! still be told apart by listening. A scene is a pure function of
//! `(config.seed, scene_index)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::Stft;
use crate::error::{Error, Result};
use crate::tensor_io::Blob;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const AUDIO_FILE: &str = "audio.bin";
pub const IMAGES_FILE: &str = "images.bin";
pub const WAVES_FILE: &str = "waves.bin";

/// Harmonic balance per entity; each row sums to one.
const ENTITY_PROFILES: [[f64; 3]; 3] = [
    [0.6, 0.3, 0.1],
    [0.1, 0.3, 0.6],
    [0.2, 0.6, 0.2],
];
const ENVELOPE_SEGMENTS: usize = 8;
const STRIPE_PERIOD: f64 = 4.0;
/// Source amplitudes are drawn uniformly from this range (12 dB).
pub const AMPLITUDE_RANGE: (f64, f64) = (0.25, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_classes: usize,
    /// Inclusive range of distinct sounding classes per training scene.
    pub min_sources: usize,
    pub max_sources: usize,
    pub image_size: usize,
    pub spec_frames: usize,
    pub spec_bins: usize,
    pub sample_rate: u32,
    /// Standard deviation of additive Gaussian noise, relative to unit amplitude.
    pub noise_level: f64,
    pub seed: u64,
    /// Probability that a scene contains one visible but silent object.
    pub silent_prob: f64,
    /// Given a silent object, probability that it shares a class with a
    /// sounding object (as a different entity). Otherwise its class is drawn
    /// uniformly from all classes.
    pub silent_same_class_prob: f64,
    pub entities_per_class: usize,
    /// Lowest fundamental; class `c` sits at `base * (1 + c / (2C))`.
    pub base_freq: f64,
    pub box_min_frac: f64,
    pub box_max_frac: f64,
    /// Test-split share of levels 1, 2 and 3.
    pub test_level_fractions: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            min_sources: 1,
            max_sources: 3,
            image_size: 64,
            spec_frames: 64,
            spec_bins: 64,
            sample_rate: 8000,
            noise_level: 0.02,
            seed: 0,
            silent_prob: 0.3,
            silent_same_class_prob: 0.0,
            entities_per_class: 2,
            base_freq: 800.0,
            box_min_frac: 0.3,
            box_max_frac: 0.5,
            test_level_fractions: [0.4, 0.4, 0.2],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {c}")));
        }
        if self.min_sources == 0 || self.min_sources > self.max_sources {
            return Err(Error::config(format!(
                "source range [{}, {}] is empty or starts at zero",
                self.min_sources, self.max_sources
            )));
        }
        if self.max_sources > c {
            return Err(Error::config(format!(
                "{} sources requested but only {c} classes exist",
                self.max_sources
            )));
        }
        if self.max_sources > 3 {
            return Err(Error::config("difficulty levels stop at 3 sounding classes"));
        }
        if self.image_size < 8 || self.spec_frames == 0 || self.spec_bins == 0 || self.sample_rate == 0 {
            return Err(Error::config("image_size >= 8 and positive spectrogram/sample-rate sizes required"));
        }
        if self.entities_per_class == 0 || self.entities_per_class > ENTITY_PROFILES.len() {
            return Err(Error::config(format!(
                "entities_per_class must be 1..={}",
                ENTITY_PROFILES.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.silent_prob) || !(0.0..=1.0).contains(&self.silent_same_class_prob) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::config("noise_level must be finite and >= 0"));
        }
        if !(0.0 < self.box_min_frac && self.box_min_frac <= self.box_max_frac && self.box_max_frac <= 1.0) {
            return Err(Error::config("box fractions must satisfy 0 < min <= max <= 1"));
        }
        let top = 3.0 * self.class_f0(c - 1);
        if self.base_freq <= 0.0 || top >= self.sample_rate as f64 / 2.0 {
            return Err(Error::config(format!(
                "third harmonic of the highest class ({top:.0} Hz) must stay below Nyquist"
            )));
        }
        let fr = self.test_level_fractions;
        if fr.iter().any(|f| *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("test_level_fractions must be nonnegative and sum to 1"));
        }
        for (i, f) in fr.iter().enumerate() {
            if *f > 0.0 && i + 1 > c.min(3) {
                return Err(Error::config(format!("level {} impossible with {c} classes", i + 1)));
            }
        }
        Ok(())
    }

    /// Fundamental of class `c`. Stacks `{f0, 2 f0, 3 f0}` of different
    /// classes never collide because all fundamentals lie in `[b, 1.5 b)`.
    pub fn class_f0(&self, class_id: usize) -> f64 {
        self.base_freq * (1.0 + class_id as f64 / (2.0 * self.num_classes as f64))
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * 0.040).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * 0.020).round() as usize
    }

    pub fn clip_samples(&self) -> usize {
        (self.spec_frames - 1) * self.hop_samples() + self.window_samples()
    }

    /// Frequency span covered by the spectrogram bands.
    pub fn band_range(&self) -> (f64, f64) {
        let lo = 0.9 * self.base_freq;
        let hi = (3.0 * self.class_f0(self.num_classes - 1) * 1.05).min(self.sample_rate as f64 / 2.0);
        (lo, hi)
    }

    /// Class RGB colour: evenly spaced hues.
    pub fn class_color(&self, class_id: usize) -> [f64; 3] {
        hsv_to_rgb(class_id as f64 / self.num_classes as f64, 0.85, 0.9)
    }
}

/// Axis-aligned box, half-open pixel ranges `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersection(&self, other: &BoxRegion) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSignature {
    pub f0: f64,
    pub harmonic_weights: [f64; 3],
    pub phases: [f64; 3],
    /// On/off state of each of the clip's equal-length segments.
    pub envelope: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub class_id: usize,
    pub entity: usize,
    pub visual_region: BoxRegion,
    pub audio_signature: AudioSignature,
    pub sounding: bool,
    pub amplitude: f64,
    pub color_jitter: [f64; 3],
    pub stripe_phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAudio {
    /// One row per source (silent sources render as zeros).
    pub sources: Vec<Vec<f32>>,
    pub noise: Vec<f32>,
    pub mixture: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub video_id: u64,
    /// `H x W x 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `M x T` log-magnitude, bin-major.
    pub spectrogram: Vec<f32>,
    pub waveforms: SceneAudio,
    pub labels_audio: Vec<u8>,
    pub labels_visual: Vec<u8>,
    pub sources: Vec<SourceSpec>,
    pub level: usize,
}

impl ScenePair {
    pub fn sounding_classes(&self) -> Vec<usize> {
        (0..self.labels_audio.len()).filter(|&c| self.labels_audio[c] == 1).collect()
    }

    /// Union of the sounding boxes of `class_id`, rasterised to `H x W`.
    pub fn class_mask(&self, class_id: usize, image_size: usize) -> Vec<bool> {
        let boxes: Vec<BoxRegion> = self
            .sources
            .iter()
            .filter(|s| s.sounding && s.class_id == class_id)
            .map(|s| s.visual_region)
            .collect();
        rasterize(&boxes, image_size)
    }

    /// Union of all sounding boxes regardless of class.
    pub fn sounding_mask(&self, image_size: usize) -> Vec<bool> {
        let boxes: Vec<BoxRegion> = self
            .sources
            .iter()
            .filter(|s| s.sounding)
            .map(|s| s.visual_region)
            .collect();
        rasterize(&boxes, image_size)
    }
}

fn rasterize(boxes: &[BoxRegion], size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for b in boxes {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                mask[y * size + x] = true;
            }
        }
    }
    mask
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn scene_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    // splitmix64 over the triple keeps nearby indices decorrelated.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Louder instances are painted brighter.
pub fn brightness(amplitude: f64) -> f64 {
    let u = ((amplitude - AMPLITUDE_RANGE.0) / (AMPLITUDE_RANGE.1 - AMPLITUDE_RANGE.0)).clamp(0.0, 1.0);
    0.4 + 0.6 * u
}

/// Texture value of a class entity at offset `(dx, dy)` from its box corner.
pub fn class_texture(config: &SceneConfig, source: &SourceSpec, dx: usize, dy: usize) -> [f32; 3] {
    let angle = PI * source.entity as f64 / config.entities_per_class.max(1) as f64;
    let t = dx as f64 * angle.cos() + dy as f64 * angle.sin();
    let stripe = 0.5 + 0.5 * (2.0 * PI * t / STRIPE_PERIOD + source.stripe_phase).sin();
    let color = config.class_color(source.class_id);
    let gain = brightness(source.amplitude);
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let v = color[k] * gain * (0.45 + 0.55 * stripe) + source.color_jitter[k];
        out[k] = v.clamp(0.0, 1.0) as f32;
    }
    out
}

/// Low-contrast grey checkerboard.
pub fn background_texture(x: usize, y: usize) -> [f32; 3] {
    let v = if ((x / 4) + (y / 4)).is_multiple_of(2) { 0.12 } else { 0.18 };
    [v, v, v]
}

pub fn render_image(sources: &[SourceSpec], config: &SceneConfig) -> Result<Vec<f32>> {
    let n = config.image_size;
    for s in sources {
        let b = s.visual_region;
        if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > n || b.y1 > n {
            return Err(Error::invalid(format!("box {b:?} outside a {n}x{n} image")));
        }
    }
    let mut image = vec![0.0f32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            image[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&background_texture(x, y));
        }
    }
    for s in sources {
        let b = s.visual_region;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let px = class_texture(config, s, x - b.x0, y - b.y0);
                image[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&px);
            }
        }
    }
    Ok(image)
}

fn envelope_value(envelope: &[bool], pos: f64, ramp: f64) -> f64 {
    // Segment states crossfaded with a raised cosine of width `ramp` (in segments).
    let k = envelope.len();
    let seg = (pos.floor() as usize).min(k - 1);
    let here = envelope[seg] as u8 as f64;
    let frac = pos - seg as f64;
    let half = ramp / 2.0;
    if frac < half && seg > 0 {
        let prev = envelope[seg - 1] as u8 as f64;
        let w = 0.5 + 0.5 * frac / half;
        let s = 0.5 - 0.5 * (PI * w).cos();
        prev + (here - prev) * s
    } else if frac > 1.0 - half && seg + 1 < k {
        let next = envelope[seg + 1] as u8 as f64;
        let w = (frac - (1.0 - half)) / half * 0.5;
        let s = 0.5 - 0.5 * (PI * w).cos();
        here + (next - here) * s
    } else {
        here
    }
}

/// Waveform of one source at its own amplitude (zeros if silent).
pub fn render_source(source: &SourceSpec, config: &SceneConfig) -> Vec<f32> {
    let len = config.clip_samples();
    if !source.sounding {
        return vec![0.0; len];
    }
    let sig = &source.audio_signature;
    let sr = config.sample_rate as f64;
    let segs = sig.envelope.len().max(1);
    let ramp = (0.010 * sr) / (len as f64 / segs as f64);
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let tone: f64 = (0..3)
                .map(|h| sig.harmonic_weights[h] * (2.0 * PI * (h + 1) as f64 * sig.f0 * t + sig.phases[h]).sin())
                .sum();
            let env = envelope_value(&sig.envelope, n as f64 * segs as f64 / len as f64, ramp.min(1.0));
            (source.amplitude * (env * tone)) as f32
        })
        .collect()
}

pub fn render_noise(config: &SceneConfig, noise_seed: u64) -> Vec<f32> {
    let len = config.clip_samples();
    if config.noise_level == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    (0..len)
        .map(|_| (config.noise_level * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// Log-magnitude band spectrogram (`M x T`) of a waveform.
pub fn spectrogram(waveform: &[f32], config: &SceneConfig) -> Result<Vec<f32>> {
    let win = config.window_samples();
    let n_fft = win.next_power_of_two();
    let stft = Stft::analysis_only(n_fft, win, config.hop_samples(), false)?;
    let spec = stft.forward(waveform);
    if spec.frames != config.spec_frames {
        return Err(Error::shape(format!(
            "waveform yields {} frames, expected {}",
            spec.frames, config.spec_frames
        )));
    }
    let mag = spec.magnitude();
    let (lo, hi) = config.band_range();
    let m = config.spec_bins;
    let bin_hz = config.sample_rate as f64 / n_fft as f64;
    let width = (hi - lo) / m as f64;
    let mut out = vec![0.0f32; m * spec.frames];
    for band in 0..m {
        let (b_lo, b_hi) = (lo + band as f64 * width, lo + (band + 1) as f64 * width);
        let mut bins: Vec<usize> = (0..spec.bins)
            .filter(|&k| {
                let f = k as f64 * bin_hz;
                f >= b_lo && f < b_hi
            })
            .collect();
        if bins.is_empty() {
            bins.push((((b_lo + b_hi) / 2.0) / bin_hz).round() as usize);
        }
        for t in 0..spec.frames {
            let avg = bins.iter().map(|&k| mag[k * spec.frames + t]).sum::<f64>() / bins.len() as f64;
            out[band * spec.frames + t] = avg.ln_1p() as f32;
        }
    }
    Ok(out)
}

/// Renders every source, the noise and their sum, plus the mixture spectrogram.
pub fn render_audio(sources: &[SourceSpec], config: &SceneConfig, noise_seed: u64) -> Result<(SceneAudio, Vec<f32>)> {
    let len = config.clip_samples();
    let rendered: Vec<Vec<f32>> = sources.iter().map(|s| render_source(s, config)).collect();
    let noise = render_noise(config, noise_seed);
    let mut mixture = vec![0.0f32; len];
    for wave in &rendered {
        for (m, v) in mixture.iter_mut().zip(wave) {
            *m += v;
        }
    }
    for (m, v) in mixture.iter_mut().zip(&noise) {
        *m += v;
    }
    let spec = spectrogram(&mixture, config)?;
    Ok((
        SceneAudio {
            sources: rendered,
            noise,
            mixture,
        },
        spec,
    ))
}

fn sample_box(rng: &mut ChaCha8Rng, config: &SceneConfig, existing: &[BoxRegion]) -> BoxRegion {
    let n = config.image_size as f64;
    let lo = (config.box_min_frac * n).round().max(1.0) as usize;
    let hi = (config.box_max_frac * n).round().max(lo as f64) as usize;
    let mut best = None;
    let mut best_overlap = f64::INFINITY;
    for _ in 0..64 {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=config.image_size - w);
        let y0 = rng.random_range(0..=config.image_size - h);
        let b = BoxRegion { x0, y0, x1: x0 + w, y1: y0 + h };
        let overlap = existing
            .iter()
            .map(|e| b.intersection(e) as f64 / b.area().min(e.area()) as f64)
            .fold(0.0, f64::max);
        if overlap < best_overlap {
            best_overlap = overlap;
            best = Some(b);
        }
        if overlap == 0.0 {
            break;
        }
    }
    best.expect("at least one candidate box")
}

fn sample_source(
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    class_id: usize,
    entity: usize,
    sounding: bool,
    existing: &[BoxRegion],
) -> SourceSpec {
    let visual_region = sample_box(rng, config, existing);
    let mut envelope: Vec<bool> = (0..ENVELOPE_SEGMENTS).map(|_| rng.random_bool(0.7)).collect();
    // Keep at least half of the clip active so every source is audible.
    while envelope.iter().filter(|&&on| on).count() < ENVELOPE_SEGMENTS / 2 {
        let k = rng.random_range(0..ENVELOPE_SEGMENTS);
        envelope[k] = true;
    }
    let phases = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let amplitude = rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1);
    let color_jitter = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let stripe_phase = rng.random_range(0.0..2.0 * PI);
    SourceSpec {
        class_id,
        entity,
        visual_region,
        audio_signature: AudioSignature {
            f0: config.class_f0(class_id),
            harmonic_weights: ENTITY_PROFILES[entity],
            phases,
            envelope,
        },
        sounding,
        amplitude,
        color_jitter,
        stripe_phase,
    }
}

/// Scene with `level` distinct sounding classes, optionally one silent object.
pub fn generate_scene_with_level(config: &SceneConfig, scene_index: u64, level: usize) -> Result<ScenePair> {
    config.validate()?;
    let c = config.num_classes;
    if level == 0 || level > c.min(3) {
        return Err(Error::config(format!("level {level} impossible with {c} classes")));
    }
    let mut rng = scene_rng(config.seed, scene_index, 0);
    let classes: Vec<usize> = {
        let mut v = sample(&mut rng, c, level).into_vec();
        v.sort_unstable();
        v
    };
    let mut sources = Vec::new();
    let mut boxes = Vec::new();
    for &class_id in &classes {
        let entity = rng.random_range(0..config.entities_per_class);
        let s = sample_source(&mut rng, config, class_id, entity, true, &boxes);
        boxes.push(s.visual_region);
        sources.push(s);
    }
    if rng.random_bool(config.silent_prob) {
        let (class_id, entity) = if config.entities_per_class > 1 && rng.random_bool(config.silent_same_class_prob) {
            let host = &sources[rng.random_range(0..sources.len())];
            let shift = rng.random_range(1..config.entities_per_class);
            (host.class_id, (host.entity + shift) % config.entities_per_class)
        } else {
            (rng.random_range(0..c), rng.random_range(0..config.entities_per_class))
        };
        let s = sample_source(&mut rng, config, class_id, entity, false, &boxes);
        sources.push(s);
    }
    build_scene(config, scene_index, sources)
}

/// Assembles a scene from explicit sources; labels and level follow from them.
pub fn build_scene(config: &SceneConfig, video_id: u64, sources: Vec<SourceSpec>) -> Result<ScenePair> {
    let c = config.num_classes;
    let mut labels_audio = vec![0u8; c];
    let mut labels_visual = vec![0u8; c];
    for s in &sources {
        if s.class_id >= c {
            return Err(Error::invalid(format!("class {} >= {c}", s.class_id)));
        }
        if s.amplitude <= 0.0 {
            return Err(Error::invalid("source amplitude must be positive"));
        }
        labels_visual[s.class_id] = 1;
        if s.sounding {
            labels_audio[s.class_id] = 1;
        }
    }
    let level = labels_audio.iter().filter(|&&v| v == 1).count();
    let image = render_image(&sources, config)?;
    let noise_seed = {
        let mut r = scene_rng(config.seed, video_id, 1);
        r.random::<u64>()
    };
    let (waveforms, spectrogram) = render_audio(&sources, config, noise_seed)?;
    Ok(ScenePair {
        video_id,
        image,
        spectrogram,
        waveforms,
        labels_audio,
        labels_visual,
        sources,
        level,
    })
}

/// Scene whose level is drawn uniformly from `[min_sources, max_sources]`.
pub fn generate_scene(config: &SceneConfig, scene_index: u64) -> Result<ScenePair> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, scene_index, 2);
    let level = rng.random_range(config.min_sources..=config.max_sources);
    generate_scene_with_level(config, scene_index, level)
}

/// Largest-remainder split of `n` into per-level counts.
pub fn stratify(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub config: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    pub level: usize,
    pub labels_audio: Vec<u8>,
    pub labels_visual: Vec<u8>,
    pub sources: Vec<SourceSpec>,
    pub audio_offset: u64,
    pub image_offset: u64,
    pub waves_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Header(ManifestHeader),
    Scene(ManifestRecord),
}

/// A dataset directory on disk, with its manifest parsed.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub dir: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

/// An in-memory dataset split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub scenes: Vec<ScenePair>,
}

fn waves_blob(scene: &ScenePair) -> Result<Blob> {
    let len = scene.waveforms.mixture.len();
    let mut data = Vec::with_capacity((scene.waveforms.sources.len() + 2) * len);
    for w in &scene.waveforms.sources {
        data.extend_from_slice(w);
    }
    data.extend_from_slice(&scene.waveforms.noise);
    data.extend_from_slice(&scene.waveforms.mixture);
    Blob::new(vec![scene.waveforms.sources.len() + 2, len], data)
}

/// Generates both splits and writes them under `dir`.
///
/// The test split holds exactly the stratified level counts; train scenes
/// draw their level from the configured source range.
pub fn compose_dataset(config: &SceneConfig, n_train: usize, n_test: usize, dir: &Path, force: bool) -> Result<DatasetHandle> {
    config.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("n_train and n_test must be positive"));
    }
    if dir.exists() {
        let occupied = dir.is_file() || std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::AlreadyExists { path: dir.to_path_buf() });
        }
        if occupied {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;

    let header = ManifestHeader {
        format_version: DATASET_FORMAT_VERSION,
        config: config.clone(),
        n_train,
        n_test,
    };
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut audio = BufWriter::new(File::create(dir.join(AUDIO_FILE))?);
    let mut images = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
    let mut waves = BufWriter::new(File::create(dir.join(WAVES_FILE))?);
    serde_json::to_writer(&mut manifest, &ManifestLine::Header(header.clone()))?;
    manifest.write_all(b"\n")?;

    let counts = stratify(n_test, config.test_level_fractions);
    let test_levels = counts.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat_n(i + 1, k));
    let plan = (0..n_train)
        .map(|i| (i as u64, Split::Train, None))
        .chain(test_levels.enumerate().map(|(k, lvl)| ((n_train + k) as u64, Split::Test, Some(lvl))));

    let mut offsets = (0u64, 0u64, 0u64);
    let mut records = Vec::with_capacity(n_train + n_test);
    for (id, split, level) in plan {
        let scene = match level {
            Some(l) => generate_scene_with_level(config, id, l)?,
            None => generate_scene(config, id)?,
        };
        let a = Blob::new(vec![config.spec_bins, config.spec_frames], scene.spectrogram.clone())?;
        let im = Blob::new(vec![config.image_size, config.image_size, 3], scene.image.clone())?;
        let wv = waves_blob(&scene)?;
        a.write_to(&mut audio)?;
        im.write_to(&mut images)?;
        wv.write_to(&mut waves)?;
        let record = ManifestRecord {
            id,
            split,
            level: scene.level,
            labels_audio: scene.labels_audio,
            labels_visual: scene.labels_visual,
            sources: scene.sources,
            audio_offset: offsets.0,
            image_offset: offsets.1,
            waves_offset: offsets.2,
        };
        offsets.0 += a.byte_len() as u64;
        offsets.1 += im.byte_len() as u64;
        offsets.2 += wv.byte_len() as u64;
        serde_json::to_writer(&mut manifest, &ManifestLine::Scene(record.clone()))?;
        manifest.write_all(b"\n")?;
        records.push(record);
    }
    manifest.flush()?;
    audio.flush()?;
    images.flush()?;
    waves.flush()?;
    Ok(DatasetHandle {
        dir: dir.to_path_buf(),
        header,
        records,
    })
}

impl DatasetHandle {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let bad = |reason: String| Error::Format { path: path.clone(), reason };
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestLine>(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))? {
                ManifestLine::Header(h) => {
                    if h.format_version != DATASET_FORMAT_VERSION {
                        return Err(bad(format!("unsupported format version {}", h.format_version)));
                    }
                    header = Some(h);
                }
                ManifestLine::Scene(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| bad("no header record".into()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
            records,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Loads one split into memory.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let audio = std::fs::read(self.dir.join(AUDIO_FILE))?;
        let images = std::fs::read(self.dir.join(IMAGES_FILE))?;
        let waves = std::fs::read(self.dir.join(WAVES_FILE))?;
        let config = self.header.config.clone();
        let mut scenes = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            let spec = Blob::read_at(&audio, r.audio_offset as usize)?;
            let image = Blob::read_at(&images, r.image_offset as usize)?;
            let wv = Blob::read_at(&waves, r.waves_offset as usize)?;
            if spec.shape != [config.spec_bins, config.spec_frames]
                || image.shape != [config.image_size, config.image_size, 3]
                || wv.shape.len() != 2
                || wv.shape[0] != r.sources.len() + 2
            {
                return Err(Error::Format {
                    path: self.dir.clone(),
                    reason: format!("tensor shapes of scene {} disagree with manifest", r.id),
                });
            }
            let len = wv.shape[1];
            let rows: Vec<Vec<f32>> = wv.data.chunks_exact(len).map(|c| c.to_vec()).collect();
            let n = r.sources.len();
            scenes.push(ScenePair {
                video_id: r.id,
                image: image.data,
                spectrogram: spec.data,
                waveforms: SceneAudio {
                    sources: rows[..n].to_vec(),
                    noise: rows[n].clone(),
                    mixture: rows[n + 1].clone(),
                },
                labels_audio: r.labels_audio.clone(),
                labels_visual: r.labels_visual.clone(),
                sources: r.sources.clone(),
                level: r.level,
            });
        }
        Ok(Dataset { config, scenes })
    }
}

/// SHA-256 over the manifest and all tensor files, hex encoded.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, AUDIO_FILE, IMAGES_FILE, WAVES_FILE] {
        let bytes = std::fs::read(dir.join(name))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Classes whose stacks appear in a waveform, found by correlating against
/// each class's harmonic frequencies. Used as a solvability check.
pub fn matched_filter_classes(waveform: &[f32], config: &SceneConfig, rel_threshold: f64) -> BTreeSet<usize> {
    let sr = config.sample_rate as f64;
    let energy: Vec<f64> = (0..config.num_classes)
        .map(|c| {
            let f0 = config.class_f0(c);
            (1..=3)
                .map(|h| {
                    let w = 2.0 * PI * h as f64 * f0 / sr;
                    let (re, im) = waveform.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &x)| {
                        (re + x as f64 * (w * n as f64).cos(), im - x as f64 * (w * n as f64).sin())
                    });
                    re * re + im * im
                })
                .sum()
        })
        .collect();
    let max = energy.iter().cloned().fold(0.0, f64::max);
    (0..config.num_classes)
        .filter(|&c| max > 0.0 && energy[c] >= rel_threshold * max)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            image_size: 32,
            spec_frames: 32,
            spec_bins: 32,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_and_index_is_identical() {
        let cfg = small();
        assert_eq!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 7).unwrap());
        assert_ne!(generate_scene(&cfg, 7).unwrap().image, generate_scene(&cfg, 8).unwrap().image);
    }

    #[test]
    fn single_source_config_gives_level_one() {
        let cfg = SceneConfig {
            max_sources: 1,
            ..small()
        };
        for i in 0..20 {
            assert_eq!(generate_scene(&cfg, i).unwrap().level, 1);
        }
    }

    #[test]
    fn labels_follow_sounding_sources() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sources = vec![
            sample_source(&mut rng, &cfg, 2, 0, true, &[]),
            sample_source(&mut rng, &cfg, 5, 1, true, &[]),
            sample_source(&mut rng, &cfg, 1, 0, false, &[]),
        ];
        let scene = build_scene(&cfg, 0, sources).unwrap();
        assert_eq!(scene.labels_audio, vec![0, 0, 1, 0, 0, 1]);
        assert_eq!(scene.labels_visual, vec![0, 1, 1, 0, 0, 1]);
        assert_eq!(scene.level, 2);
    }

    #[test]
    fn rejects_more_sources_than_classes() {
        let cfg = SceneConfig {
            num_classes: 2,
            max_sources: 3,
            test_level_fractions: [0.5, 0.5, 0.0],
            ..small()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = SceneConfig {
            num_classes: 1,
            max_sources: 1,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn silence_renders_to_zero_spectrogram() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..small()
        };
        let (audio, spec) = render_audio(&[], &cfg, 1).unwrap();
        assert!(audio.mixture.iter().all(|&v| v == 0.0));
        assert!(spec.iter().all(|&v| v == 0.0));
        assert_eq!(spec.len(), cfg.spec_bins * cfg.spec_frames);
    }

    #[test]
    fn doubling_amplitude_doubles_mixture_exactly() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = sample_source(&mut rng, &cfg, 3, 1, true, &[]);
        s.amplitude = 0.3;
        let (a, _) = render_audio(std::slice::from_ref(&s), &cfg, 0).unwrap();
        s.amplitude = 0.6;
        let (b, _) = render_audio(&[s], &cfg, 0).unwrap();
        for (x, y) in a.mixture.iter().zip(&b.mixture) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn two_source_mixture_is_sum_of_solo_renders() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = sample_source(&mut rng, &cfg, 0, 0, true, &[]);
        let s2 = sample_source(&mut rng, &cfg, 4, 1, true, &[]);
        let (solo1, _) = render_audio(std::slice::from_ref(&s1), &cfg, 0).unwrap();
        let (solo2, _) = render_audio(std::slice::from_ref(&s2), &cfg, 0).unwrap();
        let (mix, _) = render_audio(&[s1, s2], &cfg, 0).unwrap();
        for i in 0..mix.mixture.len() {
            assert_eq!(mix.mixture[i], solo1.mixture[i] + solo2.mixture[i]);
        }
    }

    #[test]
    fn mixture_minus_sources_is_noise() {
        let cfg = small();
        let scene = generate_scene(&cfg, 11).unwrap();
        let w = &scene.waveforms;
        for i in 0..w.mixture.len() {
            let dry: f32 = w.sources.iter().map(|s| s[i]).sum();
            assert!((w.mixture[i] - dry - w.noise[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn empty_scene_is_background_and_full_box_is_texture() {
        let cfg = small();
        let bg = render_image(&[], &cfg).unwrap();
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                let i = (y * cfg.image_size + x) * 3;
                assert_eq!(&bg[i..i + 3], &background_texture(x, y));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_source(&mut rng, &cfg, 1, 1, true, &[]);
        s.visual_region = BoxRegion { x0: 0, y0: 0, x1: cfg.image_size, y1: cfg.image_size };
        let img = render_image(std::slice::from_ref(&s), &cfg).unwrap();
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                let i = (y * cfg.image_size + x) * 3;
                assert_eq!(&img[i..i + 3], &class_texture(&cfg, &s, x, y));
            }
        }
    }

    #[test]
    fn pixel_in_one_box_matches_texture_lookup() {
        let cfg = small();
        for idx in 0..30 {
            let scene = generate_scene(&cfg, idx).unwrap();
            let n = cfg.image_size;
            for y in 0..n {
                for x in 0..n {
                    let covering: Vec<&SourceSpec> =
                        scene.sources.iter().filter(|s| s.visual_region.contains(x, y)).collect();
                    if covering.len() == 1 {
                        let s = covering[0];
                        let want = class_texture(&cfg, s, x - s.visual_region.x0, y - s.visual_region.y0);
                        assert_eq!(&scene.image[(y * n + x) * 3..(y * n + x) * 3 + 3], &want);
                    }
                }
            }
            assert!(scene.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_source(&mut rng, &cfg, 0, 0, true, &[]);
        s.visual_region.x1 = cfg.image_size + 1;
        assert!(render_image(&[s], &cfg).is_err());
    }

    #[test]
    fn stratification_counts() {
        assert_eq!(stratify(50, [0.4, 0.4, 0.2]), [20, 20, 10]);
        assert_eq!(stratify(7, [0.4, 0.4, 0.2]), [3, 3, 1]);
        assert_eq!(stratify(10, [1.0, 0.0, 0.0]), [10, 0, 0]);
        for n in 1..40 {
            assert_eq!(stratify(n, [0.3, 0.5, 0.2]).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn class_stacks_are_disjoint() {
        for c in 2..=15 {
            let cfg = SceneConfig {
                num_classes: c,
                ..SceneConfig::default()
            };
            let mut freqs: Vec<f64> = (0..c)
                .flat_map(|k| {
                    let f0 = cfg.class_f0(k);
                    (1..=3).map(move |h| h as f64 * f0)
                })
                .collect();
            freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in freqs.windows(2) {
                assert!(w[1] - w[0] > 1.0, "C={c}: {} vs {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn label_soundness_and_matched_filter_recovery() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..small()
        };
        for idx in 0..40 {
            let scene = generate_scene(&cfg, idx).unwrap();
            for c in 0..cfg.num_classes {
                let brute = scene.sources.iter().any(|s| s.sounding && s.class_id == c);
                assert_eq!(scene.labels_audio[c] == 1, brute);
                let visible = scene.sources.iter().any(|s| s.class_id == c);
                assert_eq!(scene.labels_visual[c] == 1, visible);
            }
            assert!((1..=3).contains(&scene.level));
            let found = matched_filter_classes(&scene.waveforms.mixture, &cfg, 0.01);
            let truth: BTreeSet<usize> = scene.sounding_classes().into_iter().collect();
            assert_eq!(found, truth, "scene {idx}");
        }
    }
}
