//! Short-time Fourier transform with weighted overlap-add inversion.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Complex spectrogram stored bin-major: `data[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
        }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.arg()).collect()
    }

    pub fn from_polar(bins: usize, frames: usize, magnitude: &[f64], phase: &[f64]) -> Result<Self> {
        if magnitude.len() != bins * frames || phase.len() != bins * frames {
            return Err(Error::shape(format!(
                "polar parts must both hold {bins}x{frames} values"
            )));
        }
        let data = magnitude
            .iter()
            .zip(phase)
            .map(|(&m, &p)| Complex64::from_polar(m, p))
            .collect();
        Ok(Self { bins, frames, data })
    }
}

/// STFT analysis/synthesis pair using the same Hann window for both.
///
/// Frames hold `win_length` samples zero-padded to `n_fft`. With `center`,
/// the signal is padded by `n_fft / 2` zeros at the front so frame `k` is
/// centred on sample `k * hop`. Construction rejects hops for which the
/// squared-window overlap sum is not constant, since the inverse relies on it.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    win_length: usize,
    hop: usize,
    center: bool,
    invertible: bool,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("win_length", &self.win_length)
            .field("hop", &self.hop)
            .field("center", &self.center)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop: usize, center: bool) -> Result<Self> {
        Self::build(n_fft, win_length, hop, center, true)
    }

    /// Forward-only transform; any hop up to the window length is accepted
    /// and `inverse` returns an error.
    pub fn analysis_only(n_fft: usize, win_length: usize, hop: usize, center: bool) -> Result<Self> {
        Self::build(n_fft, win_length, hop, center, false)
    }

    fn build(n_fft: usize, win_length: usize, hop: usize, center: bool, invertible: bool) -> Result<Self> {
        if n_fft == 0 || win_length == 0 || hop == 0 {
            return Err(Error::config("STFT sizes must be positive"));
        }
        if win_length > n_fft {
            return Err(Error::config(format!(
                "window length {win_length} exceeds FFT size {n_fft}"
            )));
        }
        if hop > win_length {
            return Err(Error::config(format!(
                "hop {hop} larger than window {win_length} leaves gaps"
            )));
        }
        let window = hann(win_length);
        // Overlap sum of w^2 over one hop period must be flat.
        let sums: Vec<f64> = (0..hop)
            .map(|r| window.iter().skip(r).step_by(hop).map(|w| w * w).sum())
            .collect();
        let (lo, hi) = sums
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if invertible && (lo <= 0.0 || (hi - lo) / hi > 1e-9) {
            return Err(Error::config(format!(
                "hop {hop} with a {win_length}-sample Hann window is not overlap-add invariant"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            win_length,
            hop,
            center,
            invertible,
            window,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        })
    }

    /// Hann window with 75% overlap, centred frames.
    pub fn with_quarter_hop(n_fft: usize) -> Result<Self> {
        Self::new(n_fft, n_fft, n_fft / 4, true)
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn win_length(&self) -> usize {
        self.win_length
    }

    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn front_pad(&self) -> usize {
        if self.center {
            self.n_fft / 2
        } else {
            0
        }
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if self.center {
            len.div_ceil(self.hop) + 1
        } else if len < self.win_length {
            0
        } else {
            1 + (len - self.win_length) / self.hop
        }
    }

    pub fn forward(&self, signal: &[f32]) -> ComplexSpectrogram {
        let frames = self.num_frames(signal.len());
        let bins = self.num_bins();
        let pad = self.front_pad();
        let mut spec = ComplexSpectrogram::zeros(bins, frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                let idx = (t * self.hop + n) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < signal.len() {
                    buf[n] = Complex64::new(signal[idx as usize] as f64 * w, 0.0);
                }
            }
            self.fwd.process(&mut buf);
            for (b, c) in buf.iter().take(bins).enumerate() {
                spec.data[b * frames + t] = *c;
            }
        }
        spec
    }

    /// Weighted overlap-add inverse, trimmed to `len` samples.
    pub fn inverse(&self, spec: &ComplexSpectrogram, len: usize) -> Result<Vec<f32>> {
        if !self.invertible {
            return Err(Error::config("analysis-only STFT cannot be inverted"));
        }
        if spec.bins != self.num_bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, STFT expects {}",
                spec.bins,
                self.num_bins()
            )));
        }
        let pad = self.front_pad();
        let total = (spec.frames.saturating_sub(1)) * self.hop + self.n_fft;
        let mut acc = vec![0.0f64; total.max(len + pad)];
        let mut norm = vec![0.0f64; acc.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..spec.frames {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < spec.bins {
                    spec.at(k, t)
                } else {
                    spec.at(self.n_fft - k, t).conj()
                };
            }
            self.inv.process(&mut buf);
            for (n, w) in self.window.iter().enumerate() {
                let i = t * self.hop + n;
                acc[i] += buf[n].re * scale * w;
                norm[i] += w * w;
            }
        }
        Ok((0..len)
            .map(|i| {
                let j = i + pad;
                if norm[j] > 1e-10 {
                    (acc[j] / norm[j]) as f32
                } else {
                    0.0
                }
            })
            .collect())
    }
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}
