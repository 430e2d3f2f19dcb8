//! Per-class localization maps from the shared embedding space, their
//! normalisation and upsampling, class fusion and heatmap rendering.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, D};

use crate::alignment::ProjectionHead;
use crate::error::{Error, Result};

/// Row-major `height x width` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!("heatmap {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationMap {
    pub video_id: u64,
    pub class_id: usize,
    /// Nonpositive, on the feature grid.
    pub raw: Heatmap,
    /// Min-max normalised `raw`.
    pub normalized: Heatmap,
    /// `normalized` resized to the image.
    pub resized: Heatmap,
}

/// `K(u, v) = -||g_a(f_a) - g_v(E_v(u, v))||` for a batch.
///
/// `e_v`: `(B, D, U, V)`, `f_a`: `(B, D)`. Returns `(B, U, V)`.
pub fn localize(e_v: &Tensor, f_a: &Tensor, g_a: &ProjectionHead, g_v: &ProjectionHead) -> Result<Tensor> {
    let (b, d, _, _) = e_v.dims4()?;
    if f_a.dims() != [b, d] {
        return Err(Error::shape(format!("f_a {:?} does not match E_v {:?}", f_a.dims(), e_v.dims())));
    }
    let visual = g_v.forward_map(e_v)?;
    let audio = g_a.forward(f_a)?.unsqueeze(1)?.unsqueeze(1)?;
    Ok(visual.broadcast_sub(&audio)?.sqr()?.sum(D::Minus1)?.sqrt()?.neg()?)
}

/// `(K - min) / (max - min)`; a constant map becomes all zeros.
pub fn normalize(raw: &Heatmap) -> Result<Heatmap> {
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("localization map has non-finite values"));
    }
    let lo = raw.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        raw.data.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; raw.data.len()]
    };
    Heatmap::new(raw.height, raw.width, data)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &Heatmap, height: usize, width: usize) -> Heatmap {
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    let coord = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sy, src.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sx, src.width);
            let top = src.at(y0, x0) * (1.0 - fx) + src.at(y0, x1) * fx;
            let bottom = src.at(y1, x0) * (1.0 - fx) + src.at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Heatmap { height, width, data }
}

pub fn normalize_resize(raw: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    Ok(resize_bilinear(&normalize(raw)?, height, width))
}

/// Builds the full [`LocalizationMap`] of one sample from its raw grid.
pub fn finish_map(video_id: u64, class_id: usize, raw: Heatmap, image_size: usize) -> Result<LocalizationMap> {
    let normalized = normalize(&raw)?;
    let resized = resize_bilinear(&normalized, image_size, image_size);
    Ok(LocalizationMap {
        video_id,
        class_id,
        raw,
        normalized,
        resized,
    })
}

/// `sum_c (p_c / sum p) map_c` over the valid classes.
pub fn fuse_maps(maps: &BTreeMap<usize, Heatmap>, probs: &[f64], valid: &[usize]) -> Result<Heatmap> {
    let first = valid
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one valid class"))?;
    let shape = maps
        .get(first)
        .map(|m| (m.height, m.width))
        .ok_or_else(|| Error::invalid(format!("no map for valid class {first}")))?;
    let total: f64 = valid.iter().map(|&c| probs[c]).sum();
    let mut out = Heatmap::zeros(shape.0, shape.1);
    for &c in valid {
        let m = maps
            .get(&c)
            .ok_or_else(|| Error::invalid(format!("no map for valid class {c}")))?;
        if (m.height, m.width) != shape {
            return Err(Error::shape("fused maps differ in size"));
        }
        let w = if total > 0.0 { probs[c] / total } else { 1.0 / valid.len() as f64 };
        for (o, v) in out.data.iter_mut().zip(&m.data) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Blends `jet(heatmap)` over an interleaved `H x W x 3` image in `[0, 1]` and writes an RGB PNG.
pub fn render_heatmap(heatmap: &Heatmap, image: &[f32], alpha: f64, path: &Path) -> Result<()> {
    let (h, w) = (heatmap.height, heatmap.width);
    if image.len() != 3 * h * w {
        return Err(Error::shape(format!("image has {} values, heatmap is {h}x{w}", image.len())));
    }
    let pixels = blend(heatmap, image, alpha);
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels).ok_or_else(|| Error::shape("pixel buffer size"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Interleaved RGB bytes of the overlay.
pub fn blend(heatmap: &Heatmap, image: &[f32], alpha: f64) -> Vec<u8> {
    let n = heatmap.height * heatmap.width;
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let c = jet(heatmap.data[i]);
        for (ch, cv) in c.iter().enumerate() {
            let v = (1.0 - alpha) * image[3 * i + ch] as f64 + alpha * cv;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn class_map_file_name(video_id: u64, class_id: usize) -> String {
    format!("{video_id}_{class_id}.png")
}

pub fn fused_map_file_name(video_id: u64) -> String {
    format!("{video_id}_fused.png")
}
