//! Test-time map production for the three methods, full evaluation runs and
//! held-out embedding geometry.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::alignment::pairwise_sq_distances;
use crate::disentangle::{disentangle_batch, grad_cam, grad_cam_with, select_valid_classes, Modality};
use crate::error::Result;
use crate::evaluation::{score_maps, EvalReport, Method, SampleMaps};
use crate::localization::{finish_map, fuse_maps, localize, Heatmap, LocalizationMap};
use crate::model::{AvModel, Batch};
use crate::scene_synth::ScenePair;

fn grid_heatmap(t: &Tensor) -> Result<Heatmap> {
    let (h, w) = t.dims2()?;
    let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Heatmap::new(h, w, data)
}

/// Per-class and fused maps of one sample, plus the class probabilities used.
#[derive(Debug, Clone)]
pub struct SampleLocalization {
    pub video_id: u64,
    pub probs: Vec<f64>,
    pub valid: Vec<usize>,
    pub class_maps: Vec<LocalizationMap>,
    pub fused: Heatmap,
}

impl SampleLocalization {
    pub fn to_sample_maps(&self) -> SampleMaps {
        SampleMaps {
            video_id: self.video_id,
            class_maps: self.class_maps.iter().map(|m| (m.class_id, m.resized.clone())).collect(),
            fused: self.fused.clone(),
        }
    }
}

/// Maps for one batch under `method`. Class-aware methods only emit maps for
/// classes the audio branch predicts at or above `threshold`.
pub fn localize_batch(model: &AvModel, batch: &Batch, method: Method, threshold: f64) -> Result<Vec<SampleLocalization>> {
    let size = model.dims.image_size;
    let (fa, fv) = model.encode(batch)?;
    let b = batch.len();
    match method {
        Method::Avc => {
            let f_a = fa.intermediate.detach();
            let (cam, _) = grad_cam_with(&fv.intermediate, |o| Ok(model.corr.logits(&f_a, o)?.narrow(1, 1, 1)?.squeeze(1)?))?;
            let mut out = Vec::with_capacity(b);
            for i in 0..b {
                let m = finish_map(batch.video_ids[i], 0, grid_heatmap(&cam.get(i)?)?, size)?;
                out.push(SampleLocalization {
                    video_id: batch.video_ids[i],
                    probs: Vec::new(),
                    valid: Vec::new(),
                    class_maps: Vec::new(),
                    fused: m.resized,
                });
            }
            Ok(out)
        }
        Method::Multitask | Method::Ours => {
            let probs: Vec<Vec<f64>> = model.audio_cls.classify(&fa.final_map)?.probs.to_dtype(DType::F64)?.to_vec2()?;
            let valid: Vec<Vec<usize>> = probs
                .iter()
                .map(|p| select_valid_classes(&p.iter().map(|&v| v as f32).collect::<Vec<_>>(), threshold))
                .collect();
            let mut raw: Vec<BTreeMap<usize, Heatmap>> = vec![BTreeMap::new(); b];
            if method == Method::Multitask {
                let mut classes: Vec<usize> = valid.iter().flatten().copied().collect();
                classes.sort_unstable();
                classes.dedup();
                for c in classes {
                    let cam = grad_cam(&fv.final_map, &model.visual_cls, c, Modality::Visual)?;
                    for i in 0..b {
                        if valid[i].contains(&c) {
                            raw[i].insert(c, grid_heatmap(&cam.map.get(i)?)?);
                        }
                    }
                }
            } else {
                let sets = disentangle_batch(&fa.final_map, &model.audio_cls, &valid, &batch.video_ids, Modality::Audio)?;
                let e_v = fv.final_map.detach();
                for (i, set) in sets.iter().enumerate() {
                    for (&c, f) in &set.features {
                        let k = localize(&e_v.narrow(0, i, 1)?, &f.detach().unsqueeze(0)?, &model.proj_a, &model.proj_v)?;
                        raw[i].insert(c, grid_heatmap(&k.get(0)?)?);
                    }
                }
            }
            let mut out = Vec::with_capacity(b);
            for i in 0..b {
                let mut class_maps = Vec::new();
                let mut resized = BTreeMap::new();
                for (&c, r) in &raw[i] {
                    let m = finish_map(batch.video_ids[i], c, r.clone(), size)?;
                    resized.insert(c, m.resized.clone());
                    class_maps.push(m);
                }
                let fused = if valid[i].is_empty() {
                    Heatmap::zeros(size, size)
                } else {
                    fuse_maps(&resized, &probs[i], &valid[i])?
                };
                out.push(SampleLocalization {
                    video_id: batch.video_ids[i],
                    probs: probs[i].clone(),
                    valid: valid[i].clone(),
                    class_maps,
                    fused,
                });
            }
            Ok(out)
        }
    }
}

/// Localizes every scene in batches of `batch_size`.
pub fn localize_scenes(
    model: &AvModel,
    scenes: &[ScenePair],
    method: Method,
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<SampleLocalization>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&ScenePair> = chunk.iter().collect();
        let batch = Batch::from_scenes(&refs, &model.dims, model.dtype())?;
        out.extend(localize_batch(model, &batch, method, threshold)?);
    }
    Ok(out)
}

/// Localizes and scores a test split.
pub fn evaluate_method(
    model: &AvModel,
    scenes: &[ScenePair],
    method: Method,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let locs = localize_scenes(model, scenes, method, threshold, batch_size)?;
    let maps: Vec<SampleMaps> = locs.iter().map(|l| l.to_sample_maps()).collect();
    score_maps(method, scenes, &maps, model.dims.image_size)
}

/// Mean positive and negative pair distances in the shared space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Embeds every sounding (video, class) entry in both modalities and averages
/// distances over same-video-same-class pairs and over all other pairs.
pub fn pair_geometry(model: &AvModel, scenes: &[ScenePair], batch_size: usize) -> Result<PairGeometry> {
    let mut ea = Vec::new();
    let mut ev = Vec::new();
    let mut keys = Vec::new();
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&ScenePair> = chunk.iter().collect();
        let batch = Batch::from_scenes(&refs, &model.dims, model.dtype())?;
        let (fa, fv) = model.encode(&batch)?;
        let classes = batch.audio_label_sets.clone();
        let sa = disentangle_batch(&fa.final_map, &model.audio_cls, &classes, &batch.video_ids, Modality::Audio)?;
        let sv = disentangle_batch(&fv.final_map, &model.visual_cls, &classes, &batch.video_ids, Modality::Visual)?;
        for (a, v) in sa.iter().zip(&sv) {
            for (c, f) in &a.features {
                ea.push(model.proj_a.forward(&f.unsqueeze(0)?)?.detach());
                ev.push(model.proj_v.forward(&v.features[c].unsqueeze(0)?)?.detach());
                keys.push((a.video_id, *c));
            }
        }
    }
    let d2: Vec<Vec<f64>> = pairwise_sq_distances(&Tensor::cat(&ea, 0)?, &Tensor::cat(&ev, 0)?)?
        .to_dtype(DType::F64)?
        .to_vec2()?;
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in d2.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if keys[i] == keys[j] {
                pos += d.sqrt();
                np += 1;
            } else {
                neg += d.sqrt();
                nn += 1;
            }
        }
    }
    Ok(PairGeometry {
        mean_positive: pos / np.max(1) as f64,
        mean_negative: neg / nn.max(1) as f64,
        positives: np,
        negatives: nn,
    })
}
