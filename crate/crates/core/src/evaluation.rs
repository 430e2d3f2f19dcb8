//! Localization scoring: cIoU, success-rate AUC, the class-aware cIoU,
//! difficulty levels and the per-method report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Heatmap;
use crate::scene_synth::ScenePair;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `0.05, 0.10, ..., 1.00`.
pub fn auc_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

/// Binarisation threshold for a difficulty level.
pub fn level_threshold(level: usize) -> f64 {
    if level >= 3 {
        0.3
    } else {
        0.5
    }
}

/// `|A & G| / (|G| + |A \ G|)` with `A = {heatmap >= tau}`.
pub fn ciou(heatmap: &Heatmap, mask: &[bool], tau: f64) -> Result<f64> {
    if heatmap.data.len() != mask.len() {
        return Err(Error::shape(format!("heatmap has {} cells, mask {}", heatmap.data.len(), mask.len())));
    }
    let mut inter = 0usize;
    let mut gt = 0usize;
    let mut extra = 0usize;
    for (&h, &g) in heatmap.data.iter().zip(mask) {
        let a = h >= tau;
        inter += (a && g) as usize;
        gt += g as usize;
        extra += (a && !g) as usize;
    }
    if gt == 0 {
        return Err(Error::invalid("ground-truth mask is empty"));
    }
    Ok(inter as f64 / (gt + extra) as f64)
}

/// Mean over the threshold grid of the fraction of `scores` at or above the threshold.
pub fn auc(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let grid = auc_grid();
    let n = scores.len() as f64;
    grid.iter()
        .map(|&t| scores.iter().filter(|&&s| s >= t).count() as f64 / n)
        .sum::<f64>()
        / grid.len() as f64
}

/// Per-class ground truth of one scene; only sounding classes carry a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub size: usize,
    pub theta: Vec<u8>,
    pub masks: BTreeMap<usize, Vec<bool>>,
}

impl GroundTruthMask {
    pub fn from_scene(scene: &ScenePair, image_size: usize) -> Self {
        let masks = scene
            .sounding_classes()
            .into_iter()
            .map(|c| (c, scene.class_mask(c, image_size)))
            .collect();
        Self {
            size: image_size,
            theta: scene.labels_audio.clone(),
            masks,
        }
    }

    pub fn union(&self) -> Vec<bool> {
        let mut out = vec![false; self.size * self.size];
        for m in self.masks.values() {
            for (o, &v) in out.iter_mut().zip(m) {
                *o |= v;
            }
        }
        out
    }
}

/// `sum_c theta_c cIoU_c / sum_c theta_c`; a sounding class without a map scores 0.
pub fn ciou_class(maps: &BTreeMap<usize, Heatmap>, gt: &GroundTruthMask, tau: f64) -> Result<f64> {
    let sounding: Vec<usize> = (0..gt.theta.len()).filter(|&c| gt.theta[c] == 1).collect();
    if sounding.is_empty() {
        return Err(Error::invalid("no sounding class in frame"));
    }
    let mut total = 0.0;
    for &c in &sounding {
        let mask = gt
            .masks
            .get(&c)
            .ok_or_else(|| Error::invalid(format!("sounding class {c} has no mask")))?;
        total += match maps.get(&c) {
            Some(m) => ciou(m, mask, tau)?,
            None => 0.0,
        };
    }
    Ok(total / sounding.len() as f64)
}

/// Partition of scene indices by level `1..=3`.
pub fn split_by_level(scenes: &[ScenePair]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = (1..=3).map(|l| (l, Vec::new())).collect();
    for (i, s) in scenes.iter().enumerate() {
        out.entry(s.level).or_default().push(i);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Avc,
    Multitask,
    Ours,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avc" => Ok(Method::Avc),
            "multitask" => Ok(Method::Multitask),
            "ours" => Ok(Method::Ours),
            other => Err(Error::config(format!("unknown method `{other}` (expected avc, multitask or ours)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Avc => "avc",
            Method::Multitask => "multitask",
            Method::Ours => "ours",
        })
    }
}

/// Image-resolution maps of one test scene.
#[derive(Debug, Clone)]
pub struct SampleMaps {
    pub video_id: u64,
    /// Empty for class-agnostic methods.
    pub class_maps: BTreeMap<usize, Heatmap>,
    pub fused: Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub level: usize,
    pub count: usize,
    pub tau: f64,
    /// Mean cIoU of the fused (or class-agnostic) map against the union mask.
    pub ciou: f64,
    /// AUC over the same per-sample scores.
    pub auc: f64,
    /// Mean class-aware cIoU; absent for class-agnostic methods.
    pub ciou_class: Option<f64>,
    pub auc_class: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: Method,
    pub total: usize,
    pub levels: Vec<LevelScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn level(&self, level: usize) -> Option<&LevelScores> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("report schema {} (expected {REPORT_SCHEMA_VERSION})", r.schema_version),
            });
        }
        Ok(r)
    }

    /// Table-shaped plain-text summary.
    pub fn summary(&self) -> String {
        let mut s = format!("method {}  ({} test scenes)\n", self.method, self.total);
        s.push_str("level  count  tau   cIoU    AUC     cIoU_class\n");
        for l in &self.levels {
            let cc = l.ciou_class.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:<6} {:<6} {:<5} {:.4}  {:.4}  {cc}\n",
                l.level, l.count, l.tau, l.ciou, l.auc
            ));
        }
        s
    }
}

/// Scores precomputed maps. `maps[i]` belongs to `scenes[i]`. Class-agnostic
/// methods are scored on the union mask only and never read class ids.
pub fn score_maps(method: Method, scenes: &[ScenePair], maps: &[SampleMaps], image_size: usize) -> Result<EvalReport> {
    if scenes.len() != maps.len() {
        return Err(Error::shape("one map set per scene required"));
    }
    let mut levels = Vec::new();
    for (level, idx) in split_by_level(scenes) {
        let tau = level_threshold(level);
        let mut union_scores = Vec::with_capacity(idx.len());
        let mut class_scores = Vec::with_capacity(idx.len());
        for &i in &idx {
            let gt = GroundTruthMask::from_scene(&scenes[i], image_size);
            union_scores.push(ciou(&maps[i].fused, &gt.union(), tau)?);
            if method != Method::Avc {
                class_scores.push(ciou_class(&maps[i].class_maps, &gt, tau)?);
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let class_aware = method != Method::Avc;
        levels.push(LevelScores {
            level,
            count: idx.len(),
            tau,
            ciou: mean(&union_scores),
            auc: auc(&union_scores),
            ciou_class: class_aware.then(|| mean(&class_scores)),
            auc_class: class_aware.then(|| auc(&class_scores)),
        });
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        total: scenes.len(),
        levels,
        separation: None,
    })
}
