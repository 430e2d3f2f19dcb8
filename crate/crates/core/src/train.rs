//! Training loops for the correspondence-only baseline, the multi-task stage
//! and the alignment stage.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_loss, stage_two_loss, AlignmentConfig};
use crate::disentangle::{disentangle_batch, select_valid_classes, Modality};
use crate::error::{Error, Result};
use crate::model::{AvModel, Batch};
use crate::multitask::{classification_loss, correspondence_loss, multitask_loss, sample_negatives, MultiTaskConfig};
use crate::optim::{OptimizerConfig, Sgd};
use crate::scene_synth::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Correspondence loss only.
    Avc,
    /// Classification plus correspondence.
    One,
    /// Stage one objective plus alignment, from a stage-one checkpoint.
    Two,
    /// Stage two objective from scratch.
    Joint,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avc" => Ok(Stage::Avc),
            "1" | "one" => Ok(Stage::One),
            "2" | "two" => Ok(Stage::Two),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::config(format!("unknown stage `{other}` (expected 1, 2, joint or avc)"))),
        }
    }
}

impl Stage {
    fn aligns(self) -> bool {
        matches!(self, Stage::Two | Stage::Joint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_avc: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs_stage1: 20,
            epochs_stage2: 10,
            epochs_avc: 20,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        self.optimizer.validate()
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Avc => self.epochs_avc,
            Stage::One => self.epochs_stage1,
            Stage::Two | Stage::Joint => self.epochs_stage2,
        }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub l_cls: Option<f64>,
    pub l_avc: f64,
    pub l_ava: Option<f64>,
    pub loss: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub l_cls: Option<Tensor>,
    pub l_avc: Tensor,
    pub l_ava: Option<Tensor>,
}

/// Everything one step needs besides the batch.
pub struct StepContext<'a> {
    pub multitask: &'a MultiTaskConfig,
    pub alignment: &'a AlignmentConfig,
    pub stage: Stage,
}

/// Forward pass and losses for one batch. `negatives[i]` is the video whose
/// image is paired with the audio of video `i` as a non-corresponding pair.
pub fn step_losses(model: &AvModel, batch: &Batch, negatives: &[usize], ctx: &StepContext) -> Result<StepLosses> {
    let b = batch.len();
    let (fa, fv) = model.encode(batch)?;
    let dev = batch.images.device();

    let idx = Tensor::from_vec(negatives.iter().map(|&j| j as u32).collect::<Vec<_>>(), b, dev)?;
    let o_v_neg = fv.intermediate.index_select(&idx, 0)?;
    let logits = Tensor::cat(
        &[
            model.corr.logits(&fa.intermediate, &fv.intermediate)?,
            model.corr.logits(&fa.intermediate, &o_v_neg)?,
        ],
        0,
    )?;
    let targets: Vec<u32> = std::iter::repeat_n(1u32, b).chain(std::iter::repeat_n(0u32, b)).collect();
    let l_avc = correspondence_loss(&logits, &Tensor::from_vec(targets, 2 * b, dev)?)?;

    if ctx.stage == Stage::Avc {
        return Ok(StepLosses {
            total: l_avc.clone(),
            l_cls: None,
            l_avc,
            l_ava: None,
        });
    }

    let pa = model.audio_cls.classify(&fa.final_map)?;
    let pv = model.visual_cls.classify(&fv.final_map)?;
    let l_cls = classification_loss(&batch.labels_audio, &pa, &batch.labels_visual, &pv)?;
    let l_mul = multitask_loss(&l_cls, &l_avc, ctx.multitask.lambda)?;
    if !ctx.stage.aligns() {
        return Ok(StepLosses {
            total: l_mul,
            l_cls: Some(l_cls),
            l_avc,
            l_ava: None,
        });
    }

    let valid = |probs: &Tensor, labels: &[Vec<usize>]| -> Result<Vec<Vec<usize>>> {
        let p: Vec<Vec<f32>> = probs.detach().to_dtype(DType::F32)?.to_vec2()?;
        Ok(p.iter()
            .zip(labels)
            .map(|(row, l)| {
                let mut v = select_valid_classes(row, ctx.alignment.valid_threshold);
                if ctx.alignment.train_with_labels {
                    v.extend(l);
                    v.sort_unstable();
                    v.dedup();
                }
                v
            })
            .collect())
    };
    let valid_a = valid(&pa.probs, &batch.audio_label_sets)?;
    let valid_v = valid(&pv.probs, &batch.visual_label_sets)?;
    let sets_a = disentangle_batch(&fa.final_map, &model.audio_cls, &valid_a, &batch.video_ids, Modality::Audio)?;
    let sets_v = disentangle_batch(&fv.final_map, &model.visual_cls, &valid_v, &batch.video_ids, Modality::Visual)?;
    let l_ava = match contrastive_loss(&sets_a, &sets_v, &model.proj_a, &model.proj_v, ctx.alignment.margin)? {
        Some(l) => l,
        None => l_mul.zeros_like()?,
    };
    Ok(StepLosses {
        total: stage_two_loss(&l_mul, &l_ava, ctx.alignment.beta)?,
        l_cls: Some(l_cls),
        l_avc,
        l_ava: Some(l_ava),
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Losses plus gradients for one batch, without updating anything.
pub fn step_grads(model: &AvModel, batch: &Batch, negatives: &[usize], ctx: &StepContext) -> Result<(StepLosses, GradStore)> {
    let losses = step_losses(model, batch, negatives, ctx)?;
    let grads = losses.total.backward()?;
    Ok((losses, grads))
}

pub struct TrainOptions<'a> {
    pub stage: Stage,
    pub train: &'a TrainConfig,
    pub multitask: &'a MultiTaskConfig,
    pub alignment: &'a AlignmentConfig,
    pub seed: u64,
    /// Where per-epoch checkpoints go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::Avc => "avc",
        Stage::One => "stage1",
        Stage::Two => "stage2",
        Stage::Joint => "joint",
    }
}

pub fn checkpoint_name(stage: Stage, epoch: usize) -> String {
    format!("{}_epoch{epoch:03}.ckpt", stage_tag(stage))
}

/// Runs all epochs of `opts.stage` over `scenes`, writing one JSON line per
/// step to `log`. Shuffling and negative pairing depend only on the seed and epoch.
pub fn train<W: Write>(model: &AvModel, scenes: &[ScenePair], opts: &TrainOptions, log: &mut W) -> Result<TrainSummary> {
    opts.train.validate()?;
    opts.multitask.validate()?;
    opts.alignment.validate()?;
    if scenes.len() < 2 {
        return Err(Error::invalid("training needs at least two scenes"));
    }
    let ctx = StepContext {
        multitask: opts.multitask,
        alignment: opts.alignment,
        stage: opts.stage,
    };
    let mut opt = Sgd::new(opts.train.optimizer.clone())?;
    let mut summary = TrainSummary {
        steps: 0,
        last: None,
        checkpoints: Vec::new(),
    };
    let bs = opts.train.batch_size;
    for epoch in 0..opts.train.epochs(opts.stage) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&ScenePair> = chunk.iter().map(|&i| &scenes[i]).collect();
            let batch = Batch::from_scenes(&refs, &model.dims, model.dtype())?;
            let negatives = sample_negatives(chunk.len(), &mut rng)?;
            let (losses, grads) = step_grads(model, &batch, &negatives, &ctx)?;
            let entry = StepLog {
                stage: opts.stage,
                epoch,
                step,
                l_cls: losses.l_cls.as_ref().map(scalar).transpose()?,
                l_avc: scalar(&losses.l_avc)?,
                l_ava: losses.l_ava.as_ref().map(scalar).transpose()?,
                loss: scalar(&losses.total)?,
                lr_head: opt.config().lr(crate::nn::ParamGroup::Head, epoch),
                lr_backbone: opt.config().lr(crate::nn::ParamGroup::Backbone, epoch),
                grad_norm: 0.0,
            };
            if !entry.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: format!("{:?}", opts.stage),
                    epoch,
                    step,
                    detail: format!("l_cls={:?} l_avc={} l_ava={:?}", entry.l_cls, entry.l_avc, entry.l_ava),
                });
            }
            let grad_norm = opt.step(&model.store, &grads, epoch)?;
            let entry = StepLog { grad_norm, ..entry };
            serde_json::to_writer(&mut *log, &entry)?;
            log.write_all(b"\n")?;
            summary.steps += 1;
            summary.last = Some(entry);
        }
        if let Some(dir) = opts.checkpoint_dir {
            let path = dir.join(checkpoint_name(opts.stage, epoch));
            model.save(&path)?;
            summary.checkpoints.push(path);
        }
        if let Some(last) = &summary.last {
            log::info!(
                "{:?} epoch {epoch}: loss {:.4} (cls {:?}, avc {:.4}, ava {:?})",
                opts.stage,
                last.loss,
                last.l_cls,
                last.l_avc,
                last.l_ava
            );
        }
    }
    Ok(summary)
}
