//! The full network: both encoders, the classifier heads, the correspondence
//! network and the projection heads, plus batch assembly.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::alignment::{AlignmentConfig, ProjectionHead};
use crate::encoders::{AudioEncoder, EncoderConfig, FeatureBundle, VisualEncoder};
use crate::error::{Error, Result};
use crate::multitask::{ClassifierHead, CorrespondenceNet};
use crate::nn::{ParamGroup, ParamStore};
use crate::scene_synth::{SceneConfig, ScenePair};

#[derive(Debug, Clone)]
pub struct ModelDims {
    pub num_classes: usize,
    pub image_size: usize,
    pub spec_bins: usize,
    pub spec_frames: usize,
}

impl From<&SceneConfig> for ModelDims {
    fn from(c: &SceneConfig) -> Self {
        Self {
            num_classes: c.num_classes,
            image_size: c.image_size,
            spec_bins: c.spec_bins,
            spec_frames: c.spec_frames,
        }
    }
}

pub struct AvModel {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub audio: AudioEncoder,
    pub visual: VisualEncoder,
    pub audio_cls: ClassifierHead,
    pub visual_cls: ClassifierHead,
    pub corr: CorrespondenceNet,
    pub proj_a: ProjectionHead,
    pub proj_v: ProjectionHead,
}

impl AvModel {
    pub fn new(dims: ModelDims, enc: &EncoderConfig, align: &AlignmentConfig, seed: u64, dtype: DType) -> Result<Self> {
        enc.validate()?;
        align.validate()?;
        let store = ParamStore::new(seed, dtype);
        let bb = store.root(ParamGroup::Backbone);
        let hd = store.root(ParamGroup::Head);
        let d = enc.embed_dim;
        let audio = AudioEncoder::new(&bb.pp("audio"), enc, dims.spec_bins, dims.spec_frames)?;
        let visual = VisualEncoder::new(&bb.pp("visual"), enc, dims.image_size)?;
        let audio_cls = ClassifierHead::new(&hd.pp("audio_cls"), d, dims.num_classes)?;
        let visual_cls = ClassifierHead::new(&hd.pp("visual_cls"), d, dims.num_classes)?;
        let corr = CorrespondenceNet::new(
            &hd.pp("corr"),
            enc.audio_intermediate_channels(),
            enc.visual_intermediate_channels(),
            d,
        )?;
        let proj_a = ProjectionHead::new(&hd.pp("proj_a"), d, align.hidden_dim, align.embed_dim)?;
        let proj_v = ProjectionHead::new(&hd.pp("proj_v"), d, align.hidden_dim, align.embed_dim)?;
        Ok(Self {
            store,
            dims,
            audio,
            visual,
            audio_cls,
            visual_cls,
            corr,
            proj_a,
            proj_v,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode(&self, batch: &Batch) -> Result<(FeatureBundle, FeatureBundle)> {
        Ok((self.audio.forward(&batch.spectrograms)?, self.visual.forward(&batch.images)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {}", path.display())));
        }
        self.store.load(path)
    }
}

/// Stacked model inputs for a list of scenes.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)`.
    pub images: Tensor,
    /// `(B, 1, M, T)`.
    pub spectrograms: Tensor,
    /// `(B, C)`.
    pub labels_audio: Tensor,
    pub labels_visual: Tensor,
    pub video_ids: Vec<u64>,
    pub audio_label_sets: Vec<Vec<usize>>,
    pub visual_label_sets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_scenes(scenes: &[&ScenePair], dims: &ModelDims, dtype: DType) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = scenes.len();
        let (n, m, t, c) = (dims.image_size, dims.spec_bins, dims.spec_frames, dims.num_classes);
        let dev = candle_core::Device::Cpu;
        let mut img = Vec::with_capacity(b * n * n * 3);
        let mut spec = Vec::with_capacity(b * m * t);
        let mut la = Vec::with_capacity(b * c);
        let mut lv = Vec::with_capacity(b * c);
        for s in scenes {
            if s.image.len() != n * n * 3 || s.spectrogram.len() != m * t || s.labels_audio.len() != c {
                return Err(Error::shape(format!("scene {} does not match the model dimensions", s.video_id)));
            }
            img.extend_from_slice(&s.image);
            spec.extend_from_slice(&s.spectrogram);
            la.extend(s.labels_audio.iter().map(|&v| v as f32));
            lv.extend(s.labels_visual.iter().map(|&v| v as f32));
        }
        let set = |l: &[u8]| (0..l.len()).filter(|&k| l[k] == 1).collect::<Vec<_>>();
        Ok(Self {
            images: Tensor::from_vec(img, (b, n, n, 3), &dev)?
                .permute((0, 3, 1, 2))?
                .contiguous()?
                .to_dtype(dtype)?,
            spectrograms: Tensor::from_vec(spec, (b, 1, m, t), &dev)?.to_dtype(dtype)?,
            labels_audio: Tensor::from_vec(la, (b, c), &dev)?.to_dtype(dtype)?,
            labels_visual: Tensor::from_vec(lv, (b, c), &dev)?.to_dtype(dtype)?,
            video_ids: scenes.iter().map(|s| s.video_id).collect(),
            audio_label_sets: scenes.iter().map(|s| set(&s.labels_audio)).collect(),
            visual_label_sets: scenes.iter().map(|s| set(&s.labels_visual)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }
}
