//! Audio (convolution + recurrence) and visual (residual) backbones.
//!
//! Both return a [`FeatureBundle`]: the intermediate map consumed by the
//! correspondence network and the final map consumed by the classifier heads,
//! Grad-CAM and the projection heads.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MapNorm, Conv2d, Gru, Init, ResidualBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each audio conv stage.
    pub audio_channels: Vec<usize>,
    /// Stride of each audio conv stage (same length as `audio_channels`).
    pub audio_strides: Vec<usize>,
    /// Run the recurrent layer; otherwise the final audio map is a 1x1 projection.
    pub audio_recurrent: bool,
    /// Stem channels followed by the channels of each residual stage up to
    /// the intermediate map.
    pub visual_channels: Vec<usize>,
    /// Stride of the stem and of each residual stage (same length as `visual_channels`).
    pub visual_strides: Vec<usize>,
    /// Channels of the final maps (audio and visual).
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            audio_channels: vec![16, 32, 32],
            audio_strides: vec![2, 2, 2],
            audio_recurrent: true,
            visual_channels: vec![16, 32, 32],
            visual_strides: vec![2, 2, 2],
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.audio_channels.is_empty() || self.audio_channels.len() != self.audio_strides.len() {
            return Err(Error::config("audio encoder needs at least one conv stage, with one stride per stage"));
        }
        if self.visual_channels.len() < 2 || self.visual_channels.len() != self.visual_strides.len() {
            return Err(Error::config(
                "visual encoder needs a stem plus at least one stage, with one stride per entry",
            ));
        }
        if self.embed_dim == 0 || self.audio_channels.iter().chain(&self.visual_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.visual_strides.iter().chain(&self.audio_strides).any(|&s| s == 0 || s > 2) {
            return Err(Error::config("strides must be 1 or 2"));
        }
        Ok(())
    }

    pub fn audio_grid(&self, bins: usize, frames: usize) -> (usize, usize) {
        self.audio_strides
            .iter()
            .fold((bins, frames), |g, &s| (g.0.div_ceil(s), g.1.div_ceil(s)))
    }

    pub fn visual_grid(&self, image_size: usize) -> usize {
        self.visual_strides.iter().fold(image_size, |n, &s| n.div_ceil(s))
    }

    pub fn audio_intermediate_channels(&self) -> usize {
        *self.audio_channels.last().unwrap()
    }

    pub fn visual_intermediate_channels(&self) -> usize {
        *self.visual_channels.last().unwrap()
    }
}

/// Encoder outputs for one modality.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Audio: last pre-recurrent conv output. Visual: output of the last
    /// intermediate residual stage. `(B, C, U', V')`.
    pub intermediate: Tensor,
    /// `(B, D, U, V)`.
    pub final_map: Tensor,
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    stages: Vec<(Conv2d, MapNorm)>,
    recurrent: Option<Gru>,
    projection: Option<Conv2d>,
    bins: usize,
    frames: usize,
}

impl AudioEncoder {
    pub fn new(init: &Init, cfg: &EncoderConfig, bins: usize, frames: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (i, (&ch, &stride)) in cfg.audio_channels.iter().zip(&cfg.audio_strides).enumerate() {
            let p = init.pp(&format!("stage{i}"));
            stages.push((Conv2d::square(&p.pp("conv"), in_ch, ch, 3, stride)?, MapNorm::new(&p.pp("norm"), ch)?));
            in_ch = ch;
        }
        let (recurrent, projection) = if cfg.audio_recurrent {
            (Some(Gru::new(&init.pp("gru"), in_ch, cfg.embed_dim)?), None)
        } else {
            (None, Some(Conv2d::new(&init.pp("proj"), in_ch, cfg.embed_dim, (1, 1), 1, 1, [0; 4])?))
        };
        Ok(Self {
            stages,
            recurrent,
            projection,
            bins,
            frames,
        })
    }

    /// `spectrogram`: `(B, 1, M, T)`.
    pub fn forward(&self, spectrogram: &Tensor) -> Result<FeatureBundle> {
        let dims = spectrogram.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != self.bins || dims[3] != self.frames {
            return Err(Error::shape(format!(
                "audio encoder expects (B, 1, {}, {}), got {dims:?}",
                self.bins, self.frames
            )));
        }
        let mut h = spectrogram.clone();
        for (conv, norm) in &self.stages {
            h = norm.forward(&conv.forward(&h)?)?.relu()?;
        }
        let intermediate = h;
        let final_map = match (&self.recurrent, &self.projection) {
            (Some(gru), _) => {
                // Each frequency row is an independent sequence over time.
                let (b, c, f, t) = intermediate.dims4()?;
                let seq = intermediate.permute((0, 2, 3, 1))?.reshape((b * f, t, c))?;
                let out = gru.forward(&seq)?;
                out.reshape((b, f, t, gru.hidden_dim()))?.permute((0, 3, 1, 2))?.contiguous()?
            }
            (None, Some(proj)) => proj.forward(&intermediate)?,
            _ => unreachable!("audio encoder has either a recurrent layer or a projection"),
        };
        Ok(FeatureBundle {
            intermediate,
            final_map,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    stem: Conv2d,
    stages: Vec<ResidualBlock>,
    last: ResidualBlock,
    image_size: usize,
}

impl VisualEncoder {
    pub fn new(init: &Init, cfg: &EncoderConfig, image_size: usize) -> Result<Self> {
        let stem = Conv2d::square(&init.pp("stem"), 3, cfg.visual_channels[0], 3, cfg.visual_strides[0])?;
        let mut stages = Vec::new();
        for i in 1..cfg.visual_channels.len() {
            stages.push(ResidualBlock::new(
                &init.pp(&format!("stage{i}")),
                cfg.visual_channels[i - 1],
                cfg.visual_channels[i],
                cfg.visual_strides[i],
            )?);
        }
        let c = cfg.visual_intermediate_channels();
        Ok(Self {
            stem,
            stages,
            last: ResidualBlock::new(&init.pp("last"), c, cfg.embed_dim, 1)?,
            image_size,
        })
    }

    /// `image`: `(B, 3, H, W)`.
    pub fn forward(&self, image: &Tensor) -> Result<FeatureBundle> {
        let dims = image.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.image_size || dims[3] != self.image_size {
            return Err(Error::shape(format!(
                "visual encoder expects (B, 3, {n}, {n}), got {dims:?}",
                n = self.image_size
            )));
        }
        let mut h = self.stem.forward(image)?;
        for stage in &self.stages {
            h = stage.forward(&h)?;
        }
        let intermediate = h;
        let final_map = self.last.forward(&intermediate)?.relu()?;
        Ok(FeatureBundle {
            intermediate,
            final_map,
        })
    }

    pub fn stage(&self, i: usize) -> &ResidualBlock {
        &self.stages[i]
    }
}
