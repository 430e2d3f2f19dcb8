//! Coarse-to-fine audiovisual alignment on synthetic scenes.

pub mod alignment;
pub mod config;
pub mod disentangle;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod localization;
pub mod model;
pub mod multitask;
pub mod nn;
pub mod optim;
pub mod scene_synth;
pub mod separation;
pub mod tensor_io;
pub mod train;

pub use candle_core;
pub use error::{Error, Result};
