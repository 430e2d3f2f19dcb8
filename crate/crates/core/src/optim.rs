//! SGD with momentum, per-group learning rates and step decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            lr_head: 1e-3,
            lr_backbone: 1e-4,
            decay_every: 20,
            decay_factor: 0.1,
            grad_clip: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_head > 0.0 && self.lr_backbone > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::config("decay_every and decay_factor must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        Ok(())
    }

    /// `base * factor^(epoch / every)`.
    pub fn lr(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match group {
            ParamGroup::Head => self.lr_head,
            ParamGroup::Backbone => self.lr_backbone,
        };
        base * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// `v <- mu v + g; w <- w - lr v`. Parameters without a gradient are left alone.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, epoch: usize) -> Result<f64> {
        let params = store.params();
        let mut sq = 0.0;
        for (_, p) in &params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        for (name, p) in &params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g.detach() * scale)? } else { g.detach() };
            let v = match self.velocity.get(name) {
                Some(v) => ((v * self.cfg.momentum)? + g)?.detach(),
                None => g,
            };
            let lr = self.cfg.lr(p.group, epoch);
            p.var.set(&(p.var.as_tensor() - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

/// Euclidean norm of the gradients of every parameter whose name starts with `prefix`.
pub fn grad_norm(store: &ParamStore, grads: &GradStore, prefix: &str) -> Result<f64> {
    let mut sq = 0.0;
    for (name, p) in store.params() {
        if !name.starts_with(prefix) {
            continue;
        }
        if let Some(g) = grads.get(p.var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr(ParamGroup::Head, 0), 1e-3);
        assert_eq!(c.lr(ParamGroup::Head, 19), 1e-3);
        assert_eq!(c.lr(ParamGroup::Head, 20), 0.1 * c.lr(ParamGroup::Head, 19));
        assert_eq!(c.lr(ParamGroup::Backbone, 20), 0.1 * 1e-4);
        assert_eq!(c.lr(ParamGroup::Backbone, 45), 1e-4 * 0.1 * 0.1);
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let store = ParamStore::new(0, DType::F64);
        let w = store.root(ParamGroup::Head).constant("w", &[2], 1.0).unwrap();
        let mut opt = Sgd::new(OptimizerConfig {
            lr_head: 0.1,
            ..OptimizerConfig::default()
        })
        .unwrap();
        // loss = sum w^2 -> g = 2w
        for _ in 0..2 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&store, &grads, 0).unwrap();
        }
        // step 1: v = 2, w = 0.8; step 2: v = 0.9*2 + 1.6 = 3.4, w = 0.8 - 0.34
        let got = store.get("w").unwrap().var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.46).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Sgd::new(OptimizerConfig {
            lr_head: 0.0,
            ..OptimizerConfig::default()
        })
        .is_err());
    }
}
