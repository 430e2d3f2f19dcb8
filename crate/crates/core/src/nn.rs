//! Parameter store and the small set of layers the encoders and heads use.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_io::{self, Blob};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Param>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self, group: ParamGroup) -> Init<'_> {
        Init {
            store: self,
            prefix: String::new(),
            group,
        }
    }

    pub fn params(&self) -> Vec<(String, Param)> {
        let map = self.inner.lock().expect("param store poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.inner.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, p)| p.var.elem_count()).sum()
    }

    fn insert(&self, name: String, var: Var, group: ParamGroup) -> Result<()> {
        let mut map = self.inner.lock().expect("param store poisoned");
        if map.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        map.insert(name, Param { var, group });
        Ok(())
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named = Vec::new();
        for (name, p) in self.params() {
            let t = p.var.as_tensor();
            let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            named.push((name, Blob::new(t.dims().to_vec(), data)?));
        }
        tensor_io::write_checkpoint(path, &named)
    }

    /// Overwrites every parameter from a checkpoint; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let blobs: BTreeMap<String, Blob> = tensor_io::read_checkpoint(path)?.into_iter().collect();
        for (name, p) in self.params() {
            let blob = blobs
                .get(&name)
                .ok_or_else(|| Error::Missing(format!("parameter {name} not in {}", path.display())))?;
            if blob.shape != p.var.dims() {
                return Err(Error::shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    blob.shape,
                    p.var.dims()
                )));
            }
            let t = Tensor::from_vec(blob.data.clone(), blob.shape.clone(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    /// Copies values for every parameter also present in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in self.params() {
            if let Some(src) = other.get(&name) {
                p.var.set(&src.var.as_tensor().to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }
}

/// Hierarchical parameter factory.
#[derive(Clone)]
pub struct Init<'a> {
    store: &'a ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn pp(&self, name: &str) -> Init<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            prefix,
            group: self.group,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.insert(self.full_name(name), var, self.group)?;
        Ok(out)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, seeded by the parameter name.
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.store.rng_for(&self.full_name(name));
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.make(name, shape, values)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.make(name, shape, vec![value; n])
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.fan_in_uniform("weight", &[out_dim, in_dim], in_dim)?,
            bias: init.constant("bias", &[out_dim], 0.0)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }
}

/// 2-D convolution with per-axis zero padding `(top, bottom, left, right)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub dilation: usize,
    pub padding: [usize; 4],
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &Init,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        padding: [usize; 4],
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1;
        Ok(Self {
            weight: init.fan_in_uniform("weight", &[out_ch, in_ch, kernel.0, kernel.1], fan_in)?,
            bias: init.constant("bias", &[out_ch], 0.0)?,
            stride,
            dilation,
            padding,
        })
    }

    /// Square kernel, "same"-style symmetric padding.
    pub fn square(init: &Init, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Result<Self> {
        let p = k / 2;
        Self::new(init, in_ch, out_ch, (k, k), stride, 1, [p, p, p, p])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [t, b, l, r] = self.padding;
        let mut x = x.clone();
        if t + b > 0 {
            x = x.pad_with_zeros(2, t, b)?;
        }
        if l + r > 0 {
            x = x.pad_with_zeros(3, l, r)?;
        }
        let y = x.conv2d(&self.weight, 0, self.stride, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Single-group GroupNorm: each sample is normalised over channels and
/// positions together, then scaled and shifted per channel.
#[derive(Debug, Clone)]
pub struct MapNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl MapNorm {
    pub fn new(init: &Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[1, channels, 1, 1], 1.0)?,
            beta: init.constant("beta", &[1, channels, 1, 1], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.dims4()?;
        let mean = x.mean_keepdim((1, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((1, 2, 3))?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Pre-activation residual block: `shortcut(x) + conv(relu(norm(conv(relu(norm(x))))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    norm1: MapNorm,
    conv1: Conv2d,
    norm2: MapNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(init: &Init, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(&init.pp("shortcut"), in_ch, out_ch, (1, 1), stride, 1, [0; 4])?)
        } else {
            None
        };
        Ok(Self {
            norm1: MapNorm::new(&init.pp("norm1"), in_ch)?,
            conv1: Conv2d::square(&init.pp("conv1"), in_ch, out_ch, 3, stride)?,
            norm2: MapNorm::new(&init.pp("norm2"), out_ch)?,
            conv2: Conv2d::square(&init.pp("conv2"), out_ch, out_ch, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.relu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.conv1, &self.conv2];
        if let Some(s) = &self.shortcut {
            v.push(s);
        }
        v
    }
}

/// Single-layer gated recurrent unit over `(batch, time, features)`.
#[derive(Debug, Clone)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    hidden_dim: usize,
}

impl Gru {
    pub fn new(init: &Init, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&init.pp("input"), in_dim, 3 * hidden_dim)?,
            hidden: Linear::new(&init.pp("hidden"), hidden_dim, 3 * hidden_dim)?,
            hidden_dim,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Returns all hidden states, `(batch, time, hidden)`, starting from zeros.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, steps, _) = x.dims3()?;
        let h_dim = self.hidden_dim;
        let gates_x = self.input.forward(x)?;
        let mut h = Tensor::zeros((n, h_dim), x.dtype(), x.device())?;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = gates_x.narrow(1, t, 1)?.squeeze(1)?;
            let gh = self.hidden.forward(&h)?;
            let r = sigmoid(&(gx.narrow(1, 0, h_dim)? + gh.narrow(1, 0, h_dim)?)?)?;
            let z = sigmoid(&(gx.narrow(1, h_dim, h_dim)? + gh.narrow(1, h_dim, h_dim)?)?)?;
            let cand = (gx.narrow(1, 2 * h_dim, h_dim)? + (r * gh.narrow(1, 2 * h_dim, h_dim)?)?)?.tanh()?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            h = (&cand + (z * (h - &cand)?)?)?;
            outputs.push(h.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&outputs, 1)?)
    }
}

/// Logistic function built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x.neg()?.exp()? + 1.0)?.recip())?)
}

/// Mean over the two trailing spatial axes: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(1, DType::F64)
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = store();
        let b = store();
        let la = Linear::new(&a.root(ParamGroup::Head).pp("x"), 4, 3).unwrap();
        let lb = Linear::new(&b.root(ParamGroup::Head).pp("x"), 4, 3).unwrap();
        assert_eq!(
            la.weight.to_vec2::<f64>().unwrap(),
            lb.weight.to_vec2::<f64>().unwrap()
        );
        let bound = 0.5;
        assert!(la.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.abs() < bound));
        assert!(Linear::new(&a.root(ParamGroup::Head).pp("x"), 4, 3).is_err());
    }

    #[test]
    fn residual_block_with_zero_convs_is_identity() {
        let s = store();
        let block = ResidualBlock::new(&s.root(ParamGroup::Backbone), 4, 4, 1).unwrap();
        for conv in block.convs() {
            let w = conv.weight.zeros_like().unwrap();
            s.params()
                .iter()
                .find(|(_, p)| p.var.as_tensor().id() == conv.weight.id())
                .unwrap()
                .1
                .var
                .set(&w)
                .unwrap();
        }
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let y = block.forward(&x).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let x = Tensor::new(&[-3.0f64, 0.0, 2.5], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (v, xv) in y.iter().zip([-3.0f64, 0.0, 2.5]) {
            assert!((v - 1.0 / (1.0 + (-xv).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let a = ParamStore::new(3, DType::F32);
        Linear::new(&a.root(ParamGroup::Head).pp("l"), 3, 2).unwrap();
        a.save(&path).unwrap();
        let b = ParamStore::new(99, DType::F32);
        let lb = Linear::new(&b.root(ParamGroup::Head).pp("l"), 3, 2).unwrap();
        b.load(&path).unwrap();
        assert_eq!(
            a.get("l.weight").unwrap().var.as_tensor().to_vec2::<f32>().unwrap(),
            lb.weight.to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn gru_outputs_are_bounded_and_causal() {
        let s = store();
        let gru = Gru::new(&s.root(ParamGroup::Backbone), 3, 5).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 6, 3), &Device::Cpu).unwrap();
        let y = gru.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 6, 5]);
        let mut x2 = x.to_vec3::<f64>().unwrap();
        x2[0][4][1] += 1.0;
        let y2 = gru.forward(&Tensor::new(x2, &Device::Cpu).unwrap()).unwrap();
        let d = (y2 - &y).unwrap().abs().unwrap().to_vec3::<f64>().unwrap();
        for t in 0..4 {
            assert!(d[0][t].iter().all(|&v| v == 0.0));
        }
        assert!(d[0][4].iter().any(|&v| v > 0.0));
    }
}
