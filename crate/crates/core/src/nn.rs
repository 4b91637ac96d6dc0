//! Minimal layer and optimizer toolkit on top of `candle_core`.
//!
//! Every layer owns its parameters as [`Var`]s and initializes them from a
//! caller-supplied seeded RNG, so model construction is reproducible without
//! touching candle's thread-local generator.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SamError};

pub const DEVICE: Device = Device::Cpu;

/// Named parameter list in a stable, construction-defined order.
pub type ParamList = Vec<(String, Var)>;

/// Derives an independent RNG stream from a seed and a label.
pub fn rng_for(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform initialized convolution with a square kernel.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = uniform_tensor(rng, &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = Tensor::zeros(out_channels, DType::F32, &DEVICE)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
            stride,
            padding,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
            stride,
            padding,
        })
    }

    /// Copy with freshly allocated parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        Self::from_tensors(
            self.weight.as_tensor().copy()?,
            self.bias.as_tensor().copy()?,
            self.stride,
            self.padding,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn params(&self, prefix: &str) -> ParamList {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = uniform_tensor(rng, &[out_features, in_features], bound)?;
        let bias = Tensor::zeros(out_features, DType::F32, &DEVICE)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
        })
    }

    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&self.weight.as_tensor().copy()?)?,
            bias: Var::from_tensor(&self.bias.as_tensor().copy()?)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self, prefix: &str) -> ParamList {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Total scalar count of a parameter list.
pub fn count(params: &ParamList) -> usize {
    params.iter().map(|(_, v)| v.elem_count()).sum()
}

/// Deep copy of the current parameter values.
pub fn snapshot(params: &ParamList) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|(_, v)| Ok(v.as_tensor().copy()?.detach()))
        .collect()
}

pub fn restore(params: &ParamList, values: &[Tensor]) -> Result<()> {
    if params.len() != values.len() {
        return Err(SamError::shape(format!(
            "restore: {} parameters but {} values",
            params.len(),
            values.len()
        )));
    }
    for ((name, var), value) in params.iter().zip(values) {
        if var.dims() != value.dims() {
            return Err(SamError::shape(format!(
                "restore `{name}`: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(value)?;
    }
    Ok(())
}

/// Largest absolute gradient entry over `params`; absent gradients count as zero.
pub fn max_abs_grad(params: &ParamList, grads: &GradStore) -> Result<f32> {
    let mut best = 0f32;
    for (_, v) in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            let m = g.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
            best = best.max(m);
        }
    }
    Ok(best)
}

/// Plain stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<candle_core::TensorId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamList, grads: &GradStore) -> Result<()> {
        for (_, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let update = if self.momentum > 0.0 {
                let v = match self.velocity.get(&var.id()) {
                    Some(prev) => ((prev * self.momentum)? + g)?,
                    None => g.clone(),
                };
                self.velocity.insert(var.id(), v.clone());
                v
            } else {
                g.clone()
            };
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.exp()?)
}

/// Mean cross-entropy of `(B, K)` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    if b != labels.len() {
        return Err(SamError::shape(format!(
            "cross_entropy: {b} rows but {} labels",
            labels.len()
        )));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), &DEVICE)?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// Per-row argmax of a `(B, K)` tensor.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let v: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    Ok(v.into_iter().map(|x| x as usize).collect())
}
