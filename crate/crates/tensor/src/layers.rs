//! Trainable layers and the [`Module`] trait that exposes their tensors.

use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel running mean and variance of a batch-norm layer.
///
/// Kept behind a mutex so a forward pass borrowing the layer immutably can
/// still fold in batch statistics.
#[derive(Debug)]
pub struct RunningStats {
    inner: Mutex<(Vec<f64>, Vec<f64>)>,
    channels: usize,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: Mutex::new((vec![0.0; channels], vec![1.0; channels])),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `running ← momentum·running + (1 − momentum)·batch`, with the batch
    /// variance made unbiased.
    pub fn update(&self, mean: &[f64], var: &[f64], count: f64, momentum: f64) {
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mut g = self.inner.lock().expect("running stats lock");
        for c in 0..self.channels {
            g.0[c] = momentum * g.0[c] + (1.0 - momentum) * mean[c];
            g.1[c] = momentum * g.1[c] + (1.0 - momentum) * var[c] * unbias;
        }
    }

    pub fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.lock().expect("running stats lock").clone()
    }

    pub fn set(&self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.channels);
        assert_eq!(var.len(), self.channels);
        *self.inner.lock().expect("running stats lock") = (mean, var);
    }
}

impl Clone for RunningStats {
    fn clone(&self) -> Self {
        Self {
            inner: Mutex::new(self.snapshot()),
            channels: self.channels,
        }
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Order-sensitive fingerprint of all parameter bits.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.params() {
            for v in p.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn set_trainable(&mut self, flag: bool) {
        for (_, p) in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }
}

/// Prefixes names of a child module's tensors.
pub fn scoped<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("layer shape").with_grad()
}

/// Fully connected layer, `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: uniform_tensor(&[fan_in, fan_out], bound, rng),
            b: uniform_tensor(&[fan_out], bound, rng),
        }
    }

    /// Scales the initial weights, e.g. to start a policy head near uniform.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.w.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.b.data_mut().iter_mut().for_each(|v| *v *= factor);
        self
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.dense(x, w, b)
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// 2-D convolution, kernel `[c_out, c_in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub k: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self {
            k: uniform_tensor(&[c_out, c_in, kernel, kernel], bound, rng),
            b: uniform_tensor(&[c_out], bound, rng),
            stride,
            pad,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let k = tape.param(&self.k);
        let b = tape.param(&self.b);
        tape.conv2d(x, k, Some(b), self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("k".into(), &self.k), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("k".into(), &mut self.k), ("b".into(), &mut self.b)]
    }
}

/// Transposed 2-D convolution, kernel `[c_in, c_out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub k: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        Self {
            k: uniform_tensor(&[c_in, c_out, kernel, kernel], bound, rng),
            b: uniform_tensor(&[c_out], bound, rng),
            stride,
            pad,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let k = tape.param(&self.k);
        let b = tape.param(&self.b);
        tape.conv_transpose2d(x, k, Some(b), self.stride, self.pad)
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("k".into(), &self.k), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("k".into(), &mut self.k), ("b".into(), &mut self.b)]
    }
}

/// Batch normalization over `[n, c]` or `[n, c, h, w]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running: RunningStats::new(channels),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.batch_norm(x, g, b, &self.running, mode, BN_MOMENTUM, BN_EPS)
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        vec![("running".into(), &self.running)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let s = RunningStats::new(1);
        s.update(&[2.0], &[1.0], 2.0, 0.9);
        let (m, v) = s.snapshot();
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert!((v[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded() {
        let a = Dense::new(5, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let b = Dense::new(5, 3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.checksum(), b.checksum());
        let c = Dense::new(5, 3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_ne!(a.checksum(), c.checksum());
    }
}
