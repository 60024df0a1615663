//! Conditional VAE-GAN and a baseline conditional GAN over phantom frames.
//!
//! The condition is the 12-value normalized [`PoseCondition`]. It enters
//! the generator once, concatenated with the latent vector, and reaches
//! the discriminator through its own embedding joined to the image
//! features at the final layer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sonorl_tensor::{
    checkpoint, scoped, sigmoid, Adam, AdamConfig, BatchNorm, Conv2d, ConvTranspose2d, Dense, Mode, Module,
    RunningStats, Tape, Tensor, Var,
};

use crate::env::ImageSource;
use crate::error::{Result, SonoError};
use crate::frame::{stack, Frame};
use crate::phantom::{speckle_seed, PoseCondition, NUM_PARAMS};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeGanConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Channel widths of the three stride-2 stages.
    pub channels: [usize; 3],
    pub cond_embed: usize,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    /// Weight on the generator's adversarial term.
    pub lambda_adv: f64,
    /// Target used for real samples in the discriminator loss.
    pub real_label: f64,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VaeGanConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_dim: 100,
            channels: [16, 32, 64],
            cond_embed: 32,
            lambda_rec: 10.0,
            lambda_kl: 0.1,
            lambda_adv: 1.0,
            real_label: 0.9,
            lr: 1e-4,
            beta1: 0.5,
            batch_size: 8,
            epochs: 100,
            seed: 5,
        }
    }
}

impl VaeGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(SonoError::Config(format!(
                "generator image size must be a multiple of 8 and >= 16, got {}",
                self.image_size
            )));
        }
        if self.batch_size < 2 || self.latent_dim == 0 {
            return Err(SonoError::Config("batch_size must be >= 2 and latent_dim > 0".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        self.image_size / 8
    }
}

/// Per-step or per-epoch losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
}

impl LossReport {
    fn check(self) -> Result<Self> {
        for (name, v) in [
            ("reconstruction", self.reconstruction),
            ("kl", self.kl),
            ("adversarial_g", self.adversarial_g),
            ("adversarial_d", self.adversarial_d),
        ] {
            if !v.is_finite() {
                return Err(SonoError::PoisonedLoss(name.into()));
            }
        }
        Ok(self)
    }
}

pub fn write_loss_csv(reports: &[LossReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,reconstruction,kl,adversarial_g,adversarial_d")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.reconstruction, r.kl, r.adversarial_g, r.adversarial_d
        )?;
    }
    Ok(())
}

/// `z = mu + exp(logvar / 2) * eps` with `eps` drawn from `rng`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `-0.5 * sum(1 + logvar - mu^2 - exp(logvar)) / batch`.
pub fn kl_loss(mu: &[f64], logvar: &[f64], batch: usize) -> f64 {
    let s: f64 = mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum();
    -0.5 * s / batch.max(1) as f64
}

fn kl_on_tape(tape: &mut Tape<'_>, mu: Var, logvar: Var, batch: usize) -> Result<Var> {
    let e = tape.exp(logvar);
    let m2 = tape.square(mu);
    let a = tape.sub(logvar, m2)?;
    let a = tape.sub(a, e)?;
    let a = tape.add_scalar(a, 1.0);
    let s = tape.sum(a);
    Ok(tape.scale(s, -0.5 / batch as f64))
}

fn cond_tensor(conds: &[&PoseCondition]) -> Result<Tensor> {
    Ok(Tensor::new(
        &[conds.len(), NUM_PARAMS],
        conds.iter().flat_map(|c| c.values).collect(),
    )?)
}

fn frames_from(tape: &Tape<'_>, v: Var, size: usize) -> Result<Vec<Frame>> {
    tape.value(v)
        .chunks(size * size)
        .map(|c| Frame::new(size, c.to_vec()))
        .collect()
}

/// Three stride-2 conv stages with leaky ReLU; batch norm after all but
/// the first.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub convs: [Conv2d; 3],
    pub bns: [BatchNorm; 2],
    pub out_dim: usize,
}

impl ConvStack {
    fn new(cfg: &VaeGanConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let b = cfg.bottleneck();
        Self {
            convs: [
                Conv2d::new(1, c[0], 4, 2, 1, rng),
                Conv2d::new(c[0], c[1], 4, 2, 1, rng),
                Conv2d::new(c[1], c[2], 4, 2, 1, rng),
            ],
            bns: [BatchNorm::new(c[1]), BatchNorm::new(c[2])],
            out_dim: c[2] * b * b,
        }
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.convs[0].forward(tape, x)?;
        h = tape.leaky_relu(h, SLOPE);
        for (c, b) in self.convs[1..].iter().zip(&self.bns) {
            h = c.forward(tape, h)?;
            h = b.forward(tape, h, mode)?;
            h = tape.leaky_relu(h, SLOPE);
        }
        Ok(tape.flatten(h)?)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(scoped(&format!("conv{i}"), c.params()));
        }
        for (i, b) in self.bns.iter().enumerate() {
            v.extend(scoped(&format!("bn{i}"), b.params()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.extend(scoped(&format!("conv{i}"), c.params_mut()));
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            v.extend(scoped(&format!("bn{i}"), b.params_mut()));
        }
        v
    }

    fn named_buffers(&self) -> Vec<(String, &RunningStats)> {
        self.bns
            .iter()
            .enumerate()
            .flat_map(|(i, b)| scoped(&format!("bn{i}"), b.buffers()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct VaeEncoder {
    pub stack: ConvStack,
    pub mu: Dense,
    pub logvar: Dense,
    pub image_size: usize,
}

impl VaeEncoder {
    pub fn new(cfg: &VaeGanConfig, rng: &mut ChaCha8Rng) -> Self {
        let stack = ConvStack::new(cfg, rng);
        let d = stack.out_dim;
        Self {
            mu: Dense::new(d, cfg.latent_dim, rng),
            logvar: Dense::new(d, cfg.latent_dim, rng).scaled(0.1),
            stack,
            image_size: cfg.image_size,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = self.image_size;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(SonoError::Contract(format!(
                "encoder expects [n, 1, {s}, {s}] input, got {shape:?}"
            )));
        }
        let h = self.stack.forward(tape, x, mode)?;
        Ok((self.mu.forward(tape, h)?, self.logvar.forward(tape, h)?))
    }
}

impl Module for VaeEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.stack.named_params();
        v.extend(scoped("mu", self.mu.params()));
        v.extend(scoped("logvar", self.logvar.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.stack.named_params_mut();
        v.extend(scoped("mu", self.mu.params_mut()));
        v.extend(scoped("logvar", self.logvar.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        self.stack.named_buffers()
    }
}

/// Dense projection of `[z || c]` to a `c2 x s/8 x s/8` map followed by
/// three stride-2 transposed convolutions and tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    pub proj: Dense,
    pub bn0: BatchNorm,
    pub ups: [ConvTranspose2d; 3],
    pub bns: [BatchNorm; 2],
    pub latent_dim: usize,
    pub image_size: usize,
    channels: [usize; 3],
}

/// Initial gain on the projection rows fed by `z`. The posterior stays
/// close to the prior, so early on `z` is mostly noise that would swamp
/// the 12 condition inputs.
const LATENT_INIT_GAIN: f64 = 0.1;

impl Generator {
    pub fn new(cfg: &VaeGanConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let b = cfg.bottleneck();
        let fan_in = cfg.latent_dim + NUM_PARAMS;
        let mut proj = Dense::new(fan_in, c[2] * b * b, rng);
        // condition rows get the bound they would have with their own fan-in
        let cond_gain = (fan_in as f64 / NUM_PARAMS as f64).sqrt();
        let out = proj.fan_out();
        for (i, w) in proj.w.data_mut().iter_mut().enumerate() {
            *w *= if i / out < cfg.latent_dim { LATENT_INIT_GAIN } else { cond_gain };
        }
        Self {
            proj,
            bn0: BatchNorm::new(c[2]),
            ups: [
                ConvTranspose2d::new(c[2], c[1], 4, 2, 1, rng),
                ConvTranspose2d::new(c[1], c[0], 4, 2, 1, rng),
                ConvTranspose2d::new(c[0], 1, 4, 2, 1, rng),
            ],
            bns: [BatchNorm::new(c[1]), BatchNorm::new(c[0])],
            latent_dim: cfg.latent_dim,
            image_size: cfg.image_size,
            channels: c,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + NUM_PARAMS
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, z: Var, c: Var, mode: Mode) -> Result<Var> {
        let n = tape.shape(z)[0];
        if tape.shape(z) != [n, self.latent_dim] {
            return Err(SonoError::Contract(format!(
                "latent batch must be [n, {}], got {:?}",
                self.latent_dim,
                tape.shape(z)
            )));
        }
        let b = self.image_size / 8;
        let zc = tape.concat_cols(z, c)?;
        let mut h = self.proj.forward(tape, zc)?;
        h = tape.reshape(h, &[n, self.channels[2], b, b])?;
        h = self.bn0.forward(tape, h, mode)?;
        h = tape.relu(h);
        for (u, bn) in self.ups[..2].iter().zip(&self.bns) {
            h = u.forward(tape, h)?;
            h = bn.forward(tape, h, mode)?;
            h = tape.relu(h);
        }
        h = self.ups[2].forward(tape, h)?;
        Ok(tape.tanh(h))
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = scoped("proj", self.proj.params());
        v.extend(scoped("bn0", self.bn0.params()));
        for (i, u) in self.ups.iter().enumerate() {
            v.extend(scoped(&format!("up{i}"), u.params()));
        }
        for (i, b) in self.bns.iter().enumerate() {
            v.extend(scoped(&format!("bn{}", i + 1), b.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped("proj", self.proj.params_mut());
        v.extend(scoped("bn0", self.bn0.params_mut()));
        for (i, u) in self.ups.iter_mut().enumerate() {
            v.extend(scoped(&format!("up{i}"), u.params_mut()));
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            v.extend(scoped(&format!("bn{}", i + 1), b.params_mut()));
        }
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        let mut v = scoped("bn0", self.bn0.buffers());
        for (i, b) in self.bns.iter().enumerate() {
            v.extend(scoped(&format!("bn{}", i + 1), b.buffers()));
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stack: ConvStack,
    pub embed: [Dense; 2],
    pub out: Dense,
}

impl Discriminator {
    pub fn new(cfg: &VaeGanConfig, rng: &mut ChaCha8Rng) -> Self {
        let stack = ConvStack::new(cfg, rng);
        let d = stack.out_dim;
        Self {
            embed: [
                Dense::new(NUM_PARAMS, cfg.cond_embed, rng),
                Dense::new(cfg.cond_embed, cfg.cond_embed, rng),
            ],
            out: Dense::new(d + cfg.cond_embed, 1, rng),
            stack,
        }
    }

    /// Realness logits `[n, 1]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, c: Var, mode: Mode) -> Result<Var> {
        let img = self.stack.forward(tape, x, mode)?;
        let mut e = self.embed[0].forward(tape, c)?;
        e = tape.leaky_relu(e, SLOPE);
        e = self.embed[1].forward(tape, e)?;
        e = tape.leaky_relu(e, SLOPE);
        let h = tape.concat_cols(img, e)?;
        Ok(self.out.forward(tape, h)?)
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.stack.named_params();
        v.extend(scoped("embed0", self.embed[0].params()));
        v.extend(scoped("embed1", self.embed[1].params()));
        v.extend(scoped("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let [e0, e1] = &mut self.embed;
        let mut v = self.stack.named_params_mut();
        v.extend(scoped("embed0", e0.params_mut()));
        v.extend(scoped("embed1", e1.params_mut()));
        v.extend(scoped("out", self.out.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        self.stack.named_buffers()
    }
}

/// Anything that maps latent codes and conditions to frames.
pub trait ConditionalGenerator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn image_size(&self) -> usize;
    fn generate(&self, z: &[Vec<f64>], conds: &[&PoseCondition]) -> Result<Vec<Frame>>;
    fn discriminate(&self, frames: &[&Frame], conds: &[&PoseCondition]) -> Result<Vec<f64>>;
}

fn generate_with(g: &Generator, z: &[Vec<f64>], conds: &[&PoseCondition]) -> Result<Vec<Frame>> {
    if z.len() != conds.len() {
        return Err(SonoError::Contract(format!(
            "{} latent codes for {} conditions",
            z.len(),
            conds.len()
        )));
    }
    if let Some(bad) = z.iter().find(|v| v.len() != g.latent_dim) {
        return Err(SonoError::Contract(format!(
            "latent code of length {} where {} is expected",
            bad.len(),
            g.latent_dim
        )));
    }
    let mut tape = Tape::no_grad();
    let zv = tape.constant_from(&[z.len(), g.latent_dim], z.concat())?;
    let cv = tape.constant(cond_tensor(conds)?);
    let y = g.forward(&mut tape, zv, cv, Mode::Eval)?;
    frames_from(&tape, y, g.image_size)
}

fn discriminate_with(d: &Discriminator, frames: &[&Frame], conds: &[&PoseCondition]) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(stack(frames)?);
    let c = tape.constant(cond_tensor(conds)?);
    let y = d.forward(&mut tape, x, c, Mode::Eval)?;
    Ok(tape.value(y).iter().map(|&l| sigmoid(l)).collect())
}

fn prior(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

/// One discriminator update on real frames against generator samples;
/// returns the loss `0.5 * (BCE(real, label) + BCE(fake, 0))`.
fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor,
    fake: Tensor,
    cond: &Tensor,
    real_label: f64,
) -> Result<f64> {
    let loss_value;
    {
        let mut tape = Tape::new();
        let x = tape.constant(real.clone());
        let c = tape.constant(cond.clone());
        let lr = d.forward(&mut tape, x, c, Mode::Train)?;
        let l_real = tape.bce_with_logits(lr, real_label);
        let f = tape.constant(fake);
        let c2 = tape.constant(cond.clone());
        let lf = d.forward(&mut tape, f, c2, Mode::Train)?;
        let l_fake = tape.bce_with_logits(lf, 0.0);
        let sum = tape.add(l_real, l_fake)?;
        let loss = tape.scale(sum, 0.5);
        loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(SonoError::PoisonedLoss("adversarial_d".into()));
        }
        tape.backward(loss)?;
    }
    opt.step(d)?;
    Ok(loss_value)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn average(reports: &[LossReport], epoch: usize) -> LossReport {
    let n = reports.len().max(1) as f64;
    LossReport {
        epoch,
        reconstruction: reports.iter().map(|r| r.reconstruction).sum::<f64>() / n,
        kl: reports.iter().map(|r| r.kl).sum::<f64>() / n,
        adversarial_g: reports.iter().map(|r| r.adversarial_g).sum::<f64>() / n,
        adversarial_d: reports.iter().map(|r| r.adversarial_d).sum::<f64>() / n,
    }
}

/// A training example: frame and its normalized condition.
pub type Pair<'a> = (&'a Frame, &'a PoseCondition);

fn check_batch(pairs: &[Pair<'_>], size: usize) -> Result<(Tensor, Tensor)> {
    if pairs.len() < 2 {
        return Err(SonoError::Contract(format!("train step needs a batch of >= 2, got {}", pairs.len())));
    }
    if let Some((f, _)) = pairs.iter().find(|(f, _)| f.size() != size) {
        return Err(SonoError::Contract(format!("expected {size}x{size} frames, got {0}x{0}", f.size())));
    }
    let frames: Vec<&Frame> = pairs.iter().map(|p| p.0).collect();
    let conds: Vec<&PoseCondition> = pairs.iter().map(|p| p.1).collect();
    Ok((stack(&frames)?, cond_tensor(&conds)?))
}

#[derive(Debug, Clone)]
pub struct VaeGan {
    pub encoder: VaeEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_e: Adam,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    pub cfg: VaeGanConfig,
}

impl VaeGan {
    pub fn new(cfg: VaeGanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = VaeEncoder::new(&cfg, &mut rng);
        let generator = Generator::new(&cfg, &mut rng);
        let discriminator = Discriminator::new(&cfg, &mut rng);
        let opt = || Adam::new(AdamConfig::new(cfg.lr, cfg.beta1));
        Ok(Self {
            encoder,
            generator,
            discriminator,
            opt_e: opt(),
            opt_g: opt(),
            opt_d: opt(),
            rng,
            cfg,
        })
    }

    /// Eval-mode `(mu, logvar)` per frame.
    pub fn encode(&self, frames: &[&Frame]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(stack(frames)?);
        let (mu, lv) = self.encoder.forward(&mut tape, x, Mode::Eval)?;
        let d = self.cfg.latent_dim;
        Ok(tape
            .value(mu)
            .chunks(d)
            .zip(tape.value(lv).chunks(d))
            .map(|(m, l)| (m.to_vec(), l.to_vec()))
            .collect())
    }

    /// Encoder, then generator on `mu`.
    pub fn reconstruct(&self, frames: &[&Frame], conds: &[&PoseCondition]) -> Result<Vec<Frame>> {
        let z: Vec<Vec<f64>> = self.encode(frames)?.into_iter().map(|(m, _)| m).collect();
        generate_with(&self.generator, &z, conds)
    }

    /// One discriminator update then one encoder+generator update.
    pub fn train_step(&mut self, pairs: &[Pair<'_>]) -> Result<LossReport> {
        let (real, cond) = check_batch(pairs, self.cfg.image_size)?;
        let n = pairs.len();
        let d = self.cfg.latent_dim;
        let zp = Tensor::new(&[n, d], prior(&mut self.rng, n, d))?;

        let fake = {
            let mut tape = Tape::no_grad();
            let z = tape.constant(zp.clone());
            let c = tape.constant(cond.clone());
            let y = self.generator.forward(&mut tape, z, c, Mode::Train)?;
            tape.tensor(y).clone()
        };
        let adv_d = discriminator_step(
            &mut self.discriminator,
            &mut self.opt_d,
            &real,
            fake,
            &cond,
            self.cfg.real_label,
        )?;

        let eps = Tensor::new(&[n, d], prior(&mut self.rng, n, d))?;
        let (rec, kl, adv_g);
        {
            let mut tape = Tape::new();
            let x = tape.constant(real);
            let (mu, lv) = self.encoder.forward(&mut tape, x, Mode::Train)?;
            let half = tape.scale(lv, 0.5);
            let sd = tape.exp(half);
            let e = tape.constant(eps);
            let noise = tape.mul(sd, e)?;
            let z = tape.add(mu, noise)?;
            let c = tape.constant(cond.clone());
            let xr = self.generator.forward(&mut tape, z, c, Mode::Train)?;
            let diff = tape.sub(xr, x)?;
            let ad = tape.abs(diff);
            let l_rec = tape.mean(ad);
            let l_kl = kl_on_tape(&mut tape, mu, lv, n)?;

            let zv = tape.constant(zp);
            let c2 = tape.constant(cond.clone());
            let xf = self.generator.forward(&mut tape, zv, c2, Mode::Train)?;
            let c3 = tape.constant(cond);
            let logits = self.discriminator.forward(&mut tape, xf, c3, Mode::Train)?;
            let l_adv = tape.bce_with_logits(logits, 1.0);

            let a = tape.scale(l_rec, self.cfg.lambda_rec);
            let b = tape.scale(l_kl, self.cfg.lambda_kl);
            let ab = tape.add(a, b)?;
            let c = tape.scale(l_adv, self.cfg.lambda_adv);
            let loss = tape.add(ab, c)?;
            rec = tape.scalar(l_rec);
            kl = tape.scalar(l_kl);
            adv_g = tape.scalar(l_adv);
            LossReport {
                epoch: 0,
                reconstruction: rec,
                kl,
                adversarial_g: adv_g,
                adversarial_d: adv_d,
            }
            .check()?;
            tape.backward(loss)?;
        }
        self.opt_e.step(&mut self.encoder)?;
        self.opt_g.step(&mut self.generator)?;
        self.discriminator.zero_grad();
        Ok(LossReport {
            epoch: 0,
            reconstruction: rec,
            kl,
            adversarial_g: adv_g,
            adversarial_d: adv_d,
        })
    }

    /// Runs `cfg.epochs` shuffled epochs; `on_epoch` sees each epoch mean.
    pub fn train(
        &mut self,
        data: &[Pair<'_>],
        mut on_epoch: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut steps = Vec::new();
            for b in shuffled_batches(data.len(), self.cfg.batch_size, &mut self.rng) {
                let batch: Vec<Pair<'_>> = b.iter().map(|&i| data[i]).collect();
                steps.push(self.train_step(&batch)?);
            }
            let r = average(&steps, epoch);
            on_epoch(&r);
            out.push(r);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.encoder, &dir.join("encoder.srl"))?;
        checkpoint::save(&self.generator, &dir.join("generator.srl"))?;
        checkpoint::save(&self.discriminator, &dir.join("discriminator.srl"))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        checkpoint::load(&mut self.encoder, &dir.join("encoder.srl"))?;
        checkpoint::load(&mut self.generator, &dir.join("generator.srl"))?;
        checkpoint::load(&mut self.discriminator, &dir.join("discriminator.srl"))?;
        Ok(())
    }
}

impl ConditionalGenerator for VaeGan {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn generate(&self, z: &[Vec<f64>], conds: &[&PoseCondition]) -> Result<Vec<Frame>> {
        generate_with(&self.generator, z, conds)
    }

    fn discriminate(&self, frames: &[&Frame], conds: &[&PoseCondition]) -> Result<Vec<f64>> {
        discriminate_with(&self.discriminator, frames, conds)
    }
}

/// Baseline conditional GAN with the same generator and discriminator.
#[derive(Debug, Clone)]
pub struct CGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    pub cfg: VaeGanConfig,
}

impl CGan {
    pub fn new(cfg: VaeGanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // skip the encoder draw so G and D start like the VAE-GAN's
        let _ = VaeEncoder::new(&cfg, &mut rng);
        let generator = Generator::new(&cfg, &mut rng);
        let discriminator = Discriminator::new(&cfg, &mut rng);
        let opt = || Adam::new(AdamConfig::new(cfg.lr, cfg.beta1));
        Ok(Self {
            generator,
            discriminator,
            opt_g: opt(),
            opt_d: opt(),
            rng,
            cfg,
        })
    }

    pub fn train_step(&mut self, pairs: &[Pair<'_>]) -> Result<LossReport> {
        let (real, cond) = check_batch(pairs, self.cfg.image_size)?;
        let n = pairs.len();
        let d = self.cfg.latent_dim;
        let zp = Tensor::new(&[n, d], prior(&mut self.rng, n, d))?;
        let fake = {
            let mut tape = Tape::no_grad();
            let z = tape.constant(zp.clone());
            let c = tape.constant(cond.clone());
            let y = self.generator.forward(&mut tape, z, c, Mode::Train)?;
            tape.tensor(y).clone()
        };
        let adv_d = discriminator_step(
            &mut self.discriminator,
            &mut self.opt_d,
            &real,
            fake,
            &cond,
            self.cfg.real_label,
        )?;
        let adv_g;
        {
            let mut tape = Tape::new();
            let z = tape.constant(zp);
            let c = tape.constant(cond.clone());
            let xf = self.generator.forward(&mut tape, z, c, Mode::Train)?;
            let c2 = tape.constant(cond);
            let logits = self.discriminator.forward(&mut tape, xf, c2, Mode::Train)?;
            let loss = tape.bce_with_logits(logits, 1.0);
            adv_g = tape.scalar(loss);
            if !adv_g.is_finite() {
                return Err(SonoError::PoisonedLoss("adversarial_g".into()));
            }
            tape.backward(loss)?;
        }
        self.opt_g.step(&mut self.generator)?;
        self.discriminator.zero_grad();
        Ok(LossReport {
            epoch: 0,
            reconstruction: 0.0,
            kl: 0.0,
            adversarial_g: adv_g,
            adversarial_d: adv_d,
        })
    }

    pub fn train(
        &mut self,
        data: &[Pair<'_>],
        mut on_epoch: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut steps = Vec::new();
            for b in shuffled_batches(data.len(), self.cfg.batch_size, &mut self.rng) {
                let batch: Vec<Pair<'_>> = b.iter().map(|&i| data[i]).collect();
                steps.push(self.train_step(&batch)?);
            }
            let r = average(&steps, epoch);
            on_epoch(&r);
            out.push(r);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.generator, &dir.join("generator.srl"))?;
        checkpoint::save(&self.discriminator, &dir.join("discriminator.srl"))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        checkpoint::load(&mut self.generator, &dir.join("generator.srl"))?;
        checkpoint::load(&mut self.discriminator, &dir.join("discriminator.srl"))?;
        Ok(())
    }
}

impl ConditionalGenerator for CGan {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn generate(&self, z: &[Vec<f64>], conds: &[&PoseCondition]) -> Result<Vec<Frame>> {
        generate_with(&self.generator, z, conds)
    }

    fn discriminate(&self, frames: &[&Frame], conds: &[&PoseCondition]) -> Result<Vec<f64>> {
        discriminate_with(&self.discriminator, frames, conds)
    }
}

/// Seeded prior draws, one latent vector per row.
pub fn sample_latents(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| prior(&mut rng, 1, dim)).collect()
}

/// Generated frames as an environment image source. The latent code is
/// drawn from a seed tied to the pose so a pose always yields the same
/// frame; frames are resized to `output_size`.
pub struct GeneratorSource {
    pub model: Arc<dyn ConditionalGenerator>,
    pub output_size: usize,
    pub seed: u64,
}

impl ImageSource for GeneratorSource {
    fn frame(&self, c: &PoseCondition) -> Result<Frame> {
        let z = sample_latents(1, self.model.latent_dim(), speckle_seed(self.seed, &c.pose()));
        let f = self.model.generate(&z, &[c])?.remove(0);
        Ok(if f.size() == self.output_size {
            f
        } else {
            f.resized(self.output_size)
        })
    }
}

/// Mean of `xs` over a trailing window, one value per index.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    crate::ppo::trailing_mean(xs, window)
}

/// Whether the means of consecutive non-overlapping windows strictly
/// decrease.
pub fn window_means_decreasing(xs: &[f64], window: usize) -> bool {
    let means: Vec<f64> = xs
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    means.len() >= 2 && means.windows(2).all(|w| w[1] < w[0])
}

pub fn save_losses(reports: &[LossReport], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_loss_csv(reports, &mut w)?;
    w.flush()?;
    Ok(())
}
