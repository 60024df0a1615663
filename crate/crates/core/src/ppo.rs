//! Proximal policy optimization with separate actor and critic networks.
//!
//! Batch norm in the image trunk always runs in eval mode when computing
//! log-probabilities and values, so the ratio of a freshly collected batch
//! is exactly 1 on the first epoch. Running statistics are refreshed with
//! train-mode passes over the buffer once each update has finished.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sonorl_tensor::{
    checkpoint, scoped, softmax_in_place, Adam, AdamConfig, BatchNorm, Conv2d, Dense, Mode, Module, RunningStats,
    Tape, Tensor, Var,
};

use crate::env::{Action, Env, EnvState, StepRecord, Trajectory, NUM_ACTIONS};
use crate::error::{Result, SonoError};
use crate::frame::{stack, Frame};
use crate::phantom::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateVariant {
    Image,
    Params,
    Multimodal,
}

impl StateVariant {
    pub const ALL: [StateVariant; 3] = [StateVariant::Image, StateVariant::Params, StateVariant::Multimodal];

    pub fn name(self) -> &'static str {
        match self {
            StateVariant::Image => "image",
            StateVariant::Params => "params",
            StateVariant::Multimodal => "multimodal",
        }
    }

    fn uses_image(self) -> bool {
        self != StateVariant::Params
    }

    fn uses_params(self) -> bool {
        self != StateVariant::Image
    }
}

impl std::str::FromStr for StateVariant {
    type Err = SonoError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SonoError::Config(format!("unknown state variant `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub variant: StateVariant,
    pub total_timesteps: usize,
    pub update_every: usize,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    pub validate_every: usize,
    pub validate_episodes: usize,
    pub validation_seed: u64,
    pub max_episode_length: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            variant: StateVariant::Image,
            total_timesteps: 300_000,
            update_every: 2048,
            epochs_per_update: 5,
            minibatch_size: 256,
            clip: 0.2,
            gamma: 0.95,
            gae_lambda: 0.95,
            lr_actor: 2e-5,
            lr_critic: 1e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(0.5),
            normalize_advantages: true,
            validate_every: 10_000,
            validate_episodes: 100,
            validation_seed: 0xA11CE,
            max_episode_length: 200,
            channels: vec![8, 16, 16],
            hidden: 64,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Desk-scale settings: the default schedule with learning rates
    /// raised so a 300k-step budget is enough to learn the task.
    pub fn desk() -> Self {
        Self {
            lr_actor: 1e-4,
            lr_critic: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(SonoError::Config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SonoError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.update_every < 2 || self.minibatch_size < 2 || self.channels.len() != 3 {
            return Err(SonoError::Config(
                "update_every and minibatch_size must be >= 2 and channels must list 3 sizes".into(),
            ));
        }
        Ok(())
    }
}

/// What the agent sees at one step.
#[derive(Debug, Clone)]
pub struct Obs {
    pub frame: Frame,
    pub pose: Pose,
}

impl Obs {
    pub fn from_state(s: &EnvState) -> Self {
        Self {
            frame: s.frame.clone(),
            pose: s.pose,
        }
    }
}

/// conv k4 s4 → conv k4 s2 p1 → conv k3 s2 p1, each with batch norm and
/// ReLU, flattened.
#[derive(Debug, Clone)]
pub struct ImageTrunk {
    pub convs: [Conv2d; 3],
    pub bns: [BatchNorm; 3],
    pub out_dim: usize,
}

impl ImageTrunk {
    pub fn new(image_size: usize, ch: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if !image_size.is_multiple_of(16) {
            return Err(SonoError::Config(format!(
                "policy image size must be a multiple of 16, got {image_size}"
            )));
        }
        let side = image_size / 16;
        Ok(Self {
            convs: [
                Conv2d::new(1, ch[0], 4, 4, 0, rng),
                Conv2d::new(ch[0], ch[1], 4, 2, 1, rng),
                Conv2d::new(ch[1], ch[2], 3, 2, 1, rng),
            ],
            bns: [BatchNorm::new(ch[0]), BatchNorm::new(ch[1]), BatchNorm::new(ch[2])],
            out_dim: ch[2] * side * side,
        })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (c, b) in self.convs.iter().zip(&self.bns) {
            h = c.forward(tape, h)?;
            h = b.forward(tape, h, mode)?;
            h = tape.relu(h);
        }
        Ok(tape.flatten(h)?)
    }
}

#[derive(Debug, Clone)]
pub struct ParamTrunk {
    pub l1: Dense,
    pub l2: Dense,
}

impl ParamTrunk {
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, h)?;
        Ok(tape.relu(h))
    }
}

/// Actor or critic: trunk(s), a hidden dense layer and a linear head.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub variant: StateVariant,
    pub image_size: usize,
    pub image: Option<ImageTrunk>,
    pub params: Option<ParamTrunk>,
    pub hidden: Dense,
    pub head: Dense,
}

impl PolicyNet {
    pub fn new(
        variant: StateVariant,
        image_size: usize,
        channels: &[usize],
        hidden: usize,
        outputs: usize,
        head_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let image = if variant.uses_image() {
            Some(ImageTrunk::new(image_size, channels, rng)?)
        } else {
            None
        };
        let params = variant.uses_params().then(|| ParamTrunk {
            l1: Dense::new(6, hidden, rng),
            l2: Dense::new(hidden, hidden, rng),
        });
        let feat = image.as_ref().map_or(0, |t| t.out_dim) + params.as_ref().map_or(0, |_| hidden);
        Ok(Self {
            variant,
            image_size,
            image,
            params,
            hidden: Dense::new(feat, hidden, rng),
            head: Dense::new(hidden, outputs, rng).scaled(head_scale),
        })
    }

    /// Raw head outputs for an image batch `[n, 1, s, s]` and/or a pose
    /// batch `[n, 6]`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        image: Option<Var>,
        pose: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        let img_feat = match (&self.image, image) {
            (Some(t), Some(x)) => Some(t.forward(tape, x, mode)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(SonoError::Contract(format!(
                    "{} policy needs an image input",
                    self.variant.name()
                )))
            }
        };
        let par_feat = match (&self.params, pose) {
            (Some(t), Some(x)) => Some(t.forward(tape, x)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(SonoError::Contract(format!(
                    "{} policy needs a pose input",
                    self.variant.name()
                )))
            }
        };
        let feat = match (img_feat, par_feat) {
            (Some(a), Some(b)) => tape.concat_cols(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("every variant has a trunk"),
        };
        let h = self.hidden.forward(tape, feat)?;
        let h = tape.relu(h);
        Ok(self.head.forward(tape, h)?)
    }

    /// Input tensors for a batch of observations.
    pub fn encode(&self, obs: &[&Obs]) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let image = if self.image.is_some() {
            let frames: Vec<&Frame> = obs.iter().map(|o| &o.frame).collect();
            if let Some(f) = frames.iter().find(|f| f.size() != self.image_size) {
                return Err(SonoError::Contract(format!(
                    "policy expects {0}x{0} frames, got {1}x{1}",
                    self.image_size,
                    f.size()
                )));
            }
            Some(stack(&frames)?)
        } else {
            None
        };
        let pose = if self.params.is_some() {
            Some(Tensor::new(
                &[obs.len(), 6],
                obs.iter().flat_map(|o| o.pose.iter().copied()).collect(),
            )?)
        } else {
            None
        };
        Ok((image, pose))
    }

    /// Eval-mode outputs, one row per observation.
    pub fn outputs(&self, obs: &[&Obs]) -> Result<Vec<Vec<f64>>> {
        let (img, pose) = self.encode(obs)?;
        let mut tape = Tape::no_grad();
        let iv = img.map(|t| tape.constant(t));
        let pv = pose.map(|t| tape.constant(t));
        let y = self.forward(&mut tape, iv, pv, Mode::Eval)?;
        let cols = self.head.fan_out();
        Ok(tape.value(y).chunks(cols).map(<[f64]>::to_vec).collect())
    }

    /// Train-mode passes without gradients, folding batch statistics into
    /// the running averages.
    pub fn refresh_batch_norm(&self, obs: &[&Obs], batch: usize) -> Result<()> {
        if self.image.is_none() {
            return Ok(());
        }
        for chunk in obs.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
            let (img, pose) = self.encode(chunk)?;
            let mut tape = Tape::no_grad();
            let iv = img.map(|t| tape.constant(t));
            let pv = pose.map(|t| tape.constant(t));
            self.forward(&mut tape, iv, pv, Mode::Train)?;
        }
        Ok(())
    }
}

impl Module for PolicyNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        if let Some(t) = &self.image {
            for (i, (c, b)) in t.convs.iter().zip(&t.bns).enumerate() {
                v.extend(scoped(&format!("image.conv{i}"), c.params()));
                v.extend(scoped(&format!("image.bn{i}"), b.params()));
            }
        }
        if let Some(t) = &self.params {
            v.extend(scoped("params.l1", t.l1.params()));
            v.extend(scoped("params.l2", t.l2.params()));
        }
        v.extend(scoped("hidden", self.hidden.params()));
        v.extend(scoped("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.image {
            for (i, (c, b)) in t.convs.iter_mut().zip(t.bns.iter_mut()).enumerate() {
                v.extend(scoped(&format!("image.conv{i}"), c.params_mut()));
                v.extend(scoped(&format!("image.bn{i}"), b.params_mut()));
            }
        }
        if let Some(t) = &mut self.params {
            v.extend(scoped("params.l1", t.l1.params_mut()));
            v.extend(scoped("params.l2", t.l2.params_mut()));
        }
        v.extend(scoped("hidden", self.hidden.params_mut()));
        v.extend(scoped("head", self.head.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        self.image
            .iter()
            .flat_map(|t| {
                t.bns
                    .iter()
                    .enumerate()
                    .flat_map(|(i, b)| scoped(&format!("image.bn{i}"), b.buffers()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Argmax,
}

#[derive(Debug, Clone, Copy)]
pub struct Selection {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub probs: [f64; NUM_ACTIONS],
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Per-step experience, cleared after every update.
#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub obs: Vec<Obs>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, obs: Obs, action: usize, log_prob: f64, reward: f64, value: f64, done: bool) {
        self.obs.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Generalized advantage estimation.
///
/// `values` holds one more entry than `rewards`: the bootstrap value of the
/// state after the last step. Returns raw advantages and `Â + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(SonoError::Contract(format!(
            "gae needs {n} dones and {} values, got {} and {}",
            n + 1,
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    if v.len() < 2 {
        return;
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ValidationRow {
    pub timestep: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub timestep: usize,
    pub reward: f64,
    pub length: usize,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub actor: PolicyNet,
    pub critic: PolicyNet,
    pub opt_actor: Adam,
    pub opt_critic: Adam,
    pub cfg: PpoConfig,
}

impl PpoAgent {
    pub fn new(cfg: PpoConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = PolicyNet::new(cfg.variant, image_size, &cfg.channels, cfg.hidden, NUM_ACTIONS, 0.01, &mut rng)?;
        let critic = PolicyNet::new(cfg.variant, image_size, &cfg.channels, cfg.hidden, 1, 1.0, &mut rng)?;
        let mut ac = AdamConfig::new(cfg.lr_actor, 0.9);
        let mut cc = AdamConfig::new(cfg.lr_critic, 0.9);
        if let Some(g) = cfg.max_grad_norm {
            ac = ac.with_max_grad_norm(g);
            cc = cc.with_max_grad_norm(g);
        }
        Ok(Self {
            actor,
            critic,
            opt_actor: Adam::new(ac),
            opt_critic: Adam::new(cc),
            cfg,
        })
    }

    pub fn probs(&self, obs: &[&Obs]) -> Result<Vec<[f64; NUM_ACTIONS]>> {
        Ok(self
            .actor
            .outputs(obs)?
            .into_iter()
            .map(|mut row| {
                softmax_in_place(&mut row);
                let mut p = [0.0; NUM_ACTIONS];
                p.copy_from_slice(&row);
                p
            })
            .collect())
    }

    pub fn value(&self, obs: &Obs) -> Result<f64> {
        Ok(self.critic.outputs(&[obs])?[0][0])
    }

    pub fn select_action(&self, obs: &Obs, rng: &mut ChaCha8Rng, mode: SelectMode) -> Result<Selection> {
        let probs = self.probs(&[obs])?[0];
        let idx = match mode {
            SelectMode::Argmax => {
                let mut best = 0;
                for i in 1..NUM_ACTIONS {
                    if probs[i] > probs[best] {
                        best = i;
                    }
                }
                best
            }
            SelectMode::Sample => WeightedIndex::new(probs)
                .map_err(|e| SonoError::Numerical(format!("policy distribution: {e}")))?
                .sample(rng),
        };
        Ok(Selection {
            action: Action::from_index(idx).expect("action index"),
            log_prob: probs[idx].max(f64::MIN_POSITIVE).ln(),
            value: self.value(obs)?,
            probs,
        })
    }

    /// Clipped-surrogate update over a full buffer, then clears it.
    pub fn update(&mut self, buf: &mut RolloutBuffer, bootstrap_value: f64) -> Result<UpdateReport> {
        let n = buf.len();
        if n < self.cfg.update_every {
            return Err(SonoError::Contract(format!(
                "update needs {} buffered steps, got {n}",
                self.cfg.update_every
            )));
        }
        let mut values = buf.values.clone();
        values.push(bootstrap_value);
        let (mut adv, returns) = compute_gae(&buf.rewards, &values, &buf.dones, self.cfg.gamma, self.cfg.gae_lambda)?;
        if self.cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.opt_actor.state.step + 1).wrapping_mul(0x9E37));
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rep = UpdateReport::default();
        let mut count = 0usize;
        for _ in 0..self.cfg.epochs_per_update {
            idx.shuffle(&mut rng);
            for mb in idx.chunks(self.cfg.minibatch_size) {
                let r = self.minibatch_step(buf, &adv, &returns, mb)?;
                rep.policy_loss += r.policy_loss;
                rep.value_loss += r.value_loss;
                rep.entropy += r.entropy;
                rep.clip_fraction += r.clip_fraction;
                rep.approx_kl += r.approx_kl;
                count += 1;
            }
        }
        let k = count.max(1) as f64;
        rep.policy_loss /= k;
        rep.value_loss /= k;
        rep.entropy /= k;
        rep.clip_fraction /= k;
        rep.approx_kl /= k;
        let obs: Vec<&Obs> = buf.obs.iter().collect();
        self.actor.refresh_batch_norm(&obs, self.cfg.minibatch_size)?;
        self.critic.refresh_batch_norm(&obs, self.cfg.minibatch_size)?;
        buf.clear();
        Ok(rep)
    }

    fn minibatch_step(
        &mut self,
        buf: &RolloutBuffer,
        adv: &[f64],
        returns: &[f64],
        mb: &[usize],
    ) -> Result<UpdateReport> {
        let b = mb.len();
        let obs: Vec<&Obs> = mb.iter().map(|&i| &buf.obs[i]).collect();
        let actions: Vec<usize> = mb.iter().map(|&i| buf.actions[i]).collect();
        let (img, pose) = self.actor.encode(&obs)?;
        let eps = self.cfg.clip;
        let mut rep = UpdateReport::default();
        {
            let mut tape = Tape::new();
            let iv = img.clone().map(|t| tape.constant(t));
            let pv = pose.clone().map(|t| tape.constant(t));
            let logits = self.actor.forward(&mut tape, iv, pv, Mode::Eval)?;
            let lp_all = tape.log_softmax(logits)?;
            let lp = tape.gather_rows(lp_all, &actions)?;
            let old = tape.constant_from(&[b], mb.iter().map(|&i| buf.log_probs[i]).collect())?;
            let a = tape.constant_from(&[b], mb.iter().map(|&i| adv[i]).collect())?;
            let diff = tape.sub(lp, old)?;
            let ratio = tape.exp(diff);
            let s1 = tape.mul(ratio, a)?;
            let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let s2 = tape.mul(clipped, a)?;
            let m = tape.minimum(s1, s2)?;
            let surr = tape.mean(m);
            let policy_loss = tape.scale(surr, -1.0);
            let p_all = tape.exp(lp_all);
            let plogp = tape.mul(p_all, lp_all)?;
            let neg_ent_sum = tape.sum(plogp);
            let neg_ent = tape.scale(neg_ent_sum, 1.0 / b as f64);
            let ent_term = tape.scale(neg_ent, self.cfg.entropy_coef);
            let loss = tape.add(policy_loss, ent_term)?;

            rep.policy_loss = tape.scalar(policy_loss);
            rep.entropy = -tape.scalar(neg_ent);
            let ratios = tape.value(ratio);
            let diffs = tape.value(diff);
            rep.clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > eps).count() as f64 / b as f64;
            rep.approx_kl = ratios.iter().zip(diffs).map(|(r, d)| (r - 1.0) - d).sum::<f64>() / b as f64;
            if !tape.scalar(loss).is_finite() {
                return Err(SonoError::PoisonedLoss("policy".into()));
            }
            tape.backward(loss)?;
        }
        self.opt_actor.step(&mut self.actor)?;
        {
            let mut tape = Tape::new();
            let iv = img.map(|t| tape.constant(t));
            let pv = pose.map(|t| tape.constant(t));
            let v = self.critic.forward(&mut tape, iv, pv, Mode::Eval)?;
            let v = tape.reshape(v, &[b])?;
            let target = tape.constant_from(&[b], mb.iter().map(|&i| returns[i]).collect())?;
            let d = tape.sub(v, target)?;
            let sq = tape.square(d);
            let mse = tape.mean(sq);
            rep.value_loss = tape.scalar(mse);
            if !rep.value_loss.is_finite() {
                return Err(SonoError::PoisonedLoss("value".into()));
            }
            let loss = tape.scale(mse, self.cfg.value_coef);
            tape.backward(loss)?;
        }
        self.opt_critic.step(&mut self.critic)?;
        Ok(rep)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.actor, &dir.join("actor.srl"))?;
        checkpoint::save(&self.critic, &dir.join("critic.srl"))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        checkpoint::load(&mut self.actor, &dir.join("actor.srl"))?;
        checkpoint::load(&mut self.critic, &dir.join("critic.srl"))?;
        Ok(())
    }
}

/// Plays one episode; `on_step` sees the action, outcome and new state.
pub fn run_episode(
    agent: &PpoAgent,
    env: &mut Env,
    rng: &mut ChaCha8Rng,
    mode: SelectMode,
    mut on_step: impl FnMut(Action, &crate::env::StepOutcome, &EnvState),
) -> Result<(f64, usize, bool)> {
    let mut obs = Obs::from_state(env.reset()?);
    let (mut reward, mut len) = (0.0, 0);
    loop {
        let sel = agent.select_action(&obs, rng, mode)?;
        let out = env.step(sel.action)?;
        let state = env.state().expect("state after step");
        on_step(sel.action, &out, state);
        reward += out.reward.total;
        len += 1;
        if out.done {
            return Ok((reward, len, out.success));
        }
        obs = Obs::from_state(state);
    }
}

/// Argmax rollouts from a fixed start sequence; parameters are untouched.
pub fn validate(agent: &PpoAgent, env: &mut Env, episodes: usize, seed: u64) -> Result<(f64, f64, f64)> {
    env.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r, mut l, mut s) = (0.0, 0.0, 0.0);
    for _ in 0..episodes {
        let (reward, len, success) = run_episode(agent, env, &mut rng, SelectMode::Argmax, |_, _, _| {})?;
        r += reward;
        l += len as f64;
        s += f64::from(u8::from(success));
    }
    let n = episodes.max(1) as f64;
    Ok((r / n, l / n, s / n))
}

/// One argmax episode recorded step by step; `seed` fixes both the start
/// pose and any sampling inside the environment.
pub fn rollout(agent: &PpoAgent, env: &mut Env, seed: u64) -> Result<Trajectory> {
    env.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = std::time::Instant::now();
    let mut records = Vec::new();
    let (_, _, success) = run_episode(agent, env, &mut rng, SelectMode::Argmax, |a, out, s| {
        records.push(StepRecord {
            t: records.len(),
            pose: s.pose,
            action: a.name().to_string(),
            reward: out.reward,
            p: out.p,
            g: out.g,
        });
    })?;
    Ok(Trajectory {
        records,
        success,
        elapsed_s: start.elapsed().as_secs_f64(),
        seed,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeRow>,
    pub validations: Vec<ValidationRow>,
    pub updates: Vec<UpdateReport>,
}

impl TrainLog {
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = BufWriter::new(File::create(dir.join("monitor.csv"))?);
        writeln!(m, "episode,timestep,reward,length,success")?;
        for e in &self.episodes {
            writeln!(m, "{},{},{},{},{}", e.episode, e.timestep, e.reward, e.length, u8::from(e.success))?;
        }
        m.flush()?;
        let mut v = BufWriter::new(File::create(dir.join("validation.csv"))?);
        writeln!(v, "timestep,mean_reward,mean_length,success_rate")?;
        for r in &self.validations {
            writeln!(v, "{},{},{},{}", r.timestep, r.mean_reward, r.mean_length, r.success_rate)?;
        }
        v.flush()?;
        Ok(())
    }
}

/// Progress callback: receives each validation row as it is produced.
pub type Progress<'a> = Option<&'a mut dyn FnMut(&ValidationRow)>;

/// Monitored PPO training.
///
/// Episodes run under the horizon `max_episode_length`; every
/// `update_every` global steps the buffer is consumed by an update; every
/// `validate_every` steps the argmax policy is validated on `val_env` and
/// the networks are checkpointed into `ckpt_dir` when given.
pub fn train(
    agent: &mut PpoAgent,
    env: &mut Env,
    val_env: &mut Env,
    ckpt_dir: Option<PathBuf>,
    mut progress: Progress<'_>,
) -> Result<TrainLog> {
    let cfg = agent.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7157);
    env.reseed(cfg.seed ^ 0xE4);
    let mut buf = RolloutBuffer::default();
    let mut log = TrainLog::default();
    let mut t = 0usize;
    while t < cfg.total_timesteps {
        let mut obs = Obs::from_state(env.reset()?);
        let mut ep_reward = 0.0;
        let mut success = false;
        let mut h = 0;
        while h < cfg.max_episode_length {
            h += 1;
            let sel = agent.select_action(&obs, &mut rng, SelectMode::Sample)?;
            let out = env.step(sel.action)?;
            t += 1;
            let next = Obs::from_state(env.state().expect("state after step"));
            buf.push(obs, sel.action.index(), sel.log_prob, out.reward.total, sel.value, out.done);
            ep_reward += out.reward.total;
            if t.is_multiple_of(cfg.update_every) {
                let boot = if out.done { 0.0 } else { agent.value(&next)? };
                let rep = agent.update(&mut buf, boot)?;
                log.updates.push(rep);
            }
            if t.is_multiple_of(cfg.validate_every) {
                let (r, l, s) = validate(agent, val_env, cfg.validate_episodes, cfg.validation_seed)?;
                let row = ValidationRow {
                    timestep: t,
                    mean_reward: r,
                    mean_length: l,
                    success_rate: s,
                };
                log.validations.push(row);
                if let Some(p) = progress.as_deref_mut() {
                    p(&row);
                }
                if let Some(dir) = &ckpt_dir {
                    agent.save(dir)?;
                }
            }
            obs = next;
            if out.done {
                success = out.success;
                break;
            }
            if t >= cfg.total_timesteps {
                break;
            }
        }
        log.episodes.push(EpisodeRow {
            episode: log.episodes.len(),
            timestep: t,
            reward: ep_reward,
            length: h,
            success,
        });
    }
    if let Some(dir) = &ckpt_dir {
        agent.save(dir)?;
    }
    Ok(log)
}

/// Mean of the last `k` entries of a series.
pub fn trailing_mean(xs: &[f64], k: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(k);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Whether the smoothed validation reward does not fall over the last
/// three checkpoints by more than `tol`.
pub fn trend_nondecreasing(rows: &[ValidationRow], window: usize, tol: f64) -> bool {
    let rewards: Vec<f64> = rows.iter().map(|r| r.mean_reward).collect();
    let sm = trailing_mean(&rewards, window);
    if sm.len() < 3 {
        return false;
    }
    let tail = &sm[sm.len() - 3..];
    tail.windows(2).all(|w| w[1] >= w[0] - tol)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: StateVariant,
    pub seed: u64,
    pub timesteps: usize,
    pub validation: Vec<ValidationRow>,
    pub final_reward: f64,
    pub final_length: f64,
    pub final_success: f64,
}

impl VariantResult {
    pub fn from_log(variant: StateVariant, seed: u64, timesteps: usize, log: &TrainLog) -> Self {
        let last = log.validations.last().copied().unwrap_or(ValidationRow {
            timestep: 0,
            mean_reward: f64::NAN,
            mean_length: f64::NAN,
            success_rate: f64::NAN,
        });
        Self {
            variant,
            seed,
            timesteps,
            validation: log.validations.clone(),
            final_reward: last.mean_reward,
            final_length: last.mean_length,
            final_success: last.success_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub results: Vec<VariantResult>,
    /// Whether the image-only final validation reward is at least the
    /// parameter-only one (averaged over seeds).
    pub image_at_least_params: bool,
}

impl BenchmarkReport {
    pub fn new(results: Vec<VariantResult>) -> Self {
        let mean = |v: StateVariant| {
            let xs: Vec<f64> = results.iter().filter(|r| r.variant == v).map(|r| r.final_reward).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        };
        let image_at_least_params = mean(StateVariant::Image) >= mean(StateVariant::Params);
        Self {
            results,
            image_at_least_params,
        }
    }
}

/// Trains every variant under the same config and budget.
pub fn benchmark_state_representations(
    base: &PpoConfig,
    seeds: &[u64],
    image_size: usize,
    mut make_envs: impl FnMut(u64) -> Result<(Env, Env)>,
) -> Result<BenchmarkReport> {
    let mut results = Vec::new();
    for &seed in seeds {
        for variant in StateVariant::ALL {
            let cfg = PpoConfig {
                variant,
                seed,
                ..base.clone()
            };
            let mut agent = PpoAgent::new(cfg.clone(), image_size)?;
            let (mut env, mut val_env) = make_envs(seed)?;
            let log = train(&mut agent, &mut env, &mut val_env, None, None)?;
            results.push(VariantResult::from_log(variant, seed, cfg.total_timesteps, &log));
        }
    }
    Ok(BenchmarkReport::new(results))
}
