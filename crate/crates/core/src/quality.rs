//! View classifier and grader.
//!
//! [`QualityNet`] is a small convolutional encoder shared by a 6-way class
//! head and a grade head. The grade head is fitted afterwards on frozen
//! encoder features. [`OracleQuality`] computes the same outputs exactly
//! from the pose.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sonorl_tensor::{
    scoped, softmax_in_place, Adam, AdamConfig, BatchNorm, Conv2d, Dense, Mode, Module, RunningStats, Tape,
    Tensor, Var,
};

use crate::error::{Result, SonoError};
use crate::frame::{stack, Frame};
use crate::phantom::{Class, Phantom, Pose, NUM_CLASSES, NUM_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
    pub grade: f64,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Source of `(p_t, g_t)` for the environment.
pub trait QualitySource {
    fn predict(&self, frame: &Frame, pose: &Pose) -> Result<Prediction>;
}

/// Exact classifier driven by the analytic view scores.
///
/// Class logits are `κ·(s_v − τ)` for the views and 0 for `Random`, so the
/// softmax is sharp but continuous; the grade is the analytic grade.
#[derive(Debug, Clone)]
pub struct OracleQuality {
    phantom: Phantom,
    pub kappa: f64,
}

pub const ORACLE_KAPPA: f64 = 200.0;

impl OracleQuality {
    pub fn new(phantom: Phantom) -> Self {
        Self {
            phantom,
            kappa: ORACLE_KAPPA,
        }
    }

    pub fn predict_pose(&self, q: &Pose) -> Prediction {
        let s = self.phantom.scores(q);
        let tau = self.phantom.config().class_threshold;
        let mut probs = [0.0; NUM_CLASSES];
        for v in 0..NUM_VIEWS {
            probs[v] = self.kappa * (s[v] - tau);
        }
        softmax_in_place(&mut probs);
        Prediction {
            probs,
            grade: self.phantom.label(q).grade,
        }
    }
}

impl QualitySource for OracleQuality {
    fn predict(&self, _frame: &Frame, pose: &Pose) -> Result<Prediction> {
        Ok(self.predict_pose(pose))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub grade_hidden: usize,
    pub epochs: usize,
    pub transfer_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub transfer_lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![8, 16, 32, 32],
            feature_dim: 64,
            grade_hidden: 32,
            epochs: 12,
            transfer_epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            transfer_lr: 3e-3,
            holdout_fraction: 0.2,
            seed: 11,
        }
    }
}

/// Conv blocks (k4 s2 p1, batch norm, ReLU) then a dense projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm>,
    pub proj: Dense,
    pub input_size: usize,
}

impl Encoder {
    pub fn new(input_size: usize, channels: &[usize], feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = channels.len();
        if blocks == 0 || !input_size.is_multiple_of(1 << blocks) {
            return Err(SonoError::Config(format!(
                "input size {input_size} is not divisible by 2^{blocks}"
            )));
        }
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut c_in = 1;
        for &c in channels {
            convs.push(Conv2d::new(c_in, c, 4, 2, 1, rng));
            bns.push(BatchNorm::new(c));
            c_in = c;
        }
        let side = input_size >> blocks;
        Ok(Self {
            convs,
            bns,
            proj: Dense::new(c_in * side * side, feature_dim, rng),
            input_size,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.fan_out()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(SonoError::Contract(format!(
                "encoder expects [n, 1, {0}, {0}] input, got {s:?}",
                self.input_size
            )));
        }
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = conv.forward(tape, h)?;
            h = bn.forward(tape, h, mode)?;
            h = tape.relu(h);
        }
        let h = tape.flatten(h)?;
        let h = self.proj.forward(tape, h)?;
        Ok(tape.relu(h))
    }

    /// Eval-mode features of frames, resized to the encoder input size.
    pub fn features(&self, frames: &[&Frame]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let resized: Vec<Frame> = chunk.iter().map(|f| f.resized(self.input_size)).collect();
            let refs: Vec<&Frame> = resized.iter().collect();
            let mut tape = Tape::no_grad();
            let x = tape.constant(stack(&refs)?);
            let f = self.forward(&mut tape, x, Mode::Eval)?;
            let d = self.feature_dim();
            out.extend(tape.value(f).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            v.extend(scoped(&format!("conv{i}"), c.params()));
            v.extend(scoped(&format!("bn{i}"), b.params()));
        }
        v.extend(scoped("proj", self.proj.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, (c, b)) in self.convs.iter_mut().zip(self.bns.iter_mut()).enumerate() {
            v.extend(scoped(&format!("conv{i}"), c.params_mut()));
            v.extend(scoped(&format!("bn{i}"), b.params_mut()));
        }
        v.extend(scoped("proj", self.proj.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        self.bns
            .iter()
            .enumerate()
            .flat_map(|(i, b)| scoped(&format!("bn{i}"), b.buffers()))
            .collect()
    }
}

/// Dense → ReLU → dense regression head.
#[derive(Debug, Clone)]
pub struct GradeHead {
    pub hidden: Dense,
    pub out: Dense,
}

impl GradeHead {
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, features)?;
        let h = tape.relu(h);
        self.out.forward(tape, h).map_err(Into::into)
    }
}

impl Module for GradeHead {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = scoped("hidden", self.hidden.params());
        v.extend(scoped("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped("hidden", self.hidden.params_mut());
        v.extend(scoped("out", self.out.params_mut()));
        v
    }
}

#[derive(Debug, Clone)]
pub struct QualityNet {
    pub encoder: Encoder,
    pub class_head: Dense,
    pub grade_head: GradeHead,
}

/// Encoder plus class head, the part trained by classification.
struct ClassifierView<'m> {
    encoder: &'m mut Encoder,
    head: &'m mut Dense,
}

impl Module for ClassifierView<'_> {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = scoped("encoder", self.encoder.params());
        v.extend(scoped("class_head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped("encoder", self.encoder.params_mut());
        v.extend(scoped("class_head", self.head.params_mut()));
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub holdout_count: usize,
    /// `confusion[true][predicted]` on the held-out split.
    pub confusion: Vec<Vec<usize>>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradeReport {
    pub holdout_mae: f64,
    pub holdout_count: usize,
    pub random_mean_grade: f64,
    pub epoch_losses: Vec<f64>,
}

/// Deterministic train/holdout split of `0..n`.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((n as f64) * holdout_fraction).round() as usize;
    let hold = idx.split_off(n - n_hold.min(n));
    (idx, hold)
}

/// Minibatches of at least two items (batch norm needs two).
fn batches(idx: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    idx.chunks(size.max(2)).filter(|b| b.len() >= 2)
}

impl QualityNet {
    pub fn new(cfg: &QualityConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(cfg.input_size, &cfg.channels, cfg.feature_dim, rng)?;
        let class_head = Dense::new(cfg.feature_dim, NUM_CLASSES, rng);
        let grade_head = GradeHead {
            hidden: Dense::new(cfg.feature_dim, cfg.grade_hidden, rng),
            out: Dense::new(cfg.grade_hidden, 1, rng),
        };
        Ok(Self {
            encoder,
            class_head,
            grade_head,
        })
    }

    pub fn input_size(&self) -> usize {
        self.encoder.input_size
    }

    fn input(&self, frames: &[&Frame]) -> Result<Tensor> {
        let resized: Vec<Frame> = frames.iter().map(|f| f.resized(self.input_size())).collect();
        let refs: Vec<&Frame> = resized.iter().collect();
        stack(&refs)
    }

    /// Eval-mode class probabilities and clamped grades.
    pub fn predict_batch(&self, frames: &[&Frame]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let mut tape = Tape::no_grad();
            let x = tape.constant(self.input(chunk)?);
            let f = self.encoder.forward(&mut tape, x, Mode::Eval)?;
            let logits = self.class_head.forward(&mut tape, f)?;
            let probs = tape.softmax(logits)?;
            let grade = self.grade_head.forward(&mut tape, f)?;
            for (p, g) in tape.value(probs).chunks(NUM_CLASSES).zip(tape.value(grade)) {
                let mut probs = [0.0; NUM_CLASSES];
                probs.copy_from_slice(p);
                out.push(Prediction {
                    probs,
                    grade: g.clamp(0.0, 10.0),
                });
            }
        }
        Ok(out)
    }

    pub fn predict(&self, frame: &Frame) -> Result<Prediction> {
        Ok(self.predict_batch(&[frame])?[0])
    }

    /// Cross-entropy training of encoder and class head.
    pub fn train_classifier(
        &mut self,
        frames: &[Frame],
        classes: &[Class],
        cfg: &QualityConfig,
    ) -> Result<ClassReport> {
        if frames.len() != classes.len() {
            return Err(SonoError::Contract("frames and labels differ in length".into()));
        }
        let mut counts = [0usize; NUM_CLASSES];
        for c in classes {
            counts[c.index()] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(SonoError::Coverage(format!(
                "class {} has no frames",
                Class::from_index(i).expect("class index")
            )));
        }
        let (mut train, hold) = split_indices(frames.len(), cfg.holdout_fraction, cfg.seed);
        let inputs: Vec<Frame> = frames.iter().map(|f| f.resized(self.input_size())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51);
        let mut opt = Adam::new(AdamConfig::new(cfg.lr, 0.9));
        let mut epoch_losses = Vec::new();
        for _ in 0..cfg.epochs {
            train.shuffle(&mut rng);
            let (mut total, mut n) = (0.0, 0usize);
            for b in batches(&train, cfg.batch_size) {
                let refs: Vec<&Frame> = b.iter().map(|&i| &inputs[i]).collect();
                let target: Vec<usize> = b.iter().map(|&i| classes[i].index()).collect();
                let loss = {
                    let mut tape = Tape::new();
                    let x = tape.constant(stack(&refs)?);
                    let f = self.encoder.forward(&mut tape, x, Mode::Train)?;
                    let logits = self.class_head.forward(&mut tape, f)?;
                    let lp = tape.log_softmax(logits)?;
                    let picked = tape.gather_rows(lp, &target)?;
                    let m = tape.mean(picked);
                    let loss = tape.scale(m, -1.0);
                    let value = tape.scalar(loss);
                    if !value.is_finite() {
                        return Err(SonoError::PoisonedLoss("classification".into()));
                    }
                    tape.backward(loss)?;
                    value
                };
                let mut view = ClassifierView {
                    encoder: &mut self.encoder,
                    head: &mut self.class_head,
                };
                opt.step(&mut view)?;
                total += loss * b.len() as f64;
                n += b.len();
            }
            epoch_losses.push(total / n.max(1) as f64);
        }
        self.grade_head.zero_grad();
        let acc = |idx: &[usize], conf: &mut Option<&mut Vec<Vec<usize>>>| -> Result<f64> {
            let refs: Vec<&Frame> = idx.iter().map(|&i| &inputs[i]).collect();
            let preds = self.predict_batch(&refs)?;
            let mut hits = 0;
            for (p, &i) in preds.iter().zip(idx) {
                let truth = classes[i].index();
                if p.argmax() == truth {
                    hits += 1;
                }
                if let Some(c) = conf.as_deref_mut() {
                    c[truth][p.argmax()] += 1;
                }
            }
            Ok(hits as f64 / idx.len().max(1) as f64)
        };
        let mut confusion = vec![vec![0; NUM_CLASSES]; NUM_CLASSES];
        let train_accuracy = acc(&train, &mut None)?;
        let holdout_accuracy = acc(&hold, &mut Some(&mut confusion))?;
        Ok(ClassReport {
            train_accuracy,
            holdout_accuracy,
            holdout_count: hold.len(),
            confusion,
            epoch_losses,
        })
    }

    /// Fits the grade head with an L2 loss on frozen encoder features.
    ///
    /// Fails with a contract error if the encoder changed in the process.
    pub fn transfer_grade_head(
        &mut self,
        frames: &[Frame],
        grades: &[f64],
        classes: &[Class],
        cfg: &QualityConfig,
    ) -> Result<GradeReport> {
        if frames.len() != grades.len() || frames.len() != classes.len() {
            return Err(SonoError::Contract("frames and labels differ in length".into()));
        }
        let before = encoder_fingerprint(&self.encoder);
        let refs: Vec<&Frame> = frames.iter().collect();
        let feats = self.encoder.features(&refs)?;
        let dim = self.encoder.feature_dim();
        let (mut train, hold) = split_indices(frames.len(), cfg.holdout_fraction, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a);
        let mut opt = Adam::new(AdamConfig::new(cfg.transfer_lr, 0.9));
        let mut epoch_losses = Vec::new();
        for _ in 0..cfg.transfer_epochs {
            train.shuffle(&mut rng);
            let (mut total, mut n) = (0.0, 0usize);
            for b in batches(&train, cfg.batch_size) {
                let x: Vec<f64> = b.iter().flat_map(|&i| feats[i].iter().copied()).collect();
                let y: Vec<f64> = b.iter().map(|&i| grades[i]).collect();
                let loss = {
                    let mut tape = Tape::new();
                    let xv = tape.constant_from(&[b.len(), dim], x)?;
                    let yv = tape.constant_from(&[b.len(), 1], y)?;
                    let g = self.grade_head.forward(&mut tape, xv)?;
                    let d = tape.sub(g, yv)?;
                    let sq = tape.square(d);
                    let loss = tape.mean(sq);
                    let value = tape.scalar(loss);
                    if !value.is_finite() {
                        return Err(SonoError::PoisonedLoss("grade".into()));
                    }
                    tape.backward(loss)?;
                    value
                };
                opt.step(&mut self.grade_head)?;
                total += loss * b.len() as f64;
                n += b.len();
            }
            epoch_losses.push(total / n.max(1) as f64);
        }
        if encoder_fingerprint(&self.encoder) != before {
            return Err(SonoError::Contract("encoder changed during grade transfer".into()));
        }
        let hold_refs: Vec<&Frame> = hold.iter().map(|&i| &frames[i]).collect();
        let preds = self.predict_batch(&hold_refs)?;
        let mut abs = 0.0;
        let (mut rand_sum, mut rand_n) = (0.0, 0usize);
        for (p, &i) in preds.iter().zip(&hold) {
            abs += (p.grade - grades[i]).abs();
            if classes[i] == Class::Random {
                rand_sum += p.grade;
                rand_n += 1;
            }
        }
        Ok(GradeReport {
            holdout_mae: abs / hold.len().max(1) as f64,
            holdout_count: hold.len(),
            random_mean_grade: if rand_n > 0 { rand_sum / rand_n as f64 } else { 0.0 },
            epoch_losses,
        })
    }
}

/// Bit-level fingerprint of encoder parameters and running statistics.
pub fn encoder_fingerprint(e: &Encoder) -> (u64, Vec<u64>) {
    let stats = e
        .buffers()
        .iter()
        .flat_map(|(_, b)| {
            let (m, v) = b.snapshot();
            m.into_iter().chain(v).map(f64::to_bits).collect::<Vec<_>>()
        })
        .collect();
    (e.checksum(), stats)
}

impl Module for QualityNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = scoped("encoder", self.encoder.params());
        v.extend(scoped("class_head", self.class_head.params()));
        v.extend(scoped("grade_head", self.grade_head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped("encoder", self.encoder.params_mut());
        v.extend(scoped("class_head", self.class_head.params_mut()));
        v.extend(scoped("grade_head", self.grade_head.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &RunningStats)> {
        scoped("encoder", self.encoder.buffers())
    }
}

/// Trained network used as the environment's quality source.
#[derive(Debug, Clone)]
pub struct TrainedQuality {
    pub net: QualityNet,
}

impl QualitySource for TrainedQuality {
    fn predict(&self, frame: &Frame, _pose: &Pose) -> Result<Prediction> {
        self.net.predict(frame)
    }
}
