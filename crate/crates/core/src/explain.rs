//! Integrated-gradients attribution of a policy output to input pixels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sonorl_tensor::{Mode, Tape, Tensor};

use crate::error::{Result, SonoError};
use crate::frame::Frame;
use crate::phantom::Pose;
use crate::ppo::PolicyNet;

/// Pixel value of the all-black baseline.
pub const BLACK: f64 = -1.0;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Pre-softmax output.
    Logit,
    /// Softmax probability.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathRule {
    /// Points at `k/m` for `k = 1..=m`.
    Right,
    /// Points at `(k - 1/2)/m`.
    Midpoint,
}

impl PathRule {
    fn alpha(self, k: usize, m: usize) -> f64 {
        match self {
            PathRule::Right => k as f64 / m as f64,
            PathRule::Midpoint => (k as f64 - 0.5) / m as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
    pub target_kind: TargetKind,
    pub rule: PathRule,
    pub baseline: f64,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            target_kind: TargetKind::Logit,
            rule: PathRule::Right,
            baseline: BLACK,
        }
    }
}

/// A scalar output that can be differentiated with respect to the image.
pub trait Attributable {
    fn image_size(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// Output `target` and its input gradient for each image of a batch
    /// `[n, 1, s, s]`.
    fn value_and_grad(&self, images: Tensor, target: usize, kind: TargetKind) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// An actor network viewed as a function of the image alone, the pose
/// input (if any) held fixed.
pub struct ActorImage<'a> {
    pub net: &'a PolicyNet,
    pub pose: Pose,
}

impl Attributable for ActorImage<'_> {
    fn image_size(&self) -> usize {
        self.net.image_size
    }

    fn num_outputs(&self) -> usize {
        self.net.head.fan_out()
    }

    fn value_and_grad(&self, images: Tensor, target: usize, kind: TargetKind) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.net.image.is_none() {
            return Err(SonoError::Contract("attribution needs a policy with an image input".into()));
        }
        let n = images.shape()[0];
        let mut tape = Tape::new();
        let x = tape.watch(images);
        let pose = self.net.params.as_ref().map(|_| {
            tape.constant_from(&[n, 6], (0..n).flat_map(|_| self.pose).collect())
                .expect("pose batch shape")
        });
        let out = self.net.forward(&mut tape, Some(x), pose, Mode::Eval)?;
        let out = match kind {
            TargetKind::Logit => out,
            TargetKind::Probability => tape.softmax(out)?,
        };
        let f = tape.gather_rows(out, &vec![target; n])?;
        let values = tape.value(f).to_vec();
        // rows are independent, so the gradient of the sum is per-row
        let total = tape.sum(f);
        let mut grads = tape.backward(total)?;
        let g = grads.take(x).ok_or_else(|| SonoError::Contract("input gradient missing".into()))?;
        Ok((values, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub size: usize,
    pub values: Vec<f64>,
    pub target: usize,
    pub steps: usize,
    /// `f(x) - f(baseline)`, the total the attributions should sum to.
    pub delta: f64,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Relative gap between the attribution sum and `f(x) - f(baseline)`.
    pub fn completeness_error(&self) -> f64 {
        (self.total() - self.delta).abs() / self.delta.abs().max(1e-12)
    }

    /// Min-max scaled to `[0, 255]`.
    pub fn to_gray8(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let frame = Frame::new(
            self.size,
            self.to_gray8().iter().map(|&b| f64::from(b) / 127.5 - 1.0).collect(),
        )?;
        frame.write_pgm(path)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Integrated gradients of output `target` along the straight path from a
/// constant baseline image to `x`.
pub fn integrated_gradients(
    model: &dyn Attributable,
    x: &Frame,
    target: usize,
    cfg: &IgConfig,
) -> Result<AttributionMap> {
    let m = cfg.steps;
    if m < 2 {
        return Err(SonoError::Contract(format!("integrated gradients needs at least 2 steps, got {m}")));
    }
    if target >= model.num_outputs() {
        return Err(SonoError::Contract(format!(
            "target {target} is not an output of a {}-way model",
            model.num_outputs()
        )));
    }
    let s = model.image_size();
    if x.size() != s {
        return Err(SonoError::Contract(format!("model expects {s}x{s} frames, got {0}x{0}", x.size())));
    }
    let px = s * s;
    let diff: Vec<f64> = x.data().iter().map(|v| v - cfg.baseline).collect();
    let mut grad_sum = vec![0.0; px];
    const CHUNK: usize = 50;
    let mut k = 1;
    while k <= m {
        let hi = (k + CHUNK).min(m + 1);
        let mut data = Vec::with_capacity((hi - k) * px);
        for j in k..hi {
            let a = cfg.rule.alpha(j, m);
            data.extend(diff.iter().map(|d| cfg.baseline + a * d));
        }
        let batch = Tensor::new(&[hi - k, 1, s, s], data)?;
        let (_, g) = model.value_and_grad(batch, target, cfg.target_kind)?;
        for row in g.chunks(px) {
            for (acc, v) in grad_sum.iter_mut().zip(row) {
                *acc += v;
            }
        }
        k = hi;
    }
    let ends = Tensor::new(
        &[2, 1, s, s],
        x.data().iter().copied().chain(std::iter::repeat_n(cfg.baseline, px)).collect(),
    )?;
    let (f, _) = model.value_and_grad(ends, target, cfg.target_kind)?;
    let values = diff.iter().zip(&grad_sum).map(|(d, g)| d * g / m as f64).collect();
    Ok(AttributionMap {
        size: s,
        values,
        target,
        steps: m,
        delta: f[0] - f[1],
    })
}

/// Mean absolute attribution inside and outside a pixel mask.
pub fn masked_energy(map: &AttributionMap, mask: &[bool]) -> (f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, &m) in map.values.iter().zip(mask) {
        if m {
            a += v.abs();
            na += 1;
        } else {
            b += v.abs();
            nb += 1;
        }
    }
    (a / na.max(1) as f64, b / nb.max(1) as f64)
}
