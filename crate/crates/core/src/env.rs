//! Probe-navigation MDP: 13 discrete moves over the normalized pose cube,
//! frames from a pluggable image source and the four-term reward.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonoError};
use crate::frame::Frame;
use crate::phantom::{derive_wrench, Phantom, Pose, PoseCondition, View};
use crate::quality::QualitySource;

pub const NUM_ACTIONS: usize = 13;
pub const SUCCESS_PROB: f64 = 0.9;
pub const SUCCESS_GRADE: f64 = 5.0;
pub const BASE_SUCCESS: f64 = 50.0;
pub const BASE_PARTIAL: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    PlusTx,
    MinusTx,
    PlusTy,
    MinusTy,
    PlusTz,
    MinusTz,
    PlusRx,
    MinusRx,
    PlusRy,
    MinusRy,
    PlusRz,
    MinusRz,
    Idle,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::PlusTx,
        Action::MinusTx,
        Action::PlusTy,
        Action::MinusTy,
        Action::PlusTz,
        Action::MinusTz,
        Action::PlusRx,
        Action::MinusRx,
        Action::PlusRy,
        Action::MinusRy,
        Action::PlusRz,
        Action::MinusRz,
        Action::Idle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Pose axis and direction moved by this action.
    pub fn axis(self) -> Option<(usize, f64)> {
        match self {
            Action::Idle => None,
            a => {
                let i = a.index();
                Some((i / 2, if i % 2 == 0 { 1.0 } else { -1.0 }))
            }
        }
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; NUM_ACTIONS] = [
            "+Tx", "-Tx", "+Ty", "-Ty", "+Tz", "-Tz", "+Rx", "-Rx", "+Ry", "-Ry", "+Rz", "-Rz", "Idle",
        ];
        NAMES[self.index()]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Moves one axis by `±delta_t` (translations) or `±delta_r` (rotations),
/// clamped to `[-1, 1]`.
pub fn apply_action(pose: &Pose, a: Action, delta_t: f64, delta_r: f64) -> Pose {
    let mut q = *pose;
    if let Some((axis, dir)) = a.axis() {
        let d = if axis < 3 { delta_t } else { delta_r };
        q[axis] = (q[axis] + dir * d).clamp(-1.0, 1.0);
    }
    q
}

pub fn compute_base(p: f64, g: f64) -> f64 {
    if p >= SUCCESS_PROB && g >= SUCCESS_GRADE {
        BASE_SUCCESS
    } else if p >= SUCCESS_PROB {
        BASE_PARTIAL
    } else {
        0.0
    }
}

pub fn compute_class(p: f64, p_prev: f64) -> f64 {
    p - p_prev
}

pub fn compute_grade_reward(p: f64, g: f64, g_prev: f64) -> f64 {
    if p >= SUCCESS_PROB {
        g - g_prev
    } else {
        0.0
    }
}

pub fn is_success(p: f64, g: f64) -> bool {
    p >= SUCCESS_PROB && g >= SUCCESS_GRADE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub base: f64,
    pub cls: f64,
    pub grade: f64,
    pub step: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(base: f64, cls: f64, grade: f64, step: f64) -> Self {
        Self {
            base,
            cls,
            grade,
            step,
            total: base + cls + grade + step,
        }
    }
}

/// Produces the frame observed under a condition.
pub trait ImageSource: Send + Sync {
    fn frame(&self, c: &PoseCondition) -> Result<Frame>;
}

impl ImageSource for Phantom {
    fn frame(&self, c: &PoseCondition) -> Result<Frame> {
        Ok(self.render(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMode {
    Oracle,
    Trained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub target_view: View,
    pub delta_t: f64,
    pub delta_r: f64,
    pub step_reward: f64,
    pub max_episode_length: usize,
    /// Half-width of the start box around the target canonical pose.
    pub reset_half_width: f64,
    /// Pay the 20-point partial base on every qualifying step instead of
    /// once per episode.
    pub repeat_partial_base: bool,
    pub quality: QualityMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            target_view: View::SC,
            delta_t: 0.05,
            delta_r: 0.05,
            step_reward: -0.1,
            max_episode_length: 200,
            reset_half_width: 0.2,
            repeat_partial_base: false,
            quality: QualityMode::Oracle,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub pose: Pose,
    pub wrench: [f64; 6],
    pub frame: Frame,
    pub p_prev: f64,
    pub g_prev: f64,
    pub step_index: usize,
    pub target_view: View,
}

impl EnvState {
    pub fn condition(&self) -> PoseCondition {
        PoseCondition::from_parts(self.wrench, self.pose)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub done: bool,
    pub success: bool,
    pub p: f64,
    pub g: f64,
}

pub struct Env {
    phantom: Phantom,
    image: Arc<dyn ImageSource>,
    quality: Arc<dyn QualitySource + Send + Sync>,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: Option<EnvState>,
    done: bool,
    partial_paid: bool,
}

impl Env {
    pub fn new(
        phantom: Phantom,
        image: Arc<dyn ImageSource>,
        quality: Arc<dyn QualitySource + Send + Sync>,
        cfg: EnvConfig,
        seed: u64,
    ) -> Self {
        Self {
            phantom,
            image,
            quality,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: None,
            done: true,
            partial_paid: false,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn phantom(&self) -> &Phantom {
        &self.phantom
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn observe(&mut self, pose: Pose) -> Result<(EnvState, f64, f64)> {
        let wrench = derive_wrench(&pose, &mut self.rng);
        let cond = PoseCondition::from_parts(wrench, pose);
        let frame = self.image.frame(&cond)?;
        let pred = self.quality.predict(&frame, &pose)?;
        let p = pred.probs[self.cfg.target_view.index()];
        let state = EnvState {
            pose,
            wrench,
            frame,
            p_prev: p,
            g_prev: pred.grade,
            step_index: 0,
            target_view: self.cfg.target_view,
        };
        Ok((state, p, pred.grade))
    }

    /// Starts an episode from a pose drawn uniformly in the start box
    /// around the target view (intersected with the cube), redrawing
    /// starts that already succeed. A half-width of 2 covers the cube.
    pub fn reset(&mut self) -> Result<&EnvState> {
        let center = self.phantom.canonical_pose(self.cfg.target_view);
        let h = self.cfg.reset_half_width;
        for _ in 0..10_000 {
            let pose: Pose = std::array::from_fn(|i| {
                let lo = (center[i] - h).max(-1.0);
                let hi = (center[i] + h).min(1.0);
                self.rng.gen_range(lo..=hi)
            });
            let (state, p, g) = self.observe(pose)?;
            if !is_success(p, g) {
                return Ok(self.start(state));
            }
        }
        Err(SonoError::Contract(
            "could not draw a start pose outside the success basin".into(),
        ))
    }

    /// Starts an episode at a fixed pose.
    pub fn reset_to(&mut self, pose: Pose) -> Result<&EnvState> {
        let pose = pose.map(|v| v.clamp(-1.0, 1.0));
        let (state, _, _) = self.observe(pose)?;
        Ok(self.start(state))
    }

    fn start(&mut self, state: EnvState) -> &EnvState {
        self.done = false;
        self.partial_paid = false;
        self.state.insert(state)
    }

    pub fn step(&mut self, a: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(SonoError::EpisodeFinished);
        }
        let (prev_pose, p_prev, g_prev, step_index) = {
            let s = self.state.as_ref().ok_or(SonoError::EpisodeFinished)?;
            (s.pose, s.p_prev, s.g_prev, s.step_index)
        };
        let pose = apply_action(&prev_pose, a, self.cfg.delta_t, self.cfg.delta_r);
        let (mut state, p, g) = self.observe(pose)?;
        let mut base = compute_base(p, g);
        if base == BASE_PARTIAL && !self.cfg.repeat_partial_base {
            if self.partial_paid {
                base = 0.0;
            }
            self.partial_paid = true;
        }
        let reward = RewardBreakdown::new(
            base,
            compute_class(p, p_prev),
            compute_grade_reward(p, g, g_prev),
            self.cfg.step_reward,
        );
        state.step_index = step_index + 1;
        let success = is_success(p, g);
        let done = success || state.step_index >= self.cfg.max_episode_length;
        self.done = done;
        self.state = Some(state);
        Ok(StepOutcome {
            reward,
            done,
            success,
            p,
            g,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub pose: Pose,
    pub action: String,
    pub reward: RewardBreakdown,
    pub p: f64,
    pub g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryFooter {
    pub success: bool,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub success: bool,
    pub elapsed_s: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward.total).sum()
    }

    /// One JSON object per step then the footer; wall-clock time is left
    /// out unless `with_timing`.
    pub fn write_jsonl(&self, w: &mut impl Write, with_timing: bool) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        let footer = TrajectoryFooter {
            success: self.success,
            steps: self.records.len(),
            elapsed_s: with_timing.then_some(self.elapsed_s),
            seed: self.seed,
        };
        serde_json::to_writer(&mut *w, &footer)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
