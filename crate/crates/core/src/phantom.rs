//! Analytic cardiac phantom.
//!
//! Each standard view owns a canonical probe pose and a layout of soft
//! ellipses. A pose is scored against every view by a Gaussian of the
//! weighted pose distance; the best view is drawn under an affine warp of
//! the pose offset, faded and blurred as the score drops, then covered in
//! multiplicative speckle.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonoError};
use crate::frame::Frame;

pub const NUM_VIEWS: usize = 5;
pub const NUM_CLASSES: usize = 6;
pub const NUM_PARAMS: usize = 12;

/// Weights of the squared pose distance: translations then rotations.
pub const POSE_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5];

/// 6-d normalized probe pose `[tx, ty, tz, rx, ry, rz]`.
pub type Pose = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    A4C,
    SC,
    PL,
    PSAV,
    PSMV,
}

impl View {
    pub const ALL: [View; NUM_VIEWS] = [View::A4C, View::SC, View::PL, View::PSAV, View::PSMV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            View::A4C => "A4C",
            View::SC => "SC",
            View::PL => "PL",
            View::PSAV => "PSAV",
            View::PSMV => "PSMV",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = SonoError;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SonoError::Config(format!("unknown view `{s}`")))
    }
}

/// One of the five views or `Random`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    View(View),
    Random,
}

impl Class {
    pub const RANDOM_INDEX: usize = NUM_VIEWS;

    pub fn index(self) -> usize {
        match self {
            Class::View(v) => v.index(),
            Class::Random => Self::RANDOM_INDEX,
        }
    }

    pub fn from_index(i: usize) -> Option<Class> {
        match i {
            i if i < NUM_VIEWS => Some(Class::View(View::ALL[i])),
            Self::RANDOM_INDEX => Some(Class::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::View(v) => v.name(),
            Class::Random => "Random",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = SonoError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            Ok(Class::Random)
        } else {
            s.parse().map(Class::View)
        }
    }
}

impl Serialize for Class {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Class {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Column names of the 12 acquisition parameters.
pub const PARAM_NAMES: [&str; NUM_PARAMS] = [
    "Force_X",
    "Force_Y",
    "Force_Z",
    "Torque_X",
    "Torque_Y",
    "Torque_Z",
    "Position_X",
    "Position_Y",
    "Position_Z",
    "Rotation_X",
    "Rotation_Y",
    "Rotation_Z",
];

/// Acquisition-unit `(min, max)` of each parameter in the released
/// dataset; used to map normalized synthetic values back to newtons,
/// newton-meters, millimeters and radians.
pub const PARAM_RANGES: [(f64, f64); NUM_PARAMS] = [
    (-26.8882, 28.4758),
    (-42.6100, 28.7321),
    (-19.9065, 17.9240),
    (-7.2058, 8.1759),
    (-4.9334, 6.6932),
    (-0.8552, 0.8573),
    (0.3999, 0.5833),
    (-0.0744, 0.0801),
    (0.0400, 0.1339),
    (-std::f64::consts::PI, std::f64::consts::PI),
    (-0.7959, 0.6613),
    (-2.1800, 2.1534),
];

pub const FORCE_Z: usize = 2;

/// The 12 conditioning values in normalized form: wrench (force xyz,
/// torque xyz) followed by the pose (position xyz, rotation xyz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseCondition {
    pub values: [f64; NUM_PARAMS],
}

impl PoseCondition {
    pub fn new(values: [f64; NUM_PARAMS]) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(SonoError::Contract(format!(
                "normalized {} = {v} outside [-1, 1]",
                PARAM_NAMES[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn from_parts(wrench: [f64; 6], pose: Pose) -> Self {
        let mut values = [0.0; NUM_PARAMS];
        values[..6].copy_from_slice(&wrench);
        values[6..].copy_from_slice(&pose);
        Self { values }
    }

    pub fn pose(&self) -> Pose {
        let mut q = [0.0; 6];
        q.copy_from_slice(&self.values[6..]);
        q
    }

    pub fn wrench(&self) -> [f64; 6] {
        let mut w = [0.0; 6];
        w.copy_from_slice(&self.values[..6]);
        w
    }

    /// Inverse of [`Self::to_acquisition_units`]; values a hair outside the
    /// ranges from rounding are clamped.
    pub fn from_acquisition_units(raw: &[f64; NUM_PARAMS]) -> Result<Self> {
        let mut values = [0.0; NUM_PARAMS];
        for (i, v) in values.iter_mut().enumerate() {
            let (lo, hi) = PARAM_RANGES[i];
            let x = 2.0 * (raw[i] - lo) / (hi - lo) - 1.0;
            *v = if x.abs() <= 1.0 + 1e-9 { x.clamp(-1.0, 1.0) } else { x };
        }
        Self::new(values)
    }

    /// Values in acquisition units under [`PARAM_RANGES`].
    pub fn to_acquisition_units(&self) -> [f64; NUM_PARAMS] {
        let mut out = [0.0; NUM_PARAMS];
        for (i, o) in out.iter_mut().enumerate() {
            let (lo, hi) = PARAM_RANGES[i];
            *o = (self.values[i] + 1.0) / 2.0 * (hi - lo) + lo;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub angle: f64,
    pub intensity: f64,
}

const fn el(cx: f64, cy: f64, ax: f64, ay: f64, angle: f64, intensity: f64) -> Ellipse {
    Ellipse {
        cx,
        cy,
        ax,
        ay,
        angle,
        intensity,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTemplate {
    pub view: View,
    pub canonical_pose: Pose,
    pub ellipses: Vec<Ellipse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub speckle_amplitude: f64,
    pub sigma: f64,
    pub class_threshold: f64,
    pub seed: u64,
    pub background: f64,
    pub edge_softness: f64,
    pub templates: Vec<ViewTemplate>,
}

/// Seed of the canonical-pose scatter shipped in the default config.
pub const LAYOUT_SEED: u64 = 20_240_917;

impl Default for PhantomConfig {
    fn default() -> Self {
        let sigma = 0.15;
        Self {
            image_size: 64,
            speckle_amplitude: 0.25,
            sigma,
            class_threshold: 0.05,
            seed: 7,
            background: 0.3,
            edge_softness: 0.05,
            templates: default_templates(LAYOUT_SEED),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 128].contains(&self.image_size) {
            return Err(SonoError::Config(format!(
                "image_size must be 32, 64 or 128, got {}",
                self.image_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(SonoError::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.templates.len() != NUM_VIEWS
            || self.templates.iter().zip(View::ALL).any(|(t, v)| t.view != v)
        {
            return Err(SonoError::Config(
                "templates must list A4C, SC, PL, PSAV, PSMV in that order".into(),
            ));
        }
        for (i, a) in self.templates.iter().enumerate() {
            for b in &self.templates[i + 1..] {
                let d = weighted_sq_dist(&a.canonical_pose, &b.canonical_pose).sqrt();
                if d < 4.0 * self.sigma {
                    return Err(SonoError::Config(format!(
                        "canonical poses of {} and {} are {d:.3} apart, need >= 4 sigma",
                        a.view, b.view
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }
}

pub fn weighted_sq_dist(a: &Pose, b: &Pose) -> f64 {
    (0..6).map(|i| POSE_WEIGHTS[i] * (a[i] - b[i]).powi(2)).sum()
}

/// Greedy maximin scatter: the best of many random draws of `n` poses in
/// `[-half, half]^6`, ranked by the smallest pairwise weighted distance.
pub fn maximin_scatter(seed: u64, n: usize, half: f64, trials: usize) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: (f64, Vec<Pose>) = (f64::NEG_INFINITY, Vec::new());
    for _ in 0..trials {
        let pts: Vec<Pose> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-half..=half)))
            .collect();
        let mut min_d = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min_d = min_d.min(weighted_sq_dist(&pts[i], &pts[j]));
            }
        }
        if min_d > best.0 {
            best = (min_d, pts);
        }
    }
    best.1
        .into_iter()
        .map(|p| p.map(|v| (v * 1e4).round() / 1e4))
        .collect()
}

fn view_layout(view: View) -> Vec<Ellipse> {
    match view {
        // four chambers under a bright myocardial shell, apex up
        View::A4C => vec![
            el(0.0, 0.0, 0.62, 0.78, 0.0, 0.78),
            el(0.22, -0.22, 0.2, 0.36, 0.08, 0.04),
            el(-0.2, -0.18, 0.15, 0.3, -0.1, 0.06),
            el(0.2, 0.38, 0.17, 0.16, 0.0, 0.05),
            el(-0.19, 0.36, 0.13, 0.14, 0.0, 0.07),
        ],
        // liver wedge on top, heart tilted beneath it
        View::SC => vec![
            el(-0.35, -0.55, 0.75, 0.35, 0.35, 0.55),
            el(0.15, 0.25, 0.62, 0.42, -0.45, 0.8),
            el(0.32, 0.16, 0.18, 0.14, -0.45, 0.05),
            el(0.02, 0.38, 0.16, 0.12, -0.45, 0.06),
            el(0.12, 0.02, 0.12, 0.1, -0.45, 0.04),
            el(-0.14, 0.24, 0.1, 0.09, -0.45, 0.08),
        ],
        // long left ventricle, aortic root and atrium on the right
        View::PL => vec![
            el(-0.05, 0.05, 0.8, 0.4, 0.12, 0.75),
            el(-0.2, 0.12, 0.48, 0.17, 0.12, 0.04),
            el(0.48, -0.16, 0.17, 0.1, 0.0, 0.06),
            el(0.44, 0.3, 0.16, 0.15, 0.0, 0.05),
        ],
        // aortic valve circle ringed by the atria and right ventricle
        View::PSAV => vec![
            el(0.0, 0.0, 0.7, 0.66, 0.0, 0.72),
            el(0.0, 0.0, 0.2, 0.2, 0.0, 0.9),
            el(0.0, 0.0, 0.14, 0.14, 0.0, 0.05),
            el(-0.38, -0.12, 0.15, 0.24, 0.3, 0.06),
            el(0.05, 0.42, 0.3, 0.11, 0.0, 0.05),
            el(0.36, -0.3, 0.22, 0.1, -0.6, 0.07),
        ],
        // mitral ring with fish-mouth leaflets and a right-side crescent
        View::PSMV => vec![
            el(0.08, 0.0, 0.5, 0.5, 0.0, 0.85),
            el(0.08, 0.0, 0.38, 0.38, 0.0, 0.05),
            el(0.08, 0.02, 0.24, 0.05, 0.15, 0.7),
            el(-0.56, 0.05, 0.14, 0.36, 0.15, 0.06),
        ],
    }
}

pub fn default_templates(seed: u64) -> Vec<ViewTemplate> {
    let poses = maximin_scatter(seed, NUM_VIEWS, 0.6, 512);
    View::ALL
        .iter()
        .zip(poses)
        .map(|(&view, canonical_pose)| ViewTemplate {
            view,
            canonical_pose,
            ellipses: view_layout(view),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class: Class,
    pub grade: f64,
    /// Score of the best view.
    pub score: f64,
}

/// Renderer and labeler over a validated [`PhantomConfig`].
#[derive(Debug, Clone)]
pub struct Phantom {
    cfg: PhantomConfig,
}

/// Image-plane transform induced by a pose offset from the canonical pose.
struct Warp {
    tx: f64,
    ty: f64,
    zoom: f64,
    yscale: f64,
    shear: f64,
    sin_p: f64,
    cos_p: f64,
}

impl Warp {
    fn new(q: &Pose, canonical: &Pose) -> Self {
        let d: [f64; 6] = std::array::from_fn(|i| q[i] - canonical[i]);
        let (sin_p, cos_p) = (std::f64::consts::PI * d[5]).sin_cos();
        Self {
            tx: 1.5 * d[0],
            ty: 1.5 * d[1],
            zoom: (-1.5 * d[2]).exp(),
            yscale: (1.5 * d[3]).exp(),
            shear: 1.5 * d[4],
            sin_p,
            cos_p,
        }
    }

    /// Inverts translate, rotate, shear and scale.
    fn to_template(&self, u: f64, v: f64) -> (f64, f64) {
        let (x3, y3) = (u - self.tx, v - self.ty);
        let (x2, y2) = (self.cos_p * x3 + self.sin_p * y3, -self.sin_p * x3 + self.cos_p * y3);
        let x1 = x2 - self.shear * y2;
        (x1 / self.zoom, y2 / (self.zoom * self.yscale))
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Speckle seed keyed by the pose quantized to a 1e-3 grid.
pub fn speckle_seed(seed: u64, q: &Pose) -> u64 {
    q.iter().fold(splitmix(seed), |h, v| {
        let k = (v / 1e-3).round() as i64;
        splitmix(h ^ k as u64)
    })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(img: &mut [f64], n: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |i: i64| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * img[y * n + clampi(x as i64 + j as i64 - r)])
                .sum();
        }
    }
    for y in 0..n {
        for x in 0..n {
            img[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clampi(y as i64 + j as i64 - r) * n + x])
                .sum();
        }
    }
}

impl Phantom {
    pub fn new(cfg: PhantomConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.cfg
    }

    pub fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    pub fn canonical_pose(&self, v: View) -> Pose {
        self.cfg.templates[v.index()].canonical_pose
    }

    pub fn view_score(&self, q: &Pose, v: View) -> f64 {
        let d2 = weighted_sq_dist(q, &self.canonical_pose(v));
        (-d2 / (2.0 * self.cfg.sigma * self.cfg.sigma)).exp()
    }

    pub fn scores(&self, q: &Pose) -> [f64; NUM_VIEWS] {
        View::ALL.map(|v| self.view_score(q, v))
    }

    /// Best view and its score; ties go to the lowest view index.
    pub fn best_view(&self, q: &Pose) -> (View, f64) {
        let s = self.scores(q);
        let mut best = 0;
        for i in 1..NUM_VIEWS {
            if s[i] > s[best] {
                best = i;
            }
        }
        (View::ALL[best], s[best])
    }

    pub fn label(&self, q: &Pose) -> Label {
        let (v, s) = self.best_view(q);
        if s >= self.cfg.class_threshold {
            Label {
                class: Class::View(v),
                grade: 10.0 * s,
                score: s,
            }
        } else {
            Label {
                class: Class::Random,
                grade: 0.0,
                score: s,
            }
        }
    }

    /// Contrast of the anatomy layer at best-view score `s`.
    pub fn contrast(&self, s: f64) -> f64 {
        if s >= self.cfg.class_threshold {
            0.35 + 0.65 * s
        } else {
            0.0
        }
    }

    pub fn render(&self, c: &PoseCondition) -> Frame {
        self.render_pose(&c.pose())
    }

    /// Renders the frame seen from pose `q`; the wrench does not affect the
    /// image.
    pub fn render_pose(&self, q: &Pose) -> Frame {
        let n = self.cfg.image_size;
        let bg = self.cfg.background;
        let (view, s) = self.best_view(q);
        let contrast = self.contrast(s);
        let mut img = vec![bg; n * n];
        if contrast > 0.0 {
            let tpl = &self.cfg.templates[view.index()];
            let warp = Warp::new(q, &tpl.canonical_pose);
            let frames: Vec<(f64, f64, f64, f64)> = tpl
                .ellipses
                .iter()
                .map(|e| {
                    let (sa, ca) = e.angle.sin_cos();
                    (sa, ca, 1.0 / e.ax, 1.0 / e.ay)
                })
                .collect();
            let soft = self.cfg.edge_softness;
            for row in 0..n {
                let v = (2 * row + 1) as f64 / n as f64 - 1.0;
                for col in 0..n {
                    let u = (2 * col + 1) as f64 / n as f64 - 1.0;
                    let (x, y) = warp.to_template(u, v);
                    let mut val = bg;
                    for (e, &(sa, ca, iax, iay)) in tpl.ellipses.iter().zip(&frames) {
                        let (dx, dy) = (x - e.cx, y - e.cy);
                        let ex = (ca * dx + sa * dy) * iax;
                        let ey = (-sa * dx + ca * dy) * iay;
                        let r = (ex * ex + ey * ey).sqrt();
                        let alpha = logistic((1.0 - r) / soft);
                        val += alpha * (e.intensity - val);
                    }
                    img[row * n + col] = bg + contrast * (val - bg);
                }
            }
            let sigma_px = n as f64 / 16.0 * (1.0 - s);
            if sigma_px > 0.25 {
                blur(&mut img, n, sigma_px);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(speckle_seed(self.cfg.seed, q));
        let a = self.cfg.speckle_amplitude;
        for p in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = (*p * (a * z - 0.5 * a * a).exp()).clamp(0.0, 1.0) * 2.0 - 1.0;
        }
        Frame::new(n, img).expect("render size")
    }

    /// Pixels lying inside a template ellipse of the best-matching view,
    /// or all false when the frame shows speckle only.
    pub fn structure_mask(&self, q: &Pose) -> Vec<bool> {
        let n = self.cfg.image_size;
        let (view, s) = self.best_view(q);
        if self.contrast(s) <= 0.0 {
            return vec![false; n * n];
        }
        let tpl = &self.cfg.templates[view.index()];
        let warp = Warp::new(q, &tpl.canonical_pose);
        let mut out = Vec::with_capacity(n * n);
        for row in 0..n {
            let v = (2 * row + 1) as f64 / n as f64 - 1.0;
            for col in 0..n {
                let u = (2 * col + 1) as f64 / n as f64 - 1.0;
                let (x, y) = warp.to_template(u, v);
                out.push(tpl.ellipses.iter().any(|e| {
                    let (sa, ca) = e.angle.sin_cos();
                    let (dx, dy) = (x - e.cx, y - e.cy);
                    let ex = (ca * dx + sa * dy) / e.ax;
                    let ey = (-sa * dx + ca * dy) / e.ay;
                    ex * ex + ey * ey <= 1.0
                }));
            }
        }
        out
    }

    /// Samples a normalized wrench for pose `q`.
    ///
    /// Force along the probe axis is pressing (negative) and grows with
    /// depth; the other components scatter around small pose-dependent
    /// means.
    pub fn derive_wrench(&self, q: &Pose, rng: &mut impl Rng) -> [f64; 6] {
        derive_wrench(q, rng)
    }
}

pub fn derive_wrench(q: &Pose, rng: &mut impl Rng) -> [f64; 6] {
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    let depth = (q[2] + 1.0) / 2.0;
    let fz = (-(0.27 + 0.35 * depth) + 0.1 * n()).clamp(-1.0, -1e-3);
    let fx = (0.08 * q[4] + 0.12 * n()).clamp(-1.0, 1.0);
    let fy = (0.08 * q[3] - 0.04 + 0.12 * n()).clamp(-1.0, 1.0);
    let tx = (-0.06 * q[1] + 0.08 * n()).clamp(-1.0, 1.0);
    let ty = (0.06 * q[0] + 0.08 * n()).clamp(-1.0, 1.0);
    let tz = (0.1 * q[5] + 0.3 * n()).clamp(-1.0, 1.0);
    [fx, fy, fz, tx, ty, tz]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Euler {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub gimbal_lock: bool,
}

pub type Mat3 = [[f64; 3]; 3];

/// `R = Rz(rz) · Ry(ry) · Rx(rx)`.
pub fn euler_to_rotmat(rx: f64, ry: f64, rz: f64) -> Mat3 {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Intrinsic Z-Y-X angles of a rotation matrix.
pub fn rotmat_to_euler(r: &Mat3) -> Result<Euler> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if !dot.is_finite() || (dot - want).abs() > 1e-6 {
                return Err(SonoError::InvalidRotation(format!(
                    "columns {i},{j} have dot product {dot}"
                )));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(SonoError::InvalidRotation(format!("determinant {det}")));
    }
    let ry = (-r[2][0]).clamp(-1.0, 1.0).asin();
    if ry.cos().abs() < 1e-8 {
        // only rx − rz (or rx + rz) is observable; put it all in rx
        let rx = if r[2][0] < 0.0 {
            r[0][1].atan2(r[0][2])
        } else {
            (-r[0][1]).atan2(-r[0][2])
        };
        return Ok(Euler {
            rx,
            ry,
            rz: 0.0,
            gimbal_lock: true,
        });
    }
    Ok(Euler {
        rx: r[2][1].atan2(r[2][2]),
        ry,
        rz: r[1][0].atan2(r[0][0]),
        gimbal_lock: false,
    })
}
