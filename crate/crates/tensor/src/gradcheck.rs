//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::layers::{scoped, BatchNorm, Conv2d, Dense, Module, RunningStats};
use crate::tape::Mode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A bare list of tensors, handy as the input module of a check.
#[derive(Debug, Clone)]
pub struct Params(pub Vec<Tensor>);

impl Module for Params {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.iter_mut().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss` with respect to every trainable
/// parameter of `module` against central differences with step `h`.
///
/// `stride` checks every n-th element of each tensor (1 checks all).
pub fn check<M, F>(module: &mut M, loss: F, h: f64, stride: usize) -> Result<GradReport>
where
    M: Module,
    F: for<'a> Fn(&'a M, &mut Tape<'a>) -> Result<Var>,
{
    check_with_floor(module, loss, h, stride, 1e-6)
}

/// [`check`] with the denominator floor of [`rel_err`] given explicitly.
/// Gradients below `floor` are then held to an absolute tolerance of
/// `floor` times the relative one.
pub fn check_with_floor<M, F>(module: &mut M, loss: F, h: f64, stride: usize, floor: f64) -> Result<GradReport>
where
    M: Module,
    F: for<'a> Fn(&'a M, &mut Tape<'a>) -> Result<Var>,
{
    module.zero_grad();
    {
        let mut tape = Tape::new();
        let l = loss(module, &mut tape)?;
        tape.backward(l)?;
    }
    let analytic: Vec<Option<Vec<f64>>> = module
        .params()
        .iter()
        .map(|(_, p)| p.requires_grad().then(|| p.grad().unwrap_or_else(|| vec![0.0; p.len()])))
        .collect();
    module.zero_grad();

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let l = loss(m, &mut tape)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let name = module.params()[pi].0.clone();
        for k in (0..grad.len()).step_by(stride.max(1)) {
            let orig = module.params()[pi].1.data()[k];
            module.params_mut()[pi].1.data_mut()[k] = orig + h;
            let up = eval(module)?;
            module.params_mut()[pi].1.data_mut()[k] = orig - h;
            let down = eval(module)?;
            module.params_mut()[pi].1.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() || !grad[k].is_finite() {
                return Err(TensorError::Contract(format!("non-finite gradient at {name}[{k}]")));
            }
            let e = rel_err(grad[k], numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{k}] analytic {} numeric {numeric}", grad[k]);
            }
        }
    }
    Ok(report)
}

/// Step used by the layer suite.
pub const SUITE_STEP: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.05 + v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("suite shape").with_grad()
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn project<'a>(tape: &mut Tape<'a>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(rand_tensor(&shape, &mut rng, false));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, Result<GradReport>);

fn unary_case(
    name: &'static str,
    seed: u64,
    kinked: bool,
    f: fn(&mut Tape<'_>, Var) -> Result<Var>,
) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Params(vec![rand_tensor(&[3, 5], &mut rng, kinked)]);
    let r = check(
        &mut m,
        |m, t| {
            let x = t.param(&m.0[0]);
            let y = f(t, x)?;
            project(t, y, seed)
        },
        SUITE_STEP,
        1,
    );
    (name, r)
}

fn binary_case(
    name: &'static str,
    seed: u64,
    f: fn(&mut Tape<'_>, Var, Var) -> Result<Var>,
) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&[4, 3], &mut rng, false);
    let mut b = rand_tensor(&[4, 3], &mut rng, false);
    // keep the minimum away from ties
    for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
        if (*bv - av).abs() < 0.05 {
            *bv += 0.1;
        }
    }
    let mut m = Params(vec![a, b]);
    let r = check(
        &mut m,
        |m, t| {
            let a = t.param(&m.0[0]);
            let b = t.param(&m.0[1]);
            let y = f(t, a, b)?;
            project(t, y, seed)
        },
        SUITE_STEP,
        1,
    );
    (name, r)
}

/// Small conv → batch-norm → dense → softmax network.
#[derive(Debug, Clone)]
pub struct CompositeNet {
    pub x: Tensor,
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub dense: Dense,
}

impl Module for CompositeNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("x".to_string(), &self.x)];
        v.extend(scoped("conv", self.conv.params()));
        v.extend(scoped("bn", self.bn.params()));
        v.extend(scoped("dense", self.dense.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("x".to_string(), &mut self.x)];
        v.extend(scoped("conv", self.conv.params_mut()));
        v.extend(scoped("bn", self.bn.params_mut()));
        v.extend(scoped("dense", self.dense.params_mut()));
        v
    }
}

/// Runs the finite-difference check of every layer kind and of a composite
/// network for one seed, returning `(case name, report)` pairs.
pub fn layer_suite(seed: u64) -> Vec<(&'static str, Result<GradReport>)> {
    let mut out: Vec<Case> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dense = Params(vec![
        rand_tensor(&[4, 8], &mut rng, false),
        rand_tensor(&[8, 3], &mut rng, false),
        rand_tensor(&[3], &mut rng, false),
    ]);
    out.push((
        "dense",
        check(
            &mut dense,
            |m, t| {
                let (x, w, b) = (t.param(&m.0[0]), t.param(&m.0[1]), t.param(&m.0[2]));
                let y = t.dense(x, w, b)?;
                project(t, y, seed)
            },
            SUITE_STEP,
            1,
        ),
    ));

    let mut conv = Params(vec![
        rand_tensor(&[2, 1, 8, 8], &mut rng, false),
        rand_tensor(&[3, 1, 3, 3], &mut rng, false),
        rand_tensor(&[3], &mut rng, false),
    ]);
    out.push((
        "conv2d",
        check(
            &mut conv,
            |m, t| {
                let (x, k, b) = (t.param(&m.0[0]), t.param(&m.0[1]), t.param(&m.0[2]));
                let y = t.conv2d(x, k, Some(b), 2, 1)?;
                project(t, y, seed)
            },
            SUITE_STEP,
            1,
        ),
    ));

    let mut convt = Params(vec![
        rand_tensor(&[2, 3, 4, 4], &mut rng, false),
        rand_tensor(&[3, 2, 4, 4], &mut rng, false),
        rand_tensor(&[2], &mut rng, false),
    ]);
    out.push((
        "conv_transpose2d",
        check(
            &mut convt,
            |m, t| {
                let (x, k, b) = (t.param(&m.0[0]), t.param(&m.0[1]), t.param(&m.0[2]));
                let y = t.conv_transpose2d(x, k, Some(b), 2, 1)?;
                project(t, y, seed)
            },
            SUITE_STEP,
            1,
        ),
    ));

    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
        let stats = RunningStats::new(3);
        stats.set(vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        let mut bn = Params(vec![
            rand_tensor(&[4, 3, 2, 2], &mut rng, false),
            rand_tensor(&[3], &mut rng, false),
            rand_tensor(&[3], &mut rng, false),
        ]);
        out.push((
            name,
            check(
                &mut bn,
                |m, t| {
                    let (x, g, b) = (t.param(&m.0[0]), t.param(&m.0[1]), t.param(&m.0[2]));
                    let y = t.batch_norm(x, g, b, &stats, mode, 0.9, 1e-5)?;
                    project(t, y, seed)
                },
                SUITE_STEP,
                1,
            ),
        ));
    }

    out.push(unary_case("relu", seed, true, |t, x| Ok(t.relu(x))));
    out.push(unary_case("leaky_relu", seed, true, |t, x| Ok(t.leaky_relu(x, 0.2))));
    out.push(unary_case("tanh", seed, false, |t, x| Ok(t.tanh(x))));
    out.push(unary_case("sigmoid", seed, false, |t, x| Ok(t.sigmoid(x))));
    out.push(unary_case("exp", seed, false, |t, x| Ok(t.exp(x))));
    out.push(unary_case("abs", seed, true, |t, x| Ok(t.abs(x))));
    out.push(unary_case("square", seed, false, |t, x| Ok(t.square(x))));
    out.push(unary_case("clamp", seed, false, |t, x| {
        // inputs sit in (-1, 1); shift them off the clamp edges
        let s = t.scale(x, 0.5);
        let y = t.add_scalar(s, 0.1);
        Ok(t.clamp(y, -0.25, 0.35))
    }));
    out.push(unary_case("softmax", seed, false, |t, x| t.softmax(x)));
    out.push(unary_case("log_softmax", seed, false, |t, x| t.log_softmax(x)));
    out.push(unary_case("mean", seed, false, |t, x| {
        let m = t.mean(x);
        Ok(t.square(m))
    }));
    out.push(unary_case("gather_rows", seed, false, |t, x| t.gather_rows(x, &[4, 0, 2])));
    out.push(unary_case("bce_with_logits", seed, false, |t, x| {
        let s = t.scale(x, 3.0);
        Ok(t.bce_with_logits(s, 0.9))
    }));
    out.push(unary_case("reshape_flatten", seed, false, |t, x| {
        let r = t.reshape(x, &[5, 3])?;
        let c = t.concat_cols(r, r)?;
        t.flatten(c)
    }));
    out.push(binary_case("add", seed, |t, a, b| t.add(a, b)));
    out.push(binary_case("sub", seed, |t, a, b| t.sub(a, b)));
    out.push(binary_case("mul", seed, |t, a, b| t.mul(a, b)));
    out.push(binary_case("minimum", seed, |t, a, b| t.minimum(a, b)));
    out.push(binary_case("concat_cols", seed, |t, a, b| t.concat_cols(a, b)));

    let mut net = CompositeNet {
        x: rand_tensor(&[3, 2, 6, 6], &mut rng, false),
        conv: Conv2d::new(2, 4, 3, 2, 1, &mut rng),
        bn: BatchNorm::new(4),
        dense: Dense::new(36, 5, &mut rng),
    };
    out.push((
        "composite_conv_bn_dense_softmax",
        check(
            &mut net,
            |m, t| {
                let x = t.param(&m.x);
                let h = m.conv.forward(t, x)?;
                let h = m.bn.forward(t, h, Mode::Train)?;
                let h = t.tanh(h);
                let h = t.flatten(h)?;
                let h = m.dense.forward(t, h)?;
                let p = t.softmax(h)?;
                project(t, p, seed)
            },
            SUITE_STEP,
            1,
        ),
    ));
    out
}
