use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonorl::explain::*;
use sonorl::ppo::{PolicyNet, StateVariant};
use sonorl::{Frame, Result};
use sonorl_tensor::Tensor;

/// `f(x) = sum_i w_i x_i + a_i x_i^2`, with its gradient written by hand.
struct Quadratic {
    size: usize,
    w: Vec<f64>,
    a: Vec<f64>,
}

impl Attributable for Quadratic {
    fn image_size(&self) -> usize {
        self.size
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn value_and_grad(&self, images: Tensor, _target: usize, _kind: TargetKind) -> Result<(Vec<f64>, Vec<f64>)> {
        let px = self.size * self.size;
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for img in images.data().chunks(px) {
            values.push((0..px).map(|i| self.w[i] * img[i] + self.a[i] * img[i] * img[i]).sum());
            grads.extend((0..px).map(|i| self.w[i] + 2.0 * self.a[i] * img[i]));
        }
        Ok((values, grads))
    }
}

fn model(size: usize, quad: f64, rng: &mut impl Rng) -> Quadratic {
    let px = size * size;
    Quadratic {
        size,
        w: (0..px).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        a: (0..px).map(|_| quad * rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn frame(size: usize, rng: &mut impl Rng) -> Frame {
    Frame::new(size, (0..size * size).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

#[test]
fn baseline_input_gives_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(8, 0.5, &mut rng);
    let x = Frame::filled(8, BLACK);
    let map = integrated_gradients(&m, &x, 0, &IgConfig::default()).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
    assert_eq!(map.delta, 0.0);
}

#[test]
fn linear_model_is_exact_at_any_step_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = model(8, 0.0, &mut rng);
    let x = frame(8, &mut rng);
    for steps in [2, 7, 50] {
        let cfg = IgConfig { steps, ..IgConfig::default() };
        let map = integrated_gradients(&m, &x, 0, &cfg).unwrap();
        for i in 0..64 {
            let want = m.w[i] * (x.data()[i] - BLACK);
            assert!((map.values[i] - want).abs() < 1e-12);
        }
        assert!(map.completeness_error() < 1e-12);
    }
}

#[test]
fn midpoint_rule_is_exact_for_quadratics() {
    // the path gradient is affine in alpha, so the midpoint sum integrates it exactly
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(8, 1.0, &mut rng);
    let x = frame(8, &mut rng);
    let cfg = IgConfig { steps: 5, rule: PathRule::Midpoint, ..IgConfig::default() };
    let map = integrated_gradients(&m, &x, 0, &cfg).unwrap();
    for i in 0..64 {
        let xi = x.data()[i];
        let want = m.w[i] * (xi - BLACK) + m.a[i] * (xi * xi - BLACK * BLACK);
        assert!((map.values[i] - want).abs() < 1e-12);
    }
}

#[test]
fn right_rule_error_shrinks_with_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = model(8, 1.0, &mut rng);
    let x = frame(8, &mut rng);
    let err = |steps| {
        integrated_gradients(&m, &x, 0, &IgConfig { steps, ..IgConfig::default() })
            .unwrap()
            .completeness_error()
    };
    let (e10, e100) = (err(10), err(100));
    assert!(e100 < e10 / 5.0, "{e10} {e100}");
}

#[test]
fn policy_attribution_satisfies_completeness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = PolicyNet::new(StateVariant::Multimodal, 32, &[8, 16, 16], 64, 13, 1.0, &mut rng).unwrap();
    let x = frame(32, &mut rng);
    let actor = ActorImage { net: &net, pose: [0.1, -0.2, 0.3, 0.0, 0.5, -0.5] };
    for kind in [TargetKind::Logit, TargetKind::Probability] {
        let cfg = IgConfig { steps: 200, target_kind: kind, rule: PathRule::Midpoint, ..IgConfig::default() };
        let map = integrated_gradients(&actor, &x, 3, &cfg).unwrap();
        assert_eq!(map.values.len(), 32 * 32);
        assert!(map.completeness_error() < 0.02, "{kind:?}: {}", map.completeness_error());
    }
}

#[test]
fn bad_arguments_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = model(8, 0.0, &mut rng);
    let x = frame(8, &mut rng);
    assert!(integrated_gradients(&m, &x, 0, &IgConfig { steps: 1, ..IgConfig::default() }).is_err());
    assert!(integrated_gradients(&m, &x, 1, &IgConfig::default()).is_err());
    assert!(integrated_gradients(&m, &frame(16, &mut rng), 0, &IgConfig::default()).is_err());
    let params_only = PolicyNet::new(StateVariant::Params, 32, &[8, 16, 16], 64, 13, 1.0, &mut rng).unwrap();
    let actor = ActorImage { net: &params_only, pose: [0.0; 6] };
    assert!(integrated_gradients(&actor, &frame(32, &mut rng), 0, &IgConfig::default()).is_err());
}

#[test]
fn masked_energy_and_exports() {
    let map = AttributionMap { size: 2, values: vec![1.0, -3.0, 0.5, 0.0], target: 0, steps: 50, delta: -1.5 };
    let (inside, outside) = masked_energy(&map, &[true, true, false, false]);
    assert_eq!((inside, outside), (2.0, 0.25));
    assert_eq!(map.to_gray8(), vec![255, 0, 223, 191]);
    let mut csv = Vec::new();
    map.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ig.pgm");
    map.write_pgm(&p).unwrap();
    assert!(std::fs::read(&p).unwrap().starts_with(b"P5"));
}
