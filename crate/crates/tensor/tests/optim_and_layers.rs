use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sonorl_tensor::gradcheck::{layer_suite, Params};
use sonorl_tensor::{checkpoint, Adam, AdamConfig, Conv2d, Dense, Mode, Module, Tape, Tensor};

#[test]
fn adam_with_zero_gradient_leaves_parameters() {
    let mut p = Params(vec![Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap().with_grad()]);
    p.0[0].grad_mut();
    {
        let mut tape = Tape::new();
        let x = tape.param(&p.0[0]);
        let z = tape.scale(x, 0.0);
        let l = tape.sum(z);
        tape.backward(l).unwrap();
    }
    Adam::new(AdamConfig::new(0.1, 0.9)).step(&mut p).unwrap();
    assert_eq!(p.0[0].data(), &[0.3, -1.0, 2.0]);
}

/// Scalar Adam written out longhand.
fn reference_adam(theta0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    for t in 1..=steps {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * mh / (vh.sqrt() + eps);
    }
    th
}

#[test]
fn adam_minimizes_square_like_the_reference() {
    let mut p = Params(vec![Tensor::scalar(1.0).with_grad()]);
    let mut opt = Adam::new(AdamConfig::new(0.1, 0.9));
    for _ in 0..100 {
        let mut tape = Tape::new();
        let x = tape.param(&p.0[0]);
        let sq = tape.square(x);
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        drop(tape);
        opt.step(&mut p).unwrap();
    }
    let th = p.0[0].data()[0];
    assert!(th.abs() < 0.05, "theta {th}");
    assert!((th - reference_adam(1.0, 0.1, 100)).abs() < 1e-12);
    assert_eq!(opt.state.step, 100);
}

#[test]
fn dense_and_conv_gradients_are_tight() {
    for seed in 0..5 {
        for (name, r) in layer_suite(seed) {
            if name == "dense" || name == "conv2d" {
                let r = r.unwrap();
                assert!(r.max_rel_err < 1e-4, "{name}: {}", r.worst);
            }
        }
    }
}

struct Net {
    conv: Conv2d,
    bn: sonorl_tensor::BatchNorm,
    dense: Dense,
}

impl Module for Net {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = sonorl_tensor::scoped("conv", self.conv.params());
        v.extend(sonorl_tensor::scoped("bn", self.bn.params()));
        v.extend(sonorl_tensor::scoped("dense", self.dense.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = sonorl_tensor::scoped("conv", self.conv.params_mut());
        v.extend(sonorl_tensor::scoped("bn", self.bn.params_mut()));
        v.extend(sonorl_tensor::scoped("dense", self.dense.params_mut()));
        v
    }
    fn buffers(&self) -> Vec<(String, &sonorl_tensor::RunningStats)> {
        sonorl_tensor::scoped("bn", self.bn.buffers())
    }
}

fn net(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Net {
        conv: Conv2d::new(1, 2, 3, 1, 1, &mut rng),
        bn: sonorl_tensor::BatchNorm::new(2),
        dense: Dense::new(32, 3, &mut rng),
    }
}

fn forward(n: &Net, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let h = n.conv.forward(&mut tape, xv).unwrap();
    let h = n.bn.forward(&mut tape, h, Mode::Eval).unwrap();
    let h = tape.relu(h);
    let h = tape.flatten(h).unwrap();
    let y = n.dense.forward(&mut tape, h).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn forward_is_deterministic_and_checkpoints_round_trip() {
    let a = net(1);
    let x = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    {
        // fold some batch statistics into the running buffers
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let h = a.conv.forward(&mut tape, xv).unwrap();
        a.bn.forward(&mut tape, h, Mode::Train).unwrap();
    }
    let y1 = forward(&a, &x);
    assert_eq!(y1, forward(&a, &x));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.srl");
    checkpoint::save(&a, &path).unwrap();
    let mut b = net(2);
    checkpoint::load(&mut b, &path).unwrap();
    let y2 = forward(&b, &x);
    assert!(y1.iter().zip(&y2).all(|(p, q)| p.to_bits() == q.to_bits()));
}
