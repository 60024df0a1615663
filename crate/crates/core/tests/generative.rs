use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonorl::datakit::{synth_corpus, GenConfig, Sample};
use sonorl::env::ImageSource;
use sonorl::generative::*;
use sonorl::phantom::*;
use sonorl::{Frame, SonoError};

fn tiny() -> VaeGanConfig {
    VaeGanConfig {
        image_size: 32,
        latent_dim: 8,
        channels: [4, 8, 8],
        cond_embed: 8,
        batch_size: 4,
        epochs: 1,
        ..VaeGanConfig::default()
    }
}

fn corpus(n: usize) -> Vec<Sample> {
    let ph = Phantom::new(PhantomConfig::default().with_image_size(32)).unwrap();
    synth_corpus(&ph, &GenConfig { count: n, seed: 2, ..GenConfig::default() }).unwrap()
}

fn pairs(data: &[Sample]) -> Vec<Pair<'_>> {
    data.iter().map(|s| (&s.frame, &s.condition)).collect()
}

#[test]
fn kl_examples() {
    assert_eq!(kl_loss(&[0.0; 5], &[0.0; 5], 1), 0.0);
    assert_eq!(kl_loss(&[1.0], &[0.0], 1), 0.5);
    // per-sample average over the batch
    assert_eq!(kl_loss(&[1.0, 1.0], &[0.0, 0.0], 2), 0.5);
}

#[test]
fn reparameterize_has_the_right_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 40_000;
    let xs: Vec<f64> = (0..n).map(|_| reparameterize(&[1.5], &[2f64.ln()], &mut rng)[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((mean - 1.5).abs() < 0.03, "{mean}");
    assert!((var - 2.0).abs() < 0.06, "{var}");
}

#[test]
fn shapes_follow_the_config() {
    let cfg = VaeGanConfig::default();
    let m = VaeGan::new(cfg.clone()).unwrap();
    assert_eq!(m.generator.input_dim(), 100 + NUM_PARAMS);
    assert_eq!(m.latent_dim(), 100);
    let f = Frame::filled(32, 0.2);
    let enc = m.encode(&[&f]).unwrap();
    assert_eq!(enc[0].0.len(), 100);
    assert_eq!(enc[0].1.len(), 100);
    assert!(VaeGan::new(VaeGanConfig { image_size: 20, ..cfg }).is_err());
}

#[test]
fn generator_output_is_bounded() {
    let data = corpus(16);
    let m = VaeGan::new(tiny()).unwrap();
    let conds: Vec<&PoseCondition> = data.iter().map(|s| &s.condition).collect();
    let z: Vec<Vec<f64>> = sample_latents(16, 8, 3).into_iter().map(|v| v.iter().map(|x| x * 50.0).collect()).collect();
    for f in m.generate(&z, &conds).unwrap() {
        assert_eq!(f.size(), 32);
        assert!(f.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let frames: Vec<&Frame> = data.iter().map(|s| &s.frame).collect();
    assert!(m.discriminate(&frames, &conds).unwrap().iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn generate_checks_its_inputs() {
    let data = corpus(2);
    let m = VaeGan::new(tiny()).unwrap();
    let c = [&data[0].condition];
    assert!(matches!(m.generate(&[vec![0.0; 7]], &c), Err(SonoError::Contract(_))));
    assert!(m.generate(&[vec![0.0; 8], vec![0.0; 8]], &c).is_err());
    let mut m = m;
    let wrong = Frame::filled(64, 0.0);
    assert!(m.train_step(&[(&wrong, &data[0].condition), (&wrong, &data[1].condition)]).is_err());
    assert!(m.train_step(&[(&data[0].frame, &data[0].condition)]).is_err());
}

#[test]
fn training_reports_finite_losses_and_is_reproducible() {
    let data = corpus(24);
    let p = pairs(&data);
    let run = || {
        let mut m = VaeGan::new(VaeGanConfig { epochs: 2, ..tiny() }).unwrap();
        let mut seen = 0;
        let reps = m.train(&p, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        (m, reps)
    };
    let (m, a) = run();
    let (_, b) = run();
    assert_eq!(a, b);
    for r in &a {
        assert!(r.reconstruction.is_finite() && r.kl >= 0.0 && r.adversarial_d > 0.0 && r.adversarial_g > 0.0);
    }
    assert_eq!(a[1].epoch, 1);
    let mut csv = Vec::new();
    write_loss_csv(&a, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);

    // the condition path is live after an epoch
    let z = sample_latents(1, 8, 5);
    let c = data[0].condition;
    let mut shifted = c.values;
    shifted.iter_mut().for_each(|v| *v = (*v + 0.1).min(1.0));
    let c2 = PoseCondition::new(shifted).unwrap();
    let f1 = m.generate(&z, &[&c]).unwrap();
    let f2 = m.generate(&z, &[&c2]).unwrap();
    let l1: f64 = f1[0].data().iter().zip(f2[0].data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 > 0.0);
}

#[test]
fn checkpoint_round_trip_restores_generation() {
    let data = corpus(8);
    let mut a = VaeGan::new(tiny()).unwrap();
    a.train(&pairs(&data), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let mut b = VaeGan::new(VaeGanConfig { seed: 77, ..tiny() }).unwrap();
    let z = sample_latents(3, 8, 1);
    let conds: Vec<&PoseCondition> = data.iter().take(3).map(|s| &s.condition).collect();
    assert_ne!(a.generate(&z, &conds).unwrap(), b.generate(&z, &conds).unwrap());
    b.load(dir.path()).unwrap();
    assert_eq!(a.generate(&z, &conds).unwrap(), b.generate(&z, &conds).unwrap());
    let frames: Vec<&Frame> = data.iter().take(3).map(|s| &s.frame).collect();
    assert_eq!(a.reconstruct(&frames, &conds).unwrap(), b.reconstruct(&frames, &conds).unwrap());
}

#[test]
fn cgan_trains_without_reconstruction_terms() {
    let data = corpus(16);
    let mut g = CGan::new(tiny()).unwrap();
    let reps = g.train(&pairs(&data), |_| {}).unwrap();
    assert_eq!(reps[0].reconstruction, 0.0);
    assert_eq!(reps[0].kl, 0.0);
    assert!(reps[0].adversarial_d.is_finite() && reps[0].adversarial_g.is_finite());
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let mut h = CGan::new(VaeGanConfig { seed: 1, ..tiny() }).unwrap();
    h.load(dir.path()).unwrap();
    let z = sample_latents(1, 8, 2);
    assert_eq!(g.generate(&z, &[&data[0].condition]).unwrap(), h.generate(&z, &[&data[0].condition]).unwrap());
}

#[test]
fn generator_source_is_a_deterministic_image_source() {
    let m = VaeGan::new(tiny()).unwrap();
    let src = GeneratorSource { model: std::sync::Arc::new(m), output_size: 64, seed: 4 };
    let c = corpus(1)[0].condition;
    let a = src.frame(&c).unwrap();
    assert_eq!(a.size(), 64);
    assert_eq!(a, src.frame(&c).unwrap());
}

#[test]
fn window_helpers() {
    assert!(window_means_decreasing(&[5.0, 4.0, 3.0, 3.5, 1.0, 1.0], 2));
    assert!(!window_means_decreasing(&[5.0, 4.0, 5.0, 4.0], 2));
    assert!(!window_means_decreasing(&[5.0, 4.0], 2));
    assert_eq!(smooth(&[2.0, 4.0, 6.0], 2), vec![2.0, 3.0, 5.0]);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..20), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lv: Vec<f64> = mu.iter().map(|_| rng.gen_range(-4.0..4.0)).collect();
        prop_assert!(kl_loss(&mu, &lv, 1) >= 0.0);
    }
}
