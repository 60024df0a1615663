use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonorl::env::*;
use sonorl::phantom::*;
use sonorl::quality::OracleQuality;
use sonorl::SonoError;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn make_env(cfg: EnvConfig, seed: u64) -> Env {
    let ph = Phantom::new(PhantomConfig::default().with_image_size(32)).unwrap();
    Env::new(
        ph.clone(),
        Arc::new(ph.clone()),
        Arc::new(OracleQuality::new(ph)),
        cfg,
        seed,
    )
}

#[test]
fn base_reward_case_table() {
    // (p, g) -> base; thresholds are inclusive
    let cases = [
        (0.89, 4.9, 0.0),
        (0.89, 5.0, 0.0),
        (0.89, 6.0, 0.0),
        (0.90, 4.9, 20.0),
        (0.90, 5.0, 50.0),
        (0.90, 6.0, 50.0),
        (0.95, 4.9, 20.0),
        (0.95, 5.0, 50.0),
        (0.95, 6.0, 50.0),
        (0.95, 4.0, 20.0),
        (0.50, 9.0, 0.0),
    ];
    for (p, g, want) in cases {
        assert_eq!(compute_base(p, g), want, "p={p} g={g}");
    }
}

#[test]
fn class_and_grade_rewards() {
    assert!((compute_class(0.7, 0.6) - 0.1).abs() < 1e-15);
    assert_eq!(compute_class(0.5, 0.5), 0.0);
    assert_eq!(compute_grade_reward(0.95, 6.0, 5.0), 1.0);
    assert_eq!(compute_grade_reward(0.80, 9.0, 1.0), 0.0);
    assert_eq!(compute_grade_reward(0.95, 5.0, 5.0), 0.0);
    assert_eq!(compute_grade_reward(0.90, 7.5, 2.5), 5.0);
    assert_eq!(compute_grade_reward(0.89, 7.5, 2.5), 0.0);
}

#[test]
fn actions_move_one_axis() {
    assert_eq!(Action::ALL.len(), 13);
    let q = [0.1, -0.2, 0.3, -0.4, 0.5, -0.6];
    assert_eq!(apply_action(&q, Action::Idle, 0.05, 0.05), q);
    let mut edge = q;
    edge[0] = 1.0;
    assert_eq!(apply_action(&edge, Action::PlusTx, 0.05, 0.05)[0], 1.0);
    let there = apply_action(&q, Action::PlusTy, 0.05, 0.05);
    assert_eq!(apply_action(&there, Action::MinusTy, 0.05, 0.05), q);
    for a in Action::ALL {
        let q2 = apply_action(&q, a, 0.05, 0.05);
        let changed = (0..6).filter(|&i| q2[i] != q[i]).count();
        assert_eq!(changed, usize::from(a != Action::Idle), "{a}");
        assert_eq!(Action::from_index(a.index()), Some(a));
    }
}

#[test]
fn rewards_add_up_on_random_steps() {
    let mut env = make_env(EnvConfig::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    env.reset().unwrap();
    for _ in 0..10_000 {
        if env.is_done() {
            env.reset().unwrap();
        }
        let a = Action::ALL[rng.gen_range(0..13)];
        let r = env.step(a).unwrap().reward;
        assert_eq!(r.total, r.base + r.cls + r.grade + r.step);
        assert_eq!(r.step, -0.1);
    }
}

#[test]
fn resets_never_start_in_the_success_basin() {
    let mut env = make_env(EnvConfig::default(), 3);
    for _ in 0..1000 {
        let s = env.reset().unwrap();
        let (p, g) = (s.p_prev, s.g_prev);
        assert!(!(p >= 0.9 && g >= 5.0));
        assert_eq!(s.step_index, 0);
    }
}

#[test]
fn reset_is_seeded() {
    let a = make_env(EnvConfig::default(), 9).reset().unwrap().pose;
    let b = make_env(EnvConfig::default(), 9).reset().unwrap().pose;
    let c = make_env(EnvConfig::default(), 10).reset().unwrap().pose;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn reset_covers_every_octant_of_the_start_box() {
    let cfg = EnvConfig::default();
    let mut env = make_env(cfg.clone(), 4);
    let center = env.phantom().canonical_pose(cfg.target_view);
    let mut counts = [0usize; 64];
    let n = 10_000;
    for _ in 0..n {
        let q = env.reset().unwrap().pose;
        let cell = (0..6).fold(0, |acc, i| acc << 1 | usize::from(q[i] > center[i]));
        counts[cell] += 1;
    }
    let expect = n as f64 / 64.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);
    assert!(counts.iter().all(|&c| c > 0));
    assert!(p > 0.01, "chi2={chi2} p={p}");
}

#[test]
fn full_cube_reset_when_box_covers_it() {
    let cfg = EnvConfig {
        reset_half_width: 2.0,
        ..EnvConfig::default()
    };
    let mut env = make_env(cfg, 5);
    let mut counts = [0usize; 64];
    let n = 10_000;
    for _ in 0..n {
        let q = env.reset().unwrap().pose;
        let cell = (0..6).fold(0, |acc, i| acc << 1 | usize::from(q[i] > 0.0));
        counts[cell] += 1;
    }
    let expect = n as f64 / 64.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    assert!(1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2) > 0.01);
}

#[test]
fn scripted_approach_succeeds_quickly() {
    let mut env = make_env(EnvConfig::default(), 6);
    let mut q = env.phantom().canonical_pose(View::SC);
    q[0] += 6.0 * 0.05;
    env.reset_to(q).unwrap();
    let mut steps = 0;
    loop {
        let out = env.step(Action::MinusTx).unwrap();
        steps += 1;
        if out.done {
            assert!(out.success);
            assert_eq!(out.reward.base, 50.0);
            break;
        }
        assert!(steps < 8);
    }
    assert!(steps <= 8);
    assert!(matches!(env.step(Action::Idle), Err(SonoError::EpisodeFinished)));
}

#[test]
fn truncates_at_max_length() {
    let cfg = EnvConfig {
        max_episode_length: 5,
        ..EnvConfig::default()
    };
    let mut env = make_env(cfg, 7);
    env.reset_to([1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
    for i in 0..5 {
        let out = env.step(Action::Idle).unwrap();
        assert_eq!(out.done, i == 4);
        assert!(!out.success);
    }
}

/// Walks from d = 0.30 along x into the basin: partial, partial, success.
fn partial_walk(repeat: bool) -> Vec<f64> {
    let cfg = EnvConfig {
        repeat_partial_base: repeat,
        ..EnvConfig::default()
    };
    let mut env = make_env(cfg, 8);
    let mut q = env.phantom().canonical_pose(View::SC);
    q[0] += 0.30;
    env.reset_to(q).unwrap();
    (0..3).map(|_| env.step(Action::MinusTx).unwrap().reward.base).collect()
}

#[test]
fn partial_base_once_per_episode_by_default() {
    assert_eq!(partial_walk(false), vec![20.0, 0.0, 50.0]);
    assert_eq!(partial_walk(true), vec![20.0, 20.0, 50.0]);
}

#[test]
fn class_reward_telescopes_and_episode_bound_holds() {
    let mut env = make_env(EnvConfig::default(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let p0 = env.reset().unwrap().p_prev;
        let (mut cls, mut total, mut steps) = (0.0, 0.0, 0);
        let (mut p, mut success) = (p0, false);
        while !env.is_done() {
            let out = env.step(Action::ALL[rng.gen_range(0..13)]).unwrap();
            cls += out.reward.cls;
            total += out.reward.total;
            steps += 1;
            p = out.p;
            success = out.success;
        }
        assert!((cls - (p - p0)).abs() < 1e-12);
        if success {
            assert!(total >= 50.0 + steps as f64 * -0.1 + (p - p0) - 10.0);
        }
    }
}

#[test]
fn approaching_moves_never_shape_negatively_above_threshold() {
    let env = make_env(EnvConfig::default(), 13);
    let ph = env.phantom().clone();
    let oracle = OracleQuality::new(ph.clone());
    let c = ph.canonical_pose(View::SC);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut checked = 0;
    while checked < 500 {
        let q: Pose = std::array::from_fn(|i| c[i] + rng.gen_range(-0.2..0.2));
        for a in Action::ALL {
            let q2 = apply_action(&q, a, 0.05, 0.05);
            if weighted_sq_dist(&q2, &c) >= weighted_sq_dist(&q, &c) {
                continue;
            }
            let (p0, p1) = (oracle.predict_pose(&q), oracle.predict_pose(&q2));
            let (pa, pb) = (p0.probs[View::SC.index()], p1.probs[View::SC.index()]);
            if pa >= 0.9 && pb >= 0.9 {
                let shaping = compute_class(pb, pa) + compute_grade_reward(pb, p1.grade, p0.grade);
                assert!(shaping >= 0.0);
                checked += 1;
            }
        }
    }
}

#[test]
fn identical_seeds_and_actions_give_identical_trajectories() {
    let run = || {
        let mut env = make_env(EnvConfig::default(), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        env.reset().unwrap();
        let mut out = Vec::new();
        for _ in 0..50 {
            if env.is_done() {
                env.reset().unwrap();
            }
            let r = env.step(Action::ALL[rng.gen_range(0..13)]).unwrap();
            let s = env.state().unwrap();
            out.push((s.pose, s.wrench, s.frame.clone(), r.reward));
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn trajectory_jsonl_has_steps_then_footer() {
    let rec = StepRecord {
        t: 0,
        pose: [0.0; 6],
        action: Action::PlusRz.name().into(),
        reward: RewardBreakdown::new(0.0, 0.1, 0.0, -0.1),
        p: 0.5,
        g: 2.0,
    };
    let traj = Trajectory {
        records: vec![rec.clone(), StepRecord { t: 1, ..rec }],
        success: false,
        elapsed_s: 1.25,
        seed: 3,
    };
    let mut buf = Vec::new();
    traj.write_jsonl(&mut buf, false).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["action"], "+Rz");
    for k in ["base", "cls", "grade", "step", "total"] {
        assert!(lines[0]["reward"][k].is_number());
    }
    assert_eq!(lines[2]["steps"], 2);
    assert!(lines[2].get("elapsed_s").is_none());
    let mut timed = Vec::new();
    traj.write_jsonl(&mut timed, true).unwrap();
    assert!(String::from_utf8(timed).unwrap().contains("elapsed_s"));
}

proptest! {
    #[test]
    fn class_reward_bounded(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let r = compute_class(p, q);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn breakdown_total_is_exact_sum(b in -100.0f64..100.0, c in -1.0f64..1.0, g in -10.0f64..10.0, s in -1.0f64..0.0) {
        let r = RewardBreakdown::new(b, c, g, s);
        prop_assert_eq!(r.total, b + c + g + s);
    }

    #[test]
    fn actions_stay_in_cube(q in prop::array::uniform6(-1.0f64..=1.0), a in 0usize..13) {
        let q2 = apply_action(&q, Action::ALL[a], 0.05, 0.05);
        prop_assert!(q2.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
