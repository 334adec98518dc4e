use std::f64::consts::PI;

use sdn_core::envs::arm::render_clean;
use sdn_core::envs::pendulum::{demonstrator_mode, pendulum_step_fine};
use sdn_core::envs::{
    demonstrator_action, generate_arm_dataset, generate_pendulum_dataset, pendulum_energy, ArmTaskConfig, DemoMeta, Demonstration,
    DemonstratorConfig, PendulumDataConfig, PendulumPhysics, PendulumState, Record,
};

fn small_data() -> PendulumDataConfig {
    PendulumDataConfig { n_pairs: 800, ..PendulumDataConfig::default() }
}

fn free_swing_drift(substeps: usize) -> f64 {
    let p = PendulumPhysics { b: 0.0, ..PendulumPhysics::default() };
    let mut s = PendulumState { theta: 2.0, omega: 0.0 };
    let e0 = pendulum_energy(s, &p);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        s = pendulum_step_fine(s, 0.0, &p, substeps);
        worst = worst.max((pendulum_energy(s, &p) - e0).abs());
    }
    worst
}

#[test]
fn undamped_free_swing_energy_error_is_high_order() {
    let p = PendulumPhysics::default();
    let coarse = free_swing_drift(1);
    assert!(coarse < 1e-3 * p.m * p.g * p.l, "drift {coarse}");
    // halving the step cuts RK4's error by at least 2^4
    let ratio = coarse / free_swing_drift(2);
    assert!(ratio > 12.0, "ratio {ratio}");
}

#[test]
fn pendulum_dataset_is_seed_determined() {
    let (p, c) = (PendulumPhysics::default(), DemonstratorConfig::default());
    let a = generate_pendulum_dataset(&p, &c, &small_data(), 7, 10).unwrap();
    let b = generate_pendulum_dataset(&p, &c, &small_data(), 7, 10).unwrap();
    let other = generate_pendulum_dataset(&p, &c, &small_data(), 8, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.records, other.records);
}

#[test]
fn recorded_actions_and_modes_are_the_demonstrators() {
    let (p, c) = (PendulumPhysics::default(), DemonstratorConfig::default());
    let d = generate_pendulum_dataset(&p, &c, &small_data(), 3, 10).unwrap();
    for r in &d.records {
        let s = PendulumState { theta: r.x[0], omega: r.x[1] };
        let (u, m) = demonstrator_action(s, &p, &c);
        assert_eq!(r.u, vec![u]);
        assert_eq!(r.mode, Some(m.index()));
        assert_eq!(m, demonstrator_mode(s, &p, &c));
        assert!((-PI..PI).contains(&r.x[0]));
    }
    assert!(d.records.windows(2).all(|w| w[0].t < w[1].t));
}

#[test]
fn every_pendulum_mode_is_represented() {
    let (p, c) = (PendulumPhysics::default(), DemonstratorConfig::default());
    let d = generate_pendulum_dataset(&p, &c, &PendulumDataConfig::default(), 0, 10).unwrap();
    let f = d.mode_frequencies();
    assert_eq!(f.len(), 3);
    assert!(f.iter().all(|v| *v >= 0.05), "{f:?}");
}

/// Zero joint angles lay the arm along the +x axis from 0 to n; the stroke intensity is
/// exp(-d^2 / (2 w^2)) of the distance to that segment.
#[test]
fn straight_arm_raster_matches_closed_form() {
    let n = 8;
    let (h, w) = (16, 16);
    let img = render_clean(&vec![0.0; n], h, w);
    let half = (n as f64 + 2.0) / 2.0;
    let width = sdn_core::envs::arm::LINE_WIDTH;
    for r in 0..h {
        let y = half - 2.0 * half * r as f64 / (h - 1) as f64;
        for c in 0..w {
            let x = -1.0 + (n as f64 + 2.0) * c as f64 / (w - 1) as f64;
            let dx = if x < 0.0 {
                -x
            } else if x > n as f64 {
                x - n as f64
            } else {
                0.0
            };
            let d2 = dx * dx + y * y;
            let want = (-d2 / (2.0 * width * width)).exp();
            assert!((img[r * w + c] - want).abs() < 1e-12, "pixel ({r}, {c})");
        }
    }
}

#[test]
fn arm_actions_follow_the_current_goal() {
    let cfg = ArmTaskConfig::default();
    let d = generate_arm_dataset(600, &cfg, 5).unwrap();
    let tol = 6.0 * cfg.process_noise;
    for r in &d.records {
        let g = &cfg.goals[r.mode.unwrap()];
        for ((u, x), gi) in r.u.iter().zip(&r.x).zip(g) {
            assert!((u - cfg.kp_fixed * (gi - x)).abs() < tol);
        }
    }
    let visited: std::collections::BTreeSet<usize> = d.records.iter().filter_map(|r| r.mode).collect();
    assert_eq!(visited.len(), cfg.goals.len());
    assert_eq!(d, generate_arm_dataset(600, &cfg, 5).unwrap());
}

#[test]
fn jsonl_layout_matches_golden() {
    let meta = DemoMeta { env: "pendulum".into(), seed: 1, dt: 0.05, l: 10, episode_starts: vec![0], train_frames: None, goals: None };
    let records = (0..3)
        .map(|i| Record { t: 0.05 * i as f64, x: vec![0.5 * i as f64, -1.0], u: vec![0.25], z: vec![1.0, 0.0, -0.25], mode: Some(i) })
        .collect();
    let d = Demonstration { meta, records };
    let mut buf = Vec::new();
    d.write_jsonl(&mut buf).unwrap();
    let golden = include_str!("golden/demo_header_3.jsonl");
    assert_eq!(String::from_utf8(buf).unwrap(), golden);
    let back = Demonstration::read_jsonl(golden.as_bytes()).unwrap();
    assert_eq!(back, d);
}
