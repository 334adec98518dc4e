//! Property tests over the building blocks: simplex outputs, gradient linearity,
//! the regularizer bound, PID structure, angle wrapping and label matching.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdn_core::control::{pid_action, HistoryWindow, PidParams};
use sdn_core::diffcore::{Graph, Tensor};
use sdn_core::envs::pendulum::{demonstrator_mode, wrap_angle};
use sdn_core::envs::{demonstrator_action, pendulum_step, DemonstratorConfig, PendulumPhysics, PendulumState};
use sdn_core::evalkit::switch_purity;
use sdn_core::gumbel::{anneal, gumbel_softmax, GumbelConfig};
use sdn_core::train::ce_regularizer;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn pid(kp: Vec<f64>, ki: Vec<f64>, kd: Vec<f64>, mu: Vec<f64>) -> PidParams {
    let d = mu.len();
    PidParams { kp, ki, kd, mu, sigma_diag: vec![1.0; d], mode_id: 0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_simplices(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let s = g.softmax_last(x);
        for r in g.value(s).to_rows() {
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_objective(x in vec_strategy(6), a in -4.0f64..4.0) {
        // d(a f)/dx = a df/dx for f = sum(tanh(x) * x)
        let grad = |scale: f64| {
            let mut g = Graph::new();
            let v = g.param(Tensor::vector(x.clone()));
            let t = g.tanh(v);
            let p = g.mul(t, v).unwrap();
            let s = g.sum(p);
            let f = g.scale(s, scale);
            g.backward(f).unwrap().get_or_zero(v, 6)
        };
        let (g1, ga) = (grad(1.0), grad(a));
        for (u, w) in g1.iter().zip(&ga) {
            prop_assert!((a * u - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn gumbel_samples_live_on_the_simplex(logits in vec_strategy(4), tau in 0.05f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let soft = gumbel_softmax(&logits, tau, &mut rng, false).unwrap();
        prop_assert!(soft.y.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((soft.y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let hard = gumbel_softmax(&logits, tau, &mut rng, true).unwrap();
        prop_assert_eq!(hard.y.iter().filter(|v| **v == 1.0).count(), 1);
        prop_assert_eq!(hard.y.iter().filter(|v| **v == 0.0).count(), 3);
    }

    #[test]
    fn anneal_is_monotone_and_floored(tau0 in 0.6f64..10.0, decay in 0.5f64..1.0, e in 0usize..500) {
        let cfg = GumbelConfig { tau0, decay, ..GumbelConfig::new(3) };
        let (a, b) = (anneal(&cfg, e), anneal(&cfg, e + 1));
        prop_assert!(b <= a);
        prop_assert!(b >= cfg.tau_min);
    }

    #[test]
    fn regularizer_is_at_least_ln_k(k in 2usize..7, rows in prop::collection::vec(simplex_row(6), 1..20)) {
        let batch: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let head: Vec<f64> = r[..k].to_vec();
                let s: f64 = head.iter().sum();
                head.into_iter().map(|v| v / s).collect()
            })
            .collect();
        prop_assert!(ce_regularizer(&batch) >= (k as f64).ln() - 1e-12);
    }

    #[test]
    fn pid_is_linear_in_gains(
        kp in vec_strategy(2), ki in vec_strategy(2), kd in vec_strategy(2), mu in vec_strategy(2),
        states in prop::collection::vec(vec_strategy(2), 1..6), a in -5.0f64..5.0,
    ) {
        let hist = HistoryWindow::from_states(&states, 0.05, 3).unwrap();
        let base = pid_action(&pid(kp.clone(), ki.clone(), kd.clone(), mu.clone()), &hist).unwrap();
        let sc = |v: &[f64]| v.iter().map(|x| a * x).collect::<Vec<_>>();
        let scaled = pid_action(&pid(sc(&kp), sc(&ki), sc(&kd), mu), &hist).unwrap();
        for (u, w) in base.iter().zip(&scaled) {
            prop_assert!((a * u - w).abs() <= 1e-9 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn pid_is_zero_at_the_reference(kp in vec_strategy(3), ki in vec_strategy(3), kd in vec_strategy(3), mu in vec_strategy(3), n in 1usize..8) {
        let hist = HistoryWindow::from_states(&vec![mu.clone(); n], 0.05, 4).unwrap();
        let u = pid_action(&pid(kp, ki, kd, mu), &hist).unwrap();
        prop_assert!(u.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn derivative_term_ignores_the_reference(kd in vec_strategy(2), mu1 in vec_strategy(2), mu2 in vec_strategy(2), states in prop::collection::vec(vec_strategy(2), 2..6)) {
        let hist = HistoryWindow::from_states(&states, 0.05, 3).unwrap();
        let z = vec![0.0; 2];
        let a = pid_action(&pid(z.clone(), z.clone(), kd.clone(), mu1), &hist).unwrap();
        let b = pid_action(&pid(z.clone(), z, kd, mu2), &hist).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wrapped_angles_stay_in_range(t in -1e4f64..1e4) {
        let w = wrap_angle(t);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        prop_assert!(((t - w) / std::f64::consts::TAU - ((t - w) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }

    #[test]
    fn steps_keep_theta_wrapped(theta in -PI..PI, omega in -10.0f64..10.0, u in -20.0f64..20.0) {
        let p = PendulumPhysics::default();
        let s = pendulum_step(PendulumState { theta, omega }, u, &p);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&s.theta));
        prop_assert!(s.omega.is_finite());
    }

    #[test]
    fn demonstrator_is_a_function_of_state(theta in -PI..PI, omega in -10.0f64..10.0) {
        let (p, c) = (PendulumPhysics::default(), DemonstratorConfig::default());
        let s = PendulumState { theta, omega };
        let (u, m) = demonstrator_action(s, &p, &c);
        prop_assert_eq!(m, demonstrator_mode(s, &p, &c));
        let [kt, ko] = c.mode_gains(m);
        prop_assert_eq!(u, (kt * theta + ko * omega).clamp(-p.u_max, p.u_max));
        prop_assert_eq!((u, m), demonstrator_action(s, &p, &c));
    }

    #[test]
    fn purity_ignores_mode_relabeling(labels in prop::collection::vec(0usize..3, 1..60), noise in prop::collection::vec(0usize..3, 60), perm in Just([2usize, 0, 1])) {
        let pred: Vec<usize> = labels.iter().zip(&noise).map(|(l, n)| if *n == 0 { (l + 1) % 3 } else { *l }).collect();
        let relabeled: Vec<usize> = pred.iter().map(|m| perm[*m]).collect();
        let a = switch_purity(&pred, &labels, 3, 3, false).unwrap();
        let b = switch_purity(&relabeled, &labels, 3, 3, false).unwrap();
        assert_relative_eq!(a.purity, b.purity);
        prop_assert!((0.0..=1.0).contains(&a.purity));
        prop_assert_eq!(a.confusion.iter().flatten().sum::<usize>(), labels.len());
    }
}
