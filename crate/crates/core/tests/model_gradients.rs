//! Reverse-mode gradients of the full training objectives against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdn_core::diffcore::{grad_check, Tensor};
use sdn_core::envs::{DemoMeta, Demonstration, Record};
use sdn_core::gumbel::GumbelConfig;
use sdn_core::models::{Activation, HeadSpec, Model, ModelKind, TrunkConfig};
use sdn_core::train::{build_model, gumbel_noise, loss_graph, ModelSpec, TrainSet};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn toy_demo(n: usize, dz: usize, dx: usize, du: usize, seed: u64) -> Demonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let records = (0..n).map(|i| Record { t: i as f64 * 0.1, z: v(dz), x: v(dx), u: v(du), mode: Some(i % 2) }).collect();
    let meta = DemoMeta { env: "toy".into(), seed, dt: 0.1, l: 3, episode_starts: vec![0], train_frames: None, goals: None };
    Demonstration { meta, records }
}

fn check(kind: ModelKind, head: HeadSpec, use_ce: bool) -> f64 {
    let (dz, dx, du) = (3, head.state_dim, head.action_dim);
    let demo = toy_demo(6, dz, dx, du, 11);
    let data = TrainSet::from_demo(&demo, 0..6, 3, 0.1).unwrap();
    let batch = data.all();
    let trunk = TrunkConfig { input_dim: dz, hidden: vec![4, 3], activation: Activation::Tanh };
    let mu_init_range =
        if head.offset(sdn_core::models::BlockKind::Mu).is_some() && kind == ModelKind::Sdn { vec![(-0.5, 0.5); dx] } else { Vec::new() };
    let spec = ModelSpec { kind, trunk, head: head.clone(), mu_init_range };
    let model = build_model(&spec, &GumbelConfig::new(head.k), 5).unwrap();
    let noise = gumbel_noise(batch.len(), head.k, &mut ChaCha8Rng::seed_from_u64(3));
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            let lv = loss_graph(g, &model, vars, &batch, Some(&noise), 0.7, use_ce, 0.5)?;
            Ok(lv.total)
        },
        &params,
        H,
    )
    .unwrap()
}

#[test]
fn sdn_loss_gradient_matches_finite_differences() {
    let e = check(ModelKind::Sdn, HeadSpec::gains_only(3, 2), true);
    assert!(e < TOL, "gains head: {e}");
    let e = check(ModelKind::Sdn, HeadSpec::reference_only(3, 2, -2.0), true);
    assert!(e < TOL, "reference head: {e}");
}

#[test]
fn mdn_loss_gradient_matches_finite_differences() {
    let e = check(ModelKind::Mdn, HeadSpec::gains_only(3, 2), false);
    assert!(e < TOL, "{e}");
    let e = check(ModelKind::Mdn, HeadSpec::reference_only(2, 2, -2.0), false);
    assert!(e < TOL, "{e}");
}

#[test]
fn regressor_loss_gradient_matches_finite_differences() {
    let e = check(ModelKind::Regressor, HeadSpec::gains_only(1, 2), false);
    assert!(e < TOL, "{e}");
    let e = check(ModelKind::Regressor, HeadSpec::reference_only(1, 2, -2.0), false);
    assert!(e < TOL, "{e}");
}

#[test]
fn every_parameter_gets_a_gradient() {
    let head = HeadSpec::gains_only(3, 2);
    let demo = toy_demo(6, 3, 2, 1, 2);
    let data = TrainSet::from_demo(&demo, 0..6, 3, 0.1).unwrap();
    let spec = ModelSpec {
        kind: ModelKind::Sdn,
        trunk: TrunkConfig { input_dim: 3, hidden: vec![4], activation: Activation::Tanh },
        head: head.clone(),
        mu_init_range: vec![],
    };
    let model = build_model(&spec, &GumbelConfig::new(3), 1).unwrap();
    let mut g = sdn_core::diffcore::Graph::new();
    let vars = model.register(&mut g);
    let noise = gumbel_noise(6, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let lv = loss_graph(&mut g, &model, &vars, &data.all(), Some(&noise), 1.0, true, 1.0).unwrap();
    let grads = g.backward(lv.total).unwrap();
    assert!(matches!(model, Model::Sdn(_)));
    for (v, (name, t)) in vars.iter().zip(model.params()) {
        let gr = grads.get_or_zero(*v, t.numel());
        assert!(gr.iter().any(|x| *x != 0.0), "no gradient reaches {name}");
    }
}
