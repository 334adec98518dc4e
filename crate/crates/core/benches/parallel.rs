//! Parallel vs sequential evaluation: demonstrator rollouts and an SDN phase map.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdn_core::envs::{DemonstratorConfig, PendulumPhysics};
use sdn_core::evalkit::{default_grid, phase_map, rollout, DemonstratorPolicy, RolloutConfig};
use sdn_core::gumbel::GumbelConfig;
use sdn_core::models::{Activation, HeadSpec, Model, ModelKind, TrunkConfig};
use sdn_core::par::Parallelism;
use sdn_core::train::{build_model, ModelSpec};

const MODES: [(&str, Parallelism); 2] = [("parallel", Parallelism::Parallel), ("sequential", Parallelism::Sequential)];

fn rollouts(c: &mut Criterion) {
    let phys = PendulumPhysics::default();
    let demo = DemonstratorConfig::default();
    let policy = DemonstratorPolicy { phys: &phys, cfg: &demo };
    let cfg = RolloutConfig { n_episodes: 200, horizon: 500, ..RolloutConfig::default() };
    let mut g = c.benchmark_group("rollout_200x500");
    for (name, par) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| b.iter(|| rollout(&policy, &phys, &cfg, par).unwrap()));
    }
    g.finish();
}

fn phase_maps(c: &mut Criterion) {
    let spec = ModelSpec {
        kind: ModelKind::Sdn,
        trunk: TrunkConfig { input_dim: 3, hidden: vec![16, 16, 16], activation: Activation::Tanh },
        head: HeadSpec::gains_only(3, 2),
        mu_init_range: Vec::new(),
    };
    let Model::Sdn(m) = build_model(&spec, &GumbelConfig::new(3), 0).unwrap() else { unreachable!() };
    let (th, om) = default_grid();
    let mut g = c.benchmark_group("phase_map_101x101");
    for (name, par) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| b.iter(|| phase_map(&m, &th, &om, par).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, rollouts, phase_maps);
criterion_main!(benches);
