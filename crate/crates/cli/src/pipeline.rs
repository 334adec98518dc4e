//! The run recipes behind each command, callable without the binary.

use serde::{Deserialize, Serialize};
use serde_json::json;

use sdn_core::checkpoint::Checkpoint;
use sdn_core::control::PidParams;
use sdn_core::diffcore::AdamHyper;
use sdn_core::envs::pendulum::demonstrator_mode;
use sdn_core::envs::{
    generate_arm_dataset, generate_pendulum_dataset, ArmTaskConfig, Demonstration, DemonstratorConfig, PendulumDataConfig, PendulumMode,
    PendulumPhysics, PendulumState,
};
use sdn_core::evalkit::{
    default_grid, demonstrator_labels, goal_rmse, mean_regression_ratio, permutation_match, phase_map, predict_frames, rollout,
    switch_purity, DemonstratorPolicy, EvalReport, ModelPolicy, PhaseMapRecord, RolloutConfig, RolloutStats,
};
use sdn_core::gumbel::GumbelConfig;
use sdn_core::models::{Activation, BlockKind, HeadSpec, Model, ModelKind, SdnModel, TrunkConfig};
use sdn_core::par::Parallelism;
use sdn_core::train::{state_range, train, ModelSpec, TrainConfig, TrainHistory, TrainSet};

use crate::config::{Env, RunConfig};
use crate::error::{CliError, CliResult};

pub fn pendulum_physics(cfg: &RunConfig) -> PendulumPhysics {
    PendulumPhysics { dt: cfg.dt, ..PendulumPhysics::default() }
}

pub fn arm_task(cfg: &RunConfig) -> ArmTaskConfig {
    let mut a = ArmTaskConfig { dt: cfg.dt, ..ArmTaskConfig::default() };
    a.obs.kind = cfg.obs;
    a
}

pub fn generate(cfg: &RunConfig) -> CliResult<Demonstration> {
    Ok(match cfg.env {
        Env::Pendulum => {
            let data = PendulumDataConfig { n_pairs: cfg.n, ..PendulumDataConfig::default() };
            generate_pendulum_dataset(&pendulum_physics(cfg), &DemonstratorConfig::default(), &data, cfg.seed, cfg.l)?
        }
        Env::Arm => generate_arm_dataset(cfg.frames, &arm_task(cfg), cfg.seed)?,
    })
}

pub fn env_of(demo: &Demonstration) -> CliResult<Env> {
    demo.meta.env.parse()
}

/// Training records and, for temporally split data, the held-out remainder.
pub struct Split {
    pub train: TrainSet,
    pub test: Option<TrainSet>,
}

pub fn split(demo: &Demonstration, l: usize) -> CliResult<Split> {
    let dt = demo.meta.dt;
    match demo.meta.train_frames {
        Some(n) if n < demo.len() => {
            Ok(Split { train: TrainSet::from_demo(demo, 0..n, l, dt)?, test: Some(TrainSet::from_demo(demo, n..demo.len(), l, dt)?) })
        }
        _ => Ok(Split { train: TrainSet::from_demo(demo, 0..demo.len(), l, dt)?, test: None }),
    }
}

/// Number of modes a model of `kind` gets under `cfg`.
pub fn mode_count(cfg: &RunConfig, kind: ModelKind) -> CliResult<usize> {
    match kind {
        ModelKind::Regressor => Ok(1),
        _ => cfg.k.ok_or_else(|| CliError::Usage(format!("--k is required for {kind} models"))),
    }
}

pub fn model_spec(cfg: &RunConfig, kind: ModelKind, train_set: &TrainSet) -> CliResult<ModelSpec> {
    let k = mode_count(cfg, kind)?;
    let head = match cfg.env {
        Env::Pendulum => HeadSpec::gains_only(k, train_set.dx),
        Env::Arm => HeadSpec::reference_only(k, train_set.dx, -ArmTaskConfig::default().kp_fixed),
    };
    let trunk = TrunkConfig { input_dim: train_set.dz, hidden: cfg.hidden.clone(), activation: Activation::Tanh };
    let learned_mu = head.blocks.iter().any(|b| b.kind == BlockKind::Mu && b.learned);
    let mu_init_range = if kind == ModelKind::Sdn && learned_mu { state_range(train_set) } else { Vec::new() };
    Ok(ModelSpec { kind, trunk, head, mu_init_range })
}

pub fn train_config(cfg: &RunConfig, k: usize, dt: f64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        gumbel: GumbelConfig {
            k,
            tau0: cfg.tau0,
            tau_min: cfg.tau_min,
            decay: cfg.decay,
            hard_eval: true,
            straight_through: cfg.straight_through,
        },
        use_ce_reg: cfg.ce_reg,
        ce_weight: cfg.ce_weight,
        adam: AdamHyper { learning_rate: cfg.lr, ..AdamHyper::default() },
        final_lr: cfg.final_lr,
        lr_decay: cfg.lr_decay,
        l: cfg.l,
        dt,
    }
}

pub struct TrainedRun {
    pub model: Model,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
}

pub fn train_run(cfg: &RunConfig, kind: ModelKind, demo: &Demonstration) -> CliResult<TrainedRun> {
    let env = env_of(demo)?;
    if env != cfg.env {
        return Err(CliError::Mismatch(format!("config is for {} but the data file is {env}", cfg.env)));
    }
    let sp = split(demo, cfg.l)?;
    let spec = model_spec(cfg, kind, &sp.train)?;
    let tc = train_config(cfg, spec.head.k, demo.meta.dt);
    let (model, history) = train(&spec, &sp.train, &tc)?;
    let meta = json!({
        "env": env,
        "L": cfg.l,
        "dt": demo.meta.dt,
        "data_seed": demo.meta.seed,
        "train_records": sp.train.len(),
        "train_config": tc,
        "mu_init_range": spec.mu_init_range,
        "final_nll": history.records.last().map(|r| r.nll),
    });
    let checkpoint = Checkpoint::from_model(&model, cfg.seed, meta);
    Ok(TrainedRun { model, history, checkpoint })
}

/// Environment a checkpoint was trained on.
pub fn checkpoint_env(c: &Checkpoint) -> CliResult<Env> {
    c.training_meta
        .get("env")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CliError::Config("checkpoint training_meta has no env".into()))?
        .parse()
}

pub fn rollout_config(cfg: &RunConfig) -> RolloutConfig {
    RolloutConfig { n_episodes: cfg.episodes, horizon: cfg.horizon, seed: cfg.eval_seed, l: cfg.l, ..RolloutConfig::default() }
}

/// Phase map over the default grid with its permutation-matched agreement against
/// the demonstrator's labels.
#[derive(Clone, Debug)]
pub struct PhaseAgreement {
    pub records: Vec<PhaseMapRecord>,
    pub agreement: f64,
    /// Demonstrator mode matched to each model mode, if any.
    pub assignment: Vec<Option<usize>>,
}

pub fn phase_agreement(m: &SdnModel, phys: &PendulumPhysics, par: Parallelism) -> CliResult<PhaseAgreement> {
    let (th, om) = default_grid();
    let records = phase_map(m, &th, &om, par)?;
    let labels = demonstrator_labels(&records, phys, &DemonstratorConfig::default());
    let pred: Vec<usize> = records.iter().map(|r| r.mode).collect();
    let p = switch_purity(&pred, &labels, m.k(), 3, false)?;
    Ok(PhaseAgreement { records, agreement: p.purity, assignment: p.assignment })
}

/// Sign checks on the identified pendulum laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSigns {
    pub balance_gains: Option<Vec<f64>>,
    pub pump_gains: Option<Vec<f64>>,
    /// Balance law stabilizes the upright: θ gain below −m g l and ω gain negative.
    pub balance_stabilizing: bool,
    pub pump_velocity_positive: bool,
}

pub fn gain_signs(modes: &[PidParams], assignment: &[Option<usize>], phys: &PendulumPhysics) -> GainSigns {
    let find = |target: PendulumMode| assignment.iter().position(|a| *a == Some(target.index())).map(|i| modes[i].kp.clone());
    let balance_gains = find(PendulumMode::Balance);
    let pump_gains = find(PendulumMode::Pump);
    let balance_stabilizing = balance_gains.as_ref().is_some_and(|k| k[0] < -phys.m * phys.g * phys.l && k[1] < 0.0);
    let pump_velocity_positive = pump_gains.as_ref().is_some_and(|k| k[1] > 0.0);
    GainSigns { balance_gains, pump_gains, balance_stabilizing, pump_velocity_positive }
}

#[derive(Clone, Debug)]
pub struct PendulumEval {
    pub report: EvalReport,
    pub model_stats: RolloutStats,
    pub demo_stats: RolloutStats,
    pub phase: Option<PhaseAgreement>,
}

/// Paired rollouts of the model and the demonstrator, plus the phase-map agreement for an SDN
/// and the mode purity on `data` when given.
pub fn eval_pendulum(model: &Model, cfg: &RunConfig, data: Option<&Demonstration>) -> CliResult<PendulumEval> {
    let phys = pendulum_physics(cfg);
    let rc = rollout_config(cfg);
    let par = cfg.parallelism();
    let demo_stats = rollout(&DemonstratorPolicy { phys: &phys, cfg: &DemonstratorConfig::default() }, &phys, &rc, par)?;
    let model_stats = rollout(&ModelPolicy::new(model), &phys, &rc, par)?;
    let phase = match model {
        Model::Sdn(m) => Some(phase_agreement(m, &phys, par)?),
        _ => None,
    };
    let mut report = EvalReport {
        mean_reward: Some(model_stats.mean),
        std_reward: Some(model_stats.std),
        grid_agreement: phase.as_ref().map(|p| p.agreement),
        demonstrator_mean_reward: Some(demo_stats.mean),
        ..EvalReport::default()
    };
    if let Some(d) = data {
        let ts = split(d, cfg.l)?.train;
        let pred: Vec<usize> = predict_frames(model, &ts)?.into_iter().map(|(_, m)| m).collect();
        let labels: Vec<usize> = (0..ts.len())
            .map(|i| {
                let x = ts.x_row(i);
                ts.mode[i]
                    .unwrap_or_else(|| demonstrator_mode(PendulumState::new(x[0], x[1]), &phys, &DemonstratorConfig::default()).index())
            })
            .collect();
        let p = switch_purity(&pred, &labels, model.head().k, 3, false)?;
        report.purity = Some(p.purity);
        report.confusion = Some(p.confusion);
    }
    Ok(PendulumEval { report, model_stats, demo_stats, phase })
}

/// Eval-mode predicted actions against the recorded ones: 1 means no better than
/// predicting the mean action.
pub fn action_regression_ratio(model: &Model, data: &TrainSet) -> CliResult<f64> {
    let preds = predict_frames(model, data)?;
    let mut pred = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for (i, (p, _)) in preds.iter().enumerate() {
        let c = data.count[i * data.dx];
        let u = sdn_core::control::pid_from_features(
            p,
            data.x_row(i),
            &data.isum[i * data.dx..(i + 1) * data.dx],
            c as usize,
            &data.deriv[i * data.dx..(i + 1) * data.dx],
        )?;
        pred.push(u);
        truth.push(data.u_row(i).to_vec());
    }
    Ok(mean_regression_ratio(&pred, &truth))
}

/// Goal RMSE, purity and (SDN) per-goal matched error on the held-out frames.
pub fn eval_arm(model: &Model, demo: &Demonstration) -> CliResult<EvalReport> {
    let goals = demo.meta.goals.clone().ok_or_else(|| CliError::Config("arm data file carries no goals".into()))?;
    let test = split(demo, 0)?.test.ok_or_else(|| CliError::Config("arm data file has no held-out frames".into()))?;
    let rm = goal_rmse(model, &test, &goals)?;
    let pred: Vec<usize> = predict_frames(model, &test)?.into_iter().map(|(_, m)| m).collect();
    let labels: Vec<usize> = test.mode.iter().map(|m| m.unwrap_or(0)).collect();
    let p = switch_purity(&pred, &labels, model.head().k, goals.len(), false)?;
    let goal_errors_deg = match model {
        Model::Sdn(m) if m.k() >= goals.len() => {
            let mus: Vec<Vec<f64>> = m.extract_hybrid_system().into_iter().map(|p| p.mu).collect();
            Some(permutation_match(&mus, &goals)?.errors_deg)
        }
        _ => None,
    };
    Ok(EvalReport {
        rmse_deg: Some(rm.rmse_deg),
        purity: Some(p.purity),
        confusion: Some(p.confusion),
        goal_errors_deg,
        ..EvalReport::default()
    })
}

/// One row per mode of an SDN: gains, reference and action standard deviation.
pub fn extract_table(m: &SdnModel) -> Vec<PidParams> {
    m.extract_hybrid_system()
}

pub fn format_extract(rows: &[PidParams]) -> String {
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let mut s = String::from("mode\tkp\tki\tkd\tmu\tsigma\n");
    for p in rows {
        let sigma: Vec<f64> = p.sigma_diag.iter().map(|v| v.sqrt()).collect();
        s.push_str(&format!("{}\t[{}]\t[{}]\t[{}]\t[{}]\t[{}]\n", p.mode_id, fmt(&p.kp), fmt(&p.ki), fmt(&p.kd), fmt(&p.mu), fmt(&sigma)));
    }
    s
}
