//! Command-line surface: argument parsing, config resolution and the commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sdn_core::checkpoint::Checkpoint;
use sdn_core::envs::{Demonstration, ObsKind};
use sdn_core::evalkit::write_phase_map_csv;
use sdn_core::models::{Model, ModelKind};
use sdn_core::par::map_range;
use sdn_core::train::is_collapsed;

use crate::config::{echo_path, CommandKind, Env, RunConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "sdn", version, about = "Switching density networks: identify hybrid controllers from demonstrations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration file (JSON lines).
    GenData {
        env: Env,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train a model on a demonstration file.
    Train {
        model: ModelArg,
        data: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Evaluate a checkpoint against an environment or a data file.
    Eval {
        checkpoint: PathBuf,
        /// `pendulum`, `arm`, or a data file path.
        target: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Export the eval-mode mode map of a pendulum SDN as CSV.
    PhaseMap {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Print the identified hybrid system of an SDN, one row per mode.
    Extract {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Seeded training runs over batch sizes and regularizer settings.
    Sweep {
        model: ModelArg,
        data: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Replay any command from its echoed config.
    Rerun {
        echo: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelArg {
    Sdn,
    Mdn,
    Regressor,
    Fc,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Sdn => ModelKind::Sdn,
            ModelArg::Mdn => ModelKind::Mdn,
            ModelArg::Regressor | ModelArg::Fc => ModelKind::Regressor,
        }
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

/// Overrides shared by every command. Unset flags leave lower layers alone.
#[derive(Clone, Debug, Default, Args)]
pub struct Flags {
    /// JSON config file applied over the defaults and under the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau_min: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub no_ce_reg: bool,
    #[arg(long)]
    pub ce_weight: Option<f64>,
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, value_parser = parse_obs)]
    pub obs: Option<ObsKind>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub final_lr: Option<f64>,
    /// Per-epoch learning-rate decay factor.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// Regularizer settings to sweep, e.g. `on,off`.
    #[arg(long, value_delimiter = ',', value_parser = parse_on_off)]
    pub ce_modes: Option<Vec<bool>>,
    /// Hard one-hot mode selection in the forward pass while training.
    #[arg(long)]
    pub straight_through: bool,
    /// Run evaluation and sweeps on one thread.
    #[arg(long)]
    pub sequential: bool,
}

fn parse_obs(s: &str) -> Result<ObsKind, String> {
    s.parse().map_err(|e: sdn_core::Error| e.to_string())
}

impl Flags {
    fn to_map(&self) -> CliResult<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        macro_rules! opt {
            ($field:ident, $key:expr) => {
                if let Some(v) = &self.$field {
                    put($key, serde_json::to_value(v)?);
                }
            };
        }
        opt!(out, "out");
        opt!(seed, "seed");
        opt!(k, "k");
        opt!(batch_size, "batch_size");
        opt!(epochs, "epochs");
        opt!(tau0, "tau0");
        opt!(tau_min, "tau_min");
        opt!(decay, "decay");
        opt!(ce_weight, "ce_weight");
        opt!(l, "L");
        opt!(dt, "dt");
        opt!(n, "n");
        opt!(frames, "frames");
        opt!(obs, "obs");
        opt!(hidden, "hidden");
        opt!(lr, "lr");
        opt!(final_lr, "final_lr");
        opt!(lr_decay, "lr_decay");
        opt!(episodes, "episodes");
        opt!(horizon, "horizon");
        opt!(eval_seed, "eval_seed");
        opt!(seeds, "seeds");
        opt!(batch_sizes, "batch_sizes");
        opt!(ce_modes, "ce_modes");
        if self.no_ce_reg {
            put("ce_reg", Value::Bool(false));
        }
        if self.straight_through {
            put("straight_through", Value::Bool(true));
        }
        if self.sequential {
            put("sequential", Value::Bool(true));
        }
        Ok(m)
    }
}

fn resolve(defaults: RunConfig, flags: &Flags, fixed: Map<String, Value>) -> CliResult<RunConfig> {
    let mut f = flags.to_map()?;
    // Positional arguments outrank both the file and the flags.
    f.extend(fixed);
    RunConfig::resolve(defaults, flags.config.as_deref(), f)
}

fn fixed(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn load_demo(path: &Path) -> CliResult<Demonstration> {
    Ok(Demonstration::load(path)?)
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Model)> {
    let c = Checkpoint::load(path)?;
    let m = c.to_model()?;
    Ok((c, m))
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parses nothing: turns a parsed command line into a resolved config.
pub fn resolve_command(cmd: &Command) -> CliResult<RunConfig> {
    match cmd {
        Command::GenData { env, flags } => resolve(RunConfig::defaults(CommandKind::GenData, *env), flags, fixed(&[])),
        Command::Train { model, data, flags } | Command::Sweep { model, data, flags } => {
            let kind = if matches!(cmd, Command::Train { .. }) { CommandKind::Train } else { CommandKind::Sweep };
            let env = pipeline::env_of(&load_demo(data)?)?;
            let mk: ModelKind = (*model).into();
            resolve(RunConfig::defaults(kind, env), flags, fixed(&[("model", serde_json::to_value(mk)?), ("data", path_value(data))]))
        }
        Command::Eval { checkpoint, target, flags } => {
            let (c, _) = load_checkpoint(checkpoint)?;
            let env = pipeline::checkpoint_env(&c)?;
            let mut d = RunConfig::defaults(CommandKind::Eval, env);
            inherit_training(&mut d, &c);
            let mut fx = fixed(&[("checkpoint", path_value(checkpoint))]);
            match target.parse::<Env>() {
                Ok(t) if t != env => return Err(CliError::Mismatch(format!("checkpoint was trained on {env}, not {t}"))),
                Ok(_) => {}
                Err(_) => {
                    fx.insert("data".into(), Value::String(target.clone()));
                }
            }
            resolve(d, flags, fx)
        }
        Command::PhaseMap { checkpoint, flags } | Command::Extract { checkpoint, flags } => {
            let kind = if matches!(cmd, Command::PhaseMap { .. }) { CommandKind::PhaseMap } else { CommandKind::Extract };
            let (c, _) = load_checkpoint(checkpoint)?;
            let mut d = RunConfig::defaults(kind, pipeline::checkpoint_env(&c)?);
            inherit_training(&mut d, &c);
            resolve(d, flags, fixed(&[("checkpoint", path_value(checkpoint))]))
        }
        Command::Rerun { echo, out } => {
            let mut c = RunConfig::load(echo)?;
            if out.is_some() {
                c.out = out.clone();
            }
            Ok(c)
        }
    }
}

/// Window length and step of the training run become the evaluation defaults.
fn inherit_training(d: &mut RunConfig, c: &Checkpoint) {
    if let Some(l) = c.training_meta.get("L").and_then(Value::as_u64) {
        d.l = l as usize;
    }
    if let Some(dt) = c.training_meta.get("dt").and_then(Value::as_f64) {
        d.dt = dt;
    }
    d.model = Some(c.model_kind);
}

/// Runs a resolved config and returns the text for stdout.
pub fn execute(cfg: &RunConfig) -> CliResult<String> {
    match cfg.command {
        CommandKind::GenData => gen_data(cfg),
        CommandKind::Train => cmd_train(cfg),
        CommandKind::Eval => cmd_eval(cfg),
        CommandKind::PhaseMap => cmd_phase_map(cfg),
        CommandKind::Extract => cmd_extract(cfg),
        CommandKind::Sweep => cmd_sweep(cfg),
    }
}

pub fn run(cli: &Cli) -> CliResult<String> {
    execute(&resolve_command(&cli.command)?)
}

fn gen_data(cfg: &RunConfig) -> CliResult<String> {
    let out = cfg.out_path()?;
    let demo = pipeline::generate(cfg)?;
    create_parent(out)?;
    demo.save(out)?;
    cfg.write_echo(&echo_path(out, false))?;
    let freqs = demo.mode_frequencies();
    let f: Vec<String> = freqs.iter().enumerate().map(|(i, v)| format!("{i}={v:.4}")).collect();
    let mut s = format!("records {}\nmode_frequencies {}\n", demo.len(), f.join(" "));
    if let Some(n) = demo.meta.train_frames {
        s.push_str(&format!("train_frames {n}\n"));
    }
    Ok(s)
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

fn save_run(dir: &Path, cfg: &RunConfig, run: &pipeline::TrainedRun) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    run.checkpoint.save(&dir.join("checkpoint.json"))?;
    let mut buf = Vec::new();
    run.history.write_csv(&mut buf)?;
    write_file(&dir.join("history.csv"), buf)?;
    cfg.write_echo(&echo_path(dir, true))
}

fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let kind = cfg.model.ok_or_else(|| CliError::Usage("missing model kind".into()))?;
    pipeline::mode_count(cfg, kind)?;
    let out = cfg.out_path()?;
    let demo = load_demo(required(&cfg.data, "data file")?)?;
    let run = pipeline::train_run(cfg, kind, &demo)?;
    save_run(out, cfg, &run)?;
    let last = run.history.records.last();
    Ok(format!(
        "model {kind} k {} epochs {} final_nll {:.6} final_ce {:.6} collapsed {}\nwrote {}\n",
        run.model.head().k,
        run.history.records.len(),
        last.map_or(f64::NAN, |r| r.nll),
        last.map_or(f64::NAN, |r| r.ce_reg),
        is_collapsed(&run.history),
        out.display()
    ))
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let (_, model) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = cfg.data.as_deref().map(load_demo).transpose()?;
    if let Some(d) = &data {
        let e = pipeline::env_of(d)?;
        if e != cfg.env {
            return Err(CliError::Mismatch(format!("checkpoint was trained on {}, data file is {e}", cfg.env)));
        }
    }
    let report = match cfg.env {
        Env::Pendulum => pipeline::eval_pendulum(&model, cfg, data.as_ref())?.report,
        Env::Arm => {
            let d = data.as_ref().ok_or_else(|| CliError::Usage("arm evaluation needs a data file".into()))?;
            pipeline::eval_arm(&model, d)?
        }
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &cfg.out {
        write_file(out, &text)?;
        cfg.write_echo(&echo_path(out, false))?;
    }
    Ok(text)
}

fn sdn_of(model: &Model, what: &str) -> CliResult<sdn_core::models::SdnModel> {
    match model {
        Model::Sdn(m) => Ok(m.clone()),
        other => Err(CliError::Mismatch(format!("{what} needs an sdn checkpoint, got {}", other.kind()))),
    }
}

fn cmd_phase_map(cfg: &RunConfig) -> CliResult<String> {
    if cfg.env != Env::Pendulum {
        return Err(CliError::Mismatch(format!("phase-map is defined for pendulum models, checkpoint is {}", cfg.env)));
    }
    let (_, model) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let m = sdn_of(&model, "phase-map")?;
    let out = cfg.out_path()?;
    let pa = pipeline::phase_agreement(&m, &pipeline::pendulum_physics(cfg), cfg.parallelism())?;
    let mut buf = Vec::new();
    write_phase_map_csv(&pa.records, &mut buf)?;
    write_file(out, buf)?;
    cfg.write_echo(&echo_path(out, false))?;
    Ok(format!("points {}\ngrid_agreement {:.4}\n", pa.records.len(), pa.agreement))
}

fn cmd_extract(cfg: &RunConfig) -> CliResult<String> {
    let (_, model) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let m = sdn_of(&model, "extract")?;
    let text = pipeline::format_extract(&pipeline::extract_table(&m));
    if let Some(out) = &cfg.out {
        write_file(out, &text)?;
        cfg.write_echo(&echo_path(out, false))?;
    }
    Ok(text)
}

/// Summary of one sweep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub batch_size: usize,
    pub ce_reg: bool,
    pub seed: u64,
    pub collapsed: bool,
    pub max_ybar: f64,
    pub final_nll: f64,
    /// Pendulum: eval-mode action error relative to the mean predictor.
    pub regression_ratio: Option<f64>,
    pub grid_agreement: Option<f64>,
    pub rmse_deg: Option<f64>,
    pub purity: Option<f64>,
}

/// Per-run configs of a sweep, in output order.
pub fn sweep_configs(cfg: &RunConfig) -> CliResult<Vec<(String, RunConfig)>> {
    let root = cfg.out_path()?;
    let mut runs = Vec::new();
    for &b in &cfg.batch_sizes {
        for &ce in &cfg.ce_modes {
            for s in 0..cfg.seeds as u64 {
                let seed = cfg.seed + s;
                let name = format!("b{b}-ce{}-s{seed}", if ce { "on" } else { "off" });
                let mut c = cfg.clone();
                c.command = CommandKind::Train;
                c.batch_size = b;
                c.ce_reg = ce;
                c.seed = seed;
                c.out = Some(root.join(&name));
                runs.push((name, c));
            }
        }
    }
    Ok(runs)
}

/// Trains and scores one sweep run; `save` writes its directory.
pub fn sweep_run(name: &str, c: &RunConfig, demo: &Demonstration, save: bool) -> CliResult<SweepRow> {
    let kind = c.model.ok_or_else(|| CliError::Usage("missing model kind".into()))?;
    let run = pipeline::train_run(c, kind, demo)?;
    if save {
        save_run(c.out_path()?, c, &run)?;
    }
    let last = run.history.records.last();
    let mut row = SweepRow {
        run: name.to_string(),
        batch_size: c.batch_size,
        ce_reg: c.ce_reg,
        seed: c.seed,
        collapsed: is_collapsed(&run.history),
        max_ybar: last.map_or(f64::NAN, |r| r.batch_mean_switch.iter().copied().fold(0.0, f64::max)),
        final_nll: last.map_or(f64::NAN, |r| r.nll),
        regression_ratio: None,
        grid_agreement: None,
        rmse_deg: None,
        purity: None,
    };
    match c.env {
        Env::Pendulum => {
            let train_set = pipeline::split(demo, c.l)?.train;
            row.regression_ratio = Some(pipeline::action_regression_ratio(&run.model, &train_set)?);
            if let Model::Sdn(m) = &run.model {
                let pa = pipeline::phase_agreement(m, &pipeline::pendulum_physics(c), sdn_core::par::Parallelism::Sequential)?;
                row.grid_agreement = Some(pa.agreement);
            }
        }
        Env::Arm => {
            let r = pipeline::eval_arm(&run.model, demo)?;
            row.rmse_deg = r.rmse_deg;
            row.purity = r.purity;
        }
    }
    Ok(row)
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult<String> {
    let kind = cfg.model.ok_or_else(|| CliError::Usage("missing model kind".into()))?;
    pipeline::mode_count(cfg, kind)?;
    let root = cfg.out_path()?;
    let demo = load_demo(required(&cfg.data, "data file")?)?;
    fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    cfg.write_echo(&echo_path(root, true))?;
    let runs = sweep_configs(cfg)?;
    let rows = map_range(runs.len(), cfg.parallelism(), |i| sweep_run(&runs[i].0, &runs[i].1, &demo, true));
    let rows: Vec<SweepRow> = rows.into_iter().collect::<CliResult<_>>()?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        wr.serialize(r)?;
    }
    let buf = wr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&root.join("summary.csv"), &buf)?;
    let collapsed = rows.iter().filter(|r| r.collapsed).count();
    Ok(format!("runs {}\ncollapsed {collapsed}\nwrote {}\n", rows.len(), root.join("summary.csv").display()))
}
