//! Run configuration: built-in defaults, then an optional JSON file, then flags.
//! The resolved [`RunConfig`] is echoed next to every output and can be replayed
//! with `sdn rerun`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sdn_core::envs::ObsKind;
use sdn_core::models::ModelKind;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Env {
    Pendulum,
    Arm,
}

impl std::str::FromStr for Env {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "pendulum" => Ok(Env::Pendulum),
            "arm" => Ok(Env::Arm),
            other => Err(CliError::Usage(format!("unknown environment '{other}'"))),
        }
    }
}

impl std::fmt::Display for Env {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Env::Pendulum => "pendulum",
            Env::Arm => "arm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    GenData,
    Train,
    Eval,
    PhaseMap,
    Extract,
    Sweep,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::GenData => "gen-data",
            CommandKind::Train => "train",
            CommandKind::Eval => "eval",
            CommandKind::PhaseMap => "phase-map",
            CommandKind::Extract => "extract",
            CommandKind::Sweep => "sweep",
        }
    }
}

/// Every setting a command reads, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub env: Env,
    pub model: Option<ModelKind>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub k: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
    pub ce_reg: bool,
    pub ce_weight: f64,
    #[serde(default)]
    pub straight_through: bool,
    #[serde(rename = "L")]
    pub l: usize,
    pub dt: f64,
    /// Pendulum state-action pairs.
    pub n: usize,
    /// Arm frames.
    pub frames: usize,
    pub obs: ObsKind,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Learning rate of the SDN parameter table.
    pub final_lr: Option<f64>,
    #[serde(default = "one")]
    pub lr_decay: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub eval_seed: u64,
    /// Sweep: number of consecutive seeds starting at `seed`.
    pub seeds: usize,
    pub batch_sizes: Vec<usize>,
    pub ce_modes: Vec<bool>,
    pub sequential: bool,
}

impl RunConfig {
    /// Built-in defaults for `command` on `env`.
    pub fn defaults(command: CommandKind, env: Env) -> Self {
        let (hidden, epochs, tau0, lr, final_lr, lr_decay, l) = match env {
            Env::Pendulum => (vec![16, 16, 16], 300, 2.0, 5e-3, Some(0.1), 0.992, 10),
            Env::Arm => (vec![64, 64], 300, 5.0, 1e-3, Some(0.03), 0.99, 0),
        };
        RunConfig {
            command,
            env,
            model: None,
            data: None,
            checkpoint: None,
            out: None,
            seed: 0,
            k: None,
            batch_size: 64,
            epochs,
            tau0,
            tau_min: 0.5,
            decay: 0.985,
            ce_reg: true,
            ce_weight: 1.0,
            straight_through: false,
            l,
            dt: 0.05,
            n: 10_000,
            frames: 2_000,
            obs: ObsKind::Rendered,
            hidden,
            lr,
            final_lr,
            lr_decay,
            episodes: 1000,
            horizon: 1000,
            eval_seed: 123,
            seeds: 10,
            batch_sizes: vec![64],
            ce_modes: vec![true],
            sequential: false,
        }
    }

    /// `defaults ← file ← flags`; unknown keys in either layer are rejected by name.
    pub fn resolve(defaults: RunConfig, file: Option<&Path>, flags: Map<String, Value>) -> CliResult<Self> {
        let mut merged = match serde_json::to_value(&defaults)? {
            Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => merged.extend(m),
                _ => return Err(CliError::Config(format!("{}: config file must hold a JSON object", p.display()))),
            }
        }
        merged.extend(flags);
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(format!("invalid override: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_echo(&self, path: &Path) -> CliResult<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn out_path(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Usage(format!("{} needs --out", self.command.name())))
    }

    pub fn parallelism(&self) -> sdn_core::par::Parallelism {
        if self.sequential {
            sdn_core::par::Parallelism::Sequential
        } else {
            sdn_core::par::Parallelism::available()
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Echo file for an output: `<dir>/config.json` for directories, `<file>.config.json` otherwise.
pub fn echo_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("config.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".config.json");
        PathBuf::from(s)
    }
}
