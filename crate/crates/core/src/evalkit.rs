//! Closed-loop rollouts, phase maps, goal error and switch purity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::control::{pid_action, HistoryWindow, PidParams};
use crate::envs::pendulum::{
    demonstrator_action, demonstrator_mode, episode_rng, observe, pendulum_step, random_start, step_reward, DemonstratorConfig,
    PendulumPhysics, PendulumState,
};
use crate::error::{Error, Result};
use crate::gumbel::argmax;
use crate::models::{BlockKind, Model, SdnModel};
use crate::par::{map_range, Parallelism};
use crate::train::TrainSet;

/// A closed-loop pendulum controller.
pub trait Policy: Sync {
    /// Action for the newest state in `hist` (unclamped; the plant saturates it).
    fn action(&self, s: PendulumState, hist: &HistoryWindow) -> Result<f64>;
}

pub struct DemonstratorPolicy<'a> {
    pub phys: &'a PendulumPhysics,
    pub cfg: &'a DemonstratorConfig,
}

impl Policy for DemonstratorPolicy<'_> {
    fn action(&self, s: PendulumState, _: &HistoryWindow) -> Result<f64> {
        Ok(demonstrator_action(s, self.phys, self.cfg).0)
    }
}

/// Any trained model driven in eval mode: SDN argmax mode, MDN max-weight component,
/// or the regressor's direct output.
pub struct ModelPolicy<'a> {
    model: &'a Model,
    modes: Vec<PidParams>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model) -> Self {
        let modes = match model {
            Model::Sdn(m) => m.extract_hybrid_system(),
            _ => Vec::new(),
        };
        ModelPolicy { model, modes }
    }

    /// Eval-mode parameters and mode index for an observation.
    pub fn params(&self, z: &[f64]) -> Result<(PidParams, usize)> {
        match self.model {
            Model::Sdn(m) => {
                let i = m.mode(z)?;
                Ok((self.modes[i].clone(), i))
            }
            Model::Mdn(m) => {
                let o = m.forward_one(z)?;
                let i = argmax(&o.weights);
                Ok((o.components[i].clone(), i))
            }
            Model::Regressor(m) => Ok((m.forward_one(z)?, 0)),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn action(&self, s: PendulumState, hist: &HistoryWindow) -> Result<f64> {
        let (p, _) = self.params(&observe(s))?;
        Ok(pid_action(&p, hist)?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub avg_reward: f64,
    /// |θ| stayed below the hold threshold over the final window.
    pub held: bool,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Initial ω range for rollouts.
    pub omega0: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub hold_window: usize,
    pub hold_theta: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { n_episodes: 1000, horizon: 1000, seed: 123, omega0: 1.0, l: 10, hold_window: 100, hold_theta: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub mean: f64,
    pub std: f64,
    pub success_rate: f64,
    pub failures: usize,
    pub per_episode: Vec<f64>,
}

pub fn run_episode<P: Policy + ?Sized>(policy: &P, phys: &PendulumPhysics, cfg: &RolloutConfig, episode: usize) -> Result<EpisodeResult> {
    let mut rng = episode_rng(cfg.seed, episode as u64);
    let mut s = random_start(&mut rng, cfg.omega0);
    let mut hist = HistoryWindow::new(phys.dt, cfg.l)?;
    let mut total = 0.0;
    let mut held = true;
    for t in 0..cfg.horizon {
        hist.push(s.to_vec());
        let u = policy.action(s, &hist)?.clamp(-phys.u_max, phys.u_max);
        if !u.is_finite() || !s.theta.is_finite() || !s.omega.is_finite() {
            let avg = if t == 0 { 0.0 } else { total / t as f64 };
            return Ok(EpisodeResult { avg_reward: avg, held: false, failed: true });
        }
        if t + cfg.hold_window >= cfg.horizon && s.theta.abs() >= cfg.hold_theta {
            held = false;
        }
        total += step_reward(s, u);
        s = pendulum_step(s, u, phys);
    }
    Ok(EpisodeResult { avg_reward: total / cfg.horizon as f64, held, failed: false })
}

/// Mean ± std over episodes of the per-step average reward; episode `i` starts from [`episode_rng`]`(seed, i)`.
pub fn rollout<P: Policy + ?Sized>(policy: &P, phys: &PendulumPhysics, cfg: &RolloutConfig, par: Parallelism) -> Result<RolloutStats> {
    phys.validate()?;
    if cfg.n_episodes == 0 || cfg.horizon == 0 {
        return Err(Error::Config("rollout needs episodes and a horizon".into()));
    }
    let results = map_range(cfg.n_episodes, par, |i| run_episode(policy, phys, cfg, i));
    let results: Vec<EpisodeResult> = results.into_iter().collect::<Result<_>>()?;
    let failures = results.iter().filter(|r| r.failed).count();
    if failures * 20 > cfg.n_episodes {
        return Err(Error::Eval(format!("{failures} of {} episodes diverged", cfg.n_episodes)));
    }
    let per_episode: Vec<f64> = results.iter().map(|r| r.avg_reward).collect();
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let std = (per_episode.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let success_rate = results.iter().filter(|r| r.held).count() as f64 / n;
    Ok(RolloutStats { mean, std, success_rate, failures, per_episode })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMapRecord {
    pub theta: f64,
    pub omega: f64,
    pub mode: usize,
    pub u: f64,
}

/// `n` points over [lo, hi), endpoint excluded.
pub fn grid_open(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// `n` points over [lo, hi], endpoints included.
pub fn grid_closed(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// The default 101 × 101 grid over θ ∈ [−π, π), ω ∈ [−8, 8].
pub fn default_grid() -> (Vec<f64>, Vec<f64>) {
    (grid_open(-PI, PI, 101), grid_closed(-8.0, 8.0, 101))
}

/// Eval-mode decision and response at every grid point, θ-major.
pub fn phase_map(model: &SdnModel, thetas: &[f64], omegas: &[f64], par: Parallelism) -> Result<Vec<PhaseMapRecord>> {
    let modes = model.extract_hybrid_system();
    let rows = map_range(thetas.len(), par, |i| -> Result<Vec<PhaseMapRecord>> {
        let mut out = Vec::with_capacity(omegas.len());
        for &w in omegas {
            let s = PendulumState { theta: thetas[i], omega: w };
            let mode = model.mode(&observe(s))?;
            let hist = HistoryWindow::from_states(&[s.to_vec()], 1.0, 0)?;
            let u = pid_action(&modes[mode], &hist)?[0];
            out.push(PhaseMapRecord { theta: s.theta, omega: w, mode, u });
        }
        Ok(out)
    });
    Ok(rows.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

pub fn demonstrator_labels(records: &[PhaseMapRecord], phys: &PendulumPhysics, cfg: &DemonstratorConfig) -> Vec<usize> {
    records.iter().map(|r| demonstrator_mode(PendulumState { theta: r.theta, omega: r.omega }, phys, cfg).index()).collect()
}

pub fn write_phase_map_csv<W: std::io::Write>(records: &[PhaseMapRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

pub const MAX_BRUTE_FORCE_MODES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub purity: f64,
    /// `assignment[i]` is the label matched to predicted mode `i`, if any.
    pub assignment: Vec<Option<usize>>,
    /// K × M counts: predicted mode by true label.
    pub confusion: Vec<Vec<usize>>,
}

/// Best one-to-one agreement between predicted modes (K) and labels (M).
/// Brute force over permutations; more than 6 modes needs `allow_large`.
pub fn switch_purity(pred: &[usize], labels: &[usize], k: usize, m: usize, allow_large: bool) -> Result<Purity> {
    if pred.len() != labels.len() {
        return Err(Error::Shape { op: "switch_purity", detail: format!("{} predictions, {} labels", pred.len(), labels.len()) });
    }
    let n = k.max(m);
    if n > MAX_BRUTE_FORCE_MODES && !allow_large {
        return Err(Error::Config(format!(
            "{n} modes exceeds the brute-force limit of {MAX_BRUTE_FORCE_MODES}; pass an explicit override"
        )));
    }
    let mut confusion = vec![vec![0usize; m]; k];
    for (&p, &l) in pred.iter().zip(labels) {
        if p >= k || l >= m {
            return Err(Error::Shape { op: "switch_purity", detail: format!("mode {p} / label {l} out of range") });
        }
        confusion[p][l] += 1;
    }
    let mut best = (0usize, vec![None; k]);
    for perm in permutations(n) {
        let mut hits = 0;
        let mut asg = vec![None; k];
        for i in 0..k {
            if perm[i] < m {
                hits += confusion[i][perm[i]];
                asg[i] = Some(perm[i]);
            }
        }
        if hits > best.0 {
            best = (hits, asg);
        }
    }
    let total = pred.len().max(1) as f64;
    Ok(Purity { purity: best.0 as f64 / total, assignment: best.1, confusion })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalMatch {
    /// `assignment[j]` is the predicted goal matched to true goal `j`.
    pub assignment: Vec<usize>,
    /// Max-norm error of each match, degrees.
    pub errors_deg: Vec<f64>,
    pub failed: Vec<bool>,
}

pub const GOAL_FAIL_DEG: f64 = 5.0;

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Minimum-total max-norm assignment of true goals to distinct predicted goals (K ≥ M).
pub fn permutation_match(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<GoalMatch> {
    let (k, m) = (pred.len(), truth.len());
    if k < m {
        return Err(Error::Precondition(format!("{k} predicted goals cannot cover {m} true goals")));
    }
    if k > MAX_BRUTE_FORCE_MODES {
        return Err(Error::Config(format!("{k} goals exceeds the brute-force limit")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k) {
        let asg = perm[..m].to_vec();
        let cost: f64 = (0..m).map(|j| max_norm(&pred[asg[j]], &truth[j])).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, asg));
        }
    }
    let assignment = best.map(|b| b.1).unwrap_or_default();
    let errors_deg: Vec<f64> = (0..m).map(|j| max_norm(&pred[assignment[j]], &truth[j]).to_degrees()).collect();
    let failed = errors_deg.iter().map(|&e| e > GOAL_FAIL_DEG).collect();
    Ok(GoalMatch { assignment, errors_deg, failed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRmse {
    pub rmse_deg: f64,
    pub per_frame_deg: Vec<f64>,
}

/// RMSE between reference points and per-frame targets, in degrees.
pub fn rmse_deg(pred: &[Vec<f64>], target: &[Vec<f64>]) -> GoalRmse {
    let mut sum = 0.0;
    let mut cnt = 0usize;
    let per_frame_deg = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
            sum += s;
            cnt += p.len();
            (s / p.len() as f64).sqrt().to_degrees()
        })
        .collect();
    GoalRmse { rmse_deg: (sum / cnt.max(1) as f64).sqrt().to_degrees(), per_frame_deg }
}

/// Per-frame eval-mode parameters and mode of any model.
pub fn predict_frames(model: &Model, data: &TrainSet) -> Result<Vec<(PidParams, usize)>> {
    let pol = ModelPolicy::new(model);
    (0..data.len()).map(|i| pol.params(data.z_row(i))).collect()
}

/// Goal RMSE of the predicted reference against `goals[mode]` per frame.
pub fn goal_rmse(model: &Model, test: &TrainSet, goals: &[Vec<f64>]) -> Result<GoalRmse> {
    if model.head().offset(BlockKind::Mu).is_none() {
        return Err(Error::Config("goal_rmse needs a model that predicts the reference".into()));
    }
    let preds = predict_frames(model, test)?;
    let mut target = Vec::with_capacity(test.len());
    for (i, m) in test.mode.iter().enumerate() {
        let m = m.ok_or_else(|| Error::Precondition(format!("frame {i} has no ground-truth goal")))?;
        target.push(goals.get(m).cloned().ok_or_else(|| Error::Precondition(format!("goal index {m} out of range")))?);
    }
    let mus: Vec<Vec<f64>> = preds.into_iter().map(|(p, _)| p.mu).collect();
    Ok(rmse_deg(&mus, &target))
}

/// Ratio of the model's per-frame parameter RMSE to that of always predicting the
/// mean true parameters. Near or above 1 means the model regresses to the mean.
pub fn mean_regression_ratio(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let d = truth.first().map_or(0, |t| t.len());
    let n = truth.len() as f64;
    let mut mean = vec![0.0; d];
    for t in truth {
        for (a, b) in mean.iter_mut().zip(t) {
            *a += b / n;
        }
    }
    let sse =
        |a: &[Vec<f64>]| -> f64 { a.iter().zip(truth).map(|(p, t)| p.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum() };
    let base: f64 = truth.iter().map(|t| t.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum();
    (sse(pred) / base).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: Option<f64>,
    pub std_reward: Option<f64>,
    pub rmse_deg: Option<f64>,
    pub purity: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_agreement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demonstrator_mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_errors_deg: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn purity_identity_and_permutation() {
        let labels = vec![0, 1, 2, 2, 1, 0, 0];
        assert_eq!(switch_purity(&labels, &labels, 3, 3, false).unwrap().purity, 1.0);
        let perm = [2, 0, 1];
        let pred: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let p = switch_purity(&pred, &labels, 3, 3, false).unwrap();
        assert_eq!(p.purity, 1.0);
        assert_eq!(p.confusion.iter().flatten().sum::<usize>(), labels.len());
    }

    #[test]
    fn purity_guard() {
        assert!(switch_purity(&[0], &[0], 7, 7, false).is_err());
        assert!(switch_purity(&[0], &[0], 7, 7, true).is_ok());
    }

    #[test]
    fn random_purity_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..2000).map(|i| i % 4).collect();
        let pred: Vec<usize> = (0..2000).map(|_| rng.random_range(0..4)).collect();
        let p = switch_purity(&pred, &labels, 4, 4, false).unwrap().purity;
        assert!(p < 0.35, "{p}");
    }

    #[test]
    fn goal_matching() {
        let t = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-1.0, 0.3]];
        let m = permutation_match(&t, &t).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2]);
        let shuffled = vec![t[2].clone(), t[0].clone(), t[1].clone()];
        let m = permutation_match(&shuffled, &t).unwrap();
        assert_eq!(m.assignment, vec![1, 2, 0]);
        assert!(m.errors_deg.iter().all(|&e| e == 0.0));
        let mut extra = t.clone();
        extra.insert(1, vec![5.0, 5.0]);
        let m = permutation_match(&extra, &t).unwrap();
        assert!(m.errors_deg.iter().all(|&e| e == 0.0) && m.failed.iter().all(|f| !f));
        assert!(permutation_match(&t[..2], &t).is_err());
    }

    #[test]
    fn rmse_of_truth_is_zero() {
        let t = vec![vec![0.1, 0.2]; 5];
        assert_eq!(rmse_deg(&t, &t).rmse_deg, 0.0);
    }

    #[test]
    fn grids() {
        let (th, om) = default_grid();
        assert_eq!((th.len(), om.len()), (101, 101));
        assert_eq!(th[0], -PI);
        assert!(*th.last().unwrap() < PI);
        assert_eq!((om[0], om[100]), (-8.0, 8.0));
    }

    #[test]
    fn demonstrator_balances_from_rest() {
        let phys = PendulumPhysics::default();
        let cfg = DemonstratorConfig::default();
        let pol = DemonstratorPolicy { phys: &phys, cfg: &cfg };
        let mut hist = HistoryWindow::new(phys.dt, 10).unwrap();
        let mut s = PendulumState::new(0.0, 0.0);
        let mut total = 0.0;
        for _ in 0..100 {
            hist.push(s.to_vec());
            let u = pol.action(s, &hist).unwrap();
            total += step_reward(s, u);
            s = pendulum_step(s, u, &phys);
        }
        assert_eq!(total, 0.0);
    }
}
