//! Planar multi-link arm that reaches through a cycle of joint-space goals,
//! observed through a small grayscale rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DemoMeta, Demonstration, Record};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    Rendered,
    Direct,
}

impl std::str::FromStr for ObsKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rendered" => Ok(ObsKind::Rendered),
            "direct" => Ok(ObsKind::Direct),
            _ => Err(Error::Config(format!("unknown observation kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub kind: ObsKind,
    pub render_h: usize,
    pub render_w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTaskConfig {
    pub n_joints: usize,
    pub goals: Vec<Vec<f64>>,
    pub kp_fixed: f64,
    pub obs: ObsConfig,
    /// Observation noise (pixel noise when rendered).
    pub noise_std: f64,
    /// Std of the velocity noise added to the demonstrated action.
    pub process_noise: f64,
    pub dt: f64,
    /// Frames spent at a reached goal before switching to the next one.
    pub dwell: usize,
}

/// Default goal range, degrees either side of zero.
pub const GOAL_RANGE_DEG: f64 = 20.0;
pub const GOAL_SEED: u64 = 1234;
pub const MIN_GOAL_SEPARATION_DEG: f64 = 10.0;
/// A goal counts as reached when every joint is within this many degrees.
pub const REACHED_DEG: f64 = 1.0;

impl Default for ArmTaskConfig {
    fn default() -> Self {
        let goals = sample_goals(4, 8, GOAL_RANGE_DEG.to_radians(), GOAL_SEED);
        ArmTaskConfig {
            n_joints: 8,
            goals,
            kp_fixed: 4.0,
            obs: ObsConfig { kind: ObsKind::Rendered, render_h: 16, render_w: 16 },
            noise_std: 0.01,
            process_noise: 0.02,
            dt: 0.05,
            dwell: 60,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `m` goals uniform in ±range, redrawn until pairwise max-norm separation ≥ 10°.
pub fn sample_goals(m: usize, n: usize, range: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = MIN_GOAL_SEPARATION_DEG.to_radians();
    loop {
        let g: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-range..range)).collect()).collect();
        let ok = (0..m).all(|i| (0..i).all(|j| max_abs_diff(&g[i], &g[j]) >= sep));
        if ok {
            return g;
        }
    }
}

impl ArmTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.goals.len() < 2 {
            return Err(Error::Config("arm task needs at least 2 goals".into()));
        }
        if self.goals.iter().any(|g| g.len() != self.n_joints) {
            return Err(Error::Config("goal dims must equal n_joints".into()));
        }
        let sep = MIN_GOAL_SEPARATION_DEG.to_radians() - 1e-12;
        for i in 0..self.goals.len() {
            for j in 0..i {
                if max_abs_diff(&self.goals[i], &self.goals[j]) < sep {
                    return Err(Error::Config(format!("goals {j} and {i} closer than 10 degrees")));
                }
            }
        }
        if !(self.dt > 0.0) || self.noise_std < 0.0 || self.process_noise < 0.0 {
            return Err(Error::Config("arm dt must be positive and noise levels non-negative".into()));
        }
        if self.obs.kind == ObsKind::Rendered && (self.obs.render_h == 0 || self.obs.render_w == 0) {
            return Err(Error::Config("render size must be positive".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.obs.kind {
            ObsKind::Rendered => self.obs.render_h * self.obs.render_w,
            ObsKind::Direct => self.n_joints,
        }
    }
}

/// Half-width of the soft stroke used when rasterizing links.
pub const LINE_WIDTH: f64 = 0.35;

/// Noise-free raster of the arm: unit links, base at the origin, cumulative angles.
/// The image spans x ∈ [-1, n+1], y ∈ [-(n+2)/2, (n+2)/2], top row first.
pub fn render_clean(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = x.len();
    let mut pts = Vec::with_capacity(n + 1);
    let (mut px, mut py, mut ang) = (0.0, 0.0, 0.0);
    pts.push((px, py));
    for &a in x {
        ang += a;
        px += ang.cos();
        py += ang.sin();
        pts.push((px, py));
    }
    let half = (n as f64 + 2.0) / 2.0;
    let (x0, x1) = (-1.0, n as f64 + 1.0);
    let lin = |i: usize, m: usize, a: f64, b: f64| if m == 1 { a } else { a + (b - a) * i as f64 / (m - 1) as f64 };
    let inv2s2 = 1.0 / (2.0 * LINE_WIDTH * LINE_WIDTH);
    let mut img = vec![0.0; h * w];
    for r in 0..h {
        let yy = lin(r, h, half, -half);
        for c in 0..w {
            let xx = lin(c, w, x0, x1);
            let mut best = f64::INFINITY;
            for s in pts.windows(2) {
                let (ax, ay) = s[0];
                let (dx, dy) = (s[1].0 - ax, s[1].1 - ay);
                let t = (((xx - ax) * dx + (yy - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                let (ex, ey) = (xx - (ax + t * dx), yy - (ay + t * dy));
                best = best.min(ex * ex + ey * ey);
            }
            img[r * w + c] = (-best * inv2s2).exp();
        }
    }
    img
}

/// Observation for joint angles `x`: rendered raster or the angles, plus Gaussian noise.
pub fn arm_render<R: Rng + ?Sized>(x: &[f64], cfg: &ArmTaskConfig, rng: &mut R) -> Vec<f64> {
    let mut z = match cfg.obs.kind {
        ObsKind::Rendered => render_clean(x, cfg.obs.render_h, cfg.obs.render_w),
        ObsKind::Direct => x.to_vec(),
    };
    if cfg.noise_std > 0.0 {
        let nd = Normal::new(0.0, cfg.noise_std).unwrap();
        for v in z.iter_mut() {
            *v += nd.sample(rng);
        }
    }
    z
}

/// Cycles through the goals under `u = kp (goal − x) + noise`, `x += u dt`. The goal
/// advances once every joint is within 1° and `dwell` further frames have passed.
/// The first half of the frames is the training split.
pub fn generate_arm_dataset(n_frames: usize, cfg: &ArmTaskConfig, seed: u64) -> Result<Demonstration> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pn = Normal::new(0.0, cfg.process_noise.max(0.0)).unwrap();
    let m = cfg.goals.len();
    let tol = REACHED_DEG.to_radians();
    let mut x = cfg.goals[m - 1].clone();
    let (mut goal, mut dwell) = (0usize, 0usize);
    let mut records = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if max_abs_diff(&x, &cfg.goals[goal]) < tol {
            dwell += 1;
            if dwell > cfg.dwell {
                goal = (goal + 1) % m;
                dwell = 0;
            }
        }
        let u: Vec<f64> = x
            .iter()
            .zip(&cfg.goals[goal])
            .map(|(xi, gi)| cfg.kp_fixed * (gi - xi) + if cfg.process_noise > 0.0 { pn.sample(&mut rng) } else { 0.0 })
            .collect();
        let z = arm_render(&x, cfg, &mut rng);
        records.push(Record { t: k as f64 * cfg.dt, x: x.clone(), u: u.clone(), z, mode: Some(goal) });
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi += ui * cfg.dt;
        }
    }
    let meta = DemoMeta {
        env: "arm".into(),
        seed,
        dt: cfg.dt,
        l: 0,
        episode_starts: vec![0],
        train_frames: Some(n_frames / 2),
        goals: Some(cfg.goals.clone()),
    };
    Ok(Demonstration { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_goals_are_separated() {
        ArmTaskConfig::default().validate().unwrap();
    }

    #[test]
    fn render_is_deterministic_without_noise() {
        let cfg = ArmTaskConfig { noise_std: 0.0, ..ArmTaskConfig::default() };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = cfg.goals[1].clone();
        assert_eq!(arm_render(&x, &cfg, &mut r), arm_render(&x, &cfg, &mut r));
    }

    #[test]
    fn goals_render_differently() {
        let cfg = ArmTaskConfig::default();
        let a = render_clean(&cfg.goals[0], 16, 16);
        let b = render_clean(&cfg.goals[1], 16, 16);
        let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(d / na > 0.0);
    }

    #[test]
    fn single_goal_contracts() {
        let cfg =
            ArmTaskConfig { process_noise: 0.0, noise_std: 0.0, goals: vec![vec![0.2; 8], vec![-0.2; 8]], ..ArmTaskConfig::default() };
        let d = generate_arm_dataset(400, &cfg, 1).unwrap();
        // Frames before the first switch approach goal 0 monotonically.
        let errs: Vec<f64> = d.records.iter().take_while(|r| r.mode == Some(0)).map(|r| max_abs_diff(&r.x, &cfg.goals[0])).collect();
        assert!(errs.len() > 10);
        assert!(errs.windows(2).all(|w| w[1] <= w[0]));
    }
}
