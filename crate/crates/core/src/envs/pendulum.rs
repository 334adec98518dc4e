//! Torque-limited pendulum measured from upright, and a three-mode swing-up demonstrator.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DemoMeta, Demonstration, Record};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

impl PendulumState {
    pub fn new(theta: f64, omega: f64) -> Self {
        PendulumState { theta: wrap_angle(theta), omega }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.theta, self.omega]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumPhysics {
    pub m: f64,
    pub l: f64,
    pub g: f64,
    pub b: f64,
    pub u_max: f64,
    pub dt: f64,
}

impl Default for PendulumPhysics {
    fn default() -> Self {
        PendulumPhysics { m: 1.0, l: 1.0, g: 9.81, b: 0.05, u_max: 5.0, dt: 0.05 }
    }
}

impl PendulumPhysics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0.0 && self.l > 0.0 && self.g > 0.0 && self.b >= 0.0 && self.u_max > 0.0 && self.dt > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad pendulum physics {self:?}")))
        }
    }

    /// Energy at upright rest, m g l.
    pub fn upright_energy(&self) -> f64 {
        self.m * self.g * self.l
    }
}

/// Wraps into [-π, π).
pub fn wrap_angle(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn deriv(theta: f64, omega: f64, u: f64, p: &PendulumPhysics) -> (f64, f64) {
    let ml2 = p.m * p.l * p.l;
    (omega, p.g / p.l * theta.sin() - p.b / ml2 * omega + u / ml2)
}

fn rk4(s: PendulumState, torque: f64, p: &PendulumPhysics, dt: f64) -> PendulumState {
    let (t, w) = (s.theta, s.omega);
    let k1 = deriv(t, w, torque, p);
    let k2 = deriv(t + 0.5 * dt * k1.0, w + 0.5 * dt * k1.1, torque, p);
    let k3 = deriv(t + 0.5 * dt * k2.0, w + 0.5 * dt * k2.1, torque, p);
    let k4 = deriv(t + dt * k3.0, w + dt * k3.1, torque, p);
    PendulumState {
        theta: wrap_angle(t + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0)),
        omega: w + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    }
}

/// One RK4 step of length `dt` with the action clamped to ±u_max.
pub fn pendulum_step(s: PendulumState, u: f64, p: &PendulumPhysics) -> PendulumState {
    rk4(s, u.clamp(-p.u_max, p.u_max), p, p.dt)
}

/// As [`pendulum_step`] with an extra unclamped disturbance torque.
pub fn pendulum_step_disturbed(s: PendulumState, u: f64, disturbance: f64, p: &PendulumPhysics) -> PendulumState {
    rk4(s, u.clamp(-p.u_max, p.u_max) + disturbance, p, p.dt)
}

/// Integrates `steps` substeps of `dt / steps` each (reference integrator for tests).
pub fn pendulum_step_fine(s: PendulumState, u: f64, p: &PendulumPhysics, steps: usize) -> PendulumState {
    let h = p.dt / steps as f64;
    let u = u.clamp(-p.u_max, p.u_max);
    (0..steps).fold(s, |s, _| rk4(s, u, p, h))
}

/// E = ½ m l² ω² + m g l cos θ.
pub fn pendulum_energy(s: PendulumState, p: &PendulumPhysics) -> f64 {
    0.5 * p.m * p.l * p.l * s.omega * s.omega + p.m * p.g * p.l * s.theta.cos()
}

/// Per-step reward −(θ² + 0.1 ω² + 0.001 u²).
pub fn step_reward(s: PendulumState, u: f64) -> f64 {
    -(s.theta * s.theta + 0.1 * s.omega * s.omega + 0.001 * u * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PendulumMode {
    Pump = 0,
    Spin = 1,
    Balance = 2,
}

impl PendulumMode {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstratorConfig {
    pub k_pump: f64,
    pub k_spin: f64,
    pub k_bal_theta: f64,
    pub k_bal_omega: f64,
    pub theta_bal: f64,
    pub omega_bal: f64,
    pub e_band: f64,
}

impl Default for DemonstratorConfig {
    fn default() -> Self {
        DemonstratorConfig { k_pump: 0.8, k_spin: -0.6, k_bal_theta: -15.0, k_bal_omega: -4.0, theta_bal: 0.3, omega_bal: 1.2, e_band: 0.0 }
    }
}

impl DemonstratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_bal > 0.0
            && self.omega_bal > 0.0
            && self.e_band >= 0.0
            && self.k_bal_theta < 0.0
            && self.k_bal_omega < 0.0
            && self.k_pump > 0.0
            && self.k_spin < 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("demonstrator gains/thresholds violate sign or positivity: {self:?}")))
        }
    }

    /// True per-mode gains on (θ, ω) in the `u = K·x` form.
    pub fn mode_gains(&self, mode: PendulumMode) -> [f64; 2] {
        match mode {
            PendulumMode::Pump => [0.0, self.k_pump],
            PendulumMode::Spin => [0.0, self.k_spin],
            PendulumMode::Balance => [self.k_bal_theta, self.k_bal_omega],
        }
    }
}

pub fn demonstrator_mode(s: PendulumState, p: &PendulumPhysics, c: &DemonstratorConfig) -> PendulumMode {
    if s.theta.abs() < c.theta_bal && s.omega.abs() < c.omega_bal {
        PendulumMode::Balance
    } else if pendulum_energy(s, p) < p.upright_energy() - c.e_band {
        PendulumMode::Pump
    } else {
        PendulumMode::Spin
    }
}

pub fn demonstrator_action(s: PendulumState, p: &PendulumPhysics, c: &DemonstratorConfig) -> (f64, PendulumMode) {
    let mode = demonstrator_mode(s, p, c);
    let [kt, ko] = c.mode_gains(mode);
    let u = kt * s.theta + ko * s.omega;
    (u.clamp(-p.u_max, p.u_max), mode)
}

/// Scale applied to ω in the observation features.
pub const OMEGA_SCALE: f64 = 4.0;

/// Observation features (cos θ, sin θ, ω / 4): continuous across the ±π seam.
pub fn observe(s: PendulumState) -> Vec<f64> {
    vec![s.theta.cos(), s.theta.sin(), s.omega / OMEGA_SCALE]
}

pub const OBS_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumDataConfig {
    pub n_pairs: usize,
    /// Maximum steps per episode.
    pub horizon: usize,
    /// An episode ends after this many consecutive balance steps.
    pub hold: usize,
    /// Std of an unrecorded torque disturbance applied while collecting data.
    pub disturbance_std: f64,
    /// Initial ω ~ U[-omega0, omega0]; θ ~ U[-π, π).
    pub omega0: f64,
}

impl Default for PendulumDataConfig {
    fn default() -> Self {
        PendulumDataConfig { n_pairs: 10_000, horizon: 600, hold: 30, disturbance_std: 3.0, omega0: 6.0 }
    }
}

/// Independent per-episode stream: seed `seed`, ChaCha stream `episode`, so
/// datasets with nearby seeds share no episodes.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

pub fn random_start<R: Rng + ?Sized>(rng: &mut R, omega0: f64) -> PendulumState {
    let theta = rng.random_range(-PI..PI);
    let omega = if omega0 > 0.0 { rng.random_range(-omega0..omega0) } else { 0.0 };
    PendulumState { theta, omega }
}

/// Episode `i` draws from [`episode_rng`]`(seed, i)`. Records are ordered by (episode, t); `t` runs
/// on across episodes so it stays strictly increasing, and episode starts are in the header.
pub fn generate_pendulum_dataset(
    phys: &PendulumPhysics,
    demo: &DemonstratorConfig,
    data: &PendulumDataConfig,
    seed: u64,
    l: usize,
) -> Result<Demonstration> {
    phys.validate()?;
    demo.validate()?;
    if data.n_pairs == 0 || data.horizon == 0 {
        return Err(Error::Config("n_pairs and horizon must be positive".into()));
    }
    let dist = Normal::new(0.0, data.disturbance_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(data.n_pairs);
    let mut starts = Vec::new();
    let (mut episodes, mut failures) = (0usize, 0usize);
    let mut step = 0u64;
    while records.len() < data.n_pairs {
        let mut rng = episode_rng(seed, episodes as u64);
        let mut s = random_start(&mut rng, data.omega0);
        starts.push(records.len());
        let mut held = 0;
        for _ in 0..data.horizon {
            if records.len() == data.n_pairs {
                held = data.hold.max(1);
                break;
            }
            let (u, mode) = demonstrator_action(s, phys, demo);
            records.push(Record { t: step as f64 * phys.dt, x: s.to_vec(), u: vec![u], z: observe(s), mode: Some(mode.index()) });
            step += 1;
            held = if mode == PendulumMode::Balance { held + 1 } else { 0 };
            let d = if data.disturbance_std > 0.0 { dist.sample(&mut rng) } else { 0.0 };
            s = pendulum_step_disturbed(s, u, d, phys);
            if data.hold > 0 && held >= data.hold {
                break;
            }
        }
        if data.hold > 0 && held < data.hold {
            failures += 1;
        }
        episodes += 1;
    }
    if failures * 5 > episodes {
        return Err(Error::EnvTuning(format!("demonstrator failed to reach balance in {failures} of {episodes} episodes")));
    }
    let meta = DemoMeta { env: "pendulum".into(), seed, dt: phys.dt, l, episode_starts: starts, train_frames: None, goals: None };
    Ok(Demonstration { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equilibria_are_fixed() {
        let p = PendulumPhysics::default();
        let s = pendulum_step(PendulumState::new(0.0, 0.0), 0.0, &p);
        assert_eq!((s.theta, s.omega), (0.0, 0.0));
        let h = PendulumState::new(-PI, 0.0);
        let s = pendulum_step(h, 0.0, &p);
        assert_abs_diff_eq!(s.omega, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.theta.abs(), PI, epsilon = 1e-12);
    }

    #[test]
    fn wrap_range() {
        for t in [-10.0, -PI, -3.0, 0.0, 3.2, PI, 7.0, 100.0] {
            let w = wrap_angle(t);
            assert!((-PI..PI).contains(&w), "{t} -> {w}");
            assert_abs_diff_eq!(w.sin(), f64::sin(t), epsilon = 1e-9);
        }
    }

    #[test]
    fn energies() {
        let p = PendulumPhysics::default();
        assert_eq!(pendulum_energy(PendulumState::new(0.0, 0.0), &p), p.m * p.g * p.l);
        assert_abs_diff_eq!(pendulum_energy(PendulumState::new(-PI, 0.0), &p), -p.m * p.g * p.l, epsilon = 1e-12);
        let a = PendulumState { theta: 0.7, omega: 1.3 };
        let b = PendulumState { theta: -0.7, omega: -1.3 };
        assert_eq!(pendulum_energy(a, &p), pendulum_energy(b, &p));
    }

    #[test]
    fn demonstrator_modes() {
        let p = PendulumPhysics::default();
        let c = DemonstratorConfig::default();
        let (u, m) = demonstrator_action(PendulumState::new(0.1, 0.0), &p, &c);
        assert_eq!(m, PendulumMode::Balance);
        assert!(u < 0.0);
        let (u, m) = demonstrator_action(PendulumState::new(-PI, 0.1), &p, &c);
        assert_eq!(m, PendulumMode::Pump);
        assert!(u > 0.0);
        let s = PendulumState::new(1.0, 6.0);
        assert!(pendulum_energy(s, &p) > p.upright_energy() + c.e_band);
        let (u, m) = demonstrator_action(s, &p, &c);
        assert_eq!(m, PendulumMode::Spin);
        assert!(u < 0.0);
    }

    #[test]
    fn observation_is_continuous_at_seam() {
        let a = observe(PendulumState { theta: PI - 1e-9, omega: 0.0 });
        let b = observe(PendulumState { theta: -PI, omega: 0.0 });
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-8));
    }
}
