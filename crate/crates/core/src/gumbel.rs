//! Gumbel-softmax relaxation of a K-way categorical switch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const U_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub k: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
    /// Hard argmax one-hot at evaluation.
    pub hard_eval: bool,
    /// Straight-through hard samples during training.
    #[serde(default)]
    pub straight_through: bool,
}

impl GumbelConfig {
    pub fn new(k: usize) -> Self {
        GumbelConfig { k, tau0: 5.0, tau_min: 0.5, decay: 0.985, hard_eval: true, straight_through: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("gumbel k must be at least 1".into()));
        }
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(Error::Config(format!("need tau0 >= tau_min > 0, got {} / {}", self.tau0, self.tau_min)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchSample {
    pub y: Vec<f64>,
    pub g: Vec<f64>,
    pub tau: f64,
}

/// Gumbel(0,1) quantile of a uniform draw, with the draw clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// Relaxed sample with explicit noise; `hard` returns the exact one-hot of the argmax.
pub fn gumbel_softmax_with_noise(logits: &[f64], g: &[f64], tau: f64, hard: bool) -> Result<SwitchSample> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if logits.len() != g.len() {
        return Err(Error::Shape { op: "gumbel_softmax", detail: format!("{} logits, {} noise", logits.len(), g.len()) });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits".into()));
    }
    let mut y: Vec<f64> = logits.iter().zip(g).map(|(l, n)| (l + n) / tau).collect();
    softmax_in_place(&mut y);
    if hard {
        y = one_hot(argmax(&y), y.len());
    }
    Ok(SwitchSample { y, g: g.to_vec(), tau })
}

pub fn gumbel_softmax<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R, hard: bool) -> Result<SwitchSample> {
    let g = sample_gumbel(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &g, tau, hard)
}

/// Differentiable batch version: `softmax((logits + noise) / tau)` row-wise.
///
/// With `straight_through` the forward value is the argmax one-hot while the
/// gradient is that of the soft sample.
pub fn gumbel_softmax_graph(g: &mut Graph, logits: Var, noise: &Tensor, tau: f64, straight_through: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = g.constant(noise.clone());
    let s = g.add(logits, n)?;
    let s = g.scale(s, 1.0 / tau);
    let y = g.softmax_last(s);
    if !straight_through {
        return Ok(y);
    }
    let yv = g.value(y);
    let k = yv.last_dim();
    let mut delta = Vec::with_capacity(yv.numel());
    for r in 0..yv.outer() {
        let row = yv.row(r);
        let oh = one_hot(argmax(row), k);
        delta.extend(oh.iter().zip(row).map(|(h, s)| h - s));
    }
    let d = g.constant(Tensor::new(yv.shape().to_vec(), delta)?);
    g.add(y, d)
}

pub fn anneal(cfg: &GumbelConfig, epoch: usize) -> f64 {
    let t = cfg.tau0 * cfg.decay.powf(epoch as f64);
    t.max(cfg.tau_min)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(i: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_e_is_fixed_point() {
        assert_abs_diff_eq!(gumbel_from_uniform((-1f64).exp()), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn clamped_endpoints_are_finite() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = sample_gumbel(1_000_000, &mut rng);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        assert!((mean - EULER_GAMMA).abs() < 0.01, "mean {mean}");
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((var - pi2_6).abs() < 0.02, "var {var}");
    }

    #[test]
    fn equal_logits_zero_noise_is_uniform() {
        for tau in [0.1, 1.0, 7.0] {
            let s = gumbel_softmax_with_noise(&[0.3; 4], &[0.0; 4], tau, false).unwrap();
            for y in s.y {
                assert_abs_diff_eq!(y, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn hard_is_exact_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = gumbel_softmax(&[0.1, 2.0, -1.0], 1.0, &mut rng, true).unwrap();
        assert_eq!(s.y.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(s.y.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(gumbel_softmax_with_noise(&[0.0, 0.0], &[0.0, 0.0], 0.0, false).is_err());
        assert!(gumbel_softmax_with_noise(&[0.0, 0.0], &[0.0, 0.0], -1.0, false).is_err());
    }

    #[test]
    fn anneal_schedule() {
        let mut c = GumbelConfig::new(3);
        assert_eq!(anneal(&c, 0), c.tau0);
        c.decay = 1.0;
        assert_eq!(anneal(&c, 500), c.tau0);
        c.tau0 = 5.0;
        c.decay = 0.99;
        c.tau_min = 0.5;
        assert_eq!(anneal(&c, 1000), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(GumbelConfig::new(3).validate().is_ok());
        let c = GumbelConfig { tau_min: 0.0, ..GumbelConfig::new(3) };
        assert!(c.validate().is_err());
        let c = GumbelConfig { decay: 1.5, ..GumbelConfig::new(3) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let mut g = Graph::new();
        let l = g.param(Tensor::from_rows(&[vec![0.2, 1.0, -0.3], vec![2.0, 0.0, 0.1]]).unwrap());
        let noise = Tensor::zeros(&[2, 3]);
        let y = gumbel_softmax_graph(&mut g, l, &noise, 1.0, true).unwrap();
        let v = g.value(y);
        assert_abs_diff_eq!(v.row(0)[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.row(1)[0], 1.0, epsilon = 1e-12);
    }
}
