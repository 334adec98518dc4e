//! Windowed PID law and the switching predicted-action model.
//!
//! Gains are stored per state dimension. When the action has the state's
//! dimension the gains act elementwise; for a scalar action they are a row
//! vector and the terms are summed over the state (a state-feedback law).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidParams {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub mode_id: usize,
}

impl PidParams {
    pub fn validate(&self) -> Result<()> {
        let dx = self.mu.len();
        if self.kp.len() != dx || self.ki.len() != dx || self.kd.len() != dx {
            return Err(Error::Shape { op: "pid_params", detail: format!("gains must have state dim {dx}") });
        }
        let du = self.sigma_diag.len();
        if du != dx && du != 1 {
            return Err(Error::Shape { op: "pid_params", detail: format!("action dim {du} vs state dim {dx}") });
        }
        if self.sigma_diag.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Domain { op: "pid_params", detail: "sigma_diag must be positive".into() });
        }
        let all = [&self.kp, &self.ki, &self.kd, &self.mu, &self.sigma_diag];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("pid_params".into()));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.sigma_diag.len()
    }
}

/// The last `l + 1` states of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    states: VecDeque<Vec<f64>>,
    pub dt: f64,
    pub l: usize,
}

impl HistoryWindow {
    pub fn new(dt: f64, l: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(HistoryWindow { states: VecDeque::with_capacity(l + 1), dt, l })
    }

    /// Builds a window from oldest-to-newest states, keeping the last `l + 1`.
    pub fn from_states(states: &[Vec<f64>], dt: f64, l: usize) -> Result<Self> {
        let mut h = Self::new(dt, l)?;
        for s in states {
            h.push(s.clone());
        }
        Ok(h)
    }

    pub fn push(&mut self, x: Vec<f64>) {
        if self.states.len() == self.l + 1 {
            self.states.pop_front();
        }
        self.states.push_back(x);
    }

    pub fn clear(&mut self) {
        self.states.clear();
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn current(&self) -> Option<&[f64]> {
        self.states.back().map(|v| v.as_slice())
    }

    /// (x_k, Σ_{l=1..L} x_{k-l}, number of summed states, (x_k - x_{k-1})/dt).
    pub fn features(&self) -> Result<(Vec<f64>, Vec<f64>, usize, Vec<f64>)> {
        let n = self.states.len();
        let Some(x) = self.states.back() else {
            return Err(Error::Precondition("PID action needs a non-empty history".into()));
        };
        let d = x.len();
        let mut s = vec![0.0; d];
        for past in self.states.iter().take(n - 1) {
            for j in 0..d {
                s[j] += past[j];
            }
        }
        let deriv = if n >= 2 {
            let prev = &self.states[n - 2];
            x.iter().zip(prev).map(|(a, b)| (a - b) / self.dt).collect()
        } else {
            vec![0.0; d]
        };
        Ok((x.clone(), s, n - 1, deriv))
    }
}

/// u_k = kp∘(x_k − μ) + ki∘Σ(x_{k−l} − μ) + kd∘(x_k − x_{k−1})/Δt.
pub fn pid_action(p: &PidParams, hist: &HistoryWindow) -> Result<Vec<f64>> {
    let (x, s, n, dx) = hist.features()?;
    pid_from_features(p, &x, &s, n, &dx)
}

pub fn pid_from_features(p: &PidParams, x: &[f64], isum: &[f64], n: usize, deriv: &[f64]) -> Result<Vec<f64>> {
    let d = p.mu.len();
    if x.len() != d {
        return Err(Error::Shape { op: "pid_action", detail: format!("state dim {} vs reference dim {d}", x.len()) });
    }
    let nf = n as f64;
    let terms: Vec<f64> = (0..d).map(|j| p.kp[j] * (x[j] - p.mu[j]) + p.ki[j] * (isum[j] - nf * p.mu[j]) + p.kd[j] * deriv[j]).collect();
    if p.action_dim() == 1 && d != 1 {
        Ok(vec![terms.iter().sum()])
    } else {
        Ok(terms)
    }
}

/// Mean action and variances of the Gaussian action model for one decoded mode.
pub fn predicted_action(p: &PidParams, hist: &HistoryWindow) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((pid_action(p, hist)?, p.sigma_diag.clone()))
}

pub fn clamp_action(u: &[f64], limit: f64) -> Vec<f64> {
    u.iter().map(|v| v.clamp(-limit, limit)).collect()
}

/// Per-sample PID inputs materialized for a batch: rows of x_k, the integral
/// window sum, the window count (repeated across columns) and the difference quotient.
#[derive(Clone, Debug)]
pub struct PidBatch {
    pub x: Tensor,
    pub isum: Tensor,
    pub count: Tensor,
    pub deriv: Tensor,
}

/// Graph handles for one decoded parameter set. Each is either `[B, d]` or a broadcast row.
#[derive(Clone, Copy, Debug)]
pub struct PidVars {
    pub kp: Option<Var>,
    pub ki: Option<Var>,
    pub kd: Option<Var>,
    pub mu: Option<Var>,
    pub log_var: Var,
}

/// Differentiable batch mean action. `None` blocks are known to be zero and skipped.
pub fn predicted_action_graph(g: &mut Graph, p: &PidVars, batch: &PidBatch, action_dim: usize) -> Result<Var> {
    let x = g.constant(batch.x.clone());
    let d = batch.x.last_dim();
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph, t: Var| -> Result<()> {
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
        Ok(())
    };
    if let Some(kp) = p.kp {
        let e = match p.mu {
            Some(mu) => g.sub(x, mu)?,
            None => x,
        };
        let t = g.mul(e, kp)?;
        add(g, t)?;
    }
    if let Some(ki) = p.ki {
        let s = g.constant(batch.isum.clone());
        let e = match p.mu {
            Some(mu) => {
                let c = g.constant(batch.count.clone());
                let nm = g.mul(c, mu)?;
                g.sub(s, nm)?
            }
            None => s,
        };
        let t = g.mul(e, ki)?;
        add(g, t)?;
    }
    if let Some(kd) = p.kd {
        let dv = g.constant(batch.deriv.clone());
        let t = g.mul(dv, kd)?;
        add(g, t)?;
    }
    let terms = match total {
        Some(t) => t,
        None => g.constant(Tensor::zeros(batch.x.shape())),
    };
    if action_dim == 1 && d != 1 {
        Ok(g.sum_last(terms))
    } else {
        Ok(terms)
    }
}
