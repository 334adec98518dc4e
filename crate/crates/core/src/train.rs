//! Losses and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::PidBatch;
use crate::diffcore::{adam_step, AdamHyper, AdamState, Graph, Tensor, Var};
use crate::envs::Demonstration;
use crate::error::{Error, Result};
use crate::gumbel::{anneal, sample_gumbel, GumbelConfig};
use crate::models::{init_model, HeadSpec, MdnModel, Model, ModelKind, RegressorModel, TrunkConfig};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const PROB_FLOOR: f64 = 1e-12;

/// ½ Σ_d [(u_d − û_d)²/σ²_d + ln σ²_d + ln 2π].
pub fn gaussian_nll(u: &[f64], u_hat: &[f64], sigma_diag: &[f64]) -> Result<f64> {
    if u.len() != u_hat.len() || u.len() != sigma_diag.len() {
        return Err(Error::Shape { op: "gaussian_nll", detail: format!("{} / {} / {}", u.len(), u_hat.len(), sigma_diag.len()) });
    }
    let mut s = 0.0;
    for ((a, b), v) in u.iter().zip(u_hat).zip(sigma_diag) {
        if !(*v > 0.0) {
            return Err(Error::Domain { op: "gaussian_nll", detail: format!("variance {v}") });
        }
        s += (a - b).powi(2) / v + v.ln() + LN_2PI;
    }
    Ok(0.5 * s)
}

/// −log Σ_i π_i N(u | û_i, Σ_i), via log-sum-exp.
pub fn mdn_nll(u: &[f64], weights: &[f64], means: &[Vec<f64>], sigma_diags: &[Vec<f64>]) -> Result<f64> {
    if weights.len() != means.len() || weights.len() != sigma_diags.len() {
        return Err(Error::Shape { op: "mdn_nll", detail: "component count mismatch".into() });
    }
    let mut terms = Vec::with_capacity(weights.len());
    for ((w, m), s) in weights.iter().zip(means).zip(sigma_diags) {
        terms.push(w.max(PROB_FLOOR).ln() - gaussian_nll(u, m, s)?);
    }
    Ok(-crate::diffcore::logsumexp(&terms))
}

/// −Σ_i (1/K) ln ŷ_i with ŷ the batch-mean switch, clamped at 1e-12.
pub fn ce_regularizer(switch_batch: &[Vec<f64>]) -> f64 {
    let k = switch_batch.first().map_or(0, |r| r.len());
    let n = switch_batch.len() as f64;
    let mut yb = vec![0.0; k];
    for row in switch_batch {
        for (a, b) in yb.iter_mut().zip(row) {
            *a += b;
        }
    }
    -yb.iter().map(|v| (v / n).max(PROB_FLOOR).ln()).sum::<f64>() / k as f64
}

/// Supervised samples with PID inputs materialized per record.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub dz: usize,
    pub dx: usize,
    pub du: usize,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub isum: Vec<f64>,
    pub count: Vec<f64>,
    pub deriv: Vec<f64>,
    pub mode: Vec<Option<usize>>,
}

impl TrainSet {
    /// Records `range` of `demo`; each window is cut at its episode start.
    pub fn from_demo(demo: &Demonstration, range: std::ops::Range<usize>, l: usize, dt: f64) -> Result<Self> {
        if range.is_empty() || range.end > demo.len() {
            return Err(Error::Precondition(format!("record range {range:?} of {} records", demo.len())));
        }
        let r0 = &demo.records[range.start];
        let (dz, dx, du) = (r0.z.len(), r0.x.len(), r0.u.len());
        let n = range.len();
        let mut s = TrainSet {
            dz,
            dx,
            du,
            z: Vec::with_capacity(n * dz),
            x: Vec::with_capacity(n * dx),
            u: Vec::with_capacity(n * du),
            isum: Vec::with_capacity(n * dx),
            count: Vec::with_capacity(n * dx),
            deriv: Vec::with_capacity(n * dx),
            mode: Vec::with_capacity(n),
        };
        for i in range {
            let r = &demo.records[i];
            let start = demo.episode_start(i).max(i.saturating_sub(l));
            s.z.extend_from_slice(&r.z);
            s.x.extend_from_slice(&r.x);
            s.u.extend_from_slice(&r.u);
            let mut acc = vec![0.0; dx];
            for past in &demo.records[start..i] {
                for j in 0..dx {
                    acc[j] += past.x[j];
                }
            }
            s.isum.extend_from_slice(&acc);
            s.count.extend(std::iter::repeat_n((i - start) as f64, dx));
            if i > demo.episode_start(i) {
                let p = &demo.records[i - 1];
                s.deriv.extend(r.x.iter().zip(&p.x).map(|(a, b)| (a - b) / dt));
            } else {
                s.deriv.extend(std::iter::repeat_n(0.0, dx));
            }
            s.mode.push(r.mode);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.mode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode.is_empty()
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dx..(i + 1) * self.dx]
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.du..(i + 1) * self.du]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let pick = |src: &[f64], d: usize| -> Tensor {
            let mut v = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                v.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
            Tensor::matrix(idx.len(), d, v).unwrap()
        };
        Batch {
            z: pick(&self.z, self.dz),
            u: pick(&self.u, self.du),
            pid: PidBatch {
                x: pick(&self.x, self.dx),
                isum: pick(&self.isum, self.dx),
                count: pick(&self.count, self.dx),
                deriv: pick(&self.deriv, self.dx),
            },
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub z: Tensor,
    pub u: Tensor,
    pub pid: PidBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.z.outer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gumbel: GumbelConfig,
    pub use_ce_reg: bool,
    pub ce_weight: f64,
    pub adam: AdamHyper,
    /// Learning rate of the SDN's final parameter table; `None` uses `adam.learning_rate`.
    #[serde(default)]
    pub final_lr: Option<f64>,
    /// Per-epoch multiplicative decay applied to every learning rate.
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub dt: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.ce_weight >= 0.0) {
            return Err(Error::Config(format!("ce_weight {} must be non-negative", self.ce_weight)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if let Some(lr) = self.final_lr {
            if !(lr > 0.0) {
                return Err(Error::Config("final_lr must be positive".into()));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        self.adam.validate()?;
        self.gumbel.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub nll: f64,
    pub ce_reg: f64,
    pub total: f64,
    /// Mean switch (SDN) or mean mixture weights (MDN) over the epoch's batches.
    pub batch_mean_switch: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let k = self.records.first().map_or(0, |r| r.batch_mean_switch.len());
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["epoch", "tau", "nll", "ce_reg", "total"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=k).map(|i| format!("y_bar_{i}")));
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.tau.to_string(), r.nll.to_string(), r.ce_reg.to_string(), r.total.to_string()];
            row.extend(r.batch_mean_switch.iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// max_i ŷ_i > `threshold` in each of the last `window` epochs.
    pub fn collapsed(&self, window: usize, threshold: f64) -> bool {
        let n = self.records.len();
        if n < window || window == 0 {
            return false;
        }
        self.records[n - window..].iter().all(|r| r.batch_mean_switch.iter().copied().fold(0.0, f64::max) > threshold)
    }
}

/// Default collapse diagnostic: max ŷ above 0.95 through the final 10 epochs.
pub fn is_collapsed(h: &TrainHistory) -> bool {
    h.collapsed(10, 0.95)
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub ce: Option<Var>,
    /// Batch switch `[B, K]` (SDN) or mixture weights (MDN).
    pub switch: Option<Var>,
}

/// Per-sample Gaussian NLL as a `[B, 1]` column.
fn gaussian_nll_graph(g: &mut Graph, u: Var, u_hat: Var, log_var: Var, du: usize) -> Result<Var> {
    let r = g.sub(u, u_hat)?;
    let r2 = g.mul(r, r)?;
    let neg = g.scale(log_var, -1.0);
    let inv = g.exp(neg)?;
    let a = g.mul(r2, inv)?;
    let b = g.add(a, log_var)?;
    let s = g.sum_last(b);
    let c = g.constant(Tensor::scalar(du as f64 * LN_2PI));
    let s = g.add(s, c)?;
    Ok(g.scale(s, 0.5))
}

fn ce_graph(g: &mut Graph, y: Var) -> Result<Var> {
    let (b, k) = {
        let v = g.value(y);
        (v.outer(), v.last_dim())
    };
    let avg = g.constant(Tensor::full(&[1, b], 1.0 / b as f64));
    let yb = g.matmul(avg, y)?;
    let l = g.log_clamped(yb, PROB_FLOOR);
    let s = g.sum(l);
    Ok(g.scale(s, -1.0 / k as f64))
}

/// Builds the training objective for `model` on `batch`. `noise` is the `[B, K]`
/// Gumbel draw for an SDN (ignored otherwise).
pub fn loss_graph(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    batch: &Batch,
    noise: Option<&Tensor>,
    tau: f64,
    use_ce_reg: bool,
    ce_weight: f64,
) -> Result<LossVars> {
    let head = model.head();
    let z = g.constant(batch.z.clone());
    let u = g.constant(batch.u.clone());
    match model {
        Model::Sdn(m) => {
            let (y, params, _) = m.graph(g, vars, z, noise, tau)?;
            let pv = head.decode_graph(g, params)?;
            let uh = crate::control::predicted_action_graph(g, &pv, &batch.pid, head.action_dim)?;
            let per = gaussian_nll_graph(g, u, uh, pv.log_var, head.action_dim)?;
            let nll = g.mean(per);
            let ce = ce_graph(g, y)?;
            let total = if use_ce_reg && ce_weight > 0.0 {
                let w = g.scale(ce, ce_weight);
                g.add(nll, w)?
            } else {
                nll
            };
            Ok(LossVars { total, nll, ce: Some(ce), switch: Some(y) })
        }
        Model::Mdn(m) => {
            let (log_w, comps) = m.graph(g, vars, z)?;
            let mut cols = Vec::with_capacity(comps.len());
            for c in comps {
                let pv = head.decode_graph(g, c)?;
                let uh = crate::control::predicted_action_graph(g, &pv, &batch.pid, head.action_dim)?;
                let per = gaussian_nll_graph(g, u, uh, pv.log_var, head.action_dim)?;
                cols.push(g.scale(per, -1.0));
            }
            let ll = g.concat_last(&cols)?;
            let joint = g.add(ll, log_w)?;
            let lse = g.logsumexp_last(joint);
            let m = g.mean(lse);
            let nll = g.scale(m, -1.0);
            let w = g.exp(log_w)?;
            Ok(LossVars { total: nll, nll, ce: None, switch: Some(w) })
        }
        Model::Regressor(m) => {
            let params = m.graph(g, vars, z)?;
            let pv = head.decode_graph(g, params)?;
            let uh = crate::control::predicted_action_graph(g, &pv, &batch.pid, head.action_dim)?;
            let per = gaussian_nll_graph(g, u, uh, pv.log_var, head.action_dim)?;
            let nll = g.mean(per);
            Ok(LossVars { total: nll, nll, ce: None, switch: None })
        }
    }
}

/// Draws a `[B, K]` Gumbel noise tensor.
pub fn gumbel_noise<R: Rng + ?Sized>(b: usize, k: usize, rng: &mut R) -> Tensor {
    let mut v = Vec::with_capacity(b * k);
    for _ in 0..b {
        v.extend(sample_gumbel(k, rng));
    }
    Tensor::matrix(b, k, v).unwrap()
}

/// SDN objective values (total, nll, ce) on one batch with fresh Gumbel noise.
pub fn sdn_loss<R: Rng + ?Sized>(model: &Model, batch: &Batch, tau: f64, rng: &mut R, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let Model::Sdn(m) = model else {
        return Err(Error::Config("sdn_loss needs an SDN model".into()));
    };
    let noise = gumbel_noise(batch.len(), m.k(), rng);
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let lv = loss_graph(&mut g, model, &vars, batch, Some(&noise), tau, cfg.use_ce_reg, cfg.ce_weight)?;
    Ok((g.value(lv.total).item(), g.value(lv.nll).item(), g.value(lv.ce.unwrap()).item()))
}

/// Everything needed to initialise a model of a given kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub trunk: TrunkConfig,
    pub head: HeadSpec,
    /// Per-dimension range for stratified reference initialisation (SDN with a learned μ).
    #[serde(default)]
    pub mu_init_range: Vec<(f64, f64)>,
}

const INIT_STREAM: u64 = 0x5eed_1a17;

pub fn build_model(spec: &ModelSpec, gumbel: &GumbelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM);
    Ok(match spec.kind {
        ModelKind::Sdn => Model::Sdn(init_model(&spec.trunk, &spec.head, gumbel, &mut rng, &spec.mu_init_range)?),
        ModelKind::Mdn => Model::Mdn(MdnModel::init(&spec.trunk, &spec.head, &mut rng)?),
        ModelKind::Regressor => Model::Regressor(RegressorModel::init(&spec.trunk, &spec.head, &mut rng)?),
    })
}

/// Per-dimension [min, max] of the state over a training set.
pub fn state_range(data: &TrainSet) -> Vec<(f64, f64)> {
    (0..data.dx)
        .map(|j| {
            (0..data.len()).map(|i| data.x[i * data.dx + j]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Trains `model` in place: seeded shuffles, per-epoch annealing, Adam.
pub fn train_model(model: &mut Model, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if matches!(model, Model::Sdn(_) | Model::Mdn(_)) && model.head().k < 2 {
        return Err(Error::Config("sdn and mdn training needs K >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks: Vec<(String, usize)> = model.params().into_iter().map(|(n, t)| (n, t.numel())).collect();
    let mut adam = AdamState::new(&blocks, cfg.adam)?;
    if let Some(lr) = cfg.final_lr {
        for (i, (n, _)) in blocks.iter().enumerate() {
            if n == "final_w" {
                adam.block_lr[i] = lr;
            }
        }
    }
    let base_lr = adam.block_lr.clone();
    let k = model.head().k;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let tau = anneal(&cfg.gumbel, epoch);
        let scale = cfg.lr_decay.powi(epoch as i32);
        for (lr, b) in adam.block_lr.iter_mut().zip(&base_lr) {
            *lr = b * scale;
        }
        order.shuffle(&mut rng);
        let (mut s_nll, mut s_ce, mut s_tot) = (0.0, 0.0, 0.0);
        let mut s_y = vec![0.0; if matches!(model, Model::Regressor(_)) { 0 } else { k }];
        let mut nb = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(idx);
            let noise = match model {
                Model::Sdn(_) => Some(gumbel_noise(idx.len(), k, &mut rng)),
                _ => None,
            };
            let mut g = Graph::new();
            let vars = model.register(&mut g);
            let lv = loss_graph(&mut g, model, &vars, &batch, noise.as_ref(), tau, cfg.use_ce_reg, cfg.ce_weight)?;
            let total = g.value(lv.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} batch {bi}")));
            }
            s_tot += total;
            s_nll += g.value(lv.nll).item();
            if let Some(c) = lv.ce {
                s_ce += g.value(c).item();
            }
            if let Some(y) = lv.switch {
                let yv = g.value(y);
                for r in 0..yv.outer() {
                    for (a, b) in s_y.iter_mut().zip(yv.row(r)) {
                        *a += b / yv.outer() as f64;
                    }
                }
            }
            let grads = g.backward(lv.total).map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {bi}: {e}")))?;
            let gvals: Vec<Vec<f64>> = vars.iter().zip(&blocks).map(|(v, (_, n))| grads.get_or_zero(*v, *n)).collect();
            let grefs: Vec<&[f64]> = gvals.iter().map(|v| v.as_slice()).collect();
            let mut ps = model.params_mut();
            let mut prefs: Vec<&mut [f64]> = ps.iter_mut().map(|t| t.data_mut()).collect();
            adam_step(&mut prefs, &grefs, &mut adam).map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {bi}: {e}")))?;
            nb += 1;
        }
        let nbf = nb as f64;
        history.records.push(EpochRecord {
            epoch,
            tau,
            nll: s_nll / nbf,
            ce_reg: s_ce / nbf,
            total: s_tot / nbf,
            batch_mean_switch: s_y.iter().map(|v| v / nbf).collect(),
        });
    }
    Ok(history)
}

/// Initialises a model from `spec` and trains it.
pub fn train(spec: &ModelSpec, data: &TrainSet, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let mut model = build_model(spec, &cfg.gumbel, cfg.seed)?;
    let h = train_model(&mut model, data, cfg)?;
    Ok((model, h))
}
