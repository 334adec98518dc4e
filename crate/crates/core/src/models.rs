//! MLP trunk, the switching density head, and the two baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{PidParams, PidVars};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gumbel::{argmax, gumbel_softmax_graph, gumbel_softmax_with_noise, one_hot, sample_gumbel, GumbelConfig, SwitchSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("bad trunk {self:?}")));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Kp,
    Ki,
    Kd,
    Mu,
    LogVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub kind: BlockKind,
    pub dim: usize,
    pub learned: bool,
    /// Values used when the block is not learned.
    #[serde(default)]
    pub fixed: Option<Vec<f64>>,
}

/// Which controller parameters the head predicts and which are known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub blocks: Vec<HeadBlock>,
}

fn fixed_block(kind: BlockKind, v: Vec<f64>) -> HeadBlock {
    HeadBlock { kind, dim: v.len(), learned: false, fixed: Some(v) }
}

fn learned_block(kind: BlockKind, dim: usize) -> HeadBlock {
    HeadBlock { kind, dim, learned: true, fixed: None }
}

impl HeadSpec {
    /// Learned state-feedback gains, μ = 0, unit action variance.
    pub fn gains_only(k: usize, state_dim: usize) -> Self {
        HeadSpec {
            k,
            state_dim,
            action_dim: 1,
            blocks: vec![
                learned_block(BlockKind::Kp, state_dim),
                fixed_block(BlockKind::Ki, vec![0.0; state_dim]),
                fixed_block(BlockKind::Kd, vec![0.0; state_dim]),
                fixed_block(BlockKind::Mu, vec![0.0; state_dim]),
                fixed_block(BlockKind::LogVar, vec![0.0]),
            ],
        }
    }

    /// Known proportional gain; learned reference and per-dimension log-variance.
    pub fn reference_only(k: usize, dim: usize, kp: f64) -> Self {
        HeadSpec {
            k,
            state_dim: dim,
            action_dim: dim,
            blocks: vec![
                fixed_block(BlockKind::Kp, vec![kp; dim]),
                fixed_block(BlockKind::Ki, vec![0.0; dim]),
                fixed_block(BlockKind::Kd, vec![0.0; dim]),
                learned_block(BlockKind::Mu, dim),
                learned_block(BlockKind::LogVar, dim),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.state_dim == 0 {
            return Err(Error::Config("head needs k >= 1 and a state dim".into()));
        }
        if self.action_dim != self.state_dim && self.action_dim != 1 {
            return Err(Error::Config(format!("action dim {} must be 1 or the state dim {}", self.action_dim, self.state_dim)));
        }
        for kind in [BlockKind::Kp, BlockKind::Ki, BlockKind::Kd, BlockKind::Mu, BlockKind::LogVar] {
            let n = self.blocks.iter().filter(|b| b.kind == kind).count();
            if n != 1 {
                return Err(Error::Config(format!("block {kind:?} appears {n} times")));
            }
        }
        for b in &self.blocks {
            let want = if b.kind == BlockKind::LogVar { self.action_dim } else { self.state_dim };
            if b.dim != want {
                return Err(Error::Config(format!("block {:?} has dim {}, expected {want}", b.kind, b.dim)));
            }
            if !b.learned {
                match &b.fixed {
                    Some(v) if v.len() == b.dim && v.iter().all(|x| x.is_finite()) => {}
                    _ => return Err(Error::Config(format!("fixed block {:?} needs {} finite values", b.kind, b.dim))),
                }
            }
        }
        if self.learned_width() == 0 {
            return Err(Error::Config("at least one block must be learned".into()));
        }
        Ok(())
    }

    /// P: total width of the learned blocks.
    pub fn learned_width(&self) -> usize {
        self.blocks.iter().filter(|b| b.learned).map(|b| b.dim).sum()
    }

    /// Offset of a learned block within a P-row.
    pub fn offset(&self, kind: BlockKind) -> Option<usize> {
        let mut off = 0;
        for b in &self.blocks {
            if b.kind == kind {
                return b.learned.then_some(off);
            }
            if b.learned {
                off += b.dim;
            }
        }
        None
    }

    fn block(&self, kind: BlockKind) -> &HeadBlock {
        self.blocks.iter().find(|b| b.kind == kind).expect("validated head")
    }

    fn values(&self, kind: BlockKind, row: &[f64]) -> Vec<f64> {
        let b = self.block(kind);
        match self.offset(kind) {
            Some(o) => row[o..o + b.dim].to_vec(),
            None => b.fixed.clone().unwrap_or_else(|| vec![0.0; b.dim]),
        }
    }

    /// Learned blocks from `row`, fixed blocks from the spec.
    pub fn decode(&self, row: &[f64], mode_id: usize) -> PidParams {
        PidParams {
            kp: self.values(BlockKind::Kp, row),
            ki: self.values(BlockKind::Ki, row),
            kd: self.values(BlockKind::Kd, row),
            mu: self.values(BlockKind::Mu, row),
            sigma_diag: self.values(BlockKind::LogVar, row).iter().map(|v| v.exp()).collect(),
            mode_id,
        }
    }

    /// Graph handles for a `[B, P]` parameter batch. Fixed all-zero gains and μ are omitted.
    pub fn decode_graph(&self, g: &mut Graph, params: Var) -> Result<PidVars> {
        let get = |g: &mut Graph, kind: BlockKind| -> Result<Option<Var>> {
            let b = self.block(kind);
            if let Some(o) = self.offset(kind) {
                return g.slice_last(params, o, b.dim).map(Some);
            }
            let v = b.fixed.clone().unwrap_or_else(|| vec![0.0; b.dim]);
            if kind != BlockKind::LogVar && v.iter().all(|&x| x == 0.0) {
                return Ok(None);
            }
            Ok(Some(g.constant(Tensor::vector(v))))
        };
        let kp = get(g, BlockKind::Kp)?;
        let ki = get(g, BlockKind::Ki)?;
        let kd = get(g, BlockKind::Kd)?;
        let mu = get(g, BlockKind::Mu)?;
        let log_var = get(g, BlockKind::LogVar)?.expect("log_var always present");
        Ok(PidVars { kp, ki, kd, mu, log_var })
    }
}

/// Affine layer `x W + b`, W stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

impl Layer {
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Layer { w: Tensor::matrix(fan_in, fan_out, w).unwrap(), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Plain forward of one input row. Summation order mirrors the graph path.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.in_dim(), self.out_dim());
        let w = self.w.data();
        let mut out = vec![0.0; n_out];
        for p in 0..n_in {
            let xv = x[p];
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(&w[p * n_out..(p + 1) * n_out]) {
                *o += xv * wv;
            }
        }
        for (o, b) in out.iter_mut().zip(self.b.data()) {
            *o += b;
        }
        out
    }

    fn graph(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let _ = self;
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub cfg: TrunkConfig,
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(cfg: &TrunkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = cfg.input_dim;
        for &h in &cfg.hidden {
            layers.push(Layer::xavier(fan_in, h, rng));
            fan_in = h;
        }
        Ok(Mlp { cfg: cfg.clone(), layers })
    }

    fn act(&self, v: f64) -> f64 {
        match self.cfg.activation {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.input_dim {
            return Err(Error::Shape { op: "trunk", detail: format!("observation dim {} vs input dim {}", z.len(), self.cfg.input_dim) });
        }
        let mut h = z.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h).into_iter().map(|v| self.act(v)).collect();
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("trunk layer {i} activation")));
            }
        }
        Ok(h)
    }

    /// `vars` holds (w, b) per layer.
    pub fn graph(&self, g: &mut Graph, z: Var, vars: &[Var]) -> Result<Var> {
        let mut h = z;
        for (i, l) in self.layers.iter().enumerate() {
            let a = l.graph(g, h, vars[2 * i], vars[2 * i + 1])?;
            h = match self.cfg.activation {
                Activation::Tanh => g.tanh(a),
                Activation::Relu => g.relu(a),
            };
        }
        Ok(h)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len()).flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdnOutput {
    pub switch: SwitchSample,
    pub params: PidParams,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdnModel {
    pub trunk: Mlp,
    pub logit: Layer,
    /// K × P, no bias: row i is mode i's learned parameter set.
    pub final_w: Tensor,
    pub head: HeadSpec,
    pub gumbel: GumbelConfig,
}

/// Spreads K reference points over a range at stratum midpoints.
pub fn stratified_midpoints(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * (2 * i + 1) as f64 / (2 * k) as f64).collect()
}

pub const GAIN_INIT: f64 = 0.1;

pub fn init_model<R: Rng + ?Sized>(
    trunk_cfg: &TrunkConfig,
    head: &HeadSpec,
    gumbel: &GumbelConfig,
    rng: &mut R,
    mu_init_range: &[(f64, f64)],
) -> Result<SdnModel> {
    head.validate()?;
    gumbel.validate()?;
    if gumbel.k != head.k {
        return Err(Error::Config(format!("gumbel k {} vs head k {}", gumbel.k, head.k)));
    }
    let trunk = Mlp::init(trunk_cfg, rng)?;
    let logit = Layer::xavier(trunk_cfg.out_dim(), head.k, rng);
    let p = head.learned_width();
    let mut w = vec![0.0; head.k * p];
    for b in &head.blocks {
        let Some(o) = head.offset(b.kind) else { continue };
        match b.kind {
            BlockKind::Kp | BlockKind::Ki | BlockKind::Kd => {
                for i in 0..head.k {
                    w[i * p + o..i * p + o + b.dim].fill(GAIN_INIT);
                }
            }
            BlockKind::Mu => {
                if mu_init_range.len() != b.dim {
                    return Err(Error::Config(format!("mu_init_range has {} dims, reference has {}", mu_init_range.len(), b.dim)));
                }
                for (j, &(lo, hi)) in mu_init_range.iter().enumerate() {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(Error::Config(format!("bad mu_init_range [{lo}, {hi}]")));
                    }
                    for (i, m) in stratified_midpoints(lo, hi, head.k).into_iter().enumerate() {
                        w[i * p + o + j] = m;
                    }
                }
            }
            BlockKind::LogVar => {}
        }
    }
    Ok(SdnModel { trunk, logit, final_w: Tensor::matrix(head.k, p, w)?, head: head.clone(), gumbel: gumbel.clone() })
}

impl SdnModel {
    pub fn k(&self) -> usize {
        self.head.k
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h = self.trunk.apply(z)?;
        Ok(self.logit.apply(&h))
    }

    /// Noise-free argmax mode for one observation.
    pub fn mode(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(z)?))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.final_w.row(i)
    }

    /// Per-sample forward. Train mode draws Gumbel noise; eval mode is noise-free hard argmax.
    pub fn forward<R: Rng + ?Sized>(&self, z: &Tensor, tau: f64, rng: &mut R, mode: ForwardMode) -> Result<Vec<SdnOutput>> {
        let k = self.k();
        let p = self.head.learned_width();
        let mut out = Vec::with_capacity(z.outer());
        for r in 0..z.outer() {
            let logits = self.logits(z.row(r))?;
            let switch = match mode {
                ForwardMode::Train => {
                    let g = sample_gumbel(k, rng);
                    gumbel_softmax_with_noise(&logits, &g, tau, self.gumbel.straight_through)?
                }
                ForwardMode::Eval => {
                    let i = argmax(&logits);
                    SwitchSample { y: one_hot(i, k), g: vec![0.0; k], tau }
                }
            };
            let mut row = vec![0.0; p];
            let i_hard = argmax(&switch.y);
            if mode == ForwardMode::Eval {
                row.copy_from_slice(self.row(i_hard));
            } else {
                for (i, &yi) in switch.y.iter().enumerate() {
                    for (o, &wv) in row.iter_mut().zip(self.row(i)) {
                        *o += yi * wv;
                    }
                }
            }
            out.push(SdnOutput { params: self.head.decode(&row, i_hard), switch, logits });
        }
        Ok(out)
    }

    /// The identified hybrid controller: one decoded parameter set per mode.
    pub fn extract_hybrid_system(&self) -> Vec<PidParams> {
        (0..self.k()).map(|i| self.head.decode(self.row(i), i)).collect()
    }

    /// Reorders modes: new mode `i` is old mode `perm[i]`.
    pub fn permute_modes(&mut self, perm: &[usize]) {
        let k = self.k();
        let p = self.head.learned_width();
        let rows = self.final_w.to_rows();
        let mut w = Vec::with_capacity(k * p);
        for &j in perm {
            w.extend_from_slice(&rows[j]);
        }
        self.final_w = Tensor::matrix(k, p, w).unwrap();
        let n_in = self.logit.in_dim();
        let old = self.logit.w.data().to_vec();
        let lw = self.logit.w.data_mut();
        for r in 0..n_in {
            for (i, &j) in perm.iter().enumerate() {
                lw[r * k + i] = old[r * k + j];
            }
        }
        let ob = self.logit.b.data().to_vec();
        for (i, &j) in perm.iter().enumerate() {
            self.logit.b.data_mut()[i] = ob[j];
        }
    }

    /// Graph forward: returns (switch y, params yᵀW, logits). `noise` enables the training path.
    pub fn graph(&self, g: &mut Graph, vars: &[Var], z: Var, noise: Option<&Tensor>, tau: f64) -> Result<(Var, Var, Var)> {
        let nt = 2 * self.trunk.layers.len();
        let h = self.trunk.graph(g, z, &vars[..nt])?;
        let logits = self.logit.graph(g, h, vars[nt], vars[nt + 1])?;
        let y = match noise {
            Some(n) => gumbel_softmax_graph(g, logits, n, tau, self.gumbel.straight_through)?,
            None => {
                let lv = g.value(logits);
                let k = lv.last_dim();
                let mut oh = Vec::with_capacity(lv.numel());
                for r in 0..lv.outer() {
                    oh.extend(one_hot(argmax(lv.row(r)), k));
                }
                g.constant(Tensor::new(lv.shape().to_vec(), oh)?)
            }
        };
        let params = g.matmul(y, vars[nt + 2])?;
        Ok((y, params, logits))
    }
}

/// Per-sample MDN output: mixture weights and decoded component parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnOutput {
    pub weights: Vec<f64>,
    pub components: Vec<PidParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdnModel {
    pub trunk: Mlp,
    pub logit: Layer,
    /// Trunk features to K concatenated learned parameter rows.
    pub head_layer: Layer,
    pub head: HeadSpec,
}

impl MdnModel {
    pub fn init<R: Rng + ?Sized>(trunk_cfg: &TrunkConfig, head: &HeadSpec, rng: &mut R) -> Result<Self> {
        head.validate()?;
        let trunk = Mlp::init(trunk_cfg, rng)?;
        let logit = Layer::xavier(trunk_cfg.out_dim(), head.k, rng);
        let head_layer = Layer::xavier(trunk_cfg.out_dim(), head.k * head.learned_width(), rng);
        Ok(MdnModel { trunk, logit, head_layer, head: head.clone() })
    }

    pub fn k(&self) -> usize {
        self.head.k
    }

    pub fn forward_one(&self, z: &[f64]) -> Result<MdnOutput> {
        let h = self.trunk.apply(z)?;
        let mut weights = self.logit.apply(&h);
        crate::diffcore::softmax_in_place(&mut weights);
        let raw = self.head_layer.apply(&h);
        let p = self.head.learned_width();
        let components = (0..self.k()).map(|i| self.head.decode(&raw[i * p..(i + 1) * p], i)).collect();
        Ok(MdnOutput { weights, components })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Vec<MdnOutput>> {
        (0..z.outer()).map(|r| self.forward_one(z.row(r))).collect()
    }

    /// Graph forward: returns (log mixture weights `[B, K]`, per-component `[B, P]` params).
    pub fn graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<(Var, Vec<Var>)> {
        let nt = 2 * self.trunk.layers.len();
        let h = self.trunk.graph(g, z, &vars[..nt])?;
        let logits = self.logit.graph(g, h, vars[nt], vars[nt + 1])?;
        let lse = g.logsumexp_last(logits);
        let log_w = g.sub(logits, lse)?;
        let raw = self.head_layer.graph(g, h, vars[nt + 2], vars[nt + 3])?;
        let p = self.head.learned_width();
        let comps = (0..self.k()).map(|i| g.slice_last(raw, i * p, p)).collect::<Result<Vec<_>>>()?;
        Ok((log_w, comps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorModel {
    pub trunk: Mlp,
    pub head_layer: Layer,
    pub head: HeadSpec,
}

impl RegressorModel {
    pub fn init<R: Rng + ?Sized>(trunk_cfg: &TrunkConfig, head: &HeadSpec, rng: &mut R) -> Result<Self> {
        head.validate()?;
        let trunk = Mlp::init(trunk_cfg, rng)?;
        let head_layer = Layer::xavier(trunk_cfg.out_dim(), head.learned_width(), rng);
        Ok(RegressorModel { trunk, head_layer, head: head.clone() })
    }

    pub fn forward_one(&self, z: &[f64]) -> Result<PidParams> {
        let h = self.trunk.apply(z)?;
        Ok(self.head.decode(&self.head_layer.apply(&h), 0))
    }

    pub fn graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        let nt = 2 * self.trunk.layers.len();
        let h = self.trunk.graph(g, z, &vars[..nt])?;
        self.head_layer.graph(g, h, vars[nt], vars[nt + 1])
    }
}

/// Any of the three trainable model families.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Sdn(SdnModel),
    Mdn(MdnModel),
    Regressor(RegressorModel),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sdn,
    Mdn,
    Regressor,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdn" => Ok(ModelKind::Sdn),
            "mdn" => Ok(ModelKind::Mdn),
            "regressor" | "fc" => Ok(ModelKind::Regressor),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Sdn => "sdn",
            ModelKind::Mdn => "mdn",
            ModelKind::Regressor => "regressor",
        })
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Sdn(_) => ModelKind::Sdn,
            Model::Mdn(_) => ModelKind::Mdn,
            Model::Regressor(_) => ModelKind::Regressor,
        }
    }

    pub fn head(&self) -> &HeadSpec {
        match self {
            Model::Sdn(m) => &m.head,
            Model::Mdn(m) => &m.head,
            Model::Regressor(m) => &m.head,
        }
    }

    pub fn trunk(&self) -> &Mlp {
        match self {
            Model::Sdn(m) => &m.trunk,
            Model::Mdn(m) => &m.trunk,
            Model::Regressor(m) => &m.trunk,
        }
    }

    /// Parameter tensors in graph-registration order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let (names, tensors): (Vec<String>, Vec<&Tensor>) = match self {
            Model::Sdn(m) => {
                let mut n = m.trunk.names("trunk");
                n.extend(["logit.w".into(), "logit.b".into(), "final_w".into()]);
                let mut t = m.trunk.tensors();
                t.extend([&m.logit.w, &m.logit.b, &m.final_w]);
                (n, t)
            }
            Model::Mdn(m) => {
                let mut n = m.trunk.names("trunk");
                n.extend(["logit.w".into(), "logit.b".into(), "head.w".into(), "head.b".into()]);
                let mut t = m.trunk.tensors();
                t.extend([&m.logit.w, &m.logit.b, &m.head_layer.w, &m.head_layer.b]);
                (n, t)
            }
            Model::Regressor(m) => {
                let mut n = m.trunk.names("trunk");
                n.extend(["head.w".into(), "head.b".into()]);
                let mut t = m.trunk.tensors();
                t.extend([&m.head_layer.w, &m.head_layer.b]);
                (n, t)
            }
        };
        names.into_iter().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Sdn(m) => {
                let mut t = m.trunk.tensors_mut();
                t.extend([&mut m.logit.w, &mut m.logit.b, &mut m.final_w]);
                t
            }
            Model::Mdn(m) => {
                let mut t = m.trunk.tensors_mut();
                t.extend([&mut m.logit.w, &mut m.logit.b, &mut m.head_layer.w, &mut m.head_layer.b]);
                t
            }
            Model::Regressor(m) => {
                let mut t = m.trunk.tensors_mut();
                t.extend([&mut m.head_layer.w, &mut m.head_layer.b]);
                t
            }
        }
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trunk() -> TrunkConfig {
        TrunkConfig { input_dim: 2, hidden: vec![5, 4], activation: Activation::Tanh }
    }

    fn mu_head(k: usize) -> HeadSpec {
        HeadSpec::reference_only(k, 1, -1.0)
    }

    #[test]
    fn stratified_mu_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = init_model(&trunk_cfg1(), &mu_head(3), &GumbelConfig::new(3), &mut rng, &[(0.0, 1.0)]).unwrap();
        let o = m.head.offset(BlockKind::Mu).unwrap();
        let mus: Vec<f64> = (0..3).map(|i| m.row(i)[o]).collect();
        assert_eq!(mus, vec![1.0 / 6.0, 3.0 / 6.0, 5.0 / 6.0]);
    }

    fn trunk_cfg1() -> TrunkConfig {
        TrunkConfig { input_dim: 1, hidden: vec![4], activation: Activation::Tanh }
    }

    #[test]
    fn degenerate_mu_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = init_model(&trunk_cfg1(), &mu_head(4), &GumbelConfig::new(4), &mut rng, &[(0.25, 0.25)]).unwrap();
        let o = m.head.offset(BlockKind::Mu).unwrap();
        assert!((0..4).all(|i| m.row(i)[o] == 0.25));
    }

    #[test]
    fn same_seed_same_model() {
        let h = HeadSpec::gains_only(3, 2);
        let a = init_model(&trunk(), &h, &GumbelConfig::new(3), &mut ChaCha8Rng::seed_from_u64(5), &[]).unwrap();
        let b = init_model(&trunk(), &h, &GumbelConfig::new(3), &mut ChaCha8Rng::seed_from_u64(5), &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_model(&trunk_cfg1(), &mu_head(3), &GumbelConfig::new(2), &mut rng, &[(0.0, 1.0)]).is_err());
        assert!(init_model(&trunk_cfg1(), &mu_head(3), &GumbelConfig::new(3), &mut rng, &[(1.0, 0.0)]).is_err());
        assert!(init_model(&trunk_cfg1(), &mu_head(3), &GumbelConfig::new(3), &mut rng, &[]).is_err());
    }

    #[test]
    fn head_validation() {
        let mut h = HeadSpec::gains_only(3, 2);
        assert!(h.validate().is_ok());
        h.blocks[0].learned = false;
        assert!(h.validate().is_err());
    }

    #[test]
    fn eval_output_is_row_of_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = HeadSpec::gains_only(3, 2);
        let m = init_model(&trunk(), &h, &GumbelConfig::new(3), &mut rng, &[]).unwrap();
        let z = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let out = m.forward(&z, 1.0, &mut rng, ForwardMode::Eval).unwrap();
        let sys = m.extract_hybrid_system();
        for o in &out {
            let i = argmax(&o.switch.y);
            assert_eq!(o.params.kp, sys[i].kp);
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn large_tau_zero_noise_is_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = init_model(&trunk(), &HeadSpec::gains_only(3, 2), &GumbelConfig::new(3), &mut rng, &[]).unwrap();
        m.final_w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![-4.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let vars = Model::Sdn(m.clone()).register(&mut g);
        let z = g.constant(Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap());
        let (_, p, _) = m.graph(&mut g, &vars, z, Some(&Tensor::zeros(&[1, 3])), 1e9).unwrap();
        let v = g.value(p).data();
        assert!((v[0] - 0.0).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn mdn_weights_simplex_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = MdnModel::init(&trunk(), &HeadSpec::gains_only(3, 2), &mut rng).unwrap();
        let o = m.forward_one(&[0.4, -0.2]).unwrap();
        assert!((o.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        m.logit.w = Tensor::zeros(m.logit.w.shape());
        let o = m.forward_one(&[0.4, -0.2]).unwrap();
        assert!(o.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let m1 = MdnModel::init(&trunk(), &HeadSpec::gains_only(1, 2), &mut rng).unwrap();
        assert_eq!(m1.forward_one(&[0.4, -0.2]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn mode_permutation_relabels_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = init_model(&trunk(), &HeadSpec::gains_only(3, 2), &GumbelConfig::new(3), &mut rng, &[]).unwrap();
        let mut pm = m.clone();
        let perm = [2, 0, 1];
        pm.permute_modes(&perm);
        for z in [[0.1, 0.9], [-2.0, 0.3], [1.5, -1.5]] {
            let a = m.mode(&z).unwrap();
            let b = pm.mode(&z).unwrap();
            assert_eq!(perm[b], a);
            assert_eq!(m.row(a), pm.row(b));
        }
    }
}
