//! Dense f64 tensors, a define-by-run reverse-mode tape, gradient checking and Adam.
//!
//! Every op works on row-major data. Last-dim ops treat a tensor of any rank as
//! `[outer, last]`. Binary elementwise ops broadcast their *second* operand when it
//! is a row vector, a column vector or a single element.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err("tensor", format!("zero extent in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return shape_err("from_rows", "ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of last-dim slices.
    pub fn outer(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.outer()).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Relu,
    Exp,
    Log,
    SoftmaxLast,
    LogSumExpLast,
    Sum,
    Mean,
    SumLast,
    Slice,
    Concat,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    One,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var, f64),
    SoftmaxLast(Var),
    LogSumExpLast(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Slice(Var, usize, usize),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape. Creation order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when no path reaches it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape == b.shape {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::One);
    }
    let c = a.last_dim();
    let row_like = b.numel() == c && (b.shape.len() == 1 || b.outer() == 1);
    if row_like {
        return Ok(Bcast::Row);
    }
    if a.shape.len() == 2 && b.shape.len() == 2 && b.shape[1] == 1 && b.shape[0] == a.shape[0] {
        return Ok(Bcast::Col);
    }
    shape_err(op, format!("cannot broadcast {:?} onto {:?}", b.shape, a.shape))
}

#[inline]
fn bidx(bc: Bcast, i: usize, cols: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::One => 0,
    }
}

fn out_last_reduced(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    if s.len() == 1 {
        vec![1]
    } else {
        *s.last_mut().unwrap() = 1;
        s
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Adds a leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Generic dispatch used by property tests.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() < n {
                return shape_err("apply", format!("{kind:?} needs {n} inputs"));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Scale => {
                need(1)?;
                Ok(self.scale(inputs[0], 0.7))
            }
            OpKind::Tanh => {
                need(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Relu => {
                need(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Exp => {
                need(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                need(1)?;
                self.log(inputs[0])
            }
            OpKind::SoftmaxLast => {
                need(1)?;
                Ok(self.softmax_last(inputs[0]))
            }
            OpKind::LogSumExpLast => {
                need(1)?;
                Ok(self.logsumexp_last(inputs[0]))
            }
            OpKind::Sum => {
                need(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                need(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::SumLast => {
                need(1)?;
                Ok(self.sum_last(inputs[0]))
            }
            OpKind::Slice => {
                need(1)?;
                let c = self.value(inputs[0]).last_dim();
                self.slice_last(inputs[0], 0, c.div_ceil(2))
            }
            OpKind::Concat => {
                need(1)?;
                self.concat_last(inputs)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast(name, ta, tb)?;
        let c = ta.last_dim();
        let data = ta.data.iter().enumerate().map(|(i, &x)| f(x, tb.data[bidx(bc, i, c)])).collect();
        Ok((Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None }, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let t = Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None };
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain { op: "exp", detail: "non-finite input".into() });
        }
        Ok(self.unary(a, Op::Exp(a), f64::exp))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Domain { op: "log", detail: format!("input {x}") });
        }
        Ok(self.unary(a, Op::Log(a, 0.0), f64::ln))
    }

    /// Natural log of `max(x, floor)`. Clamped entries get zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::Log(a, floor), move |x| x.max(floor).ln())
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None };
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxLast(a), ng)
    }

    /// Log-sum-exp over the last dim; the last extent becomes 1.
    pub fn logsumexp_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.last_dim();
        let data = ta.data.chunks(c).map(logsumexp).collect();
        let t = Tensor { shape: out_last_reduced(&ta.shape), data, requires_grad: false, grad: None };
        let ng = self.ng(&[a]);
        self.push(t, Op::LogSumExpLast(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum over the last dim; the last extent becomes 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.last_dim();
        let data = ta.data.chunks(c).map(|r| r.iter().sum()).collect();
        let t = Tensor { shape: out_last_reduced(&ta.shape), data, requires_grad: false, grad: None };
        let ng = self.ng(&[a]);
        self.push(t, Op::SumLast(a), ng)
    }

    /// Columns `start..start+len` of the last dim.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        if len == 0 || start + len > c {
            return shape_err("slice", format!("[{start}, {}) out of last dim {c}", start + len));
        }
        let data = ta.data.chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = len;
        let t = Tensor { shape, data, requires_grad: false, grad: None };
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Slice(a, start, len), ng))
    }

    /// Concatenates along the last dim; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let lead = self.value(parts[0]).shape[..self.value(parts[0]).shape.len() - 1].to_vec();
        let outer = self.value(parts[0]).outer();
        let mut total = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if s[..s.len() - 1] != lead[..] {
                return shape_err("concat", format!("{:?} vs leading {:?}", s, lead));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor { shape, data, requires_grad: false, grad: None };
        let ng = self.ng(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", lt.shape));
        }
        if !lt.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.data[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let n = node.value.numel();
                let g = grads[i].get_or_insert_with(|| vec![0.0; n]);
                node.value.grad = Some(g.clone());
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(grads, a, &|ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, b, &|gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let c = y.last_dim();
                acc(grads, a, &|ga| ga.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv));
                acc(grads, b, &|gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[bidx(bc, i, c)] += sign * gv;
                    }
                });
            }
            &Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let c = y.last_dim();
                acc(grads, a, &|ga| {
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv * tb.data[bidx(bc, i, c)];
                    }
                });
                acc(grads, b, &|gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[bidx(bc, i, c)] += gv * ta.data[i];
                    }
                });
            }
            &Op::Scale(a, s) => acc(grads, a, &|ga| ga.iter_mut().zip(g).for_each(|(o, &gv)| *o += s * gv)),
            &Op::Tanh(a) => acc(grads, a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - y.data[i] * y.data[i]);
                }
            }),
            &Op::Relu(a) => {
                let ta = self.value(a);
                acc(grads, a, &|ga| {
                    for i in 0..ga.len() {
                        if ta.data[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            &Op::Exp(a) => acc(grads, a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y.data[i];
                }
            }),
            &Op::Log(a, floor) => {
                let ta = self.value(a);
                acc(grads, a, &|ga| {
                    for i in 0..ga.len() {
                        let x = ta.data[i];
                        if x > floor {
                            ga[i] += g[i] / x;
                        }
                    }
                })
            }
            &Op::SoftmaxLast(a) => {
                let c = y.last_dim();
                acc(grads, a, &|ga| {
                    for ((gr, yr), gar) in g.chunks(c).zip(y.data.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSumExpLast(a) => {
                let ta = self.value(a);
                let c = ta.last_dim();
                acc(grads, a, &|ga| {
                    for (r, (xr, gar)) in ta.data.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                        for j in 0..c {
                            gar[j] += g[r] * (xr[j] - y.data[r]).exp();
                        }
                    }
                })
            }
            &Op::Sum(a) => acc(grads, a, &|ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(a) => acc(grads, a, &|ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s)
            }),
            &Op::SumLast(a) => {
                let c = self.value(a).last_dim();
                acc(grads, a, &|ga| {
                    for (r, gar) in ga.chunks_mut(c).enumerate() {
                        gar.iter_mut().for_each(|o| *o += g[r]);
                    }
                })
            }
            &Op::Slice(a, start, len) => {
                let c = self.value(a).last_dim();
                acc(grads, a, &|ga| {
                    for (gar, gr) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        for j in 0..len {
                            gar[start + j] += gr[j];
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let total = y.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    acc(grads, p, &|gp| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            for j in 0..w {
                                gpr[j] += gr[off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Max relative error between reverse-mode and central-difference gradients.
///
/// `f` builds the scalar objective on a fresh graph from leaf handles to `params`.
/// The per-coordinate error is `|a - c| / max(1, |a|, |c|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("grad_check step h = {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective = {v} at a probe point")));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[pi], p.numel());
        for j in 0..p.numel() {
            let x0 = p.data[j];
            probe[pi].data[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[pi].data[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[pi].data[j] = x0;
            let central = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let err = (a - central).abs() / 1f64.max(a.abs()).max(central.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.learning_rate > 0.0 && self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0 && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment buffers for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub hyper: AdamHyper,
    /// Per-block learning rate; defaults to `hyper.learning_rate`.
    pub block_lr: Vec<f64>,
    pub names: Vec<String>,
}

impl AdamState {
    pub fn new(blocks: &[(String, usize)], hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(AdamState {
            step: 0,
            m: blocks.iter().map(|(_, n)| vec![0.0; *n]).collect(),
            v: blocks.iter().map(|(_, n)| vec![0.0; *n]).collect(),
            block_lr: vec![hyper.learning_rate; blocks.len()],
            names: blocks.iter().map(|(s, _)| s.clone()).collect(),
            hyper,
        })
    }

    pub fn param_count(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }
}

/// One bias-corrected Adam update over every block.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return shape_err("adam_step", format!("{} blocks, {} grads, state has {}", params.len(), grads.len(), state.m.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != p.len() {
            return shape_err("adam_step", format!("block {} length mismatch", state.names[i]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter block {}", state.names[i])));
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, epsilon, .. } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = state.block_lr[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax_last(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn logsumexp_of_zero_and_ln3() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = g.logsumexp_last(a);
        assert_abs_diff_eq!(g.value(s).item(), 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(s).item(), 1.386294, epsilon = 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sum(w);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(w).unwrap(), &[1.0; 6]);
        assert_eq!(g.value(w).grad.as_deref().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_mean_square() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, -2.0]));
        let sq = g.mul(w, w).unwrap();
        let l = g.mean(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(w).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let a = g.sum(w);
        let b = g.sum(w);
        let l = g.add(a, b).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(w).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn backward_rejects_vector_and_nan() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(w).is_err());
        let n = g.param(Tensor::scalar(f64::NAN));
        assert!(matches!(g.backward(n), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let u = g.param(Tensor::vector(vec![1.0]));
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert_eq!(g.value(u).grad.as_deref().unwrap(), &[0.0]);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = vec![Tensor::vector(vec![0.3, -1.2, 2.0])];
        let e = grad_check(
            |g, v| {
                let s = g.mul(v[0], v[0])?;
                Ok(g.sum(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
        let e = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &p, 1e-5).unwrap();
        assert!(e < 1e-10);
    }

    #[test]
    fn grad_check_rejects_non_finite_probe() {
        let p = vec![Tensor::vector(vec![1e-6])];
        let r = grad_check(
            |g, v| {
                let l = g.log_clamped(v[0], 0.0);
                Ok(g.sum(l))
            },
            &p,
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut st = AdamState::new(&[("w".into(), 2)], AdamHyper::default()).unwrap();
        let mut w = vec![1.0, 2.0];
        adam_step(&mut [&mut w], &[&[0.0, 0.0]], &mut st).unwrap();
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut st = AdamState::new(&[("w".into(), 3)], AdamHyper::default()).unwrap();
        let mut w = vec![0.0; 3];
        adam_step(&mut [&mut w], &[&[0.5, -3.0, 1e-2]], &mut st).unwrap();
        // m̂/√v̂ = g/|g| exactly; only epsilon perturbs the magnitude.
        for (x, s) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert_abs_diff_eq!(*x, s * 1e-3, epsilon = 1e-8);
        }
    }

    #[test]
    fn adam_moves_monotonically_against_gradient() {
        let mut st = AdamState::new(&[("w".into(), 1)], AdamHyper::default()).unwrap();
        let mut w = vec![0.0];
        adam_step(&mut [&mut w], &[&[2.0]], &mut st).unwrap();
        let w1 = w[0];
        adam_step(&mut [&mut w], &[&[2.0]], &mut st).unwrap();
        assert!(w1 < 0.0 && w[0] < w1);
    }

    #[test]
    fn adam_names_bad_block() {
        let mut st = AdamState::new(&[("trunk.0.w".into(), 1), ("final_w".into(), 1)], AdamHyper::default()).unwrap();
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        let e = adam_step(&mut [&mut a, &mut b], &[&[1.0], &[f64::INFINITY]], &mut st).unwrap_err();
        assert!(e.to_string().contains("final_w"));
    }

    #[test]
    fn adam_rejects_bad_hyper() {
        let h = AdamHyper { beta1: 1.0, ..Default::default() };
        assert!(AdamState::new(&[], h).is_err());
    }
}
