use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    Logistic,
    Softmax,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Vec<Var>),
    Dot(Var, Var),
    Ln(Var),
    MatVec { w: Var, x: Var },
    Conv { input: Var, filters: Var, bias: Var },
    Relu(Var),
    Tanh(Var),
    Logistic { x: Var, k: f64 },
    Softmax(Var),
    Slice { src: Var, start: usize },
    Concat(Vec<Var>),
    StackHeight(Vec<Var>),
    Reshape(Var),
    Cosine(Var, Var),
    PairNll { phis: Var, targets: Vec<f64>, k: f64 },
    SoftmaxCe { logits: Var, target: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations, in execution (hence topological) order.
///
/// Parameters may be borrowed rather than copied, so a tape can be built
/// against immutable weights shared across threads. A tape itself is meant to
/// be driven from one thread at a time.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Weight handles for one LSTM layer. Gate rows are laid out as
/// `[input; forget; candidate; output]`, each `hidden` rows tall.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowed from a weight set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor { shape, data }, op, needs)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data }, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("mean", "no operands"))?;
        let mut acc = vec![0.0; self.data(first).len()];
        for &p in parts {
            self.same_shape("mean", first, p)?;
            for (a, v) in acc.iter_mut().zip(self.data(p)) {
                *a += v;
            }
        }
        let n = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let shape = self.shape(first).to_vec();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { shape, data: acc }, Op::Mean(parts.to_vec()), needs))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(a).len() != self.data(b).len() {
            return Err(Error::dim(
                "dot",
                format!("lengths {} and {}", self.data(a).len(), self.data(b).len()),
            ));
        }
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), needs))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("ln of a non-positive value".into()));
        }
        Ok(self.map(x, Op::Ln(x), f64::ln))
    }

    /// `w · x` for `w: [m × n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::dim("matvec", format!("weight must be 2-D, got {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.data(x).len() != n {
            return Err(Error::dim(
                "matvec",
                format!("inner axis: weight has {n} columns, input has {}", self.data(x).len()),
            ));
        }
        let wd = self.data(w);
        let xd = self.data(x);
        let out: Vec<f64> = wd
            .chunks_exact(n)
            .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        debug_assert_eq!(out.len(), m);
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec { w, x }, needs))
    }

    /// Fully connected layer `w · x + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        if self.data(b).len() != self.data(y).len() {
            return Err(Error::dim(
                "dense",
                format!("bias length {} vs output {}", self.data(b).len(), self.data(y).len()),
            ));
        }
        let b = if self.shape(b) == self.shape(y) {
            b
        } else {
            self.reshape(b, &[self.data(y).len()])?
        };
        self.add(y, b)
    }

    /// Valid, stride-1 cross-correlation.
    ///
    /// `input: [cin × h × w]`, `filters: [cout × cin × fh × fw]`, `bias: [cout]`
    /// produce `[cout × (h − fh + 1) × (w − fw + 1)]`.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let fs = self.shape(filters).to_vec();
        if is.len() != 3 {
            return Err(Error::dim("conv1d", format!("input must be 3-D, got {is:?}")));
        }
        if fs.len() != 4 {
            return Err(Error::dim("conv1d", format!("filters must be 4-D, got {fs:?}")));
        }
        let (cin, h, w) = (is[0], is[1], is[2]);
        let (cout, fcin, fh, fw) = (fs[0], fs[1], fs[2], fs[3]);
        if fcin != cin {
            return Err(Error::dim(
                "conv1d",
                format!("channel axis: filters expect {fcin}, input has {cin}"),
            ));
        }
        if fh > h {
            return Err(Error::dim("conv1d", format!("height axis: filter {fh} > input {h}")));
        }
        if fw > w {
            return Err(Error::dim("conv1d", format!("width axis: filter {fw} > input {w}")));
        }
        if self.data(bias).len() != cout {
            return Err(Error::dim(
                "conv1d",
                format!("bias axis: expected {cout}, got {}", self.data(bias).len()),
            ));
        }
        let (oh, ow) = (h - fh + 1, w - fw + 1);
        let k = cin * fh * fw;
        let patches = im2col(self.data(input), cin, h, w, fh, fw);
        let f = self.data(filters);
        let b = self.data(bias);
        let mut out = vec![0.0; cout * oh * ow];
        for (o, out_o) in out.chunks_exact_mut(oh * ow).enumerate() {
            let f_o = &f[o * k..(o + 1) * k];
            for (v, patch) in out_o.iter_mut().zip(patches.chunks_exact(k)) {
                *v = b[o] + dot(f_o, patch);
            }
        }
        let needs = self.needs(input) || self.needs(filters) || self.needs(bias);
        Ok(self.push(
            Tensor {
                shape: vec![cout, oh, ow],
                data: out,
            },
            Op::Conv { input, filters, bias },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// Logistic sigmoid with steepness `k`: `1 / (1 + e^{-k x})`.
    pub fn logistic_k(&mut self, x: Var, k: f64) -> Var {
        self.map(x, Op::Logistic { x, k }, |v| sigmoid(k * v))
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.logistic_k(x, 1.0)
    }

    /// Softmax over the final axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let last = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("softmax", "empty shape"))?;
        let mut out = self.data(x).to_vec();
        for group in out.chunks_exact_mut(last) {
            let m = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in group.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            group.iter_mut().for_each(|v| *v /= total);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x), needs))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var> {
        Ok(match kind {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Logistic => self.logistic(x),
            Activation::Softmax => self.softmax(x)?,
        })
    }

    /// Contiguous flat range `[start, start + len)` as a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.data(src).len();
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} out of bounds for {n}", start + len),
            ));
        }
        let data = self.data(src)[start..start + len].to_vec();
        let needs = self.needs(src);
        Ok(self.push(Tensor::vector(data), Op::Slice { src, start }, needs))
    }

    /// Flat concatenation into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no operands"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), needs))
    }

    /// Stacks `[c × h_i × w]` tensors along the height axis, per channel.
    pub fn stack_height(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("stack_height", "no operands"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() != 3 {
            return Err(Error::dim("stack_height", format!("operands must be 3-D, got {fs:?}")));
        }
        let (c, w) = (fs[0], fs[2]);
        let mut total_h = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != c || s[2] != w {
                return Err(Error::dim(
                    "stack_height",
                    format!("operand {s:?} incompatible with {fs:?}"),
                ));
            }
            total_h += s[1];
        }
        let mut data = Vec::with_capacity(c * total_h * w);
        for ch in 0..c {
            for &p in parts {
                let h = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[ch * h * w..(ch + 1) * h * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor {
                shape: vec![c, total_h, w],
                data,
            },
            Op::StackHeight(parts.to_vec()),
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Cosine similarity of two vectors; zero-norm operands are rejected.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(a).len() != self.data(b).len() {
            return Err(Error::dim(
                "cosine",
                format!("lengths {} and {}", self.data(a).len(), self.data(b).len()),
            ));
        }
        let phi = crate::pairwise::cosine_similarity(self.data(a), self.data(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(phi), Op::Cosine(a, b), needs))
    }

    /// Summed negative log-likelihood of same-class indicators given cosine
    /// similarities, with logits `k·Φ`.
    pub fn pair_nll(&mut self, phis: Var, targets: &[f64], k: f64) -> Result<Var> {
        if self.data(phis).len() != targets.len() {
            return Err(Error::dim(
                "pair_nll",
                format!("{} similarities vs {} targets", self.data(phis).len(), targets.len()),
            ));
        }
        let j = crate::pairwise::pairwise_loss(self.data(phis), targets, k)?;
        let needs = self.needs(phis);
        Ok(self.push(
            Tensor::scalar(j),
            Op::PairNll {
                phis,
                targets: targets.to_vec(),
                k,
            },
            needs,
        ))
    }

    /// `-log softmax(logits)[target]`, evaluated stably.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.data(logits);
        if target >= z.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("target {target} outside {} classes", z.len()),
            ));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, target }, needs))
    }

    /// One LSTM cell step. Returns `(h', c')`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
        let hid = self.data(h).len();
        if self.data(c).len() != hid {
            return Err(Error::dim(
                "lstm_step",
                format!("cell state {} vs hidden state {hid}", self.data(c).len()),
            ));
        }
        let wh = self.shape(w.w_hidden);
        if wh != [4 * hid, hid] {
            return Err(Error::dim(
                "lstm_step",
                format!("hidden weights {wh:?}, expected [{}, {hid}]", 4 * hid),
            ));
        }
        let wi = self.shape(w.w_input);
        if wi.len() != 2 || wi[0] != 4 * hid {
            return Err(Error::dim(
                "lstm_step",
                format!("input weights {wi:?}, expected [{}, in]", 4 * hid),
            ));
        }
        let zx = self.matvec(w.w_input, x)?;
        let zh = self.matvec(w.w_hidden, h)?;
        let z = self.add(zx, zh)?;
        let z = self.add(z, w.bias)?;
        let zi = self.slice(z, 0, hid)?;
        let zf = self.slice(z, hid, hid)?;
        let zg = self.slice(z, 2 * hid, hid)?;
        let zo = self.slice(z, 3 * hid, hid)?;
        let gi = self.logistic(zi);
        let gf = self.logistic(zf);
        let gg = self.tanh(zg);
        let go = self.logistic(zo);
        let keep = self.mul(gf, c)?;
        let write = self.mul(gi, gg)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next);
        let h_next = self.mul(go, squashed)?;
        Ok((h_next, c_next))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(vec![(loss, vec![1.0])])
    }

    /// Reverse pass with explicit upstream gradients for one or more outputs.
    pub fn backward_seeded(self, seeds: Vec<(Var, Vec<f64>)>) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, g) in seeds {
            if g.len() != self.data(v).len() {
                return Err(Error::dim(
                    "backward",
                    format!("seed length {} vs value length {}", g.len(), self.data(v).len()),
                ));
            }
            accumulate(&mut grads, v, self.data(v).len(), |acc| {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
            });
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }

        let lens = self.nodes.iter().map(|nd| nd.value.numel()).collect();
        let leaf_mask: Vec<bool> = self
            .nodes
            .iter()
            .map(|nd| nd.needs_grad && matches!(nd.op, Op::Leaf))
            .collect();
        for (g, &keep) in grads.iter_mut().zip(&leaf_mask) {
            if !keep {
                *g = None;
            }
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let len = |v: Var| self.data(v).len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        accumulate(grads, v, len(v), |acc| axpy(acc, 1.0, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, len(*a), |acc| axpy(acc, 1.0, g));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, len(*b), |acc| axpy(acc, -1.0, g));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, ad.len(), |acc| {
                        for ((s, gi), bi) in acc.iter_mut().zip(g).zip(bd) {
                            *s += gi * bi;
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, bd.len(), |acc| {
                        for ((s, gi), ai) in acc.iter_mut().zip(g).zip(ad) {
                            *s += gi * ai;
                        }
                    });
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, len(*x), |acc| axpy(acc, *f, g));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, len(*x), |acc| acc.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for &p in parts {
                    if self.needs(p) {
                        accumulate(grads, p, len(p), |acc| axpy(acc, inv, g));
                    }
                }
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, ad.len(), |acc| axpy(acc, g[0], bd));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, bd.len(), |acc| axpy(acc, g[0], ad));
                }
            }
            Op::Ln(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, xd.len(), |acc| {
                    for ((s, gi), xi) in acc.iter_mut().zip(g).zip(xd) {
                        *s += gi / xi;
                    }
                });
            }
            Op::MatVec { w, x } => {
                let n = len(*x);
                let (wd, xd) = (self.data(*w), self.data(*x));
                if self.needs(*w) {
                    accumulate(grads, *w, wd.len(), |acc| {
                        for (row, gi) in acc.chunks_exact_mut(n).zip(g) {
                            axpy(row, *gi, xd);
                        }
                    });
                }
                if self.needs(*x) {
                    accumulate(grads, *x, n, |acc| {
                        for (row, gi) in wd.chunks_exact(n).zip(g) {
                            axpy(acc, *gi, row);
                        }
                    });
                }
            }
            Op::Conv { input, filters, bias } => self.conv_backward(*input, *filters, *bias, g, grads),
            Op::Relu(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, xd.len(), |acc| {
                    for ((s, gi), xi) in acc.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                accumulate(grads, *x, out.len(), |acc| {
                    for ((s, gi), y) in acc.iter_mut().zip(g).zip(out) {
                        *s += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Logistic { x, k } => {
                accumulate(grads, *x, out.len(), |acc| {
                    for ((s, gi), y) in acc.iter_mut().zip(g).zip(out) {
                        *s += gi * k * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax(x) => {
                let last = *self.shape(*x).last().unwrap_or(&1);
                accumulate(grads, *x, out.len(), |acc| {
                    for ((a, gg), y) in acc
                        .chunks_exact_mut(last)
                        .zip(g.chunks_exact(last))
                        .zip(out.chunks_exact(last))
                    {
                        let inner: f64 = gg.iter().zip(y).map(|(p, q)| p * q).sum();
                        for ((s, gi), yi) in a.iter_mut().zip(gg).zip(y) {
                            *s += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::Slice { src, start } => {
                accumulate(grads, *src, len(*src), |acc| {
                    axpy(&mut acc[*start..*start + g.len()], 1.0, g)
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let l = len(p);
                    if self.needs(p) {
                        accumulate(grads, p, l, |acc| axpy(acc, 1.0, &g[offset..offset + l]));
                    }
                    offset += l;
                }
            }
            Op::StackHeight(parts) => {
                let shape = node.value.shape();
                let (c, total_h, w) = (shape[0], shape[1], shape[2]);
                let mut row0 = 0;
                for &p in parts {
                    let h = self.shape(p)[1];
                    if self.needs(p) {
                        accumulate(grads, p, c * h * w, |acc| {
                            for ch in 0..c {
                                let src = &g[(ch * total_h + row0) * w..][..h * w];
                                axpy(&mut acc[ch * h * w..(ch + 1) * h * w], 1.0, src);
                            }
                        });
                    }
                    row0 += h;
                }
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.len(), |acc| axpy(acc, 1.0, g));
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let phi = out[0];
                if self.needs(*a) {
                    accumulate(grads, *a, ad.len(), |acc| {
                        for ((s, ai), bi) in acc.iter_mut().zip(ad).zip(bd) {
                            *s += g[0] * (bi / (na * nb) - phi * ai / (na * na));
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, bd.len(), |acc| {
                        for ((s, bi), ai) in acc.iter_mut().zip(bd).zip(ad) {
                            *s += g[0] * (ai / (na * nb) - phi * bi / (nb * nb));
                        }
                    });
                }
            }
            Op::PairNll { phis, targets, k } => {
                let pd = self.data(*phis);
                accumulate(grads, *phis, pd.len(), |acc| {
                    for ((s, phi), t) in acc.iter_mut().zip(pd).zip(targets) {
                        *s += g[0] * k * (sigmoid(k * phi) - t);
                    }
                });
            }
            Op::SoftmaxCe { logits, target } => {
                let z = self.data(*logits);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
                accumulate(grads, *logits, z.len(), |acc| {
                    for (i, (s, zi)) in acc.iter_mut().zip(z).enumerate() {
                        let p = (zi - m).exp() / total;
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *s += g[0] * (p - onehot);
                    }
                });
            }
        }
    }

    fn conv_backward(&self, input: Var, filters: Var, bias: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let is = self.shape(input);
        let fs = self.shape(filters);
        let (cin, h, w) = (is[0], is[1], is[2]);
        let (cout, fh, fw) = (fs[0], fs[2], fs[3]);
        let (oh, ow) = (h - fh + 1, w - fw + 1);
        let k = cin * fh * fw;
        let f = self.data(filters);

        if self.needs(bias) {
            accumulate(grads, bias, cout, |acc| {
                for (a, g_o) in acc.iter_mut().zip(g.chunks_exact(oh * ow)) {
                    *a += g_o.iter().sum::<f64>();
                }
            });
        }
        if self.needs(filters) {
            let patches = im2col(self.data(input), cin, h, w, fh, fw);
            accumulate(grads, filters, f.len(), |acc| {
                for (acc_o, g_o) in acc.chunks_exact_mut(k).zip(g.chunks_exact(oh * ow)) {
                    for (&gv, patch) in g_o.iter().zip(patches.chunks_exact(k)) {
                        axpy(acc_o, gv, patch);
                    }
                }
            });
        }
        if self.needs(input) {
            let mut dpatches = vec![0.0; oh * ow * k];
            for (f_o, g_o) in f.chunks_exact(k).zip(g.chunks_exact(oh * ow)) {
                for (&gv, dp) in g_o.iter().zip(dpatches.chunks_exact_mut(k)) {
                    axpy(dp, gv, f_o);
                }
            }
            accumulate(grads, input, cin * h * w, |acc| {
                col2im(&dpatches, acc, cin, h, w, fh, fw);
            });
        }
    }
}

/// Receptive fields of a valid convolution as rows of `cin · fh · fw`
/// values, one row per output position in row-major order.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, fh: usize, fw: usize) -> Vec<f64> {
    let (oh, ow) = (h - fh + 1, w - fw + 1);
    let mut out = Vec::with_capacity(oh * ow * cin * fh * fw);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..cin {
                for p in 0..fh {
                    let start = (c * h + i + p) * w + j;
                    out.extend_from_slice(&x[start..start + fw]);
                }
            }
        }
    }
    out
}

/// Adds patch-row gradients back onto the input they were gathered from.
fn col2im(patches: &[f64], dx: &mut [f64], cin: usize, h: usize, w: usize, fh: usize, fw: usize) {
    let ow = w - fw + 1;
    let k = cin * fh * fw;
    for (pos, row) in patches.chunks_exact(k).enumerate() {
        let (i, j) = (pos / ow, pos % ow);
        for (cp, seg) in row.chunks_exact(fw).enumerate() {
            let (c, p) = (cp / fh, cp % fh);
            let start = (c * h + i + p) * w + j;
            for (d, v) in dx[start..start + fw].iter_mut().zip(seg) {
                *d += v;
            }
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Gradients of every trainable leaf reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}
