use std::collections::BTreeMap;
use std::sync::Arc;

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::polyfit::CompositePolynomial;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable or buffered model parameter, by index into the owning store.
    Param(usize),
    /// Data supplied by the caller (the ciphertext side under HE).
    Input,
    /// Fixed plaintext constant such as a mask.
    Const,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Biased (divide-by-N) variance.
    Var,
    Max,
    Min,
}

/// How a polynomial activation treats inputs outside its declared domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyMode {
    /// Out-of-domain input is an error.
    Strict,
    /// Out-of-domain input is clamped to the nearest endpoint and counted.
    Clamp,
}

#[derive(Debug, Clone)]
pub enum Act {
    Relu,
    Gelu,
    Abs,
    Exp,
    Ln,
    Poly(Arc<CompositePolynomial>, PolyMode),
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Power(Var, f64),
    /// `a[m×n] + b[n]` broadcast over rows.
    AddRow(Var, Var),
    /// `a[m×n] ⊙ b[n]` broadcast over rows.
    MulRow(Var, Var),
    /// `a[m×n] + c[m×1]` broadcast over columns.
    AddCol(Var, Var),
    /// `a[m×n] ⊙ c[m×1]` broadcast over columns.
    MulCol(Var, Var),
    Reduce(Var, ReduceKind, Option<usize>),
    Act(Var, Act),
    Softmax(Var, usize),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    CrossEntropy(Var, Arc<Vec<usize>>),
    LogSumExp(Var, f64),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    /// Index into [`Graph::sites`], if a site scope was active.
    pub site: Option<usize>,
    /// Argmax/argmin index saved by max/min reductions.
    saved_index: Vec<usize>,
}

/// Reverse-mode differentiation tape. Nodes are stored in creation order,
/// which is a valid topological order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    sites: Vec<String>,
    current_site: Option<usize>,
    domain_hits: BTreeMap<String, usize>,
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn site_name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].site.map(|i| self.sites[i].as_str())
    }

    /// Labels subsequently created nodes with `site` (None clears the label).
    pub fn set_site(&mut self, site: Option<&str>) {
        self.current_site = site.map(|s| match self.sites.iter().position(|x| x == s) {
            Some(i) => i,
            None => {
                self.sites.push(s.to_string());
                self.sites.len() - 1
            }
        });
    }

    /// Count of clamped out-of-domain polynomial inputs per site.
    pub fn domain_hits(&self) -> &BTreeMap<String, usize> {
        &self.domain_hits
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_saved(op, value, Vec::new())
    }

    fn push_saved(&mut self, op: Op, value: Tensor, saved_index: Vec<usize>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            site: self.current_site,
            saved_index,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        self.push(Op::Leaf(kind), value)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Const)
    }

    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Param(id))
    }

    /// `(param id, var)` for every parameter leaf on the tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf(LeafKind::Param(p)) => Some((p, Var(i))),
            _ => None,
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b)).map_err(|_| self.shape_err("matmul", a, b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), out)
    }

    /// Elementwise `x^p`. Integer exponents use `powi`.
    pub fn power(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| pow(x, p));
        self.push(Op::Power(a, p), out)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var, by_row: bool) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).dims2()?;
        let bs = self.shape(b);
        let ok = if by_row {
            bs == [n] || bs == [1, n]
        } else {
            bs == [m] || bs == [m, 1]
        };
        if !ok {
            return Err(self.shape_err(op, a, b));
        }
        Ok((m, n))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.broadcast_check("add_row", a, b, true)?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv[i % n];
        }
        Ok(self.push(Op::AddRow(a, b), out))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.broadcast_check("mul_row", a, b, true)?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= bv[i % n];
        }
        Ok(self.push(Op::MulRow(a, b), out))
    }

    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (_, n) = self.broadcast_check("add_col", a, c, false)?;
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += cv[i / n];
        }
        Ok(self.push(Op::AddCol(a, c), out))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (_, n) = self.broadcast_check("mul_col", a, c, false)?;
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= cv[i / n];
        }
        Ok(self.push(Op::MulCol(a, c), out))
    }

    /// Reduces over `axis`, removing it; `None` reduces every element to `[1]`.
    /// Max/min route their subgradient to the first extremal element.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner, out_shape) = reduce_layout(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut saved = Vec::new();
        if matches!(kind, ReduceKind::Max | ReduceKind::Min) {
            saved = vec![0; outer * inner];
        }
        let d = x.data();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| d[o * n * inner + i * inner + j];
                let slot = o * inner + j;
                out[slot] = match kind {
                    ReduceKind::Sum => (0..n).map(at).sum(),
                    ReduceKind::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                    ReduceKind::Var => {
                        let mu = (0..n).map(at).sum::<f64>() / n as f64;
                        (0..n).map(|i| (at(i) - mu).powi(2)).sum::<f64>() / n as f64
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        let mut best = 0;
                        for i in 1..n {
                            let better = if kind == ReduceKind::Max {
                                at(i) > at(best)
                            } else {
                                at(i) < at(best)
                            };
                            if better {
                                best = i;
                            }
                        }
                        saved[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_saved(Op::Reduce(a, kind, axis), t, saved))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceKind::Sum, None).expect("non-empty tensor")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceKind::Mean, None).expect("non-empty tensor")
    }

    pub fn activation(&mut self, a: Var, act: Act) -> Result<Var> {
        let x = self.value(a);
        let out = match &act {
            Act::Relu => x.map(|v| v.max(0.0)),
            Act::Gelu => x.map(gelu),
            Act::Abs => x.map(f64::abs),
            Act::Exp => x.map(f64::exp),
            Act::Ln => x.map(f64::ln),
            Act::Poly(p, mode) => {
                let (lo, hi) = p.domain();
                let mut hits = 0;
                let mut data = Vec::with_capacity(x.len());
                for &v in x.data() {
                    if v < lo || v > hi {
                        match mode {
                            PolyMode::Strict => {
                                return Err(Error::DomainViolation {
                                    value: v,
                                    lo,
                                    hi,
                                    site: self.current_site.map(|i| self.sites[i].clone()),
                                })
                            }
                            PolyMode::Clamp => hits += 1,
                        }
                    }
                    data.push(p.eval(v.clamp(lo, hi)));
                }
                let t = Tensor::new(x.shape().to_vec(), data)?;
                if hits > 0 {
                    let key = self
                        .current_site
                        .map_or_else(|| "<unscoped>".to_string(), |i| self.sites[i].clone());
                    *self.domain_hits.entry(key).or_default() += hits;
                }
                t
            }
        };
        Ok(self.push(Op::Act(a, act), out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Act::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Act::Gelu).expect("gelu is total")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner, _) = reduce_layout(x.shape(), Some(axis))?;
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - m).exp();
                    d[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    d[idx(i)] /= s;
                }
            }
        }
        Ok(self.push(Op::Softmax(a, axis), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows(a, start, len), t))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols(a, start, len), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.value(p).dims2()?;
            if c2 != c {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.value(p).dims2()?;
            if r2 != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Mean next-token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfVocab { token: t, vocab: v });
            }
            let row = x.row(i);
            total += logsumexp(row) - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::CrossEntropy(logits, Arc::new(targets.to_vec())), out))
    }

    /// Smooth maximum `T·ln Σ exp(x/T)` over all elements.
    pub fn logsumexp_all(&mut self, a: Var, temperature: f64) -> Var {
        let scaled: Vec<f64> = self.value(a).data().iter().map(|x| x / temperature).collect();
        let out = Tensor::scalar(temperature * logsumexp(&scaled));
        self.push(Op::LogSumExp(a, temperature), out)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let (_, n) = val(*b).dims2().unwrap();
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = val(*b).transpose().unwrap();
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                let at = val(*a).transpose().unwrap();
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose().unwrap()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::Power(a, p) => {
                let d = val(*a).map(|x| p * pow(x, p - 1.0));
                accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                let n = *val(*a).shape().last().unwrap();
                let mut db = vec![0.0; n];
                for (k, x) in g.data().iter().enumerate() {
                    db[k % n] += x;
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), db).unwrap());
            }
            Op::MulRow(a, b) => {
                let n = *val(*a).shape().last().unwrap();
                let bv = val(*b).data();
                let av = val(*a).data();
                let mut da = g.clone();
                let mut db = vec![0.0; n];
                for (k, x) in da.data_mut().iter_mut().enumerate() {
                    db[k % n] += *x * av[k];
                    *x *= bv[k % n];
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), db).unwrap());
            }
            Op::AddCol(a, c) => {
                let (m, n) = val(*a).dims2().unwrap();
                let mut dc = vec![0.0; m];
                for (k, x) in g.data().iter().enumerate() {
                    dc[k / n] += x;
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *c, Tensor::new(val(*c).shape().to_vec(), dc).unwrap());
            }
            Op::MulCol(a, c) => {
                let (m, n) = val(*a).dims2().unwrap();
                let cv = val(*c).data();
                let av = val(*a).data();
                let mut da = g.clone();
                let mut dc = vec![0.0; m];
                for (k, x) in da.data_mut().iter_mut().enumerate() {
                    dc[k / n] += *x * av[k];
                    *x *= cv[k / n];
                }
                accumulate(grads, *a, da);
                accumulate(grads, *c, Tensor::new(val(*c).shape().to_vec(), dc).unwrap());
            }
            Op::Reduce(a, kind, axis) => {
                let x = val(*a);
                let (outer, n, inner, _) = reduce_layout(x.shape(), *axis).unwrap();
                let xd = x.data();
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let slot = o * inner + j;
                        let gs = g.data()[slot];
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        match kind {
                            ReduceKind::Sum => (0..n).for_each(|i| dx[idx(i)] += gs),
                            ReduceKind::Mean => (0..n).for_each(|i| dx[idx(i)] += gs / n as f64),
                            ReduceKind::Var => {
                                let mu = (0..n).map(|i| xd[idx(i)]).sum::<f64>() / n as f64;
                                for i in 0..n {
                                    dx[idx(i)] += gs * 2.0 * (xd[idx(i)] - mu) / n as f64;
                                }
                            }
                            ReduceKind::Max | ReduceKind::Min => {
                                dx[idx(node.saved_index[slot])] += gs;
                            }
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Act(a, act) => {
                let x = val(*a);
                let d = match act {
                    Act::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                    Act::Gelu => x.map(gelu_grad),
                    Act::Abs => x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }),
                    Act::Exp => node.value.clone(),
                    Act::Ln => x.map(|v| 1.0 / v),
                    Act::Poly(p, _) => {
                        let (lo, hi) = p.domain();
                        x.map(|v| if v < lo || v > hi { 0.0 } else { p.eval_with_derivative(v).1 })
                    }
                };
                accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner, _) = reduce_layout(y.shape(), Some(*axis)).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let dot: f64 = (0..n).map(|i| g.data()[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = y.data()[idx(i)] * (g.data()[idx(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SliceRows(a, start, len) => {
                let (r, c) = val(*a).dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = val(*a).dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let piece = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), piece).unwrap());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, c) = val(p).dims2().unwrap();
                    let mut piece = Vec::with_capacity(r * c);
                    for i in 0..r {
                        piece.extend_from_slice(&g.data()[i * total + col..i * total + col + c]);
                    }
                    accumulate(grads, p, Tensor::new(vec![r, c], piece).unwrap());
                    col += c;
                }
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(val(*a).shape().to_vec()).unwrap();
                accumulate(grads, *a, t);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = val(*logits);
                let (n, v) = x.dims2().unwrap();
                let scale = g.item() / n as f64;
                let mut dx = vec![0.0; n * v];
                for (i, &t) in targets.iter().enumerate() {
                    let row = x.row(i);
                    let lse = logsumexp(row);
                    for k in 0..v {
                        dx[i * v + k] = scale * (row[k] - lse).exp();
                    }
                    dx[i * v + t] -= scale;
                }
                accumulate(grads, *logits, Tensor::new(vec![n, v], dx).unwrap());
            }
            Op::LogSumExp(a, temp) => {
                let x = val(*a);
                let lse = node.value.item() / temp;
                let d = x.map(|v| g.item() * (v / temp - lse).exp());
                accumulate(grads, *a, d);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it if it did not affect the loss.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => {
            let n: usize = shape.iter().product();
            if n == 0 {
                return Err(Error::EmptyAxis);
            }
            Ok((1, n, 1, vec![1]))
        }
        Some(ax) => {
            if ax >= shape.len() {
                return Err(Error::Axis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
            let n = shape[ax];
            if n == 0 {
                return Err(Error::EmptyAxis);
            }
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != ax).map(|(_, &d)| d).collect();
            if out.is_empty() {
                out.push(1);
            }
            Ok((outer, n, inner, out))
        }
    }
}

fn pow(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
