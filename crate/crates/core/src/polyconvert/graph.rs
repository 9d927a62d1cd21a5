use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyfit::{CompositePolynomial, Stage};
use crate::tensor::{Act, Graph, LeafKind, Op, ReduceKind, Tensor, Var};

/// Operation performed by a [`PolyGraph`] node. Everything up to
/// `Reshape` is admissible under homomorphic encryption; the rest exists so
/// unconverted models can be lowered and reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input { index: usize },
    Constant,
    Add,
    Sub,
    Mult,
    AddRow,
    AddCol,
    MultRow,
    MultCol,
    Scale { c: f64 },
    AddConst { c: f64 },
    /// Ciphertext times plaintext matrix.
    Linear,
    /// Ciphertext times ciphertext matrix.
    MatMul,
    Transpose,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    Sum { axis: Option<usize> },
    Reshape { shape: Vec<usize> },

    Div,
    Pow { exponent: f64 },
    Relu,
    Gelu,
    Abs,
    Exp,
    Log,
    Softmax { axis: usize },
    Max { axis: Option<usize> },
    Min { axis: Option<usize> },
    CrossEntropy { targets: Vec<usize> },
    LogSumExp { temperature: f64 },
}

impl NodeKind {
    pub fn is_polynomial(&self) -> bool {
        !matches!(
            self,
            NodeKind::Div
                | NodeKind::Pow { .. }
                | NodeKind::Relu
                | NodeKind::Gelu
                | NodeKind::Abs
                | NodeKind::Exp
                | NodeKind::Log
                | NodeKind::Softmax { .. }
                | NodeKind::Max { .. }
                | NodeKind::Min { .. }
                | NodeKind::CrossEntropy { .. }
                | NodeKind::LogSumExp { .. }
        )
    }

    /// Multiplicative levels consumed on a ciphertext.
    pub fn level_cost(&self) -> usize {
        match self {
            NodeKind::Mult | NodeKind::MultRow | NodeKind::MultCol | NodeKind::Linear | NodeKind::MatMul => 1,
            NodeKind::Scale { c } if c.abs() != 1.0 => 1,
            _ => 0,
        }
    }

    /// Additions and multiplications perturbed by the noise model.
    pub fn is_arithmetic(&self) -> bool {
        matches!(
            self,
            NodeKind::Add
                | NodeKind::Sub
                | NodeKind::Mult
                | NodeKind::AddRow
                | NodeKind::AddCol
                | NodeKind::MultRow
                | NodeKind::MultCol
                | NodeKind::Scale { .. }
                | NodeKind::AddConst { .. }
                | NodeKind::Linear
                | NodeKind::MatMul
                | NodeKind::Sum { .. }
        )
    }

    pub fn name(&self) -> String {
        match self {
            NodeKind::Pow { exponent } if *exponent == -0.5 => "inv_sqrt".into(),
            NodeKind::Pow { exponent } if *exponent == -1.0 => "reciprocal".into(),
            NodeKind::Pow { exponent } if *exponent == 0.5 => "sqrt".into(),
            NodeKind::Pow { exponent } => format!("pow({exponent})"),
            other => {
                let json = serde_json::to_value(other).expect("node kinds serialize");
                json["op"].as_str().unwrap_or("unknown").to_string()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyNode {
    pub id: usize,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub level_cost: usize,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub site: Option<String>,
    #[serde(skip)]
    pub value: Option<Tensor>,
}

/// Arithmetic circuit over tensors with per-node level accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolyGraph {
    nodes: Vec<PolyNode>,
    outputs: Vec<usize>,
    inputs: usize,
}

impl PolyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph from explicit nodes; ids must equal positions but edges may
    /// point anywhere (cycles are reported by analyses).
    pub fn from_nodes(nodes: Vec<PolyNode>, outputs: Vec<usize>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i || n.inputs.iter().any(|&j| j >= nodes.len()) {
                return Err(Error::Config(format!("node {i} has a bad id or dangling input")));
            }
        }
        let inputs = nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Input { index } => Some(index + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        Ok(Self { nodes, outputs, inputs })
    }

    pub fn nodes(&self) -> &[PolyNode] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn input_count(&self) -> usize {
        self.inputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_outputs(&mut self, outputs: Vec<usize>) {
        self.outputs = outputs;
    }

    pub fn push(&mut self, kind: NodeKind, inputs: &[usize], shape: Vec<usize>, site: Option<String>) -> usize {
        let id = self.nodes.len();
        if let NodeKind::Input { index } = kind {
            self.inputs = self.inputs.max(index + 1);
        }
        self.nodes.push(PolyNode {
            id,
            level_cost: kind.level_cost(),
            kind,
            inputs: inputs.to_vec(),
            shape,
            site,
            value: None,
        });
        id
    }

    pub fn input(&mut self, shape: &[usize]) -> usize {
        let index = self.inputs;
        self.push(NodeKind::Input { index }, &[], shape.to_vec(), None)
    }

    pub fn constant(&mut self, value: Tensor) -> usize {
        let id = self.push(NodeKind::Constant, &[], value.shape().to_vec(), None);
        self.nodes[id].value = Some(value);
        id
    }

    /// Elementwise node with the shape of its first input.
    pub fn unary(&mut self, kind: NodeKind, a: usize) -> usize {
        let shape = self.nodes[a].shape.clone();
        let site = self.nodes[a].site.clone();
        self.push(kind, &[a], shape, site)
    }

    pub fn binary(&mut self, kind: NodeKind, a: usize, b: usize) -> usize {
        let shape = self.nodes[a].shape.clone();
        let site = self.nodes[a].site.clone();
        self.push(kind, &[a, b], shape, site)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "nodes": self.nodes, "outputs": self.outputs }))
            .expect("graph serialization cannot fail")
    }

    /// Evaluates every node; returns the output tensors.
    pub fn eval(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.eval_inner(inputs, None)
    }

    /// As [`PolyGraph::eval`], perturbing each arithmetic result elementwise
    /// by uniform noise in `[−eps, eps]`. `eps = 0` draws nothing.
    pub fn eval_noisy(&self, inputs: &[Tensor], eps: f64, rng: &mut dyn RngCore) -> Result<Vec<Tensor>> {
        if eps > 0.0 {
            self.eval_inner(inputs, Some((eps, rng)))
        } else {
            self.eval_inner(inputs, None)
        }
    }

    fn eval_inner(&self, inputs: &[Tensor], mut noise: Option<(f64, &mut dyn RngCore)>) -> Result<Vec<Tensor>> {
        if inputs.len() != self.inputs {
            return Err(Error::Config(format!(
                "graph expects {} inputs, got {}",
                self.inputs,
                inputs.len()
            )));
        }
        let order = topo_order(self)?;
        let mut g = Graph::new();
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for i in order {
            let n = &self.nodes[i];
            let x = |k: usize| vars[n.inputs[k]].expect("inputs evaluated first");
            let v = match &n.kind {
                NodeKind::Input { index } => g.input(inputs[*index].clone()),
                NodeKind::Constant => g.constant(n.value.clone().ok_or_else(|| Error::Config(format!("constant {i} has no value")))?),
                NodeKind::Add => g.add(x(0), x(1))?,
                NodeKind::Sub => g.sub(x(0), x(1))?,
                NodeKind::Mult => g.mul(x(0), x(1))?,
                NodeKind::AddRow => g.add_row(x(0), x(1))?,
                NodeKind::AddCol => g.add_col(x(0), x(1))?,
                NodeKind::MultRow => g.mul_row(x(0), x(1))?,
                NodeKind::MultCol => g.mul_col(x(0), x(1))?,
                NodeKind::Scale { c } => g.scale(x(0), *c),
                NodeKind::AddConst { c } => g.add_scalar(x(0), *c),
                NodeKind::Linear | NodeKind::MatMul => g.matmul(x(0), x(1))?,
                NodeKind::Transpose => g.transpose(x(0))?,
                NodeKind::SliceRows { start, len } => g.slice_rows(x(0), *start, *len)?,
                NodeKind::SliceCols { start, len } => g.slice_cols(x(0), *start, *len)?,
                NodeKind::ConcatRows => g.concat_rows(&n.inputs.iter().map(|&j| vars[j].expect("evaluated")).collect::<Vec<_>>())?,
                NodeKind::ConcatCols => g.concat_cols(&n.inputs.iter().map(|&j| vars[j].expect("evaluated")).collect::<Vec<_>>())?,
                NodeKind::Sum { axis } => g.reduce(x(0), ReduceKind::Sum, *axis)?,
                NodeKind::Reshape { shape } => g.reshape(x(0), shape)?,
                NodeKind::Div => {
                    let r = g.power(x(1), -1.0);
                    g.mul(x(0), r)?
                }
                NodeKind::Pow { exponent } => g.power(x(0), *exponent),
                NodeKind::Relu => g.relu(x(0)),
                NodeKind::Gelu => g.gelu(x(0)),
                NodeKind::Abs => g.activation(x(0), Act::Abs)?,
                NodeKind::Exp => g.activation(x(0), Act::Exp)?,
                NodeKind::Log => g.activation(x(0), Act::Ln)?,
                NodeKind::Softmax { axis } => g.softmax(x(0), *axis)?,
                NodeKind::Max { axis } => g.reduce(x(0), ReduceKind::Max, *axis)?,
                NodeKind::Min { axis } => g.reduce(x(0), ReduceKind::Min, *axis)?,
                NodeKind::CrossEntropy { targets } => g.cross_entropy(x(0), targets)?,
                NodeKind::LogSumExp { temperature } => g.logsumexp_all(x(0), *temperature),
            };
            let v = match noise.as_mut() {
                Some((eps, rng)) if n.kind.is_arithmetic() => {
                    let eps = *eps;
                    let clean = g.value(v);
                    let data = clean.data().iter().map(|t| t + rng.random_range(-eps..=eps)).collect();
                    let noisy = Tensor::new(clean.shape().to_vec(), data)?;
                    g.constant(noisy)
                }
                _ => v,
            };
            vars[i] = Some(v);
        }
        Ok(self
            .outputs
            .iter()
            .map(|&o| g.value(vars[o].expect("outputs evaluated")).clone())
            .collect())
    }

    /// Lowers the ancestors of `outputs` on a tape. Subgraphs that depend
    /// only on parameters and constants are folded into plaintext constants;
    /// polynomial activations expand into their arithmetic circuits.
    pub fn from_tape(tape: &Graph, outputs: &[Var]) -> Result<Self> {
        let nodes = tape.nodes();
        let mut needed = vec![false; nodes.len()];
        for o in outputs {
            needed[o.index()] = true;
        }
        for i in (0..nodes.len()).rev() {
            if needed[i] {
                for j in op_inputs(&nodes[i].op) {
                    needed[j.index()] = true;
                }
            }
        }
        let mut plain = vec![false; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            plain[i] = match &n.op {
                Op::Leaf(LeafKind::Input) => false,
                Op::Leaf(_) => true,
                op => op_inputs(op).iter().all(|j| plain[j.index()]),
            };
        }
        let mut lw = Lowering {
            pg: PolyGraph::new(),
            map: vec![None; nodes.len()],
            tape,
            plain,
        };
        for i in 0..nodes.len() {
            if needed[i] && !lw.plain[i] {
                lw.lower(i)?;
            }
        }
        let outs = outputs.iter().map(|o| lw.id(o.index())).collect();
        lw.pg.outputs = outs;
        Ok(lw.pg)
    }
}

/// Input leaves of a tape in creation order, matching `Input { index }`.
pub fn tape_inputs(tape: &Graph) -> Vec<Tensor> {
    tape.nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::Leaf(LeafKind::Input)))
        .map(|n| n.value.clone())
        .collect()
}

pub(crate) fn topo_order(g: &PolyGraph) -> Result<Vec<usize>> {
    let n = g.nodes.len();
    if g.nodes.iter().all(|node| node.inputs.iter().all(|&j| j < node.id)) {
        return Ok((0..n).collect());
    }
    let mut indeg = vec![0usize; n];
    let mut users = vec![Vec::new(); n];
    for node in &g.nodes {
        for &j in &node.inputs {
            indeg[node.id] += 1;
            users[j].push(node.id);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &u in &users[i] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                ready.push(u);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::AddCol(a, b)
        | Op::MulCol(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Power(a, _)
        | Op::Reduce(a, _, _)
        | Op::Act(a, _)
        | Op::Softmax(a, _)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::Reshape(a)
        | Op::CrossEntropy(a, _)
        | Op::LogSumExp(a, _) => vec![*a],
        Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
    }
}

struct Lowering<'t> {
    pg: PolyGraph,
    map: Vec<Option<usize>>,
    tape: &'t Graph,
    plain: Vec<bool>,
}

impl Lowering<'_> {
    /// PolyGraph id for tape node `i`, folding plaintext on first use.
    fn id(&mut self, i: usize) -> usize {
        if let Some(id) = self.map[i] {
            return id;
        }
        debug_assert!(self.plain[i], "ciphertext nodes are lowered in order");
        let id = self.pg.constant(self.tape.nodes()[i].value.clone());
        self.map[i] = Some(id);
        id
    }

    fn push(&mut self, kind: NodeKind, inputs: &[usize], shape: &[usize], site: &Option<String>) -> usize {
        self.pg.push(kind, inputs, shape.to_vec(), site.clone())
    }

    fn lower(&mut self, i: usize) -> Result<()> {
        let node = &self.tape.nodes()[i];
        let site = node.site.map(|s| self.tape.sites()[s].clone());
        let shape = node.value.shape().to_vec();
        let simple = |kind: NodeKind, vs: &[Var]| (kind, vs.to_vec());
        let (kind, vars) = match &node.op {
            Op::Leaf(_) => simple(NodeKind::Input { index: self.pg.inputs }, &[]),
            Op::MatMul(a, b) => {
                let kind = if self.plain[a.index()] || self.plain[b.index()] {
                    NodeKind::Linear
                } else {
                    NodeKind::MatMul
                };
                simple(kind, &[*a, *b])
            }
            Op::Add(a, b) => simple(NodeKind::Add, &[*a, *b]),
            Op::Sub(a, b) => simple(NodeKind::Sub, &[*a, *b]),
            Op::Mul(a, b) => simple(NodeKind::Mult, &[*a, *b]),
            Op::AddRow(a, b) => simple(NodeKind::AddRow, &[*a, *b]),
            Op::MulRow(a, b) => simple(NodeKind::MultRow, &[*a, *b]),
            Op::AddCol(a, b) => simple(NodeKind::AddCol, &[*a, *b]),
            Op::MulCol(a, b) => simple(NodeKind::MultCol, &[*a, *b]),
            Op::Transpose(a) => simple(NodeKind::Transpose, &[*a]),
            Op::Scale(a, c) => simple(NodeKind::Scale { c: *c }, &[*a]),
            Op::AddScalar(a, c) => simple(NodeKind::AddConst { c: *c }, &[*a]),
            Op::Power(a, p) => {
                if *p >= 1.0 && p.fract() == 0.0 && *p <= 64.0 {
                    let x = self.id(a.index());
                    let id = power(&mut self.pg, x, *p as usize, &mut HashMap::new(), &site);
                    self.map[i] = Some(id);
                    return Ok(());
                }
                simple(NodeKind::Pow { exponent: *p }, &[*a])
            }
            Op::Reduce(a, kind, axis) => match kind {
                ReduceKind::Sum => simple(NodeKind::Sum { axis: *axis }, &[*a]),
                ReduceKind::Max => simple(NodeKind::Max { axis: *axis }, &[*a]),
                ReduceKind::Min => simple(NodeKind::Min { axis: *axis }, &[*a]),
                ReduceKind::Mean | ReduceKind::Var => {
                    let x = self.id(a.index());
                    let in_shape = self.tape.shape(*a).to_vec();
                    let n = match axis {
                        Some(ax) => in_shape[*ax],
                        None => in_shape.iter().product(),
                    } as f64;
                    let id = if *kind == ReduceKind::Mean {
                        let s = self.push(NodeKind::Sum { axis: *axis }, &[x], &shape, &site);
                        self.push(NodeKind::Scale { c: 1.0 / n }, &[s], &shape, &site)
                    } else {
                        lower_variance(&mut self.pg, x, &in_shape, *axis, n, &shape, &site)
                    };
                    self.map[i] = Some(id);
                    return Ok(());
                }
            },
            Op::Act(a, act) => match act {
                Act::Relu => simple(NodeKind::Relu, &[*a]),
                Act::Gelu => simple(NodeKind::Gelu, &[*a]),
                Act::Abs => simple(NodeKind::Abs, &[*a]),
                Act::Exp => simple(NodeKind::Exp, &[*a]),
                Act::Ln => simple(NodeKind::Log, &[*a]),
                Act::Poly(p, _) => {
                    let x = self.id(a.index());
                    let id = emit_composite(&mut self.pg, x, p, &shape, &site);
                    self.map[i] = Some(id);
                    return Ok(());
                }
            },
            Op::Softmax(a, axis) => simple(NodeKind::Softmax { axis: *axis }, &[*a]),
            Op::SliceRows(a, s, l) => simple(NodeKind::SliceRows { start: *s, len: *l }, &[*a]),
            Op::SliceCols(a, s, l) => simple(NodeKind::SliceCols { start: *s, len: *l }, &[*a]),
            Op::ConcatRows(v) => simple(NodeKind::ConcatRows, v),
            Op::ConcatCols(v) => simple(NodeKind::ConcatCols, v),
            Op::Reshape(a) => simple(NodeKind::Reshape { shape: shape.clone() }, &[*a]),
            Op::CrossEntropy(a, t) => simple(
                NodeKind::CrossEntropy {
                    targets: t.as_ref().clone(),
                },
                &[*a],
            ),
            Op::LogSumExp(a, t) => simple(NodeKind::LogSumExp { temperature: *t }, &[*a]),
        };
        let inputs: Vec<usize> = vars.iter().map(|v| self.id(v.index())).collect();
        let id = self.push(kind, &inputs, &shape, &site);
        self.map[i] = Some(id);
        Ok(())
    }
}

/// `mean((x − mean x)²)` with additions and multiplications.
fn lower_variance(
    pg: &mut PolyGraph,
    x: usize,
    in_shape: &[usize],
    axis: Option<usize>,
    n: f64,
    out_shape: &[usize],
    site: &Option<String>,
) -> usize {
    let push = |pg: &mut PolyGraph, kind, inputs: &[usize], shape: Vec<usize>| pg.push(kind, inputs, shape, site.clone());
    let (x, ax, flat) = match (axis, in_shape.len()) {
        (Some(ax), 2) => (x, ax, false),
        _ => {
            let total: usize = in_shape.iter().product();
            (push(pg, NodeKind::Reshape { shape: vec![1, total] }, &[x], vec![1, total]), 1, true)
        }
    };
    let xs = pg.nodes[x].shape.clone();
    let reduced: Vec<usize> = if ax == 0 { vec![xs[1]] } else { vec![xs[0]] };
    let s = push(pg, NodeKind::Sum { axis: Some(ax) }, &[x], reduced.clone());
    let neg_mu = push(pg, NodeKind::Scale { c: -1.0 / n }, &[s], reduced.clone());
    let bkind = if ax == 0 { NodeKind::AddRow } else { NodeKind::AddCol };
    let c = push(pg, bkind, &[x, neg_mu], xs.clone());
    let sq = push(pg, NodeKind::Mult, &[c, c], xs);
    let ss = push(pg, NodeKind::Sum { axis: Some(ax) }, &[sq], reduced.clone());
    let v = push(pg, NodeKind::Scale { c: 1.0 / n }, &[ss], reduced);
    if flat {
        push(pg, NodeKind::Reshape { shape: out_shape.to_vec() }, &[v], out_shape.to_vec())
    } else {
        v
    }
}

/// `x^k` by a power tree: `x^k = x^j · x^(k−j)` with `j` the largest power
/// of two below `k`, giving depth `⌈log₂ k⌉`.
fn power(pg: &mut PolyGraph, x: usize, k: usize, memo: &mut HashMap<usize, usize>, site: &Option<String>) -> usize {
    if k == 1 {
        return x;
    }
    if let Some(&id) = memo.get(&k) {
        return id;
    }
    let j = if k.is_power_of_two() { k / 2 } else { 1 << (usize::BITS - 1 - k.leading_zeros()) };
    let a = power(pg, x, j, memo, site);
    let b = power(pg, x, k - j, memo, site);
    let shape = pg.nodes[x].shape.clone();
    let id = pg.push(NodeKind::Mult, &[a, b], shape, site.clone());
    memo.insert(k, id);
    id
}

/// `Σ c_k x^k` from the power tree; depth `⌈log₂ n⌉ + 1`.
pub fn emit_polynomial(pg: &mut PolyGraph, x: usize, coeffs: &[f64], site: &Option<String>) -> usize {
    let shape = pg.nodes[x].shape.clone();
    let mut memo = HashMap::new();
    let mut terms = Vec::new();
    for (k, &c) in coeffs.iter().enumerate().skip(1) {
        if c == 0.0 {
            continue;
        }
        let p = power(pg, x, k, &mut memo, site);
        terms.push(if c == 1.0 {
            p
        } else {
            pg.push(NodeKind::Scale { c }, &[p], shape.clone(), site.clone())
        });
    }
    if terms.is_empty() {
        terms.push(pg.push(NodeKind::Scale { c: 0.0 }, &[x], shape.clone(), site.clone()));
    }
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        for pair in terms.chunks(2) {
            next.push(if pair.len() == 2 {
                pg.push(NodeKind::Add, pair, shape.clone(), site.clone())
            } else {
                pair[0]
            });
        }
        terms = next;
    }
    let c0 = coeffs.first().copied().unwrap_or(0.0);
    if c0 != 0.0 {
        pg.push(NodeKind::AddConst { c: c0 }, &[terms[0]], shape, site.clone())
    } else {
        terms[0]
    }
}

/// Arithmetic circuit of a composite polynomial applied to node `x`.
pub fn emit_composite(pg: &mut PolyGraph, x: usize, comp: &Arc<CompositePolynomial>, shape: &[usize], site: &Option<String>) -> usize {
    let mut y = x;
    let mut half: Option<usize> = None;
    let mut half_x = |pg: &mut PolyGraph| *half.get_or_insert_with(|| pg.push(NodeKind::Scale { c: 0.5 }, &[x], shape.to_vec(), site.clone()));
    for stage in comp.stages() {
        y = match stage {
            Stage::Poly(p) => emit_polynomial(pg, y, p.coeffs(), site),
            Stage::NewtonInvSqrt => {
                let hx = half_x(pg);
                let y2 = pg.push(NodeKind::Mult, &[y, y], shape.to_vec(), site.clone());
                let t = pg.push(NodeKind::Mult, &[hx, y2], shape.to_vec(), site.clone());
                let neg = pg.push(NodeKind::Scale { c: -1.0 }, &[t], shape.to_vec(), site.clone());
                let u = pg.push(NodeKind::AddConst { c: 1.5 }, &[neg], shape.to_vec(), site.clone());
                pg.push(NodeKind::Mult, &[y, u], shape.to_vec(), site.clone())
            }
            Stage::ReluAssemble => {
                let hx = half_x(pg);
                let m = pg.push(NodeKind::Mult, &[hx, y], shape.to_vec(), site.clone());
                pg.push(NodeKind::Add, &[hx, m], shape.to_vec(), site.clone())
            }
        };
    }
    y
}
