use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::{attention_softmax, scores, sigma_weights, MaskSpec, Nonlinearity};
use super::config::{AttentionKind, MlpActivation, MlpBnPosition, ModelConfig, NormKind, SigmaActivation, TaskShape};
use crate::error::{Error, Result};
use crate::polyfit::CompositePolynomial;
use crate::rng;
use crate::tensor::{Graph, PolyMode, ReduceKind, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What an instrumented site feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    MlpActivation,
    AttentionActivation,
    LayerNorm,
}

impl SiteRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteRole::MlpActivation => "mlp_activation",
            SiteRole::AttentionActivation => "attention_activation",
            SiteRole::LayerNorm => "layernorm",
        }
    }
}

/// Non-polynomial function evaluated at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Relu,
    Gelu,
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub layer: usize,
    pub role: SiteRole,
    pub target: Target,
}

/// Vars feeding a non-polynomial site. For LayerNorm sites each var is the
/// per-token biased variance (before ε), one row per token.
#[derive(Debug, Clone)]
pub struct Tap {
    pub site: String,
    pub layer: usize,
    pub role: SiteRole,
    pub vars: Vec<Var>,
}

/// Batch statistics to fold into running estimates after a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean: usize,
    var: usize,
    count: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B·L × vocab]` for language modeling, `[B × classes]` for images.
    pub logits: Var,
    pub taps: Vec<Tap>,
    pub bn_updates: Vec<BnUpdate>,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
struct NormLayer {
    name: String,
    gamma: usize,
    beta: usize,
    stats: Option<Stats>,
}

#[derive(Debug, Clone, Copy)]
struct Stats {
    mean: usize,
    var: usize,
    count: usize,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: NormLayer,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    bn2d: Option<NormLayer>,
    norm2: NormLayer,
    w1: usize,
    b1: usize,
    mlp_bn: Option<NormLayer>,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    embed_bias: Option<usize>,
    pos: Option<usize>,
    blocks: Vec<Block>,
    final_norm: NormLayer,
    head_w: usize,
    head_b: usize,
}

/// Transformer with pre-norm blocks: `x + attn(norm(x))`, then
/// `x + mlp(norm(x))`.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<ParamEntry>,
    layout: Layout,
    poly: BTreeMap<String, Arc<CompositePolynomial>>,
    poly_mode: PolyMode,
    stages: Vec<String>,
}

struct Builder<'a> {
    params: Vec<ParamEntry>,
    rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> usize {
        self.params.push(ParamEntry { name, value, trainable });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng::normal(self.rng) * std).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.push(name, t, true)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, v), true)
    }

    fn stats(&mut self, name: &str, shape: &[usize]) -> Stats {
        Stats {
            mean: self.push(format!("{name}.running_mean"), Tensor::zeros(shape), false),
            var: self.push(format!("{name}.running_var"), Tensor::ones(shape), false),
            count: self.push(format!("{name}.tracked"), Tensor::zeros(&[1]), false),
        }
    }

    fn norm(&mut self, name: String, shape: &[usize], with_stats: bool) -> NormLayer {
        let gamma = self.fill(format!("{name}.gamma"), shape, 1.0);
        let beta = self.fill(format!("{name}.beta"), shape, 0.0);
        let stats = with_stats.then(|| self.stats(&name, &[shape.iter().product()]));
        NormLayer {
            name,
            gamma,
            beta,
            stats,
        }
    }
}

impl Model {
    /// Initializes parameters from the `init` stream of `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "init");
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut r,
        };
        let d = cfg.d_model;
        let dff = cfg.d_ff();
        let h = cfg.attention.head_count;
        let bn = !cfg.norm.kind.is_layer();
        let out_std = 1.0 / ((d as f64) * 2.0 * cfg.depth as f64).sqrt();
        let (embed, embed_bias) = match cfg.task {
            TaskShape::CharLm { vocab } => (b.normal("embed.weight".into(), &[vocab, d], 0.5), None),
            TaskShape::Image { patch_size, .. } => {
                let pd = patch_size * patch_size;
                let w = b.normal("patch.weight".into(), &[pd, d], 1.0 / (pd as f64).sqrt());
                (w, Some(b.fill("patch.bias".into(), &[d], 0.0)))
            }
        };
        let pos = cfg
            .positional
            .then(|| b.normal("pos".into(), &[cfg.context_len, d], 0.1));
        let mut blocks = Vec::with_capacity(cfg.depth);
        let in_std = 1.0 / (d as f64).sqrt();
        for i in 0..cfg.depth {
            let p = format!("block{i}");
            let norm1 = b.norm(format!("{p}.norm1"), &[d], bn);
            let wq = b.normal(format!("{p}.attn.wq"), &[d, d], in_std);
            let bq = b.fill(format!("{p}.attn.bq"), &[d], 0.0);
            let wk = b.normal(format!("{p}.attn.wk"), &[d, d], in_std);
            let bk = b.fill(format!("{p}.attn.bk"), &[d], 0.0);
            let wv = b.normal(format!("{p}.attn.wv"), &[d, d], in_std);
            let bv = b.fill(format!("{p}.attn.bv"), &[d], 0.0);
            let wo = b.normal(format!("{p}.attn.wo"), &[d, d], out_std);
            let bo = b.fill(format!("{p}.attn.bo"), &[d], 0.0);
            let bn2d = cfg
                .attention
                .qk_batchnorm2d
                .then(|| b.norm(format!("{p}.attn.bn2d"), &[1, h], true));
            let norm2 = b.norm(format!("{p}.norm2"), &[d], bn);
            let w1 = b.normal(format!("{p}.mlp.w1"), &[d, dff], in_std);
            let b1 = b.fill(format!("{p}.mlp.b1"), &[dff], 0.0);
            let mlp_bn = cfg.norm.extra_mlp_bn.then(|| b.norm(format!("{p}.mlp.bn"), &[dff], true));
            let w2 = b.normal(format!("{p}.mlp.w2"), &[dff, d], 1.0 / ((dff as f64) * 2.0 * cfg.depth as f64).sqrt());
            let b2 = b.fill(format!("{p}.mlp.b2"), &[d], 0.0);
            blocks.push(Block {
                norm1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                bn2d,
                norm2,
                w1,
                b1,
                mlp_bn,
                w2,
                b2,
            });
        }
        let final_norm = b.norm("final_norm".into(), &[d], bn);
        let out = match cfg.task {
            TaskShape::CharLm { vocab } => vocab,
            TaskShape::Image { num_classes, .. } => num_classes,
        };
        let head_w = b.normal("head.weight".into(), &[d, out], in_std);
        let head_b = b.fill("head.bias".into(), &[out], 0.0);
        let params = b.params;
        Ok(Self {
            cfg,
            params,
            layout: Layout {
                embed,
                embed_bias,
                pos,
                blocks,
                final_norm,
                head_w,
                head_b,
            },
            poly: BTreeMap::new(),
            poly_mode: PolyMode::Strict,
            stages: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Mutable access by declaration index, used by optimizers.
    pub fn param_value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    /// Replaces parameter values in declaration order.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Zeroes every weight and bias, leaving normalization gains at one.
    pub fn zero_weights(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.trainable && !p.name.ends_with(".gamma")) {
            p.value.data_mut().fill(0.0);
        }
    }

    pub fn stages(&self) -> &[String] {
        &self.stages
    }

    pub fn mark_stage(&mut self, stage: &str) {
        self.stages.push(stage.to_string());
    }

    pub fn set_stages(&mut self, stages: Vec<String>) {
        self.stages = stages;
    }

    pub fn poly_sites(&self) -> &BTreeMap<String, Arc<CompositePolynomial>> {
        &self.poly
    }

    pub fn poly_mode(&self) -> PolyMode {
        self.poly_mode
    }

    pub fn set_poly_mode(&mut self, mode: PolyMode) {
        self.poly_mode = mode;
    }

    pub(crate) fn set_poly_site(&mut self, site: &str, p: CompositePolynomial) {
        self.poly.insert(site.to_string(), Arc::new(p));
    }

    pub(crate) fn set_config(&mut self, cfg: ModelConfig) {
        self.cfg = cfg;
    }

    pub fn is_polynomial(&self) -> bool {
        self.cfg.attention.kind == AttentionKind::Sigma
            && !matches!(self.cfg.norm.kind, NormKind::LayerNorm | NormKind::BatchNorm)
            && self.sites().iter().all(|s| self.poly.contains_key(&s.name))
    }

    /// Non-polynomial sites a conversion has to cover.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut out = Vec::new();
        let layer_norm = self.cfg.norm.kind.is_layer();
        let mlp_target = match self.cfg.mlp_activation {
            MlpActivation::Relu => Target::Relu,
            MlpActivation::Gelu => Target::Gelu,
        };
        let attn_target = match self.cfg.attention.sigma_activation {
            SigmaActivation::Relu | SigmaActivation::SquaredRelu => Target::Relu,
            SigmaActivation::Gelu => Target::Gelu,
        };
        let ln = |name: String, layer: usize| SiteInfo {
            name,
            layer,
            role: SiteRole::LayerNorm,
            target: Target::InvSqrt,
        };
        for i in 0..self.cfg.depth {
            if layer_norm {
                out.push(ln(format!("block{i}.norm1"), i));
            }
            if self.cfg.attention.kind == AttentionKind::Sigma {
                out.push(SiteInfo {
                    name: format!("block{i}.attn_act"),
                    layer: i,
                    role: SiteRole::AttentionActivation,
                    target: attn_target,
                });
            }
            if layer_norm {
                out.push(ln(format!("block{i}.norm2"), i));
            }
            out.push(SiteInfo {
                name: format!("block{i}.mlp_act"),
                layer: i,
                role: SiteRole::MlpActivation,
                target: mlp_target,
            });
        }
        if layer_norm {
            out.push(ln("final_norm".into(), self.cfg.depth));
        }
        out
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.cfg.norm.momentum;
        for u in updates {
            let first = self.params[u.count].value.item() == 0.0;
            for (slot, new) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                for (r, &b) in self.params[slot].value.data_mut().iter_mut().zip(new.iter()) {
                    *r = if first { b } else { (1.0 - m) * *r + m * b };
                }
            }
            self.params[u.count].value.data_mut()[0] += 1.0;
        }
    }

    /// Forward pass over `B` token sequences of equal length `L ≤ context_len`.
    pub fn forward_tokens(&self, g: &mut Graph, tokens: &[Vec<usize>], mode: Mode) -> Result<Forward> {
        let TaskShape::CharLm { vocab } = self.cfg.task else {
            return Err(Error::Config("token input given to an image model".into()));
        };
        let len = uniform_len(tokens.iter().map(Vec::len), self.cfg.context_len)?;
        let b = tokens.len();
        let mut onehot = Tensor::zeros(&[b * len, vocab]);
        for (r, &t) in tokens.iter().flatten().enumerate() {
            if t >= vocab {
                return Err(Error::TokenOutOfVocab { token: t, vocab });
            }
            onehot.set2(r, t, 1.0);
        }
        let mut cx = Ctx::new(self, g, mode);
        cx.g.set_site(Some("embed"));
        let x = cx.g.input(onehot);
        let e = cx.p(self.layout.embed);
        let x = cx.g.matmul(x, e)?;
        let x = cx.add_positions(x, b, len)?;
        let mask = MaskSpec::causal(len);
        let logits = cx.trunk(x, b, len, &mask)?;
        Ok(cx.finish(logits, b, len))
    }

    /// Forward pass over square single-channel images.
    pub fn forward_images(&self, g: &mut Graph, images: &[Tensor], mode: Mode) -> Result<Forward> {
        let TaskShape::Image {
            image_size,
            patch_size,
            ..
        } = self.cfg.task
        else {
            return Err(Error::Config("image input given to a language model".into()));
        };
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_side = image_size / patch_size;
        let len = per_side * per_side;
        let pd = patch_size * patch_size;
        let mut rows = Vec::with_capacity(images.len() * len);
        for img in images {
            if img.shape() != [image_size, image_size] {
                return Err(Error::Shape {
                    op: "image",
                    lhs: img.shape().to_vec(),
                    rhs: vec![image_size, image_size],
                });
            }
            rows.extend(patchify(img, patch_size));
        }
        let patches = Tensor::new(vec![images.len() * len, pd], rows.concat())?;
        let b = images.len();
        let mut cx = Ctx::new(self, g, mode);
        cx.g.set_site(Some("embed"));
        let x = cx.g.input(patches);
        let w = cx.p(self.layout.embed);
        let x = cx.g.matmul(x, w)?;
        let bias = cx.p(self.layout.embed_bias.expect("image models have a patch bias"));
        let x = cx.g.add_row(x, bias)?;
        let x = cx.add_positions(x, b, len)?;
        let mask = MaskSpec::all_ones(len);
        let logits = cx.trunk(x, b, len, &mask)?;
        Ok(cx.finish(logits, b, len))
    }

    /// One transformer block applied to token-major rows `[B·L × d]`.
    pub fn block_forward(&self, g: &mut Graph, layer: usize, x: Var, batch: usize, mode: Mode) -> Result<(Var, Vec<Tap>)> {
        let (rows, _) = g.value(x).dims2()?;
        if batch == 0 || rows % batch != 0 || layer >= self.cfg.depth {
            return Err(Error::Config("block input does not match batch or depth".into()));
        }
        let len = rows / batch;
        let mask = match self.cfg.task {
            TaskShape::CharLm { .. } => MaskSpec::causal(len),
            TaskShape::Image { .. } => MaskSpec::all_ones(len),
        };
        let mut cx = Ctx::new(self, g, mode);
        let y = cx.block(layer, x, batch, len, &mask)?;
        Ok((y, cx.taps))
    }

    fn nonlinearity(&self, site: &str, exact: Nonlinearity) -> Nonlinearity {
        match (self.poly.get(site), &exact) {
            (Some(p), Nonlinearity::SquaredRelu) => Nonlinearity::SquaredPoly(p.clone(), self.poly_mode),
            (Some(p), _) => Nonlinearity::Poly(p.clone(), self.poly_mode),
            (None, _) => exact,
        }
    }
}

fn uniform_len(mut lens: impl Iterator<Item = usize>, max: usize) -> Result<usize> {
    let Some(len) = lens.next() else {
        return Err(Error::EmptyDataset);
    };
    if len == 0 || len > max || lens.any(|l| l != len) {
        return Err(Error::Config(format!(
            "sequences must share one length in 1..={max}"
        )));
    }
    Ok(len)
}

/// Row-major patches, each flattened row-major.
pub fn patchify(img: &Tensor, patch: usize) -> Vec<Vec<f64>> {
    let n = img.shape()[0];
    let per = n / patch;
    let mut out = Vec::with_capacity(per * per);
    for pr in 0..per {
        for pc in 0..per {
            let mut v = Vec::with_capacity(patch * patch);
            for i in 0..patch {
                for j in 0..patch {
                    v.push(img.get2(pr * patch + i, pc * patch + j));
                }
            }
            out.push(v);
        }
    }
    out
}

struct Ctx<'m, 'g> {
    m: &'m Model,
    g: &'g mut Graph,
    mode: Mode,
    pvars: Vec<Option<Var>>,
    taps: Vec<Tap>,
    updates: Vec<BnUpdate>,
}

impl<'m, 'g> Ctx<'m, 'g> {
    fn new(m: &'m Model, g: &'g mut Graph, mode: Mode) -> Self {
        Self {
            m,
            g,
            mode,
            pvars: vec![None; m.params.len()],
            taps: Vec::new(),
            updates: Vec::new(),
        }
    }

    fn p(&mut self, i: usize) -> Var {
        if let Some(v) = self.pvars[i] {
            return v;
        }
        let v = self.g.param(i, self.m.params[i].value.clone());
        self.pvars[i] = Some(v);
        v
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.m.params[i].value
    }

    fn finish(self, logits: Var, batch: usize, seq_len: usize) -> Forward {
        self.g.set_site(None);
        Forward {
            logits,
            taps: self.taps,
            bn_updates: self.updates,
            batch,
            seq_len,
        }
    }

    fn add_positions(&mut self, x: Var, b: usize, len: usize) -> Result<Var> {
        let Some(pos) = self.m.layout.pos else { return Ok(x) };
        let p = self.p(pos);
        let p = if len == self.m.cfg.context_len { p } else { self.g.slice_rows(p, 0, len)? };
        let tiled = if b == 1 { p } else { self.g.concat_rows(&vec![p; b])? };
        self.g.add(x, tiled)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let wv = self.p(w);
        let y = self.g.matmul(x, wv)?;
        let bv = self.p(b);
        self.g.add_row(y, bv)
    }

    fn trunk(&mut self, mut x: Var, b: usize, len: usize, mask: &MaskSpec) -> Result<Var> {
        for i in 0..self.m.cfg.depth {
            x = self.block(i, x, b, len, mask)?;
        }
        let lay = &self.m.layout;
        let fnorm = lay.final_norm.clone();
        self.g.set_site(Some("final_norm"));
        let h = self.norm(&fnorm, x, "final_norm", self.m.cfg.depth)?;
        self.g.set_site(Some("head"));
        let h = match self.m.cfg.task {
            TaskShape::CharLm { .. } => h,
            TaskShape::Image { .. } => {
                let mut pooled = Vec::with_capacity(b);
                for e in 0..b {
                    let rows = self.g.slice_rows(h, e * len, len)?;
                    let s = self.g.reduce(rows, ReduceKind::Sum, Some(0))?;
                    let s = self.g.scale(s, 1.0 / len as f64);
                    pooled.push(self.g.reshape(s, &[1, self.m.cfg.d_model])?);
                }
                if b == 1 {
                    pooled[0]
                } else {
                    self.g.concat_rows(&pooled)?
                }
            }
        };
        self.linear(h, lay.head_w, lay.head_b)
    }

    fn block(&mut self, i: usize, x: Var, b: usize, len: usize, mask: &MaskSpec) -> Result<Var> {
        let blk = self.m.layout.blocks[i].clone();
        let cfg = &self.m.cfg;
        let attn_scope = format!("block{i}.attn");
        let n1 = format!("block{i}.norm1");
        self.g.set_site(Some(&n1));
        let h = self.norm(&blk.norm1, x, &n1, i)?;
        self.g.set_site(Some(&attn_scope));
        let q = self.linear(h, blk.wq, blk.bq)?;
        let k = self.linear(h, blk.wk, blk.bk)?;
        let v = self.linear(h, blk.wv, blk.bv)?;
        let heads = cfg.attention.head_count;
        let dk = cfg.d_k();
        let split = |g: &mut Graph, t: Var, e: usize, hd: usize| -> Result<Var> {
            let rows = if b == 1 { t } else { g.slice_rows(t, e * len, len)? };
            if heads == 1 {
                Ok(rows)
            } else {
                g.slice_cols(rows, hd * dk, dk)
            }
        };
        // outputs[e][hd]
        let mut outs = vec![Vec::with_capacity(heads); b];
        match cfg.attention.kind {
            AttentionKind::Softmax => {
                self.g.set_site(Some(&format!("block{i}.attn_softmax")));
                for (e, row) in outs.iter_mut().enumerate() {
                    for hd in 0..heads {
                        let (qh, kh, vh) = (split(self.g, q, e, hd)?, split(self.g, k, e, hd)?, split(self.g, v, e, hd)?);
                        row.push(attention_softmax(self.g, qh, kh, vh, mask)?);
                    }
                }
            }
            AttentionKind::Sigma => {
                let site = format!("block{i}.attn_act");
                let act = self.m.nonlinearity(&site, cfg.attention.sigma_activation.into());
                let mut sc = vec![Vec::with_capacity(heads); b];
                let mut vs = vec![Vec::with_capacity(heads); b];
                for e in 0..b {
                    for hd in 0..heads {
                        let (qh, kh, vh) = (split(self.g, q, e, hd)?, split(self.g, k, e, hd)?, split(self.g, v, e, hd)?);
                        sc[e].push(scores(self.g, qh, kh)?);
                        vs[e].push(vh);
                    }
                }
                if let Some(bn) = &blk.bn2d {
                    sc = self.bn2d(bn, sc, len)?;
                }
                let mut tap = Vec::with_capacity(b * heads);
                let mut att = cfg.attention;
                // Pre-scaling is applied here so the tap sees the σ input.
                let s_pre = att.scale_fn.factor(len);
                for e in 0..b {
                    for hd in 0..heads {
                        let mut s = sc[e][hd];
                        if att.scale_pos.pre() && s_pre != 1.0 {
                            s = self.g.scale(s, s_pre);
                        }
                        tap.push(s);
                    }
                }
                att.scale_pos = if att.scale_pos.post() {
                    super::config::ScalePos::Post
                } else {
                    // Pre-only: nothing left to apply after σ.
                    att.scale_fn = super::config::ScaleFn::None;
                    super::config::ScalePos::Post
                };
                self.g.set_site(Some(&site));
                for e in 0..b {
                    for hd in 0..heads {
                        let w = sigma_weights(self.g, tap[e * heads + hd], &att, len, mask, &act)?;
                        outs[e].push(self.g.matmul(w, vs[e][hd])?);
                    }
                }
                self.taps.push(Tap {
                    site,
                    layer: i,
                    role: SiteRole::AttentionActivation,
                    vars: tap,
                });
            }
        }
        self.g.set_site(Some(&attn_scope));
        let mut per_seq = Vec::with_capacity(b);
        for row in outs {
            per_seq.push(if heads == 1 { row[0] } else { self.g.concat_cols(&row)? });
        }
        let a = if b == 1 { per_seq[0] } else { self.g.concat_rows(&per_seq)? };
        let a = self.linear(a, blk.wo, blk.bo)?;
        let x = self.g.add(x, a)?;

        let n2 = format!("block{i}.norm2");
        self.g.set_site(Some(&n2));
        let h = self.norm(&blk.norm2, x, &n2, i)?;
        let mlp_scope = format!("block{i}.mlp");
        self.g.set_site(Some(&mlp_scope));
        let mut u = self.linear(h, blk.w1, blk.b1)?;
        let bn_before = cfg.norm.extra_mlp_bn_position == MlpBnPosition::BeforeActivation;
        if let (Some(bn), true) = (&blk.mlp_bn, bn_before) {
            u = self.batchnorm(bn, u)?;
        }
        let site = format!("block{i}.mlp_act");
        let exact = match cfg.mlp_activation {
            MlpActivation::Relu => Nonlinearity::Relu,
            MlpActivation::Gelu => Nonlinearity::Gelu,
        };
        let act = self.m.nonlinearity(&site, exact);
        self.g.set_site(Some(&site));
        let mut a = act.apply(self.g, u)?;
        self.taps.push(Tap {
            site,
            layer: i,
            role: SiteRole::MlpActivation,
            vars: vec![u],
        });
        self.g.set_site(Some(&mlp_scope));
        if let (Some(bn), false) = (&blk.mlp_bn, bn_before) {
            a = self.batchnorm(bn, a)?;
        }
        let y = self.linear(a, blk.w2, blk.b2)?;
        self.g.add(x, y)
    }

    fn norm(&mut self, layer: &NormLayer, x: Var, site: &str, depth_index: usize) -> Result<Var> {
        match self.m.cfg.norm.kind {
            NormKind::LayerNorm | NormKind::PolyLayerNorm => self.layernorm(layer, x, site, depth_index),
            NormKind::BatchNorm | NormKind::AffineFrozen => self.batchnorm(layer, x),
        }
    }

    fn layernorm(&mut self, layer: &NormLayer, x: Var, site: &str, depth_index: usize) -> Result<Var> {
        let (n, _) = self.g.value(x).dims2()?;
        let mu = self.g.reduce(x, ReduceKind::Mean, Some(1))?;
        let mu = self.g.reshape(mu, &[n, 1])?;
        let neg = self.g.scale(mu, -1.0);
        let xc = self.g.add_col(x, neg)?;
        let var = self.g.reduce(x, ReduceKind::Var, Some(1))?;
        self.taps.push(Tap {
            site: site.to_string(),
            layer: depth_index,
            role: SiteRole::LayerNorm,
            vars: vec![var],
        });
        let shifted = self.g.add_scalar(var, self.m.cfg.norm.epsilon);
        let inv = if self.m.cfg.norm.kind == NormKind::PolyLayerNorm {
            let p = self
                .m
                .poly
                .get(site)
                .ok_or_else(|| Error::Config(format!("no inverse square root polynomial for {site}")))?;
            Nonlinearity::Poly(p.clone(), self.m.poly_mode).apply(self.g, shifted)?
        } else {
            self.g.power(shifted, -0.5)
        };
        let y = self.g.mul_col(xc, inv)?;
        let gamma = self.p(layer.gamma);
        let y = self.g.mul_row(y, gamma)?;
        let beta = self.p(layer.beta);
        self.g.add_row(y, beta)
    }

    fn frozen(&self, layer: &NormLayer) -> Result<Stats> {
        let st = layer.stats.ok_or_else(|| Error::MissingStats(layer.name.clone()))?;
        if self.val(st.count).item() == 0.0 {
            return Err(Error::MissingStats(layer.name.clone()));
        }
        Ok(st)
    }

    /// Inference fold `(scale, shift)` with `y = x·scale + shift`.
    fn fold(&self, layer: &NormLayer) -> Result<(Vec<f64>, Vec<f64>)> {
        let st = self.frozen(layer)?;
        let eps = self.m.cfg.norm.epsilon;
        let (g, b) = (self.val(layer.gamma).data(), self.val(layer.beta).data());
        let (mu, var) = (self.val(st.mean).data(), self.val(st.var).data());
        let scale: Vec<f64> = g.iter().zip(var).map(|(g, v)| g / (v + eps).sqrt()).collect();
        let shift = b.iter().zip(mu).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        Ok((scale, shift))
    }

    /// Per-feature batch normalization over rows.
    fn batchnorm(&mut self, layer: &NormLayer, x: Var) -> Result<Var> {
        let eps = self.m.cfg.norm.epsilon;
        let frozen = self.m.cfg.norm.kind == NormKind::AffineFrozen;
        if frozen {
            let (scale, shift) = self.fold(layer)?;
            let s = self.g.constant(Tensor::from_vec(scale));
            let y = self.g.mul_row(x, s)?;
            let c = self.g.constant(Tensor::from_vec(shift));
            return self.g.add_row(y, c);
        }
        let (xc, inv) = match self.mode {
            Mode::Train => {
                let mu = self.g.reduce(x, ReduceKind::Mean, Some(0))?;
                let var = self.g.reduce(x, ReduceKind::Var, Some(0))?;
                let st = layer.stats.expect("batch norm layers carry statistics");
                self.updates.push(BnUpdate {
                    mean: st.mean,
                    var: st.var,
                    count: st.count,
                    batch_mean: self.g.value(mu).data().to_vec(),
                    batch_var: self.g.value(var).data().to_vec(),
                });
                let neg = self.g.scale(mu, -1.0);
                let xc = self.g.add_row(x, neg)?;
                let shifted = self.g.add_scalar(var, eps);
                (xc, self.g.power(shifted, -0.5))
            }
            Mode::Eval => {
                let st = self.frozen(layer)?;
                let mu = self.p(st.mean);
                let var = self.p(st.var);
                let neg = self.g.scale(mu, -1.0);
                let xc = self.g.add_row(x, neg)?;
                let shifted = self.g.add_scalar(var, eps);
                (xc, self.g.power(shifted, -0.5))
            }
        };
        let y = self.g.mul_row(xc, inv)?;
        let gamma = self.p(layer.gamma);
        let y = self.g.mul_row(y, gamma)?;
        let beta = self.p(layer.beta);
        self.g.add_row(y, beta)
    }

    /// Column of `rows` copies of a `[1×1]` var.
    fn column(&mut self, s: Var, rows: usize) -> Result<Var> {
        let ones = self.g.constant(Tensor::ones(&[rows, 1]));
        self.g.matmul(ones, s)
    }

    /// BatchNorm2D over the score stack: one channel per head, normalized
    /// over (batch, L, L).
    fn bn2d(&mut self, layer: &NormLayer, sc: Vec<Vec<Var>>, len: usize) -> Result<Vec<Vec<Var>>> {
        let b = sc.len();
        let heads = sc[0].len();
        let rows = b * len;
        let eps = self.m.cfg.norm.epsilon;
        let frozen = self.m.cfg.norm.kind == NormKind::AffineFrozen;
        let train = !frozen && self.mode == Mode::Train;
        let fold = if train { None } else { Some(self.fold(layer)?) };
        let mut out = vec![Vec::with_capacity(heads); b];
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        for hd in 0..heads {
            let parts: Vec<Var> = sc.iter().map(|r| r[hd]).collect();
            let stack = if b == 1 { parts[0] } else { self.g.concat_rows(&parts)? };
            let y = if frozen {
                let (scale, shift) = fold.as_ref().expect("frozen layers are folded");
                let y = self.g.scale(stack, scale[hd]);
                self.g.add_scalar(y, shift[hd])
            } else if !train {
                let st = self.frozen(layer)?;
                let mu = self.val(st.mean).data()[hd];
                let inv = 1.0 / (self.val(st.var).data()[hd] + eps).sqrt();
                let c = self.g.add_scalar(stack, -mu);
                let y = self.g.scale(c, inv);
                self.head_affine(layer, y, hd, rows)?
            } else {
                let mu = self.g.mean_all(stack);
                let var = self.g.reduce(stack, ReduceKind::Var, None)?;
                means.push(self.g.value(mu).item());
                vars.push(self.g.value(var).item());
                let mu = self.g.reshape(mu, &[1, 1])?;
                let neg = self.g.scale(mu, -1.0);
                let ncol = self.column(neg, rows)?;
                let xc = self.g.add_col(stack, ncol)?;
                let shifted = self.g.add_scalar(var, eps);
                let inv = self.g.power(shifted, -0.5);
                let inv = self.g.reshape(inv, &[1, 1])?;
                let icol = self.column(inv, rows)?;
                let y = self.g.mul_col(xc, icol)?;
                self.head_affine(layer, y, hd, rows)?
            };
            for (e, row) in out.iter_mut().enumerate() {
                row.push(if b == 1 { y } else { self.g.slice_rows(y, e * len, len)? });
            }
        }
        if train {
            let st = layer.stats.expect("bn2d carries statistics");
            self.updates.push(BnUpdate {
                mean: st.mean,
                var: st.var,
                count: st.count,
                batch_mean: means,
                batch_var: vars,
            });
        }
        Ok(out)
    }

    /// `y·γ[hd] + β[hd]` with per-head scalars broadcast down a column.
    fn head_affine(&mut self, layer: &NormLayer, y: Var, hd: usize, rows: usize) -> Result<Var> {
        let gm = self.p(layer.gamma);
        let gh = self.g.slice_cols(gm, hd, 1)?;
        let gcol = self.column(gh, rows)?;
        let y = self.g.mul_col(y, gcol)?;
        let bt = self.p(layer.beta);
        let bh = self.g.slice_cols(bt, hd, 1)?;
        let bcol = self.column(bh, rows)?;
        self.g.add_col(y, bcol)
    }
}
