use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{AttentionConfig, SigmaActivation};
use crate::error::{Error, Result};
use crate::polyfit::CompositePolynomial;
use crate::tensor::{Act, Graph, PolyMode, Tensor, Var};

/// Additive logit used for masked positions in softmax attention.
pub const MASKED_LOGIT: f64 = -1e9;

/// Binary `L×L` attention mask; `M[i][j] = 1` lets query `i` see key `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    matrix: Tensor,
}

impl MaskSpec {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        if matrix.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("mask entries must be 0 or 1".into()));
        }
        Ok(Self { matrix })
    }

    pub fn all_ones(len: usize) -> Self {
        Self {
            matrix: Tensor::ones(&[len, len]),
        }
    }

    /// Lower-triangular mask for next-token prediction.
    pub fn causal(len: usize) -> Self {
        let mut m = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in 0..=i {
                m.set2(i, j, 1.0);
            }
        }
        Self { matrix: m }
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn is_all_ones(&self) -> bool {
        self.matrix.data().iter().all(|&v| v == 1.0)
    }

    fn check(&self, g: &Graph, scores: Var) -> Result<()> {
        if g.shape(scores) != self.matrix.shape() {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: g.shape(scores).to_vec(),
                rhs: self.matrix.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// How a pointwise nonlinearity is evaluated on the tape.
#[derive(Debug, Clone)]
pub enum Nonlinearity {
    Relu,
    Gelu,
    SquaredRelu,
    Poly(Arc<CompositePolynomial>, PolyMode),
    /// Polynomial ReLU followed by squaring.
    SquaredPoly(Arc<CompositePolynomial>, PolyMode),
}

impl Nonlinearity {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Nonlinearity::Relu => Ok(g.relu(x)),
            Nonlinearity::Gelu => Ok(g.gelu(x)),
            Nonlinearity::SquaredRelu => {
                let r = g.relu(x);
                g.mul(r, r)
            }
            Nonlinearity::Poly(p, mode) => g.activation(x, Act::Poly(p.clone(), *mode)),
            Nonlinearity::SquaredPoly(p, mode) => {
                let r = g.activation(x, Act::Poly(p.clone(), *mode))?;
                g.mul(r, r)
            }
        }
    }
}

impl From<SigmaActivation> for Nonlinearity {
    fn from(a: SigmaActivation) -> Self {
        match a {
            SigmaActivation::Relu => Nonlinearity::Relu,
            SigmaActivation::Gelu => Nonlinearity::Gelu,
            SigmaActivation::SquaredRelu => Nonlinearity::SquaredRelu,
        }
    }
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var) -> Result<()> {
    let (lq, dq) = g.value(q).dims2()?;
    let (lk, dk) = g.value(k).dims2()?;
    let (lv, _) = g.value(v).dims2()?;
    if dq != dk {
        return Err(Error::Shape {
            op: "attention q/k",
            lhs: vec![lq, dq],
            rhs: vec![lk, dk],
        });
    }
    if lk != lv {
        return Err(Error::Shape {
            op: "attention k/v",
            lhs: vec![lk, dk],
            rhs: g.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// `Q·Kᵀ/√d_k`.
pub fn scores(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let dk = g.value(q).dims2()?.1;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    Ok(g.scale(s, 1.0 / (dk as f64).sqrt()))
}

/// `softmax(QKᵀ/√d_k + log M)·V`.
pub fn attention_softmax(g: &mut Graph, q: Var, k: Var, v: Var, mask: &MaskSpec) -> Result<Var> {
    check_qkv(g, q, k, v)?;
    let s = scores(g, q, k)?;
    mask.check(g, s)?;
    let logits = if mask.is_all_ones() {
        s
    } else {
        let bias = g.constant(mask.matrix.map(|m| if m == 1.0 { 0.0 } else { MASKED_LOGIT }));
        g.add(s, bias)?
    };
    let w = g.softmax(logits, 1)?;
    g.matmul(w, v)
}

/// Applies `σ̂` with the configured length scaling, then the multiplicative
/// mask. `len` is the sequence length entering `S(L)`.
pub fn sigma_weights(
    g: &mut Graph,
    scores: Var,
    cfg: &AttentionConfig,
    len: usize,
    mask: &MaskSpec,
    act: &Nonlinearity,
) -> Result<Var> {
    mask.check(g, scores)?;
    let s = cfg.scale_fn.factor(len);
    let x = if cfg.scale_pos.pre() && s != 1.0 { g.scale(scores, s) } else { scores };
    let w = act.apply(g, x)?;
    let post = if cfg.scale_pos.post() { s } else { 1.0 };
    if mask.is_all_ones() {
        Ok(if post != 1.0 { g.scale(w, post) } else { w })
    } else {
        let m = g.constant(mask.matrix.map(|m| m * post));
        g.mul(w, m)
    }
}

/// `(σ̂(QKᵀ/√d_k) ⊙ M)·V` for one head.
pub fn attention_sigma(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &MaskSpec,
    cfg: &AttentionConfig,
) -> Result<Var> {
    check_qkv(g, q, k, v)?;
    let len = g.value(k).dims2()?.0;
    let s = scores(g, q, k)?;
    let w = sigma_weights(g, s, cfg, len, mask, &cfg.sigma_activation.into())?;
    g.matmul(w, v)
}
