//! Desk-scale transformer covering the attention and normalization variants
//! needed for encrypted inference: softmax or pointwise σ-attention with
//! length scaling and multiplicative masks, LayerNorm, BatchNorm (with an
//! optional per-head BatchNorm2D on attention scores and an extra BatchNorm
//! in the MLP), and their polynomial or frozen-affine replacements.
//!
//! Activations are token-major: a batch of `B` sequences of length `L` is a
//! `[B·L × d_model]` matrix.

mod attention;
mod checkpoint;
mod config;
mod model;

pub use attention::{attention_sigma, attention_softmax, scores, sigma_weights, MaskSpec, Nonlinearity, MASKED_LOGIT};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    AttentionConfig, AttentionKind, MlpActivation, MlpBnPosition, ModelConfig, NormConfig, NormKind, ScaleFn, ScalePos,
    SigmaActivation, TaskShape,
};
pub use model::{patchify, BnUpdate, Forward, Mode, Model, ParamEntry, SiteInfo, SiteRole, Tap, Target};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Next-token prediction on windows of `L + 1` tokens: inputs are the first
/// `L`, targets the last `L`. Returns the forward pass and the mean
/// cross-entropy.
pub fn lm_forward(g: &mut Graph, model: &Model, windows: &[Vec<usize>], mode: Mode) -> Result<(Forward, Var)> {
    if windows.iter().any(|w| w.len() < 2) {
        return Err(Error::Config("language-model windows need at least two tokens".into()));
    }
    let inputs: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let fwd = model.forward_tokens(g, &inputs, mode)?;
    let loss = g.cross_entropy(fwd.logits, &targets)?;
    Ok((fwd, loss))
}

/// Classification of images with the given labels.
pub fn image_forward(
    g: &mut Graph,
    model: &Model,
    images: &[Tensor],
    labels: &[usize],
    mode: Mode,
) -> Result<(Forward, Var)> {
    if images.len() != labels.len() {
        return Err(Error::Shape {
            op: "image labels",
            lhs: vec![images.len()],
            rhs: vec![labels.len()],
        });
    }
    let fwd = model.forward_images(g, images, mode)?;
    let loss = g.cross_entropy(fwd.logits, labels)?;
    Ok((fwd, loss))
}

pub fn perplexity(mean_cross_entropy: f64) -> f64 {
    mean_cross_entropy.exp()
}
