use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Sigma,
}

/// Pointwise function applied to attention scores in σ-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaActivation {
    Relu,
    Gelu,
    SquaredRelu,
}

/// Length scaling `S(L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFn {
    None,
    InvSqrtLen,
    InvLen,
}

impl ScaleFn {
    pub fn factor(self, len: usize) -> f64 {
        match self {
            ScaleFn::None => 1.0,
            ScaleFn::InvSqrtLen => 1.0 / (len as f64).sqrt(),
            ScaleFn::InvLen => 1.0 / len as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePos {
    Pre,
    Post,
    Both,
}

impl ScalePos {
    pub fn pre(self) -> bool {
        matches!(self, ScalePos::Pre | ScalePos::Both)
    }

    pub fn post(self) -> bool {
        matches!(self, ScalePos::Post | ScalePos::Both)
    }
}

/// Attention variant. `scale_fn` and `scale_pos` are ignored for softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub sigma_activation: SigmaActivation,
    pub scale_fn: ScaleFn,
    pub scale_pos: ScalePos,
    pub head_count: usize,
    pub qk_batchnorm2d: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Sigma,
            sigma_activation: SigmaActivation::Relu,
            scale_fn: ScaleFn::InvSqrtLen,
            scale_pos: ScalePos::Post,
            head_count: 2,
            qk_batchnorm2d: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
    /// BatchNorm folded to `x·scale + shift` from frozen running statistics.
    AffineFrozen,
    /// LayerNorm with `1/√(σ²+ε)` evaluated by a fitted composite polynomial.
    PolyLayerNorm,
}

impl NormKind {
    pub fn is_layer(self) -> bool {
        matches!(self, NormKind::LayerNorm | NormKind::PolyLayerNorm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpBnPosition {
    AfterActivation,
    BeforeActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormConfig {
    pub kind: NormKind,
    pub extra_mlp_bn: bool,
    pub extra_mlp_bn_position: MlpBnPosition,
    pub epsilon: f64,
    /// Running-statistics update rate for batch normalization.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::LayerNorm,
            extra_mlp_bn: false,
            extra_mlp_bn_position: MlpBnPosition::AfterActivation,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskShape {
    CharLm {
        vocab: usize,
    },
    Image {
        image_size: usize,
        patch_size: usize,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub task: TaskShape,
    /// Maximum sequence length (tokens or patches).
    pub context_len: usize,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default)]
    pub norm: NormConfig,
    pub mlp_activation: MlpActivation,
    /// Learned absolute positional embeddings.
    #[serde(default = "yes")]
    pub positional: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn char_lm(vocab: usize, context_len: usize) -> Self {
        Self {
            depth: 2,
            d_model: 64,
            mlp_ratio: 4,
            task: TaskShape::CharLm { vocab },
            context_len,
            attention: AttentionConfig::default(),
            norm: NormConfig::default(),
            mlp_activation: MlpActivation::Gelu,
            positional: true,
            seed: 0,
        }
    }

    pub fn image(image_size: usize, patch_size: usize, num_classes: usize) -> Self {
        let patches = (image_size / patch_size.max(1)).pow(2);
        Self {
            depth: 2,
            d_model: 48,
            mlp_ratio: 2,
            task: TaskShape::Image {
                image_size,
                patch_size,
                num_classes,
            },
            context_len: patches,
            attention: AttentionConfig {
                qk_batchnorm2d: true,
                ..AttentionConfig::default()
            },
            norm: NormConfig {
                kind: NormKind::BatchNorm,
                extra_mlp_bn: true,
                ..NormConfig::default()
            },
            mlp_activation: MlpActivation::Relu,
            positional: true,
            seed: 0,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.attention.head_count.max(1)
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 || self.d_model == 0 || self.mlp_ratio == 0 || self.context_len == 0 {
            return bad("depth, d_model, mlp_ratio and context_len must be positive");
        }
        if self.attention.head_count == 0 || self.d_model % self.attention.head_count != 0 {
            return bad("d_model must be divisible by a positive head_count");
        }
        if !(self.norm.epsilon > 0.0) {
            return bad("norm epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.norm.momentum) {
            return bad("norm momentum must lie in [0, 1]");
        }
        match self.task {
            TaskShape::CharLm { vocab } if vocab == 0 => bad("vocab must be positive"),
            TaskShape::Image {
                image_size,
                patch_size,
                num_classes,
            } => {
                if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
                    return bad("image size must be a positive multiple of patch_size");
                }
                if num_classes < 2 {
                    return bad("need at least two classes");
                }
                if (image_size / patch_size).pow(2) != self.context_len {
                    return bad("context_len must equal the number of patches");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
