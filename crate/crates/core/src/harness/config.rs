use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{DataConfig, TaskKind};
use crate::error::{Error, Result};
use crate::polyconvert::{Budget, DegreeConfig};
use crate::training::{ObjectiveWeights, TrainConfig};
use crate::transformer::{ModelConfig, TaskShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Baseline,
    RangeMin,
    Convert,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 3] = [PipelineStage::Baseline, PipelineStage::RangeMin, PipelineStage::Convert];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Baseline => "baseline",
            PipelineStage::RangeMin => "range_min",
            PipelineStage::Convert => "convert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected baseline, range_min or convert")))
    }

    pub fn previous(self) -> Option<Self> {
        match self {
            PipelineStage::Baseline => None,
            PipelineStage::RangeMin => Some(PipelineStage::Baseline),
            PipelineStage::Convert => Some(PipelineStage::RangeMin),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    /// Domain widening as a fraction of the recorded span.
    pub margin: f64,
    pub degrees: DegreeConfig,
    pub budget: Budget,
    /// Test examples used to record conversion ranges.
    pub range_examples: usize,
    /// Test examples used for paired fidelity evaluation.
    pub fidelity_examples: usize,
    pub noise_epsilon: f64,
    pub noise_trials: usize,
    pub noise_examples: usize,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            degrees: DegreeConfig::default(),
            budget: Budget::default(),
            range_examples: 64,
            fidelity_examples: 32,
            noise_epsilon: 1e-6,
            noise_trials: 100,
            noise_examples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: Vec<PipelineStage>,
    pub baseline: TrainConfig,
    pub range_min: TrainConfig,
    pub conversion: ConversionConfig,
    /// Master seed; overrides the model's own seed.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to start from when the first stage is not `baseline`.
    pub resume_from: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::char_lm()
    }
}

impl ExperimentConfig {
    /// Character language model: depth 2, width 64, two heads, context 64.
    pub fn char_lm() -> Self {
        Self {
            name: "char_lm".into(),
            task: TaskKind::CharLm,
            model: ModelConfig::char_lm(super::data::CHAR_VOCAB.chars().count(), 64),
            data: DataConfig::default(),
            stages: PipelineStage::ALL.to_vec(),
            baseline: TrainConfig::default(),
            range_min: TrainConfig {
                steps: 150,
                lr: 1e-3,
                warmup_steps: 10,
                weights: ObjectiveWeights { alpha: 0.01, beta: 0.01 },
                ..TrainConfig::default()
            },
            conversion: ConversionConfig::default(),
            seed: 0,
            out_dir: None,
            resume_from: None,
        }
    }

    /// Oriented-bar images: depth 2, width 48, patch 4, BatchNorm stack.
    pub fn synth_image() -> Self {
        let data = DataConfig::default();
        Self {
            name: "synth_image".into(),
            task: TaskKind::SynthImage,
            model: ModelConfig::image(data.image_size, 4, data.classes),
            data,
            ..Self::char_lm()
        }
    }

    /// Small character-LM configuration for tests and quick runs.
    pub fn char_lm_fixture() -> Self {
        let mut cfg = Self::char_lm();
        cfg.name = "char_lm_fixture".into();
        cfg.data.corpus_chars = 20_000;
        cfg.model = ModelConfig {
            depth: 1,
            d_model: 32,
            mlp_ratio: 2,
            context_len: 16,
            ..cfg.model
        };
        cfg.baseline = TrainConfig {
            steps: 150,
            batch_size: 8,
            lr: 5e-3,
            warmup_steps: 10,
            epochs: 3,
            eval_examples: 32,
            ..TrainConfig::default()
        };
        cfg.range_min = TrainConfig {
            steps: 100,
            lr: 2e-3,
            epochs: 2,
            ..cfg.baseline.clone()
        };
        cfg.range_min.weights = ObjectiveWeights { alpha: 0.01, beta: 0.05 };
        cfg.conversion.range_examples = 48;
        cfg.conversion.fidelity_examples = 24;
        cfg.conversion.noise_trials = 100;
        cfg.conversion.noise_examples = 2;
        cfg
    }

    /// Small synthetic-image configuration for tests and quick runs.
    pub fn synth_image_fixture() -> Self {
        let mut cfg = Self::synth_image();
        cfg.name = "synth_image_fixture".into();
        cfg.data.train_images = 256;
        cfg.data.test_images = 64;
        cfg.model = ModelConfig {
            depth: 1,
            d_model: 24,
            ..cfg.model
        };
        cfg.baseline = TrainConfig {
            steps: 120,
            batch_size: 16,
            lr: 5e-3,
            warmup_steps: 10,
            epochs: 3,
            eval_examples: 64,
            ..TrainConfig::default()
        };
        cfg.range_min = TrainConfig {
            steps: 60,
            lr: 2e-3,
            epochs: 2,
            ..cfg.baseline.clone()
        };
        cfg.range_min.weights = ObjectiveWeights { alpha: 0.01, beta: 0.01 };
        cfg.conversion.range_examples = 64;
        cfg.conversion.fidelity_examples = 64;
        cfg.conversion.noise_trials = 100;
        cfg.conversion.noise_examples = 8;
        cfg
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match (self.task, &self.model.task) {
            (TaskKind::CharLm, TaskShape::CharLm { vocab }) if *vocab == super::data::CHAR_VOCAB.chars().count() => {}
            (TaskKind::SynthImage, TaskShape::Image { image_size, num_classes, .. })
                if *image_size == self.data.image_size && *num_classes == self.data.classes => {}
            _ => {
                return Err(Error::Config(
                    "model task shape does not match the dataset (vocabulary, image size or class count)".into(),
                ))
            }
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "stages must be distinct and ordered baseline, range_min, convert".into(),
            ));
        }
        self.baseline.weights.validate()?;
        self.range_min.weights.validate()?;
        if !(self.conversion.margin >= 0.0) {
            return Err(Error::Config("conversion margin must be nonnegative".into()));
        }
        Ok(())
    }

    /// Stages from the first configured one up to and including `last`.
    pub fn truncate_to(&mut self, last: PipelineStage) -> Result<()> {
        self.stages.retain(|s| *s <= last);
        if self.stages.is_empty() {
            return Err(Error::Config(format!("no configured stage at or before {}", last.as_str())));
        }
        Ok(())
    }
}
