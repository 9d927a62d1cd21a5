use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{image_forward, lm_forward, Forward, Mode, Model};

/// Train/test splits for one of the two desk-scale tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Dataset {
    CharLm {
        vocab: Vec<char>,
        train: Vec<usize>,
        test: Vec<usize>,
        /// Model context `L`; samples are windows of `L + 1` tokens.
        context: usize,
    },
    Image {
        size: usize,
        classes: usize,
        train: Vec<(Tensor, usize)>,
        test: Vec<(Tensor, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Tokens(Vec<Vec<usize>>),
    Images { images: Vec<Tensor>, labels: Vec<usize> },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Tokens(w) => w.len(),
            Batch::Images { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits into single-example batches.
    pub fn examples(&self) -> Vec<Batch> {
        match self {
            Batch::Tokens(w) => w.iter().map(|x| Batch::Tokens(vec![x.clone()])).collect(),
            Batch::Images { images, labels } => images
                .iter()
                .zip(labels)
                .map(|(i, &l)| Batch::Images {
                    images: vec![i.clone()],
                    labels: vec![l],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn is_lm(&self) -> bool {
        matches!(self, Dataset::CharLm { .. })
    }

    fn check(&self) -> Result<()> {
        let empty = match self {
            Dataset::CharLm {
                train, test, context, ..
            } => train.len() <= *context || test.len() <= *context,
            Dataset::Image { train, test, .. } => train.is_empty() || test.is_empty(),
        };
        if empty {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    /// Random training batch.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize) -> Result<Batch> {
        self.check()?;
        Ok(match self {
            Dataset::CharLm { train, context, .. } => Batch::Tokens(
                (0..batch)
                    .map(|_| {
                        let s = rng.random_range(0..train.len() - context);
                        train[s..s + context + 1].to_vec()
                    })
                    .collect(),
            ),
            Dataset::Image { train, .. } => {
                let picks: Vec<&(Tensor, usize)> = (0..batch).map(|_| &train[rng.random_range(0..train.len())]).collect();
                Batch::Images {
                    images: picks.iter().map(|p| p.0.clone()).collect(),
                    labels: picks.iter().map(|p| p.1).collect(),
                }
            }
        })
    }

    /// Deterministic batches covering at most `max_examples` examples of a
    /// split (non-overlapping windows for language modeling).
    pub fn batches(&self, split: Split, batch: usize, max_examples: usize) -> Result<Vec<Batch>> {
        self.check()?;
        let batch = batch.max(1);
        Ok(match self {
            Dataset::CharLm {
                train, test, context, ..
            } => {
                let src = if split == Split::Train { train } else { test };
                let windows: Vec<Vec<usize>> = (0..(src.len() - 1) / context)
                    .map(|k| src[k * context..k * context + context + 1].to_vec())
                    .take(max_examples)
                    .collect();
                windows.chunks(batch).map(|c| Batch::Tokens(c.to_vec())).collect()
            }
            Dataset::Image { train, test, .. } => {
                let src = if split == Split::Train { train } else { test };
                src.iter()
                    .take(max_examples)
                    .collect::<Vec<_>>()
                    .chunks(batch)
                    .map(|c| Batch::Images {
                        images: c.iter().map(|p| p.0.clone()).collect(),
                        labels: c.iter().map(|p| p.1).collect(),
                    })
                    .collect()
            }
        })
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset serialization cannot fail");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Forward pass and task loss for one batch.
pub fn batch_loss(g: &mut Graph, model: &Model, batch: &Batch, mode: Mode) -> Result<(Forward, Var)> {
    match batch {
        Batch::Tokens(w) => lm_forward(g, model, w, mode),
        Batch::Images { images, labels } => image_forward(g, model, images, labels, mode),
    }
}

/// Targets aligned with the rows of [`Forward::logits`].
pub fn batch_targets(batch: &Batch) -> Vec<usize> {
    match batch {
        Batch::Tokens(w) => w.iter().flat_map(|x| x[1..].iter().copied()).collect(),
        Batch::Images { labels, .. } => labels.clone(),
    }
}

/// Held-out quality: mean loss plus perplexity (language) or accuracy (images).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl Metrics {
    /// Higher is better: accuracy, or negative perplexity.
    pub fn score(&self) -> f64 {
        self.accuracy.unwrap_or_else(|| -self.perplexity.unwrap_or(f64::INFINITY))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<Metrics> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut loss, mut rows, mut correct) = (0.0, 0usize, 0usize);
    let mut lm = false;
    for b in batches {
        let mut g = Graph::new();
        let (fwd, l) = batch_loss(&mut g, model, b, Mode::Eval)?;
        let targets = batch_targets(b);
        loss += g.value(l).item() * targets.len() as f64;
        rows += targets.len();
        let logits = g.value(fwd.logits);
        correct += targets
            .iter()
            .enumerate()
            .filter(|(i, &t)| argmax(logits.row(*i)) == t)
            .count();
        lm = matches!(b, Batch::Tokens(_));
    }
    let loss = loss / rows as f64;
    Ok(Metrics {
        loss,
        perplexity: lm.then(|| loss.exp()),
        accuracy: (!lm).then(|| correct as f64 / rows as f64),
    })
}
