use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::Dataset;

/// Character vocabulary of the language-modeling corpus, in token order.
pub const CHAR_VOCAB: &str = "\n ,.abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CharLm,
    SynthImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Characters in the generated corpus.
    pub corpus_chars: usize,
    /// Fraction of the corpus held out as the test split.
    pub test_fraction: f64,
    pub image_size: usize,
    pub classes: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_chars: 100_000,
            test_fraction: 0.1,
            image_size: 16,
            classes: 4,
            train_images: 512,
            test_images: 128,
            noise: 0.3,
        }
    }
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the bird", "a farmer", "the child", "our teacher", "the river",
    "a small fox", "the king", "the queen", "his friend", "the baker",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "follows", "carries", "watches", "paints", "keeps", "meets", "hears", "brings",
];
const OBJECTS: &[&str] = &[
    "the red ball", "a green apple", "the quiet house", "a long road", "the warm bread", "a blue boat", "the tall tree",
    "an open door", "the bright moon", "a wooden box", "the cold water",
];
const TAILS: &[&str] = &[
    "in the morning", "near the hill", "after the rain", "by the sea", "with great care", "every day", "at night",
    "under the bridge",
];

/// Deterministic English-like corpus built from a small grammar. The text
/// is the same for every seed.
pub fn corpus(chars: usize) -> String {
    let mut r = rng::stream(0, "corpus");
    let mut s = String::with_capacity(chars + 64);
    while s.len() < chars {
        let mut sentence = format!(
            "{} {} {}",
            SUBJECTS[r.random_range(0..SUBJECTS.len())],
            VERBS[r.random_range(0..VERBS.len())],
            OBJECTS[r.random_range(0..OBJECTS.len())]
        );
        if r.random_bool(0.5) {
            sentence.push(' ');
            sentence.push_str(TAILS[r.random_range(0..TAILS.len())]);
        }
        if r.random_bool(0.3) {
            sentence.push_str(", and ");
            sentence.push_str(SUBJECTS[r.random_range(0..SUBJECTS.len())]);
            sentence.push(' ');
            sentence.push_str(VERBS[r.random_range(0..VERBS.len())]);
            sentence.push_str(" it");
        }
        sentence.push('.');
        sentence.push(if r.random_bool(0.2) { '\n' } else { ' ' });
        s.push_str(&sentence);
    }
    s.truncate(chars);
    s
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            CHAR_VOCAB
                .chars()
                .position(|v| v == c)
                .ok_or_else(|| Error::Config(format!("character {c:?} is outside the vocabulary")))
        })
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    let vocab: Vec<char> = CHAR_VOCAB.chars().collect();
    tokens.iter().map(|&t| vocab.get(t).copied().unwrap_or('?')).collect()
}

/// One `size × size` image of class `label`: a bar through a random point
/// near the center at angle `label·π/classes`, plus Gaussian noise.
pub fn oriented_bar(size: usize, label: usize, classes: usize, noise: f64, r: &mut impl Rng) -> Tensor {
    let angle = std::f64::consts::PI * label as f64 / classes as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let c = (size as f64 - 1.0) / 2.0;
    let cx = c + r.random_range(-1.5..1.5);
    let cy = c + r.random_range(-1.5..1.5);
    let width = r.random_range(0.8..1.6);
    let mut img = Tensor::zeros(&[size, size]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let dist = (px * dy - py * dx).abs();
            let on = if dist <= width { 1.0 } else { 0.0 };
            img.set2(y, x, on + noise * rng::normal(r));
        }
    }
    img
}

fn balanced_images(n: usize, cfg: &DataConfig, r: &mut impl Rng) -> Vec<(Tensor, usize)> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(r);
    labels
        .into_iter()
        .map(|l| (oriented_bar(cfg.image_size, l, cfg.classes, cfg.noise, r), l))
        .collect()
}

/// Train/test splits for a task. `context` is the model's sequence length
/// for language modeling.
pub fn make_dataset(task: TaskKind, cfg: &DataConfig, context: usize, seed: u64) -> Result<Dataset> {
    match task {
        TaskKind::CharLm => {
            if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
                return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
            }
            let tokens = encode(&corpus(cfg.corpus_chars))?;
            let cut = ((1.0 - cfg.test_fraction) * tokens.len() as f64) as usize;
            let data = Dataset::CharLm {
                vocab: CHAR_VOCAB.chars().collect(),
                train: tokens[..cut].to_vec(),
                test: tokens[cut..].to_vec(),
                context,
            };
            data.batches(crate::training::Split::Test, 1, 1)?;
            Ok(data)
        }
        TaskKind::SynthImage => {
            if cfg.classes < 2 || cfg.image_size < 4 || cfg.train_images == 0 || cfg.test_images == 0 {
                return Err(Error::Config(
                    "synthetic images need >= 2 classes, size >= 4 and nonempty splits".into(),
                ));
            }
            let mut r = rng::stream(seed, "data/synth_image");
            let train = balanced_images(cfg.train_images, cfg, &mut r);
            let test = balanced_images(cfg.test_images, cfg, &mut r);
            Ok(Dataset::Image {
                size: cfg.image_size,
                classes: cfg.classes,
                train,
                test,
            })
        }
    }
}
