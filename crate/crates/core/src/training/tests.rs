use super::*;
use crate::error::Error;
use crate::tensor::{Graph, Tensor};
use crate::transformer::{
    AttentionConfig, MlpActivation, Model, ModelConfig, NormConfig, NormKind, SiteRole, Tap, TaskShape,
};

fn tap(g: &mut Graph, site: &str, role: SiteRole, rows: &[Vec<f64>]) -> Tap {
    let v = g.input(Tensor::from_rows(rows));
    Tap {
        site: site.into(),
        layer: 0,
        role,
        vars: vec![v],
    }
}

fn pattern_lm() -> (ModelConfig, Dataset) {
    let cfg = ModelConfig {
        depth: 1,
        d_model: 8,
        mlp_ratio: 2,
        task: TaskShape::CharLm { vocab: 5 },
        context_len: 8,
        attention: AttentionConfig::default(),
        norm: NormConfig::default(),
        mlp_activation: MlpActivation::Gelu,
        positional: true,
        seed: 11,
    };
    let stream: Vec<usize> = (0..400).map(|i| [0, 1, 2, 3, 4, 2][i % 6]).collect();
    let data = Dataset::CharLm {
        vocab: vec!['a', 'b', 'c', 'd', 'e'],
        train: stream[..300].to_vec(),
        test: stream[300..].to_vec(),
        context: 8,
    };
    (cfg, data)
}

#[test]
fn range_loss_examples() {
    let mut g = Graph::new();
    let one = tap(&mut g, "a", SiteRole::MlpActivation, &[vec![-3.0, 2.0], vec![0.5, 1.0]]);
    let l = loss_activation_range(&mut g, &[one.clone()], None).unwrap();
    assert_eq!(g.value(l).item(), 3.0);
    let a = tap(&mut g, "a", SiteRole::MlpActivation, &[vec![-1.0, 4.0]]);
    let b = tap(&mut g, "b", SiteRole::AttentionActivation, &[vec![-5.0, 2.0]]);
    let l = loss_activation_range(&mut g, &[a, b], None).unwrap();
    assert_eq!(g.value(l).item(), 9.0);
    let z = tap(&mut g, "z", SiteRole::MlpActivation, &[vec![0.0, 0.0]]);
    let l = loss_activation_range(&mut g, &[z], None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn range_loss_gradient_hits_only_the_extremum() {
    let mut g = Graph::new();
    let t = tap(&mut g, "a", SiteRole::MlpActivation, &[vec![-3.0, 2.0], vec![0.5, 1.0]]);
    let l = loss_activation_range(&mut g, &[t.clone()], None).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(&g, t.vars[0]).data(), &[-1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn variance_loss_examples() {
    let mut g = Graph::new();
    let v = g.input(Tensor::from_vec(vec![1.0, 4.0]));
    let one = Tap {
        site: "n".into(),
        layer: 0,
        role: SiteRole::LayerNorm,
        vars: vec![v],
    };
    let l = loss_variance(&mut g, &[one], None).unwrap();
    assert_eq!(g.value(l).item(), 4.0);
    let a = g.input(Tensor::from_vec(vec![2.5, 1.0]));
    let b = g.input(Tensor::from_vec(vec![7.0, 0.0]));
    let taps: Vec<Tap> = [a, b]
        .iter()
        .map(|&v| Tap {
            site: "n".into(),
            layer: 0,
            role: SiteRole::LayerNorm,
            vars: vec![v],
        })
        .collect();
    let l = loss_variance(&mut g, &taps, None).unwrap();
    assert_eq!(g.value(l).item(), 9.5);
    let l = loss_variance(&mut g, &[], None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn value_losses_match_records() {
    let r = |min, max| RangeRecord {
        site: "s".into(),
        layer: 0,
        role: SiteRole::MlpActivation,
        min,
        max,
    };
    assert_eq!(range_loss_value(&[r(-3.0, 2.0)]), 3.0);
    assert_eq!(range_loss_value(&[r(-1.0, 4.0), r(-5.0, 2.0)]), 9.0);
}

#[test]
fn combined_objective_examples() {
    let mut g = Graph::new();
    let orig = g.input(Tensor::scalar(2.0));
    let range = g.input(Tensor::scalar(3.0));
    let var = g.input(Tensor::scalar(7.0));
    let zero = combined_objective(&mut g, orig, range, var, ObjectiveWeights { alpha: 0.0, beta: 0.0 }).unwrap();
    assert_eq!(zero, orig);
    let five = combined_objective(&mut g, orig, range, var, ObjectiveWeights { alpha: 1.0, beta: 0.0 }).unwrap();
    assert_eq!(g.value(five).item(), 5.0);
}

#[test]
fn smooth_max_bounds_hard_max() {
    let mut g = Graph::new();
    let t = tap(&mut g, "a", SiteRole::MlpActivation, &[vec![-3.0, 2.0]]);
    let hard = loss_activation_range(&mut g, &[t.clone()], None).unwrap();
    let soft = loss_activation_range(&mut g, &[t], Some(0.05)).unwrap();
    let (h, s) = (g.value(hard).item(), g.value(soft).item());
    assert!(s >= h && s - h < 0.05 * 2f64.ln() + 1e-12);
}

#[test]
fn zero_inputs_record_zero_ranges() {
    let cfg = ModelConfig {
        depth: 1,
        d_model: 8,
        mlp_ratio: 2,
        task: TaskShape::Image {
            image_size: 4,
            patch_size: 2,
            num_classes: 2,
        },
        context_len: 4,
        attention: AttentionConfig::default(),
        norm: NormConfig::default(),
        mlp_activation: MlpActivation::Relu,
        positional: false,
        seed: 2,
    };
    let m = Model::new(cfg).unwrap();
    let batch = Batch::Images {
        images: vec![Tensor::zeros(&[4, 4]); 2],
        labels: vec![0, 1],
    };
    let mut rec = Recorder::new();
    record_ranges(&m, &batch, &mut rec).unwrap();
    assert_eq!(rec.ranges().count(), 2);
    assert!(rec.ranges().all(|r| r.min == 0.0 && r.max == 0.0));
    assert!(rec.variances().all(|v| v.max() == 0.0 && v.mean() == 0.0));
}

#[test]
fn constant_embedding_sequence_has_zero_first_variance() {
    let (mut cfg, _) = pattern_lm();
    cfg.positional = false;
    let mut m = Model::new(cfg).unwrap();
    let e = m.param_mut("embed.weight").unwrap();
    for c in 0..8 {
        e.set2(3, c, 0.5);
    }
    let mut rec = Recorder::new();
    record_ranges(&m, &Batch::Tokens(vec![vec![3; 6]]), &mut rec).unwrap();
    assert_eq!(rec.variance("block0.norm1").unwrap().max(), 0.0);
}

#[test]
fn recorder_is_monotone_within_a_window() {
    let (cfg, data) = pattern_lm();
    let m = Model::new(cfg).unwrap();
    let batches = data.batches(Split::Train, 2, 8).unwrap();
    let mut rec = Recorder::new();
    let mut prev: Option<Recorder> = None;
    for b in &batches {
        record_ranges(&m, b, &mut rec).unwrap();
        if let Some(p) = &prev {
            for r in p.ranges() {
                let now = rec.range(&r.site).unwrap();
                assert!(now.max >= r.max && now.min <= r.min);
            }
            for v in p.variances() {
                assert!(rec.variance(&v.site).unwrap().max() >= v.max());
            }
        }
        prev = Some(rec.clone());
    }
    let rows = rec.history_rows(3);
    let csv = history_csv(&rows);
    assert!(csv.starts_with(HISTORY_HEADER));
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (cfg, data) = pattern_lm();
    let mut m = Model::new(cfg).unwrap();
    let before = m.params().to_vec();
    let tc = TrainConfig {
        steps: 5,
        lr: 0.0,
        epochs: 1,
        eval_examples: 4,
        ..TrainConfig::default()
    };
    train(&mut m, &data, TrainStage::Baseline, &tc, 1).unwrap();
    assert_eq!(m.params(), &before[..]);
}

#[test]
fn single_batch_overfit_decreases_loss() {
    let (cfg, data) = pattern_lm();
    let mut m = Model::new(cfg).unwrap();
    let batch = data.batches(Split::Train, 4, 4).unwrap().remove(0);
    let mut opt = AdamW::new(m.params().len(), 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let mut g = Graph::new();
        let (_, loss) = batch_loss(&mut g, &m, &batch, crate::transformer::Mode::Train).unwrap();
        let value = g.value(loss).item();
        assert!(value < last, "{value} !< {last}");
        last = value;
        let grads = g.backward(loss).unwrap();
        let updates: Vec<_> = g.param_vars().filter_map(|(p, v)| grads.get(v).map(|t| (p, t.clone()))).collect();
        for (p, grad) in updates {
            if m.params()[p].trainable {
                opt.step(p, m.param_value_mut(p), &grad, 1e-2, false);
            }
        }
    }
}

#[test]
fn range_min_requires_baseline() {
    let (cfg, data) = pattern_lm();
    let mut m = Model::new(cfg).unwrap();
    let r = train(&mut m, &data, TrainStage::RangeMin, &TrainConfig::default(), 0);
    assert!(matches!(r, Err(Error::Stage { .. })));
}

#[test]
fn divergence_is_reported() {
    let (cfg, data) = pattern_lm();
    let mut m = Model::new(cfg).unwrap();
    m.param_mut("head.weight").unwrap().data_mut()[0] = f64::NAN;
    let tc = TrainConfig {
        steps: 3,
        epochs: 1,
        eval_examples: 2,
        ..TrainConfig::default()
    };
    match train(&mut m, &data, TrainStage::Baseline, &tc, 0) {
        Err(Error::Diverged { step: 0, detail }) => assert!(detail.contains("non-finite")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_is_deterministic_and_records_history() {
    let (cfg, data) = pattern_lm();
    let tc = TrainConfig {
        steps: 12,
        epochs: 3,
        eval_examples: 6,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::new(cfg.clone()).unwrap();
        let out = train(&mut m, &data, TrainStage::Baseline, &tc, 4).unwrap();
        (m.params().to_vec(), out)
    };
    let (pa, a) = run();
    let (pb, b) = run();
    assert_eq!(pa, pb);
    assert_eq!(a.losses, b.losses);
    let epochs: std::collections::BTreeSet<usize> = a.history.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs.into_iter().collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert!(a.metrics.perplexity.unwrap() < 5.0);
}

#[test]
fn dataset_batches_and_digest_are_stable() {
    let (_, data) = pattern_lm();
    let b = data.batches(Split::Test, 3, 100).unwrap();
    assert_eq!(b.iter().map(Batch::len).sum::<usize>(), 99 / 8);
    assert_eq!(data.digest(), data.clone().digest());
    let empty = Dataset::Image {
        size: 4,
        classes: 2,
        train: vec![],
        test: vec![],
    };
    assert!(matches!(empty.batches(Split::Test, 2, 2), Err(Error::EmptyDataset)));
    let _ = NormKind::LayerNorm;
}
