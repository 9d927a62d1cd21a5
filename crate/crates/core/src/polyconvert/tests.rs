use super::*;
use crate::error::Error;
use crate::polyfit::{Interval, Polynomial};
use crate::tensor::{PolyMode, Tensor};
use crate::training::{record_split, Batch, Dataset, Recorder, Split};
use crate::transformer::{
    AttentionConfig, AttentionKind, MlpActivation, Model, ModelConfig, NormConfig, NormKind, TaskShape,
};

fn chain(n: usize) -> PolyGraph {
    let mut g = PolyGraph::new();
    let mut x = g.input(&[1]);
    let c = g.constant(Tensor::from_vec(vec![1.01]));
    for _ in 0..n {
        x = g.binary(NodeKind::Mult, x, c);
    }
    g.set_outputs(vec![x]);
    g
}

fn fixture(norm: NormKind) -> (Model, Dataset) {
    let cfg = ModelConfig {
        depth: 1,
        d_model: 8,
        mlp_ratio: 2,
        task: TaskShape::CharLm { vocab: 5 },
        context_len: 8,
        attention: AttentionConfig::default(),
        norm: NormConfig {
            kind: norm,
            ..NormConfig::default()
        },
        mlp_activation: MlpActivation::Gelu,
        positional: true,
        seed: 5,
    };
    let stream: Vec<usize> = (0..200).map(|i| [0, 1, 2, 3, 4, 2, 1][i % 7]).collect();
    let data = Dataset::CharLm {
        vocab: vec!['a', 'b', 'c', 'd', 'e'],
        train: stream[..100].to_vec(),
        test: stream[100..].to_vec(),
        context: 8,
    };
    (Model::new(cfg).unwrap(), data)
}

fn converted(margin: f64) -> (Model, Model, Recorder, Dataset) {
    let (m, data) = fixture(NormKind::LayerNorm);
    let rec = record_split(&m, &data, Split::Test, 12, 4).unwrap();
    let plan = plan_conversion(&m, &rec, margin, &DegreeConfig::default()).unwrap();
    let p = convert(&m, &plan).unwrap();
    (m, p, rec, data)
}

#[test]
fn adds_and_mults_pass() {
    let mut g = PolyGraph::new();
    let x = g.input(&[3]);
    let y = g.binary(NodeKind::Mult, x, x);
    let z = g.binary(NodeKind::Add, x, y);
    g.set_outputs(vec![z]);
    let v = verify_polynomial(&g);
    assert!(v.pass && v.violations.is_empty());
}

#[test]
fn division_is_a_violation() {
    let mut g = PolyGraph::new();
    let x = g.input(&[2]);
    let y = g.input(&[2]);
    let d = g.binary(NodeKind::Div, x, y);
    g.set_outputs(vec![d]);
    let v = verify_polynomial(&g);
    assert!(!v.pass);
    assert_eq!(v.violations.len(), 1);
    assert_eq!(v.violations[0].node, d);
    assert_eq!(v.violations[0].kind, "div");
    assert!(v.to_text().contains("node=2 kind=div"));
    let out = g.eval(&[Tensor::from_vec(vec![1.0, 3.0]), Tensor::from_vec(vec![2.0, 4.0])]).unwrap();
    assert_eq!(out[0].data(), &[0.5, 0.75]);
}

#[test]
fn depth_of_chains() {
    let one = depth_report(&chain(1), Budget::default()).unwrap();
    assert_eq!((one.max_depth, one.bootstraps), (1, 0));
    assert_eq!(depth_report(&chain(9), Budget::default()).unwrap().bootstraps, 0);
    let ten = depth_report(&chain(10), Budget::default()).unwrap();
    assert_eq!((ten.max_depth, ten.bootstraps), (10, 1));
    assert_eq!(depth_report(&chain(19), Budget::default()).unwrap().bootstraps, 2);
    assert!(!ten.fits_without_bootstrap || ten.max_depth <= 12);
}

#[test]
fn repeated_squaring_has_depth_three() {
    let mut g = PolyGraph::new();
    let mut x = g.input(&[1]);
    for _ in 0..3 {
        x = g.binary(NodeKind::Mult, x, x);
    }
    g.set_outputs(vec![x]);
    let r = depth_report(&g, Budget::default()).unwrap();
    assert_eq!(r.max_depth, 3);
    let out = g.eval(&[Tensor::from_vec(vec![1.5])]).unwrap();
    assert_eq!(out[0].data()[0], 1.5f64.powi(8));
}

#[test]
fn free_operations_cost_nothing() {
    let mut g = PolyGraph::new();
    let x = g.input(&[2, 2]);
    let a = g.unary(NodeKind::Scale { c: -1.0 }, x);
    let b = g.unary(NodeKind::AddConst { c: 3.0 }, a);
    let c = g.unary(NodeKind::Transpose, b);
    g.set_outputs(vec![c]);
    let r = depth_report(&g, Budget::default()).unwrap();
    assert_eq!((r.max_depth, r.total_mults), (0, 0));
}

#[test]
fn cycles_are_detected() {
    let mut g = chain(2);
    let mut nodes = g.nodes().to_vec();
    nodes[2].inputs = vec![3, 1];
    g = PolyGraph::from_nodes(nodes, vec![3]).unwrap();
    assert!(matches!(depth_report(&g, Budget::default()), Err(Error::Cycle(_))));
}

#[test]
fn matmul_counts_scalar_products() {
    let mut g = PolyGraph::new();
    let x = g.input(&[2, 3]);
    let w = g.constant(Tensor::ones(&[3, 4]));
    let id = g.push(NodeKind::Linear, &[x, w], vec![2, 4], None);
    g.set_outputs(vec![id]);
    let r = depth_report(&g, Budget::default()).unwrap();
    assert_eq!((r.max_depth, r.total_mults, r.mult_nodes), (1, 24, 1));
}

#[test]
fn polynomial_circuit_matches_horner() {
    let coeffs = vec![0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 0.05, -0.02, 0.3, 0.01];
    let p = Polynomial::new(coeffs.clone(), Interval(-2.0, 2.0)).unwrap();
    let mut g = PolyGraph::new();
    let x = g.input(&[41]);
    let y = emit_polynomial(&mut g, x, &coeffs, &None);
    g.set_outputs(vec![y]);
    let xs: Vec<f64> = Interval(-2.0, 2.0).grid(41);
    let out = g.eval(&[Tensor::from_vec(xs.clone())]).unwrap();
    for (&xv, &yv) in xs.iter().zip(out[0].data()) {
        let scale: f64 = coeffs.iter().enumerate().map(|(k, c)| (c * xv.powi(k as i32)).abs()).sum();
        assert!((yv - p.eval(xv)).abs() <= 1e-10 * scale.max(1e-300), "{xv}");
    }
    // x^9 = x^8·x: depth 4, plus one scale level
    assert_eq!(depth_report(&g, Budget::default()).unwrap().max_depth, 5);
}

#[test]
fn noiseless_evaluation_is_bit_exact() {
    let (m, p, _, data) = converted(0.1);
    let _ = m;
    let batch = &data.batches(Split::Test, 1, 1).unwrap()[0];
    let (g, inputs) = lower_model(&p, batch).unwrap();
    let clean = g.eval(&inputs).unwrap();
    let s = noisy_eval(&g, &inputs, NoiseModel { epsilon: 0.0 }, 2, 9).unwrap();
    assert_eq!(s.max_deviation, 0.0);
    let mut r = crate::rng::stream(1, "t");
    assert_eq!(g.eval_noisy(&inputs, 0.0, &mut r).unwrap(), clean);
}

#[test]
fn single_add_noise_is_bounded() {
    let mut g = PolyGraph::new();
    let x = g.input(&[16]);
    let y = g.input(&[16]);
    let z = g.binary(NodeKind::Add, x, y);
    g.set_outputs(vec![z]);
    let ins = [Tensor::ones(&[16]), Tensor::full(&[16], 2.0)];
    let s = noisy_eval(&g, &ins, NoiseModel { epsilon: 1e-6 }, 20, 3).unwrap();
    assert!(s.max_deviation > 0.0 && s.max_deviation <= 1e-6);
}

#[test]
fn converted_model_lowers_to_a_polynomial_graph() {
    let (m, p, _, data) = converted(0.1);
    let batch = &data.batches(Split::Test, 1, 1).unwrap()[0];
    let (orig, _) = lower_model(&m, batch).unwrap();
    let v = verify_polynomial(&orig);
    assert!(!v.pass);
    let kinds: std::collections::BTreeSet<&str> = v.violations.iter().map(|v| v.kind.as_str()).collect();
    assert!(kinds.contains("gelu") && kinds.contains("relu") && kinds.contains("inv_sqrt"), "{kinds:?}");
    assert!(v.violations.iter().all(|v| v.site.is_some()));

    let (pg, inputs) = lower_model(&p, batch).unwrap();
    assert!(verify_polynomial(&pg).pass, "{}", verify_polynomial(&pg).to_text());
    let mut tape = crate::tensor::Graph::new();
    let (fwd, _) = crate::training::batch_loss(&mut tape, &p, batch, crate::transformer::Mode::Eval).unwrap();
    let direct = tape.value(fwd.logits);
    let lowered = &pg.eval(&inputs).unwrap()[0];
    let scale = direct.max_abs().max(1.0);
    assert!(direct.max_abs_diff(lowered) < 1e-9 * scale, "{}", direct.max_abs_diff(lowered));
    let depth = depth_report(&pg, Budget::default()).unwrap();
    assert!(depth.max_depth > 12 && depth.bootstraps > 0);
    let json: serde_json::Value = serde_json::from_str(&pg.to_json()).unwrap();
    assert_eq!(json["nodes"].as_array().unwrap().len(), pg.len());
}

#[test]
fn margin_zero_keeps_recorded_ranges() {
    let (m, data) = fixture(NormKind::LayerNorm);
    let rec = record_split(&m, &data, Split::Test, 8, 4).unwrap();
    let plan = plan_conversion(&m, &rec, 0.0, &DegreeConfig::default()).unwrap();
    assert_eq!(plan.entries.len(), m.sites().len());
    for e in &plan.entries {
        match e.target {
            crate::transformer::Target::Relu => {
                let b = e.recorded.0.abs().max(e.recorded.1.abs());
                assert_eq!((e.domain.lo(), e.domain.hi()), (-b, b));
            }
            _ => assert_eq!((e.domain.lo(), e.domain.hi()), e.recorded, "{}", e.site),
        }
    }
    let wide = plan_conversion(&m, &rec, 0.1, &DegreeConfig::default()).unwrap();
    for e in &wide.entries {
        assert!(e.domain.lo() <= e.recorded.0 && e.domain.hi() >= e.recorded.1);
        if e.target == crate::transformer::Target::InvSqrt {
            assert!(e.domain.lo() > 0.0);
        }
    }
}

#[test]
fn batchnorm_models_plan_only_activations() {
    let (m, data) = fixture(NormKind::BatchNorm);
    let rec = record_split(&m, &data, Split::Test, 8, 4);
    // BatchNorm in eval mode needs running statistics first.
    assert!(matches!(rec, Err(Error::MissingStats(_))));
    let mut m = m;
    let b = data.batches(Split::Train, 4, 4).unwrap().remove(0);
    let mut tape = crate::tensor::Graph::new();
    let (fwd, _) = crate::training::batch_loss(&mut tape, &m, &b, crate::transformer::Mode::Train).unwrap();
    m.apply_bn_updates(&fwd.bn_updates);
    let rec = record_split(&m, &data, Split::Test, 8, 4).unwrap();
    let plan = plan_conversion(&m, &rec, 0.1, &DegreeConfig::default()).unwrap();
    assert!(plan.entries.iter().all(|e| e.target != crate::transformer::Target::InvSqrt));
    let p = convert(&m, &plan).unwrap();
    assert_eq!(p.config().norm.kind, NormKind::AffineFrozen);
    let (pg, _) = lower_model(&p, &data.batches(Split::Test, 1, 1).unwrap()[0]).unwrap();
    assert!(verify_polynomial(&pg).pass);
}

#[test]
fn frozen_batchnorm_changes_no_output() {
    let (mut m, data) = fixture(NormKind::BatchNorm);
    let b = data.batches(Split::Train, 4, 4).unwrap().remove(0);
    let mut tape = crate::tensor::Graph::new();
    let (fwd, _) = crate::training::batch_loss(&mut tape, &m, &b, crate::transformer::Mode::Train).unwrap();
    m.apply_bn_updates(&fwd.bn_updates);
    let mut frozen = m.clone();
    let mut cfg = m.config().clone();
    cfg.norm.kind = NormKind::AffineFrozen;
    frozen.set_config(cfg);
    let r = fidelity_report(&m, &frozen, &data.batches(Split::Test, 2, 4).unwrap()).unwrap();
    assert!(r.max_deviation < 1e-12, "{}", r.max_deviation);
}

#[test]
fn softmax_models_are_rejected() {
    let (m, data) = fixture(NormKind::LayerNorm);
    let rec = record_split(&m, &data, Split::Test, 8, 4).unwrap();
    let plan = plan_conversion(&m, &rec, 0.1, &DegreeConfig::default()).unwrap();
    let mut cfg = m.config().clone();
    cfg.attention.kind = AttentionKind::Softmax;
    let soft = Model::new(cfg).unwrap();
    assert!(matches!(convert(&soft, &plan), Err(Error::Unsupported(_))));
}

#[test]
fn missing_ranges_are_reported() {
    let (m, _) = fixture(NormKind::LayerNorm);
    let r = plan_conversion(&m, &Recorder::new(), 0.1, &DegreeConfig::default());
    assert!(matches!(r, Err(Error::MissingRange(_))));
}

#[test]
fn conversion_is_idempotent() {
    let (_, p, rec, _) = converted(0.1);
    let plan = plan_conversion(&p, &rec, 0.1, &DegreeConfig::default()).unwrap();
    let again = convert(&p, &plan).unwrap();
    assert_eq!(again.params(), p.params());
    assert_eq!(again.config(), p.config());
    assert_eq!(again.stages(), p.stages());
}

#[test]
fn strict_mode_names_the_site() {
    let (_, p, _, _) = converted(0.0);
    let mut g = crate::tensor::Graph::new();
    let far = Batch::Tokens(vec![vec![4, 4, 4, 4, 4, 4, 4, 4, 4]]);
    let mut narrow = p.clone();
    narrow.set_poly_mode(PolyMode::Strict);
    match crate::training::batch_loss(&mut g, &narrow, &far, crate::transformer::Mode::Eval) {
        Err(Error::DomainViolation { site: Some(site), .. }) => assert!(site.starts_with("block0") || site == "final_norm"),
        other => panic!("expected a domain violation, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn identical_models_have_zero_deviation() {
    let (m, _, _, data) = converted(0.1);
    let r = fidelity_report(&m, &m, &data.batches(Split::Test, 2, 6).unwrap()).unwrap();
    assert_eq!((r.max_deviation, r.mean_deviation, r.metric_delta), (0.0, 0.0, 0.0));
    assert_eq!(r.agreement, 1.0);
    assert!(matches!(fidelity_report(&m, &m, &[]), Err(Error::EmptyDataset)));
}

#[test]
fn fidelity_degrades_as_domains_narrow() {
    let (m, _, rec, data) = converted(0.1);
    let batches = data.batches(Split::Test, 2, 12).unwrap();
    let mut devs = Vec::new();
    for factor in [1.0, 0.6, 0.3] {
        let plan = plan_conversion(&m, &rec.narrowed(factor), 0.0, &DegreeConfig::default()).unwrap();
        let p = convert(&m, &plan).unwrap();
        devs.push(fidelity_report(&m, &p, &batches).unwrap().mean_deviation);
    }
    assert!(devs[0] < devs[1] && devs[1] < devs[2], "{devs:?}");
}
