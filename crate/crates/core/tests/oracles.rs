mod common;

use common::*;
use polyformer::polyconvert::{depth_report, emit_polynomial, Budget, PolyGraph};
use polyformer::polyfit::{remez_fit, Interval, RemezOptions};
use polyformer::rng;
use polyformer::tensor::{gelu, gelu_grad, Graph};
use polyformer::Tensor;

#[test]
fn abs_degree_two_matches_dense_grid_minimax() {
    let fit = remez_fit(f64::abs, Interval::new(-1.0, 1.0).unwrap(), 2, &RemezOptions::default()).unwrap();
    let oracle = lawson_minimax(f64::abs, -1.0, 1.0, 2, 4001, 4000);
    assert!((oracle - 0.125).abs() < 1e-4, "oracle {oracle}");
    assert!((fit.minimax_error - oracle).abs() < 1e-4);
    let c = fit.poly.coeffs();
    assert!((c[0] - 0.125).abs() < 1e-9 && c[1].abs() < 1e-9 && (c[2] - 1.0).abs() < 1e-9);
}

#[test]
fn gelu_matches_erf_definition() {
    for i in -4000..=4000 {
        let x = i as f64 / 200.0;
        assert!((gelu(x) - gelu_erf(x)).abs() < 1e-15, "x = {x}");
        let h = 1e-6;
        let fd = (gelu_erf(x + h) - gelu_erf(x - h)) / (2.0 * h);
        assert!((gelu_grad(x) - fd).abs() < 1e-8, "x = {x}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng::stream(1, "oracle/matmul");
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = random_tensor(&mut r, &[m, k], -3.0, 3.0);
        let b = random_tensor(&mut r, &[k, n], -3.0, 3.0);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&matmul_triple_loop(&a, &b)) < 1e-12);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(c), &fast);
    }
}

#[test]
fn every_op_passes_finite_differences() {
    for seed in 0..5 {
        for (name, shape, scale, f) in op_cases(seed) {
            let x = op_input(seed, &shape, scale);
            let e = fd_relative_error(f.as_ref(), &x, 1e-6, 1e-6).unwrap();
            assert!(e < 1e-4, "{name} seed {seed}: {e:e}");
        }
    }
}

#[test]
fn combined_objective_passes_finite_differences() {
    for seed in 0..4 {
        let probe = ObjectiveProbe::new(seed, seed % 2 == 1);
        let e = probe.check(2, 1e-6, 1e-4, seed).unwrap();
        assert!(e < 1e-4, "seed {seed}: {e:e}");
    }
}

#[test]
fn polynomial_depth_matches_path_enumeration() {
    let mut r = rng::stream(2, "oracle/depth");
    for degree in 1..=20 {
        let coeffs: Vec<f64> = (0..=degree).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
        let mut g = PolyGraph::new();
        let x = g.input(&[1]);
        let y = emit_polynomial(&mut g, x, &coeffs, &None);
        g.set_outputs(vec![y]);
        let d = depth_report(&g, Budget::default()).unwrap().max_depth;
        assert_eq!(d, path_enumeration_depth(&g), "degree {degree}");
        let horner = coeffs.iter().rev().fold(0.0, |acc, c| acc * 0.7 + c);
        let out = g.eval(&[Tensor::from_vec(vec![0.7])]).unwrap();
        assert!((out[0].item() - horner).abs() <= 1e-12 * horner.abs().max(1.0));
    }
}
