//! Multiplicative depth and bootstrap accounting on hand-built circuits.

use polyformer::polyconvert::{depth_report, emit_polynomial, Budget, NodeKind, PolyGraph};
use polyformer::Result;

fn main() -> Result<()> {
    let budget = Budget::default();

    let mut g = PolyGraph::new();
    let x = g.input(&[1]);
    let mut y = x;
    for _ in 0..3 {
        y = g.binary(NodeKind::Mult, y, y);
    }
    g.set_outputs(vec![y]);
    println!("x^8 by squaring: depth {}", depth_report(&g, budget)?.max_depth);

    for n in [9, 10, 19] {
        let mut g = PolyGraph::new();
        let x = g.input(&[1]);
        let mut y = x;
        for _ in 0..n {
            y = g.binary(NodeKind::Mult, y, x);
        }
        g.set_outputs(vec![y]);
        let r = depth_report(&g, budget)?;
        println!("{n}-multiplication chain: depth {}, bootstraps {}", r.max_depth, r.bootstraps);
    }

    let mut g = PolyGraph::new();
    let x = g.input(&[1]);
    let coeffs: Vec<f64> = (0..=15).map(|i| 1.0 / (i + 1) as f64).collect();
    let y = emit_polynomial(&mut g, x, &coeffs, &None);
    g.set_outputs(vec![y]);
    let r = depth_report(&g, budget)?;
    println!("degree-15 polynomial: depth {}, {} multiplication nodes", r.max_depth, r.mult_nodes);
    Ok(())
}
