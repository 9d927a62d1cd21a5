//! Softmax-free attention with a multiplicative mask: masked keys have no
//! influence, and the output is compared with softmax attention.

use polyformer::rng;
use polyformer::tensor::Graph;
use polyformer::transformer::{attention_sigma, attention_softmax, AttentionConfig, MaskSpec};
use polyformer::{Result, Tensor};
use rand::Rng;

fn random(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_rows(&(0..rows).map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>())
}

fn main() -> Result<()> {
    let mut r = rng::stream(0, "example/attention");
    let (len, dk) = (6, 4);
    let (q, k, v) = (random(&mut r, len, dk), random(&mut r, len, dk), random(&mut r, len, dk));
    let mask = MaskSpec::causal(len);
    let cfg = AttentionConfig::default();

    let run = |k: &Tensor, v: &Tensor, sigma: bool| -> Result<Tensor> {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = if sigma {
            attention_sigma(&mut g, qv, kv, vv, &mask, &cfg)?
        } else {
            attention_softmax(&mut g, qv, kv, vv, &mask)?
        };
        Ok(g.value(out).clone())
    };

    let base = run(&k, &v, true)?;
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for c in 0..dk {
        k2.set2(len - 1, c, 100.0);
        v2.set2(len - 1, c, -100.0);
    }
    let moved = run(&k2, &v2, true)?;
    for i in 0..len {
        let d: f64 = base.row(i).iter().zip(moved.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("query {i}: change after editing the last key/value = {d:.3e}");
    }
    let soft = run(&k, &v, false)?;
    println!("sigma vs softmax max difference: {:.3e}", base.max_abs_diff(&soft));
    Ok(())
}
