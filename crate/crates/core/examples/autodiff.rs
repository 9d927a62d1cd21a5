//! Reverse-mode gradients on the tape, checked against central differences.

use polyformer::tensor::{grad_check, Act, Graph, ReduceKind};
use polyformer::{Result, Tensor};

fn main() -> Result<()> {
    let w = Tensor::from_rows(&[vec![0.5, -1.0, 0.25], vec![2.0, 0.1, -0.3]]);
    let x = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.1, 0.7], vec![-0.6, 0.9]]);

    let mut g = Graph::new();
    let wv = g.input(w.clone());
    let xv = g.input(x.clone());
    let h = g.matmul(wv, xv)?;
    let a = g.activation(h, Act::Gelu)?;
    let loss = g.mean_all(a);
    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item());
    println!("dL/dW = {:?}", grads.wrt(&g, wv).data());

    let err = grad_check(
        |g, w| {
            let xv = g.constant(x.clone());
            let h = g.matmul(w, xv)?;
            let s = g.softmax(h, 1)?;
            let v = g.reduce(s, ReduceKind::Var, Some(1))?;
            Ok(g.sum_all(v))
        },
        &w,
        1e-6,
    )?;
    println!("softmax/variance chain: max relative gradient error {err:.2e}");
    Ok(())
}
