use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh graph and the input leaf, and returns the scalar output.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(&g, xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|g, x| Ok(g.sum_all(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.2, -0.4]);
        let err = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum_all(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
