//! Minimax fits by Remez exchange: |x| at degree 2 and GELU at higher degrees.

use polyformer::polyfit::{approx_error, remez_fit, Interval, RemezOptions};
use polyformer::tensor::gelu;
use polyformer::Result;

fn main() -> Result<()> {
    let opts = RemezOptions::default();
    let abs = remez_fit(f64::abs, Interval::new(-1.0, 1.0)?, 2, &opts)?;
    println!("|x| degree 2: coeffs {:?}, minimax error {:.6}", abs.poly.coeffs(), abs.minimax_error);

    let domain = Interval::new(-8.0, 8.0)?;
    for degree in [7, 15, 31] {
        let fit = remez_fit(gelu, domain, degree, &opts)?;
        let curve = approx_error(|x| fit.poly.eval(x), gelu, domain, 4001);
        println!(
            "GELU degree {degree:>2}: E = {:.3e}, grid max {:.3e}, {} alternating extrema, {} iterations",
            fit.minimax_error,
            curve.linf,
            fit.extrema.len(),
            fit.iterations
        );
    }
    Ok(())
}
