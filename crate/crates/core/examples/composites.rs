//! Composite approximations: ReLU through composed sign polynomials and
//! 1/√x through a Remez seed refined by Newton steps.

use polyformer::harness::composite_depth;
use polyformer::polyfit::{approx_error, compose_relu_approx, fit_inverse_sqrt, Interval, DEFAULT_RELU_GAP};
use polyformer::Result;

fn main() -> Result<()> {
    let relu = compose_relu_approx(&[7, 7, 7], 10.0, DEFAULT_RELU_GAP)?;
    let e = approx_error(|x| relu.eval(x), |x| x.max(0.0), relu.interval(), 20001);
    println!("ReLU on [-10, 10]: max error {:.3e}, depth {}", e.linf, composite_depth(&relu)?);
    for x in [-3.0, -0.2, 0.0, 0.2, 3.0] {
        println!("  relu~({x:>4}) = {:.6}", relu.eval(x));
    }

    let domain = Interval::new(1.0, 300.0)?;
    for steps in 0..=4 {
        let inv = fit_inverse_sqrt(domain, 7, steps)?;
        let rel = approx_error(|x| inv.eval(x) * x.sqrt(), |_| 1.0, domain, 10001);
        println!("1/sqrt(x) on [1, 300], {steps} Newton steps: relative error {:.3e}", rel.linf);
    }
    Ok(())
}
