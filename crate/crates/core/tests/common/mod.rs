#![allow(dead_code)]

use std::sync::Arc;

use polyformer::harness::{make_dataset, ExperimentConfig};
use polyformer::polyconvert::PolyGraph;
use polyformer::polyfit::{compose_relu_approx, CompositePolynomial};
use polyformer::rng;
use polyformer::tensor::{Act, Graph, PolyMode, ReduceKind};
use polyformer::training::{batch_loss, combined_objective, loss_activation_range, loss_variance, ObjectiveWeights};
use polyformer::transformer::{Mode, Model};
use polyformer::{Result, Tensor, Var};
use rand::Rng;

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
/// every coordinate, with central differences.
pub fn fd_relative_error(
    f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
    floor: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let analytic = g.backward(y)?.wrt(&g, xv);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += eps;
        let mut m = x.clone();
        m.data_mut()[i] -= eps;
        let numeric = (eval(p)? - eval(m)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    Ok(worst)
}

pub type OpCase = (&'static str, Vec<usize>, f64, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

fn weighted_sum(g: &mut Graph, y: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = random_tensor(&mut rng::stream(salt, "weights"), &shape, -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

fn relu_poly() -> Arc<CompositePolynomial> {
    Arc::new(compose_relu_approx(&[5, 5], 4.0, 1.0 / 16.0).unwrap())
}

/// Every differentiable tape operation, each reduced to a scalar through a
/// random weighting. `(name, input shape, input scale, f)`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, "op_cases");
    let c34 = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let c42 = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let c23 = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let row = random_tensor(&mut r, &[1, 4], -1.0, 1.0);
    let col = random_tensor(&mut r, &[3, 1], -1.0, 1.0);
    let targets: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let poly = relu_poly();
    let s = seed;
    macro_rules! case {
        ($name:expr, $shape:expr, $scale:expr, |$g:ident, $x:ident| $body:expr) => {{
            let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(move |$g: &mut Graph, $x: Var| {
                let y: Var = $body;
                weighted_sum($g, y, s)
            });
            ($name, $shape.to_vec(), $scale, f)
        }};
    }
    let (c34a, c34b, c34c, c34d, c34e) = (c34.clone(), c34.clone(), c34.clone(), c34.clone(), c34.clone());
    let (rowa, cola) = (row.clone(), col.clone());
    let poly2 = poly.clone();
    vec![
        case!("matmul_left", [3, 4], 1.0, |g, x| {
            let c = g.constant(c42.clone());
            g.matmul(x, c)?
        }),
        case!("matmul_right", [3, 4], 1.0, |g, x| {
            let c = g.constant(c23.clone());
            g.matmul(c, x)?
        }),
        case!("transpose", [3, 4], 1.0, |g, x| g.transpose(x)?),
        case!("add", [3, 4], 1.0, |g, x| {
            let c = g.constant(c34a.clone());
            g.add(x, c)?
        }),
        case!("sub", [3, 4], 1.0, |g, x| {
            let c = g.constant(c34b.clone());
            g.sub(c, x)?
        }),
        case!("mul", [3, 4], 1.0, |g, x| {
            let c = g.constant(c34c.clone());
            let y = g.mul(x, x)?;
            g.mul(y, c)?
        }),
        case!("scale", [3, 4], 1.0, |g, x| g.scale(x, -2.5)),
        case!("add_scalar", [3, 4], 1.0, |g, x| {
            let y = g.add_scalar(x, 0.75);
            g.mul(y, y)?
        }),
        case!("power_int", [3, 4], 1.0, |g, x| g.power(x, 3.0)),
        case!("power_frac", [3, 4], 1.0, |g, x| {
            let y = g.mul(x, x)?;
            let y = g.add_scalar(y, 1.0);
            g.power(y, -0.5)
        }),
        case!("add_row", [1, 4], 1.0, |g, x| {
            let c = g.constant(c34d.clone());
            g.add_row(c, x)?
        }),
        case!("mul_row", [1, 4], 1.0, |g, x| {
            let c = g.constant(c34e.clone());
            let y = g.mul_row(c, x)?;
            g.mul(y, y)?
        }),
        case!("add_col", [3, 4], 1.0, |g, x| {
            let c = g.constant(cola.clone());
            let y = g.add_col(x, c)?;
            g.mul(y, y)?
        }),
        case!("mul_col", [3, 4], 1.0, |g, x| {
            let c = g.constant(col.clone());
            g.mul_col(x, c)?
        }),
        case!("mul_row_operand", [3, 4], 1.0, |g, x| {
            let c = g.constant(rowa.clone());
            g.mul_row(x, c)?
        }),
        case!("sum_axis0", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Sum, Some(0))?),
        case!("mean_axis1", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Mean, Some(1))?),
        case!("var_axis1", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Var, Some(1))?),
        case!("var_all", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Var, None)?),
        case!("max_axis0", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Max, Some(0))?),
        case!("min_all", [3, 4], 1.0, |g, x| g.reduce(x, ReduceKind::Min, None)?),
        case!("relu", [3, 4], 1.0, |g, x| g.activation(x, Act::Relu)?),
        case!("gelu", [3, 4], 2.0, |g, x| g.activation(x, Act::Gelu)?),
        case!("abs", [3, 4], 1.0, |g, x| g.activation(x, Act::Abs)?),
        case!("exp", [3, 4], 1.0, |g, x| g.activation(x, Act::Exp)?),
        case!("ln", [3, 4], 1.0, |g, x| {
            let y = g.mul(x, x)?;
            let y = g.add_scalar(y, 0.5);
            g.activation(y, Act::Ln)?
        }),
        case!("poly_activation", [3, 4], 2.0, |g, x| g.activation(x, Act::Poly(poly.clone(), PolyMode::Strict))?),
        case!("poly_clamped", [3, 4], 2.0, |g, x| g.activation(x, Act::Poly(poly2.clone(), PolyMode::Clamp))?),
        case!("softmax_rows", [3, 4], 2.0, |g, x| g.softmax(x, 1)?),
        case!("softmax_cols", [3, 4], 2.0, |g, x| g.softmax(x, 0)?),
        case!("slice_rows", [3, 4], 1.0, |g, x| g.slice_rows(x, 1, 2)?),
        case!("slice_cols", [3, 4], 1.0, |g, x| g.slice_cols(x, 1, 3)?),
        case!("concat_rows", [3, 4], 1.0, |g, x| {
            let y = g.scale(x, 2.0);
            let y = g.mul(y, x)?;
            g.concat_rows(&[x, y])?
        }),
        case!("concat_cols", [3, 4], 1.0, |g, x| {
            let y = g.mul(x, x)?;
            g.concat_cols(&[y, x])?
        }),
        case!("reshape", [3, 4], 1.0, |g, x| {
            let y = g.reshape(x, &[2, 6])?;
            g.mul(y, y)?
        }),
        case!("cross_entropy", [3, 4], 2.0, |g, x| g.cross_entropy(x, &targets)?),
        case!("logsumexp", [3, 4], 2.0, |g, x| g.logsumexp_all(x, 0.5)),
    ]
}

/// Input for an op case: entries bounded away from zero so kinks and
/// ties have probability zero of being crossed by the difference step.
pub fn op_input(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut r = rng::stream(seed, "op_input");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let m = r.random_range(0.1..1.0) * scale;
            let v = m + 1e-3 * i as f64;
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Range-minimization objective of a tiny model on a sampled batch, with
/// analytic gradients for every parameter.
pub struct ObjectiveProbe {
    pub model: Model,
    pub batch: polyformer::training::Batch,
    pub weights: ObjectiveWeights,
    pub smooth: Option<f64>,
}

impl ObjectiveProbe {
    pub fn new(seed: u64, image: bool) -> Self {
        let mut cfg = if image {
            ExperimentConfig::synth_image_fixture()
        } else {
            ExperimentConfig::char_lm_fixture()
        };
        cfg.data.corpus_chars = 2_000;
        cfg.data.train_images = 16;
        cfg.data.test_images = 8;
        cfg.model.d_model = 8;
        cfg.model.context_len = if image { cfg.model.context_len } else { 6 };
        cfg.model.seed = seed;
        let data = make_dataset(cfg.task, &cfg.data, cfg.model.context_len, seed).unwrap();
        let batch = data.sample(&mut rng::stream(seed, "probe"), 3).unwrap();
        Self {
            model: Model::new(cfg.model).unwrap(),
            batch,
            weights: ObjectiveWeights { alpha: 0.3, beta: 0.7 },
            smooth: Some(0.05),
        }
    }

    pub fn value(&self, model: &Model) -> Result<(f64, Graph, Var)> {
        let mut g = Graph::new();
        let (fwd, task) = batch_loss(&mut g, model, &self.batch, Mode::Train)?;
        let r = loss_activation_range(&mut g, &fwd.taps, self.smooth)?;
        let v = loss_variance(&mut g, &fwd.taps, self.smooth)?;
        let obj = combined_objective(&mut g, task, r, v, self.weights)?;
        Ok((g.value(obj).item(), g, obj))
    }

    /// Worst relative error over `per_param` random coordinates of every
    /// trainable parameter.
    pub fn check(&self, per_param: usize, eps: f64, floor: f64, seed: u64) -> Result<f64> {
        let (_, g, obj) = self.value(&self.model)?;
        let grads = g.backward(obj)?;
        let mut r = rng::stream(seed, "probe/coords");
        let mut worst: f64 = 0.0;
        for (p, v) in g.param_vars() {
            if !self.model.params()[p].trainable {
                continue;
            }
            let analytic = grads.wrt(&g, v);
            for _ in 0..per_param {
                let i = r.random_range(0..analytic.len());
                let mut plus = self.model.clone();
                plus.param_value_mut(p).data_mut()[i] += eps;
                let mut minus = self.model.clone();
                minus.param_value_mut(p).data_mut()[i] -= eps;
                let numeric = (self.value(&plus)?.0 - self.value(&minus)?.0) / (2.0 * eps);
                let a = analytic.data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            }
        }
        Ok(worst)
    }
}

/// Discrete minimax fit on a dense grid by Lawson's iteratively reweighted
/// least squares. Returns the max grid error of the final fit.
pub fn lawson_minimax(f: impl Fn(f64) -> f64, lo: f64, hi: f64, degree: usize, points: usize, iters: usize) -> f64 {
    let xs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let n = degree + 1;
    let mut w = vec![1.0 / points as f64; points];
    let mut best = f64::INFINITY;
    for _ in 0..iters {
        let mut a = vec![vec![0.0; n + 1]; n];
        for (k, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
            let pows: Vec<f64> = (0..n).map(|j| x.powi(j as i32)).collect();
            for i in 0..n {
                for j in 0..n {
                    a[i][j] += w[k] * pows[i] * pows[j];
                }
                a[i][n] += w[k] * pows[i] * y;
            }
        }
        let c = solve(a);
        let res: Vec<f64> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| (c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci) - y).abs())
            .collect();
        best = best.min(res.iter().cloned().fold(0.0, f64::max));
        let total: f64 = w.iter().zip(&res).map(|(wi, ri)| wi * ri).sum();
        if total == 0.0 {
            break;
        }
        for (wi, ri) in w.iter_mut().zip(&res) {
            *wi *= ri / total;
        }
    }
    best
}

fn solve(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// Maximum over every input-to-output path of the summed level costs,
/// found by enumerating the paths explicitly.
pub fn path_enumeration_depth(g: &PolyGraph) -> usize {
    fn walk(g: &PolyGraph, id: usize) -> usize {
        let n = &g.nodes()[id];
        n.level_cost + n.inputs.iter().map(|&i| walk(g, i)).max().unwrap_or(0)
    }
    g.outputs().iter().map(|&o| walk(g, o)).max().unwrap_or(0)
}

/// Exact GELU from the error function.
pub fn gelu_erf(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn matmul_triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get2(i, t) * b.get2(t, j);
            }
            out.set2(i, j, s);
        }
    }
    out
}
