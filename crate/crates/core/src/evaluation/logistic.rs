//! One-vs-rest L2-regularized logistic regression fitted with L-BFGS.
//!
//! For classes `c = 1..C` the joint objective is
//! `Σ_i Σ_c softplus(-y_ic (x_i·w_c + b_c)) + (λ/2) Σ_c ‖w_c‖²` with
//! `y_ic = ±1`. The classes do not interact, so fitting them jointly is the
//! same as fitting C independent binary models. Biases are not penalized.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    /// Stop once the largest gradient coordinate is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            tolerance: 1e-6,
            max_iterations: 2000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes a smooth function given as `x -> (f(x), ∇f(x))`.
///
/// Uses the two-loop recursion with an Armijo backtracking line search;
/// curvature pairs with `sᵀy ≤ 0` are discarded.
pub fn lbfgs<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let gnorm = max_abs(&g);
        if gnorm <= opts.tolerance {
            return Ok(LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / dot(&g, &g).sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            history.clear();
            let scale = 1.0 / dot(&g, &g).sqrt().max(1.0);
            dir = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial)?;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted else {
            log::debug!("line search stalled at gradient norm {gnorm:e}");
            return Ok(LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: false,
            });
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
    let gnorm = max_abs(&g);
    Ok(LbfgsResult {
        x,
        value: fx,
        grad_norm: gnorm,
        converged: gnorm <= opts.tolerance,
        iterations,
    })
}

/// Fitted weights `d x C` and biases `1 x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array2<f64>,
    pub bias: Array2<f64>,
    pub converged: bool,
}

impl LogisticModel {
    /// Class with the largest score; ties go to the lower class id.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        let scores = x.dot(&self.weights) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Objective value and gradient for packed parameters `[W row-major, b]`.
fn objective(
    features: &Array2<f64>,
    signs: &Array2<f64>,
    lambda: f64,
    packed: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (d, c) = (features.ncols(), signs.ncols());
    let w = Parameter::new("w", Tensor::from_vec(d, c, packed[..d * c].to_vec())?);
    let b = Parameter::new("b", Tensor::from_vec(1, c, packed[d * c..].to_vec())?);
    let mut tape = Tape::new();
    let xv = tape.constant_ref(features);
    let wv = tape.param(&w);
    let bv = tape.param(&b);
    let xw = tape.matmul(xv, wv)?;
    let logits = tape.add_row(xw, bv)?;
    let y = tape.constant_ref(signs);
    let margin = tape.mul(logits, y)?;
    let neg = tape.scale(margin, -1.0);
    let losses = tape.softplus(neg);
    let data_term = tape.sum(losses);
    let sq = tape.mul(wv, wv)?;
    let reg = tape.sum(sq);
    let reg = tape.scale(reg, 0.5 * lambda);
    let total = tape.add(data_term, reg)?;
    let value = tape.scalar(total)?;
    let grads = tape.backward(total)?;
    let mut grad = Vec::with_capacity(packed.len());
    grad.extend(grads.get("w").expect("w used").array().iter());
    grad.extend(grads.get("b").expect("b used").array().iter());
    Ok((value, grad))
}

/// Fits `classes` one-vs-rest models on rows of `x` labeled `y`.
pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], classes: usize, lambda: f64, opts: &LbfgsOptions) -> Result<LogisticModel> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::Evaluation(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    if classes == 0 || y.iter().any(|&c| c >= classes) {
        return Err(Error::Evaluation("label outside the class range".into()));
    }
    let d = x.ncols();
    let signs = Array2::from_shape_fn((y.len(), classes), |(i, c)| if y[i] == c { 1.0 } else { -1.0 });
    let features = x.to_owned();
    let result = lbfgs(|p| objective(&features, &signs, lambda, p), vec![0.0; (d + 1) * classes], opts)?;
    if !result.converged {
        log::warn!(
            "logistic regression stopped after {} iterations at gradient norm {:e}",
            result.iterations,
            result.grad_norm
        );
    }
    let weights = Array2::from_shape_vec((d, classes), result.x[..d * classes].to_vec()).expect("sized");
    let bias = Array2::from_shape_vec((1, classes), result.x[d * classes..].to_vec()).expect("sized");
    Ok(LogisticModel {
        weights,
        bias,
        converged: result.converged,
    })
}
