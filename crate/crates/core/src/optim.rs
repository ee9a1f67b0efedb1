//! Box-constrained quasi-Newton minimisation with finite-difference gradients.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's largest entry falls below this.
    pub grad_tol: f64,
    /// Stop when the objective changes by less than this (relative) twice in a row.
    pub f_rel_tol: f64,
    /// Relative step for the central differences.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            f_rel_tol: 1e-14,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

fn central_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], lower: &[f64], upper: &[f64], step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = step * x[j].abs().max(1.0);
            let hi = (x[j] + h).min(upper[j]);
            let lo = (x[j] - h).max(lower[j]);
            work[j] = hi;
            let fh = f(&work);
            work[j] = lo;
            let fl = f(&work);
            work[j] = x[j];
            (fh - fl) / (hi - lo)
        })
        .collect()
}

/// Gradient with components zeroed where a bound is active and the descent
/// direction points outside the box.
fn projected(g: &[f64], x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    g.iter()
        .enumerate()
        .map(|(j, &gj)| {
            if (x[j] <= lower[j] && gj > 0.0) || (x[j] >= upper[j] && gj < 0.0) {
                0.0
            } else {
                gj
            }
        })
        .collect()
}

fn clamp(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for j in 0..x.len() {
        x[j] = x[j].clamp(lower[j], upper[j]);
    }
}

/// Minimises `f` over the box `[lower, upper]` by BFGS with backtracking and
/// projection onto the box. Non-finite objective values are treated as
/// infeasible and trigger step shrinking.
pub fn minimize_bfgs<F: Fn(&[f64]) -> f64>(
    f: F,
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
    options: &BfgsOptions,
) -> Result<Minimum> {
    let n = start.len();
    let mut x = start.to_vec();
    clamp(&mut x, lower, upper);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::InvalidModel("objective is not finite at the starting point".into()));
    }
    let mut g = central_gradient(&f, &x, lower, upper, options.fd_step);
    let identity = |n: usize| {
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        h
    };
    let mut h = identity(n);
    let mut small_changes = 0;

    for iter in 0..options.max_iter {
        let pg = projected(&g, &x, lower, upper);
        if pg.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= options.grad_tol {
            return Ok(Minimum { x, f: fx, iterations: iter });
        }
        // free variables only
        let free: Vec<bool> = (0..n).map(|j| pg[j] != 0.0 || (x[j] > lower[j] && x[j] < upper[j])).collect();
        let mut d: Vec<f64> = (0..n)
            .map(|i| if free[i] { -(0..n).filter(|&k| free[k]).map(|k| h[i][k] * g[k]).sum::<f64>() } else { 0.0 })
            .collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            d = pg.iter().map(|v| -v).collect();
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            clamp(&mut cand, lower, upper);
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no decrease along the quasi-Newton or steepest direction
            if h != identity(n) {
                h = identity(n);
                continue;
            }
            return Ok(Minimum { x, f: fx, iterations: iter });
        };
        let gn = central_gradient(&f, &xn, lower, upper, options.fd_step);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * s.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt() {
            if iter == 0 {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                for (i, row) in h.iter_mut().enumerate() {
                    row[i] = scale;
                }
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|k| h[i][k] * y[k]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for k in 0..n {
                    h[i][k] += -rho * (hy[i] * s[k] + s[i] * hy[k]) + (rho * rho * yhy + rho) * s[i] * s[k];
                }
            }
        }
        let change = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if change <= options.f_rel_tol {
            small_changes += 1;
            if small_changes >= 2 {
                return Ok(Minimum { x, f: fx, iterations: iter + 1 });
            }
        } else {
            small_changes = 0;
        }
    }
    Err(Error::NonConvergence {
        what: "quasi-Newton outer optimisation".into(),
        iterations: options.max_iter,
    })
}
