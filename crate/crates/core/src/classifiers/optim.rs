//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use log::warn;

use crate::error::{Error, Result};

pub(crate) struct LbfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub memory: usize,
}

pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    while iterations < opts.max_iter && norm(&g) > opts.grad_tol {
        iterations += 1;

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / norm(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        for di in d.iter_mut() {
            *di *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // not a descent direction; restart from steepest descent
            history.clear();
            d = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let mut probe = vec![0.0; n];
            if !f(&x, &mut probe).is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iterations });
            }
            warn!(
                "line search stalled after {iterations} iterations (gradient norm {:.3e})",
                norm(&g)
            );
            break;
        }
    }
    Ok(LbfgsOutcome {
        grad_norm: norm(&g),
        x,
        value: fx,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_ill_conditioned_quadratic() {
        let scales = [1.0, 10.0, 1000.0];
        let target = [3.0, -2.0, 0.5];
        let out = minimize(
            |x, g| {
                let mut v = 0.0;
                for i in 0..3 {
                    let r = x[i] - target[i];
                    v += 0.5 * scales[i] * r * r;
                    g[i] = scales[i] * r;
                }
                v
            },
            vec![0.0; 3],
            &LbfgsOptions {
                max_iter: 200,
                grad_tol: 1e-10,
                memory: 5,
            },
        )
        .unwrap();
        for i in 0..3 {
            assert!((out.x[i] - target[i]).abs() < 1e-9);
        }
        assert!(out.grad_norm <= 1e-10);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let err = minimize(
            |_, _| f64::NAN,
            vec![0.0],
            &LbfgsOptions {
                max_iter: 5,
                grad_tol: 1e-6,
                memory: 3,
            },
        );
        assert!(matches!(err, Err(Error::NonFiniteLoss { iteration: 0 })));
    }
}
