//! Frobenius NMF by multiplicative updates.

use log::debug;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Guards the update denominators; a larger denominator still majorizes the
/// objective, so monotonicity is unaffected.
const DENOM_EPS: f64 = 1e-16;
/// Allowed objective increase per update, relative to `||X||^2`, for
/// round-off in the expanded objective.
const ROUNDOFF_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfOptions {
    pub topics: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions {
            topics: 10,
            max_iters: 500,
            tol: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    /// Objective `||X - WH||_F^2` after initialization and after each full
    /// iteration.
    pub objective: Vec<f64>,
}

fn frob_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Factorizes `x ~ w h` with `w: n x M`, `h: M x k`, both nonnegative.
///
/// Stops when the relative objective decrease of an iteration falls below
/// `tol`. Every half-update is checked for an objective increase.
pub fn nmf(x: &Array2<f64>, opts: &NmfOptions) -> Result<NmfResult> {
    let (n, k) = x.dim();
    let m = opts.topics;
    if m == 0 || m > n.min(k) {
        return Err(Error::invalid(format!(
            "cannot fit {m} topics to a {n} x {k} matrix (need 1 <= topics <= min(rows, columns))"
        )));
    }
    if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("nmf input must be finite and nonnegative"));
    }
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = (x.mean().unwrap_or(0.0) / m as f64).sqrt();
    // uniform on (0, 1]
    let mut draw = || (1.0 - rng.random::<f64>()) * scale;
    let mut w = Array2::from_shape_simple_fn((n, m), &mut draw);
    let mut h = Array2::from_shape_simple_fn((m, k), &mut draw);

    let objective_of = |w: &Array2<f64>, h: &Array2<f64>| -> f64 {
        let wh = w.dot(h);
        x.iter().zip(wh.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut trace = vec![objective_of(&w, &h)];
    if xx == 0.0 {
        return Ok(NmfResult { w, h, objective: trace });
    }
    let slack = ROUNDOFF_SLACK * xx;
    let check = |before: f64, after: f64, iter: usize, what: &str| -> Result<()> {
        if after > before + slack {
            Err(Error::invalid(format!(
                "nmf objective increased at iteration {iter} ({what} update): {before} -> {after}"
            )))
        } else {
            Ok(())
        }
    };

    let mut current = trace[0];
    for iter in 1..=opts.max_iters {
        // h <- h * (W^T X) / (W^T W h)
        let wtx = w.t().dot(x);
        let wtw = w.t().dot(&w);
        let den = wtw.dot(&h);
        h.zip_mut_with(&wtx, |hv, num| *hv *= num);
        h.zip_mut_with(&den, |hv, d| *hv /= d + DENOM_EPS);
        let after_h = xx - 2.0 * frob_inner(&wtx, &h) + frob_inner(&wtw, &h.dot(&h.t()));
        check(current, after_h, iter, "h")?;

        // w <- w * (X h^T) / (w h h^T)
        let xht = x.dot(&h.t());
        let hht = h.dot(&h.t());
        let den = w.dot(&hht);
        w.zip_mut_with(&xht, |wv, num| *wv *= num);
        w.zip_mut_with(&den, |wv, d| *wv /= d + DENOM_EPS);
        let after_w = xx - 2.0 * frob_inner(&xht, &w) + frob_inner(&w.t().dot(&w), &hht);
        check(after_h, after_w, iter, "w")?;

        let obj = after_w.max(0.0);
        trace.push(obj);
        let rel = (current - obj) / current.max(f64::MIN_POSITIVE);
        current = obj;
        if obj == 0.0 || rel < opts.tol {
            debug!("nmf stopped at iteration {iter} with objective {obj:.6e}");
            break;
        }
    }
    Ok(NmfResult { w, h, objective: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn rel_error(x: &Array2<f64>, r: &NmfResult) -> f64 {
        let wh = r.w.dot(&r.h);
        let num: f64 = x.iter().zip(wh.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        (num / x.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    #[test]
    fn rank_one_is_recovered() {
        let u = Array1::from(vec![1.0, 0.5, 2.0, 0.0, 3.0]);
        let v = Array1::from(vec![0.2, 1.0, 0.0, 4.0]);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| u[i] * v[j]);
        let r = nmf(
            &x,
            &NmfOptions {
                topics: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rel_error(&x, &r) <= 1e-6, "{}", rel_error(&x, &r));
    }

    #[test]
    fn zero_matrix_has_zero_objective() {
        let x = Array2::zeros((4, 3));
        let r = nmf(
            &x,
            &NmfOptions {
                topics: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.objective, vec![0.0]);
        assert!(r.w.dot(&r.h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_many_topics_is_an_error() {
        let x = Array2::ones((3, 5));
        assert!(nmf(
            &x,
            &NmfOptions {
                topics: 4,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((30, 12), || if rng.random_bool(0.6) { rng.random::<f64>() } else { 0.0 });
        let r = nmf(
            &x,
            &NmfOptions {
                topics: 4,
                max_iters: 300,
                tol: 0.0,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(r.objective.len(), 301);
        assert!(r.objective.windows(2).all(|p| p[1] <= p[0] + 1e-12 * 30.0));
        assert!(r.w.iter().chain(r.h.iter()).all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_rows_get_zero_loadings() {
        let mut x = Array2::from_shape_fn((6, 5), |(i, j)| ((i + 2 * j) % 4) as f64);
        x.row_mut(2).fill(0.0);
        let r = nmf(
            &x,
            &NmfOptions {
                topics: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.w.row(2).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_factors() {
        let x = Array2::from_shape_fn((8, 6), |(i, j)| ((i * j) % 5) as f64);
        let o = NmfOptions {
            topics: 3,
            seed: 11,
            ..Default::default()
        };
        let (a, b) = (nmf(&x, &o).unwrap(), nmf(&x, &o).unwrap());
        assert_eq!(a.w, b.w);
        assert_eq!(a.h, b.h);
        assert_eq!(a.objective, b.objective);
    }
}
