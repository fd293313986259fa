//! Linear SVM trained by averaged stochastic subgradient descent on
//! `0.5 * ||w||^2 + C * sum(hinge)`, with probabilities from sigmoid scaling
//! fitted on out-of-fold margins.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_training_set, sigmoid, LinearModel, Model, PlattCalibration, Standardizer};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    pub calibration_folds: usize,
    pub standardize: Vec<usize>,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            epochs: 40,
            calibration_folds: 5,
            standardize: Vec::new(),
        }
    }
}

/// Weights and bias (bias as an augmented, regularized coordinate) on
/// already-transformed rows.
fn fit_hinge(z: &[SparseVec], y: &[Label], dim: usize, c: f64, epochs: usize, seed: u64) -> (Vec<f64>, f64) {
    let n = z.len();
    let lambda = 1.0 / (c * n as f64);
    // iterate w_t = s * v; running sum of iterates = big_s * v - u
    let mut v = vec![0.0; dim + 1];
    let mut u = vec![0.0; dim + 1];
    let mut s = 1.0;
    let mut big_s = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t: u64 = 0;

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let row = &z[i];
            let yi = if y[i].is_positive() { 1.0 } else { -1.0 };
            let margin = s * (row.dot(&v[..dim]) + v[dim]);
            let eta = 1.0 / (lambda * (t as f64 + 1.0));
            // shrink: w <- (1 - eta * lambda) w
            s *= 1.0 - eta * lambda;
            if yi * margin < 1.0 {
                let step = eta * yi / s;
                for (col, val) in row.iter() {
                    v[col] += step * val;
                    u[col] += step * val * big_s;
                }
                v[dim] += step;
                u[dim] += step * big_s;
            }
            big_s += s;
            if s < 1e-100 {
                // rescale to avoid underflow; big_s * v - u is unchanged
                for vk in v.iter_mut() {
                    *vk *= s;
                }
                big_s /= s;
                s = 1.0;
            }
        }
    }
    let total = t.max(1) as f64;
    let avg: Vec<f64> = v.iter().zip(&u).map(|(vk, uk)| (big_s * vk - uk) / total).collect();
    let bias = avg[dim];
    (avg[..dim].to_vec(), bias)
}

fn raw_svm(x: &[SparseVec], y: &[Label], dim: usize, cfg: &SvmConfig, seed: u64) -> LinearModel {
    let st = Standardizer::fit(x, &cfg.standardize);
    let z: Vec<SparseVec> = x.iter().map(|r| st.transform(r)).collect();
    let (w, b) = fit_hinge(&z, y, dim, cfg.c, cfg.epochs, seed);
    let (weights, bias) = st.fold(w, b);
    LinearModel {
        weights,
        bias,
        calibration: None,
    }
}

/// Fits `p = sigmoid(a * m + b)` by Newton's method on the regularized
/// targets `(N+ + 1) / (N+ + 2)` and `1 / (N- + 2)`.
pub fn fit_platt(margins: &[f64], y: &[Label]) -> PlattCalibration {
    let n_pos = y.iter().filter(|l| l.is_positive()).count() as f64;
    let n_neg = y.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = y.iter().map(|l| if l.is_positive() { hi } else { lo }).collect();

    let objective = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&targets)
            .map(|(&m, &t)| {
                let z = a * m + b;
                super::softplus(z) - t * z
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((n_pos + 1.0) / (n_neg + 1.0)).ln());
    let mut f = objective(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (&m, &t) in margins.iter().zip(&targets) {
            let p = sigmoid(a * m + b);
            let d = p - t;
            let w = p * (1.0 - p);
            ga += d * m;
            gb += d;
            haa += w * m * m;
            hab += w * m;
            hbb += w;
        }
        if ga.abs() < 1e-10 && gb.abs() < 1e-10 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = objective(na, nb);
            if nf < f + 1e-4 * step * (ga * -da + gb * -db) {
                a = na;
                b = nb;
                f = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    PlattCalibration { a, b }
}

fn stratified_folds(y: &[Label], k: usize, seed: u64) -> Vec<usize> {
    let mut fold = vec![0; y.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [Label::Negative, Label::Positive] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == label).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

pub fn train_svm(x: &[SparseVec], y: &[Label], dim: usize, cfg: &SvmConfig, seed: u64) -> Result<Model> {
    check_training_set(x, y, dim)?;
    if !(cfg.c > 0.0) {
        return Err(Error::invalid(format!("C must be positive, got {}", cfg.c)));
    }
    let mut model = raw_svm(x, y, dim, cfg, seed);

    let k = cfg.calibration_folds.max(2);
    let fold = stratified_folds(y, k, seed ^ 0x5eed_ca11);
    let mut oof = vec![0.0; x.len()];
    let mut degenerate = false;
    for f in 0..k {
        let (train_idx, held): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| fold[i] != f);
        let tx: Vec<SparseVec> = train_idx.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<Label> = train_idx.iter().map(|&i| y[i]).collect();
        let has_both = ty.iter().any(|l| l.is_positive()) && ty.iter().any(|l| !l.is_positive());
        if held.is_empty() || !has_both {
            degenerate = true;
            break;
        }
        let m = raw_svm(&tx, &ty, dim, cfg, seed.wrapping_add(f as u64 + 1));
        for i in held {
            oof[i] = m.margin(&x[i]);
        }
    }
    let has_both = y.iter().any(|l| l.is_positive()) && y.iter().any(|l| !l.is_positive());
    model.calibration = Some(if degenerate || !has_both {
        warn!("svm calibration fold has a single class; using sigmoid(margin)");
        PlattCalibration::IDENTITY
    } else {
        fit_platt(&oof, y)
    });
    let model = Model::Svm(model);
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn hinge_total(m: &Model, x: &[SparseVec], y: &[Label]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(r, l)| {
                let s = if l.is_positive() { 1.0 } else { -1.0 };
                (1.0 - s * m.margin(r)).max(0.0)
            })
            .sum()
    }

    #[test]
    fn separable_toy_has_small_hinge_and_correct_signs() {
        let x = vec![
            SparseVec::from_dense(&[2.0, 0.0]),
            SparseVec::from_dense(&[1.5, 0.2]),
            SparseVec::from_dense(&[0.0, 2.0]),
            SparseVec::from_dense(&[0.2, 1.5]),
        ];
        let y = vec![Label::Positive, Label::Positive, Label::Negative, Label::Negative];
        let cfg = SvmConfig {
            c: 10.0,
            epochs: 2000,
            calibration_folds: 2,
            ..Default::default()
        };
        let m = train_svm(&x, &y, 2, &cfg, 4).unwrap();
        for (r, l) in x.iter().zip(&y) {
            assert_eq!(m.margin(r) > 0.0, l.is_positive());
        }
        let h = hinge_total(&m, &x, &y);
        assert!(h < 1e-2, "hinge {h}");
    }

    #[test]
    fn calibrated_probability_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..120 {
            let pos = rng.random_bool(0.4);
            let shift = if pos { 1.0 } else { -1.0 };
            x.push(SparseVec::from_dense(&[
                shift + rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
            ]));
            y.push(Label::from_positive(pos));
        }
        let m = train_svm(&x, &y, 2, &SvmConfig::default(), 1).unwrap();
        let Model::Svm(inner) = &m else { unreachable!() };
        assert!(inner.calibration.unwrap().a > 0.0);
        let ps: Vec<f64> = (-20..=20).map(|i| m.proba_from_margin(i as f64 * 0.25)).collect();
        assert!(ps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_class_fold_falls_back_to_identity() {
        let x = vec![
            SparseVec::from_dense(&[1.0]),
            SparseVec::from_dense(&[2.0]),
            SparseVec::from_dense(&[-1.0]),
        ];
        let y = vec![Label::Positive, Label::Positive, Label::Negative];
        let m = train_svm(&x, &y, 1, &SvmConfig::default(), 0).unwrap();
        let Model::Svm(inner) = m else { unreachable!() };
        assert_eq!(inner.calibration, Some(PlattCalibration::IDENTITY));
    }

    #[test]
    fn training_is_deterministic() {
        let x = vec![
            SparseVec::from_dense(&[1.0, 0.0]),
            SparseVec::from_dense(&[0.0, 1.0]),
            SparseVec::from_dense(&[0.9, 0.1]),
            SparseVec::from_dense(&[0.1, 0.8]),
        ];
        let y = vec![Label::Positive, Label::Negative, Label::Positive, Label::Negative];
        let cfg = SvmConfig {
            calibration_folds: 2,
            ..Default::default()
        };
        assert_eq!(train_svm(&x, &y, 2, &cfg, 5).unwrap(), train_svm(&x, &y, 2, &cfg, 5).unwrap());
    }

    #[test]
    fn platt_recovers_known_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let margins: Vec<f64> = (0..4000).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<Label> = margins
            .iter()
            .map(|&m| Label::from_positive(rng.random::<f64>() < sigmoid(1.5 * m - 0.5)))
            .collect();
        let cal = fit_platt(&margins, &y);
        assert!((cal.a - 1.5).abs() < 0.15, "{cal:?}");
        assert!((cal.b + 0.5).abs() < 0.15, "{cal:?}");
    }
}
