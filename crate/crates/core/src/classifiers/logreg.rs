use log::warn;
use serde::{Deserialize, Serialize};

use super::optim::{minimize, LbfgsOptions};
use super::{check_training_set, sigmoid, softplus, LinearModel, Model, Standardizer};
use crate::corpus::Label;
use crate::error::Result;
use crate::sparse::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    /// Weight of `0.5 * ||w||^2` against the summed logistic loss.
    pub l2_strength: f64,
    /// Iteration cap.
    pub epochs: usize,
    pub grad_tol: f64,
    /// Columns standardized during training (folded back afterwards).
    pub standardize: Vec<usize>,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            l2_strength: 1.0,
            epochs: 1000,
            grad_tol: 1e-5,
            standardize: Vec::new(),
        }
    }
}

/// Summed logistic loss plus `l2/2 * ||w||^2` at `theta = [w, b]`; writes the
/// gradient into `grad`. The bias is not penalized.
pub fn logistic_objective(x: &[SparseVec], y: &[Label], l2: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let dim = theta.len() - 1;
    let (w, b) = (&theta[..dim], theta[dim]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (row, label) in x.iter().zip(y) {
        let m = row.dot(w) + b;
        let t = if label.is_positive() { 1.0 } else { 0.0 };
        loss += softplus(m) - t * m;
        let r = sigmoid(m) - t;
        for (c, v) in row.iter() {
            grad[c] += r * v;
        }
        grad[dim] += r;
    }
    let mut reg = 0.0;
    for j in 0..dim {
        reg += w[j] * w[j];
        grad[j] += l2 * w[j];
    }
    loss + 0.5 * l2 * reg
}

/// Deterministic: no randomness is involved, so `_seed` only documents the
/// contract shared with the other trainers.
pub fn train_logreg(x: &[SparseVec], y: &[Label], dim: usize, cfg: &LogRegConfig, _seed: u64) -> Result<Model> {
    check_training_set(x, y, dim)?;
    let st = Standardizer::fit(x, &cfg.standardize);
    let z: Vec<SparseVec> = x.iter().map(|r| st.transform(r)).collect();
    let out = minimize(
        |theta, g| logistic_objective(&z, y, cfg.l2_strength, theta, g),
        vec![0.0; dim + 1],
        &LbfgsOptions {
            max_iter: cfg.epochs,
            grad_tol: cfg.grad_tol,
            memory: 10,
        },
    )?;
    if out.grad_norm > cfg.grad_tol {
        warn!(
            "logreg stopped after {} iterations with gradient norm {:.3e} (objective {:.6})",
            out.iterations, out.grad_norm, out.value
        );
    }
    let mut theta = out.x;
    let bias = theta.pop().unwrap();
    let (weights, bias) = st.fold(theta, bias);
    let model = Model::Logreg(LinearModel {
        weights,
        bias,
        calibration: None,
    });
    model.validate()?;
    Ok(model)
}
