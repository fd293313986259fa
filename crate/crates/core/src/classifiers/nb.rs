use serde::{Deserialize, Serialize};

use super::{check_training_set, Model};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbConfig {
    pub alpha: f64,
    /// Columns min-max scaled with training statistics before counting.
    pub rescale: Vec<usize>,
}

impl Default for NbConfig {
    fn default() -> Self {
        NbConfig {
            alpha: 1.0,
            rescale: Vec::new(),
        }
    }
}

/// Multinomial naive Bayes over fractional counts.
///
/// Rescaled columns use `(x - min) / (max - min)` with training min/max and
/// no clipping, which keeps the log-odds exactly linear in the raw vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    pub alpha: f64,
    /// `[ln pi_0, ln pi_1]`
    pub log_prior: [f64; 2],
    /// `[class 0 table, class 1 table]`, one log-likelihood per feature.
    pub log_likelihood: [Vec<f64>; 2],
    /// `(column, min, range)` for every rescaled column.
    pub rescale: Vec<(usize, f64, f64)>,
    /// Log-odds as a linear function of raw vectors (derived from the tables).
    pub log_odds_weights: Vec<f64>,
    pub log_odds_bias: f64,
}

impl NbModel {
    pub fn scaled(&self, x: &SparseVec) -> SparseVec {
        if self.rescale.is_empty() {
            return x.clone();
        }
        let mut pairs: Vec<(usize, f64)> = x
            .iter()
            .filter(|(c, _)| !self.rescale.iter().any(|r| r.0 == *c))
            .collect();
        for &(c, lo, range) in &self.rescale {
            pairs.push((c, (x.get(c) - lo) / range));
        }
        SparseVec::from_pairs(pairs)
    }

    /// Unnormalized class log-posteriors `[ln p(0, x), ln p(1, x)]`.
    pub fn joint_log_likelihood(&self, x: &SparseVec) -> [f64; 2] {
        let z = self.scaled(x);
        [0, 1].map(|c| self.log_prior[c] + z.dot(&self.log_likelihood[c]))
    }
}

pub fn train_nb(x: &[SparseVec], y: &[Label], dim: usize, cfg: &NbConfig) -> Result<Model> {
    check_training_set(x, y, dim)?;
    if !(cfg.alpha > 0.0) {
        return Err(Error::invalid(format!("smoothing alpha must be positive, got {}", cfg.alpha)));
    }
    let rescale: Vec<(usize, f64, f64)> = cfg
        .rescale
        .iter()
        .map(|&c| {
            let (lo, hi) = x
                .iter()
                .map(|r| r.get(c))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let range = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
            (c, lo, range)
        })
        .collect();

    let mut model = NbModel {
        alpha: cfg.alpha,
        log_prior: [0.0; 2],
        log_likelihood: [vec![0.0; dim], vec![0.0; dim]],
        rescale,
        log_odds_weights: Vec::new(),
        log_odds_bias: 0.0,
    };

    let mut counts = [vec![0.0; dim], vec![0.0; dim]];
    let mut n_class = [0usize; 2];
    for (row, label) in x.iter().zip(y) {
        let c = usize::from(label.is_positive());
        n_class[c] += 1;
        for (col, v) in model.scaled(row).iter() {
            counts[c][col] += v;
        }
    }
    let n = x.len() as f64;
    for c in 0..2 {
        model.log_prior[c] = (n_class[c] as f64 / n).ln();
        let total: f64 = counts[c].iter().sum();
        let denom = (total + cfg.alpha * dim as f64).ln();
        model.log_likelihood[c] = counts[c].iter().map(|k| (k + cfg.alpha).ln() - denom).collect();
    }

    // log-odds over scaled features, then undo the affine rescaling
    let mut w: Vec<f64> = (0..dim)
        .map(|j| model.log_likelihood[1][j] - model.log_likelihood[0][j])
        .collect();
    let mut b = model.log_prior[1] - model.log_prior[0];
    for &(c, lo, range) in &model.rescale {
        w[c] /= range;
        b -= w[c] * lo;
    }
    model.log_odds_weights = w;
    model.log_odds_bias = b;

    let model = Model::Nb(model);
    model.validate()?;
    Ok(model)
}
