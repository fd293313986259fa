//! Base classifiers: L2-regularized logistic regression, a linear SVM with
//! sigmoid calibration, and multinomial naive Bayes.
//!
//! All three expose a linear decision value (the margin) over raw feature
//! vectors. Logistic regression and the SVM train in a space where selected
//! columns are standardized, then fold the scaling back into the weights, so
//! persisted weights always apply to raw vectors.

mod logreg;
mod nb;
mod optim;
mod svm;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::sparse::SparseVec;

pub use logreg::{logistic_objective, train_logreg, LogRegConfig};
pub use nb::{train_nb, NbConfig, NbModel};
pub use svm::{fit_platt, train_svm, SvmConfig};

pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Sigmoid scaling of SVM margins: `p = sigmoid(a * margin + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibration {
    pub a: f64,
    pub b: f64,
}

impl PlattCalibration {
    pub const IDENTITY: PlattCalibration = PlattCalibration { a: 1.0, b: 0.0 };

    pub fn apply(&self, margin: f64) -> f64 {
        sigmoid(self.a * margin + self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Present for the SVM only.
    pub calibration: Option<PlattCalibration>,
}

impl LinearModel {
    pub fn margin(&self, x: &SparseVec) -> f64 {
        x.dot(&self.weights) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Logreg(LinearModel),
    Svm(LinearModel),
    Nb(NbModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Svm,
    Nb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub p_pos: f64,
    pub label: Label,
    pub margin: f64,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Logreg(_) => ModelKind::Logreg,
            Model::Svm(_) => ModelKind::Svm,
            Model::Nb(_) => ModelKind::Nb,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear_form().0.len()
    }

    /// Weights and bias of the decision value over raw feature vectors.
    pub fn linear_form(&self) -> (&[f64], f64) {
        match self {
            Model::Logreg(m) | Model::Svm(m) => (&m.weights, m.bias),
            Model::Nb(m) => (&m.log_odds_weights, m.log_odds_bias),
        }
    }

    pub fn margin(&self, x: &SparseVec) -> f64 {
        let (w, b) = self.linear_form();
        x.dot(w) + b
    }

    /// Probability of the positive class for a given decision value.
    pub fn proba_from_margin(&self, margin: f64) -> f64 {
        match self {
            Model::Svm(m) => m.calibration.unwrap_or(PlattCalibration::IDENTITY).apply(margin),
            Model::Logreg(_) | Model::Nb(_) => sigmoid(margin),
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<Prediction> {
        x.values.check_dim(self.dim())?;
        let margin = self.margin(&x.values);
        let p_pos = self.proba_from_margin(margin);
        Ok(Prediction {
            id: x.id,
            p_pos,
            label: Label::from_positive(p_pos >= DECISION_THRESHOLD),
            margin,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (w, b) = self.linear_form();
        if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
            return Err(Error::invalid("model has non-finite weights"));
        }
        match self {
            Model::Svm(m) if m.calibration.is_none() => Err(Error::invalid("svm model without calibration")),
            Model::Logreg(m) if m.calibration.is_some() => Err(Error::invalid("logreg model with calibration")),
            _ => Ok(()),
        }
    }
}

/// Centers and scales a fixed set of columns; other columns pass through.
#[derive(Debug, Clone)]
pub(crate) struct Standardizer {
    cols: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[SparseVec], cols: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; cols.len()];
        let mut sq = vec![0.0; cols.len()];
        for r in rows {
            for (k, &c) in cols.iter().enumerate() {
                let v = r.get(c);
                mean[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..cols.len() {
            mean[k] /= n;
            sq[k] = (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt();
        }
        let scale = sq.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Standardizer {
            cols: cols.to_vec(),
            mean,
            scale,
        }
    }

    pub fn transform(&self, row: &SparseVec) -> SparseVec {
        if self.cols.is_empty() {
            return row.clone();
        }
        let mut pairs: Vec<(usize, f64)> = row.iter().filter(|(c, _)| !self.cols.contains(c)).collect();
        for (k, &c) in self.cols.iter().enumerate() {
            pairs.push((c, (row.get(c) - self.mean[k]) / self.scale[k]));
        }
        SparseVec::from_pairs(pairs)
    }

    /// Maps weights learned on transformed rows back to raw-space weights.
    pub fn fold(&self, mut weights: Vec<f64>, mut bias: f64) -> (Vec<f64>, f64) {
        for (k, &c) in self.cols.iter().enumerate() {
            weights[c] /= self.scale[k];
            bias -= weights[c] * self.mean[k];
        }
        (weights, bias)
    }
}

pub(crate) fn check_training_set(x: &[SparseVec], y: &[Label], dim: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for r in x {
        r.check_dim(dim)?;
    }
    Ok(())
}
