//! Per-message SHAP attributions and their polarity split.
//!
//! Linear models are explained exactly in margin space against the training
//! mean. Everything else goes through a kernel estimator on the calibrated
//! probability, using a small stratified background sample.

mod kernel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{sigmoid, Model, PlattCalibration};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

pub use kernel::{coalition_plan, kernel_shap, Coalition, KernelOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector {
    pub id: u64,
    pub phi: SparseVec,
    pub base_value: f64,
    /// The explained output at the message, so `base_value + sum(phi)`
    /// should reproduce it.
    pub output: f64,
}

impl ShapVector {
    pub fn local_accuracy_gap(&self) -> f64 {
        (self.base_value + self.phi.sum() - self.output).abs()
    }
}

/// `plus - minus == phi` and the two never overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolaritySupports {
    pub plus: SparseVec,
    pub minus: SparseVec,
}

pub fn split_supports(phi: &SparseVec) -> PolaritySupports {
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (c, v) in phi.iter() {
        if v > 0.0 {
            plus.push((c, v));
        } else if v < 0.0 {
            minus.push((c, -v));
        }
    }
    PolaritySupports {
        plus: SparseVec::from_pairs(plus),
        minus: SparseVec::from_pairs(minus),
    }
}

/// Exact Shapley values of `w.x + b` with features replaced by `mu` when
/// absent: `phi_j = w_j (x_j - mu_j)`.
pub fn linear_shap(weights: &[f64], bias: f64, x: &SparseVec, mu: &[f64]) -> Result<ShapVector> {
    if mu.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            found: mu.len(),
        });
    }
    x.check_dim(weights.len())?;
    let mut pairs = Vec::with_capacity(weights.len());
    let mut xi = x.iter().peekable();
    for (j, (&w, &m)) in weights.iter().zip(mu).enumerate() {
        let xj = match xi.peek() {
            Some(&(c, v)) if c == j => {
                xi.next();
                v
            }
            _ => 0.0,
        };
        pairs.push((j, w * (xj - m)));
    }
    let base_value = weights.iter().zip(mu).map(|(w, m)| w * m).sum::<f64>() + bias;
    Ok(ShapVector {
        id: 0,
        phi: SparseVec::from_pairs(pairs),
        base_value,
        output: x.dot(weights) + bias,
    })
}

/// Maps a decision value to the explained output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Identity,
    /// `sigmoid(a * m + b)`
    Logistic { a: f64, b: f64 },
}

impl Link {
    pub fn apply(&self, m: f64) -> f64 {
        match *self {
            Link::Identity => m,
            Link::Logistic { a, b } => sigmoid(a * m + b),
        }
    }
}

/// A model as seen by the kernel explainer.
pub enum Explained<'a> {
    /// `link(w.x + b)`; coalition values cost O(|coalition|).
    LinearLink {
        weights: &'a [f64],
        bias: f64,
        link: Link,
    },
    /// Arbitrary function of the dense input.
    Dense {
        dim: usize,
        f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    },
}

impl<'a> Explained<'a> {
    /// The calibrated positive-class probability of a trained classifier.
    pub fn probability(model: &'a Model) -> Self {
        let (weights, bias) = model.linear_form();
        let link = match model {
            Model::Svm(m) => {
                let PlattCalibration { a, b } = m.calibration.unwrap_or(PlattCalibration::IDENTITY);
                Link::Logistic { a, b }
            }
            Model::Logreg(_) | Model::Nb(_) => Link::Logistic { a: 1.0, b: 0.0 },
        };
        Explained::LinearLink { weights, bias, link }
    }

    pub fn dim(&self) -> usize {
        match self {
            Explained::LinearLink { weights, .. } => weights.len(),
            Explained::Dense { dim, .. } => *dim,
        }
    }

    pub fn output(&self, x: &SparseVec) -> f64 {
        match self {
            Explained::LinearLink { weights, bias, link } => link.apply(x.dot(weights) + bias),
            Explained::Dense { dim, f } => f(&x.to_dense(*dim)),
        }
    }
}

pub fn mean_vector(rows: &[SparseVec], dim: usize) -> Vec<f64> {
    let mut mu = vec![0.0; dim];
    for r in rows {
        for (c, v) in r.iter() {
            mu[c] += v;
        }
    }
    let n = rows.len().max(1) as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Indices of `size` rows drawn without replacement, stratified by label
/// (largest-remainder allocation), returned in ascending order.
pub fn sample_background(labels: &[Label], size: usize, seed: u64) -> Vec<usize> {
    if size >= labels.len() {
        return (0..labels.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools: Vec<Vec<usize>> = [Label::Negative, Label::Positive]
        .iter()
        .map(|l| (0..labels.len()).filter(|&i| labels[i] == *l).collect())
        .collect();
    let n = labels.len() as f64;
    let exact: Vec<f64> = pools.iter().map(|p| size as f64 * p.len() as f64 / n).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut short = size - take.iter().sum::<usize>();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle().take(4) {
        if short == 0 {
            break;
        }
        if take[c] < pools[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }
    let mut picked = Vec::with_capacity(size);
    for (pool, k) in pools.into_iter().zip(take) {
        let mut pool = pool;
        pool.shuffle(&mut rng);
        picked.extend_from_slice(&pool[..k]);
    }
    picked.sort_unstable();
    picked
}

/// Per-message seed that does not depend on processing order.
pub fn message_seed(global: u64, id: u64) -> u64 {
    let mut z = global ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
