//! Topic profiles of polarity-split SHAP supports.
//!
//! Per polarity: rank columns by how often and how strongly they support the
//! class, keep a quota-balanced top K across the feature families, factorize
//! the resulting support matrix with NMF, hard-assign each column to a topic,
//! and summarize messages as per-topic contribution sums.

mod nmf;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Family;
use crate::sparse::SparseVec;

pub use nmf::{nmf, NmfOptions, NmfResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Pos, Polarity::Neg];

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
        }
    }

    /// The polarity matching a predicted label.
    pub fn of_prediction(positive: bool) -> Self {
        if positive {
            Polarity::Pos
        } else {
            Polarity::Neg
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub presence: Vec<f64>,
    /// Zero where presence is zero.
    pub cond_mean: Vec<f64>,
}

pub fn feature_stats(supports: &[SparseVec], dim: usize) -> FeatureStats {
    let mut count = vec![0usize; dim];
    let mut total = vec![0.0; dim];
    for row in supports {
        for (c, v) in row.iter() {
            count[c] += 1;
            total[c] += v;
        }
    }
    let n = supports.len().max(1) as f64;
    FeatureStats {
        presence: count.iter().map(|&k| k as f64 / n).collect(),
        cond_mean: count
            .iter()
            .zip(&total)
            .map(|(&k, &t)| if k == 0 { 0.0 } else { t / k as f64 })
            .collect(),
    }
}

/// `cond_mean * sqrt(max(presence, tau_p))`
pub fn rank_score(stats: &FeatureStats, tau_p: f64) -> Vec<f64> {
    stats
        .presence
        .iter()
        .zip(&stats.cond_mean)
        .map(|(&p, &c)| c * p.max(tau_p).sqrt())
        .collect()
}

/// Per-family slot counts: `floor(rho_f * k)`, rounding remainder to words.
pub fn family_quotas(rho: [f64; 3], k: usize) -> Result<[usize; 3]> {
    if rho.iter().any(|r| !(*r >= 0.0)) || (rho.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("quota ratios must be nonnegative and sum to 1, got {rho:?}")));
    }
    let mut q = rho.map(|r| (r * k as f64 + 1e-9).floor() as usize);
    q[Family::Word.index()] += k - q.iter().sum::<usize>();
    Ok(q)
}

/// Columns kept for one polarity, in ascending column order.
pub fn select_top(rank: &[f64], family: &[Family], rho: [f64; 3], k: usize) -> Result<Vec<usize>> {
    if rank.len() != family.len() {
        return Err(Error::DimensionMismatch {
            expected: family.len(),
            found: rank.len(),
        });
    }
    let quotas = family_quotas(rho, k)?;
    let mut chosen = Vec::with_capacity(k);
    for fam in Family::ALL {
        let mut cols: Vec<usize> = (0..rank.len()).filter(|&c| family[c] == fam && rank[c] > 0.0).collect();
        cols.sort_by(|&a, &b| rank[b].total_cmp(&rank[a]).then(a.cmp(&b)));
        let quota = quotas[fam.index()];
        if cols.len() < quota {
            warn!(
                "{fam:?} family has {} columns with nonzero rank for a quota of {quota}",
                cols.len()
            );
        }
        chosen.extend(cols.into_iter().take(quota));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Dense `n x |columns|` slice of the supports.
pub fn build_matrix(supports: &[SparseVec], columns: &[usize]) -> Array2<f64> {
    let mut x = Array2::zeros((supports.len(), columns.len()));
    for (i, row) in supports.iter().enumerate() {
        for (pos, &c) in columns.iter().enumerate() {
            x[[i, pos]] = row.get(c);
        }
    }
    x
}

/// Topic of each column: argmax over the topic loadings, lowest index on ties.
pub fn assign_topics(h: &Array2<f64>) -> Vec<usize> {
    let (m, k) = h.dim();
    (0..k)
        .map(|j| {
            let mut best = 0;
            for t in 1..m {
                if h[[t, j]] > h[[best, j]] {
                    best = t;
                }
            }
            if h[[best, j]] == 0.0 {
                warn!("selected column {j} has no topic loading; assigning topic 0");
            }
            best
        })
        .collect()
}

/// Per-topic sums of a row of the support matrix.
pub fn topic_contributions(row: &[f64], assignment: &[usize], topics: usize) -> Vec<f64> {
    let mut tc = vec![0.0; topics];
    for (v, &t) in row.iter().zip(assignment) {
        tc[t] += v;
    }
    tc
}

/// L1-normalized mean of the group's topic contributions; `None` when the
/// group is empty or carries no mass.
pub fn group_profile(tcs: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = tcs.first()?;
    let mut mean = vec![0.0; first.len()];
    for tc in tcs {
        for (m, v) in mean.iter_mut().zip(tc) {
            *m += v;
        }
    }
    let n = tcs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(mean.into_iter().map(|m| m / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilingConfig {
    /// Selected columns per polarity.
    pub k: usize,
    pub tau_p: f64,
    /// Word, phrase, structural shares of `k`.
    pub rho: [f64; 3],
    pub topics: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProfilingConfig {
    fn default() -> Self {
        ProfilingConfig {
            k: 200,
            tau_p: 0.05,
            rho: [0.65, 0.3, 0.05],
            topics: 10,
            max_iters: 500,
            tol: 1e-5,
        }
    }
}

/// Everything needed to map a message's supports to topic contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub polarity: Polarity,
    pub topics: usize,
    pub seed: u64,
    /// Selected columns in ascending order.
    pub columns: Vec<usize>,
    /// Topic of each selected column.
    pub assignment: Vec<usize>,
    /// Topic loadings, `topics` rows of `columns.len()` entries.
    pub h: Vec<Vec<f64>>,
    pub objective: Vec<f64>,
}

impl TopicModel {
    /// Fits on the supports of one polarity over the reliable messages.
    pub fn fit(
        polarity: Polarity,
        supports: &[SparseVec],
        family: &[Family],
        cfg: &ProfilingConfig,
        seed: u64,
    ) -> Result<TopicModel> {
        if supports.is_empty() {
            return Err(Error::invalid(format!("no messages to profile for polarity {}", polarity.name())));
        }
        let stats = feature_stats(supports, family.len());
        let rank = rank_score(&stats, cfg.tau_p);
        let columns = select_top(&rank, family, cfg.rho, cfg.k)?;
        let x = build_matrix(supports, &columns);
        let fit = nmf(
            &x,
            &NmfOptions {
                topics: cfg.topics,
                max_iters: cfg.max_iters,
                tol: cfg.tol,
                seed,
            },
        )?;
        let assignment = assign_topics(&fit.h);
        Ok(TopicModel {
            polarity,
            topics: cfg.topics,
            seed,
            columns,
            assignment,
            h: fit.h.rows().into_iter().map(|r| r.to_vec()).collect(),
            objective: fit.objective,
        })
    }

    /// Topic contributions of one message's supports for this polarity.
    pub fn contributions(&self, support: &SparseVec) -> Vec<f64> {
        let row: Vec<f64> = self.columns.iter().map(|&c| support.get(c)).collect();
        topic_contributions(&row, &self.assignment, self.topics)
    }

    pub fn check(&self) -> Result<()> {
        let k = self.columns.len();
        if self.assignment.len() != k || self.h.len() != self.topics || self.h.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("topic model shapes are inconsistent"));
        }
        if self.assignment.iter().any(|&t| t >= self.topics) {
            return Err(Error::invalid("topic assignment out of range"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stats_of_partially_active_column() {
        let rows = vec![
            SparseVec::from_dense(&[0.2]),
            SparseVec::new(),
            SparseVec::from_dense(&[0.4]),
        ];
        let s = feature_stats(&rows, 2);
        assert!((s.presence[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.cond_mean[0] - 0.3).abs() < 1e-15);
        assert_eq!((s.presence[1], s.cond_mean[1]), (0.0, 0.0));
        let r = rank_score(&s, 0.05);
        assert!((r[0] - 0.3 * (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r[0] - 0.24495).abs() < 1e-5);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn constant_column_and_presence_floor() {
        let rows: Vec<SparseVec> = (0..100)
            .map(|i| SparseVec::from_pairs(vec![(0, 0.7), (1, if i == 0 { 2.0 } else { 0.0 })]))
            .collect();
        let s = feature_stats(&rows, 2);
        assert_eq!(s.presence[0], 1.0);
        assert!((s.cond_mean[0] - 0.7).abs() < 1e-14);
        let r = rank_score(&s, 0.05);
        assert!((r[1] - 2.0 * 0.05f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn default_quotas() {
        assert_eq!(family_quotas([0.65, 0.3, 0.05], 200).unwrap(), [130, 60, 10]);
        // 0.33 * 10 floors to 3 each; the leftover slot goes to words
        assert_eq!(family_quotas([0.34, 0.33, 0.33], 10).unwrap(), [4, 3, 3]);
        assert!(family_quotas([0.5, 0.5, 0.5], 10).is_err());
    }

    #[test]
    fn sparse_family_shrinks_its_quota() {
        let family = vec![Family::Structural; 20];
        let mut rank = vec![0.0; 20];
        rank[3] = 1.0;
        rank[7] = 2.0;
        rank[9] = 0.5;
        let cols = select_top(&rank, &family, [0.0, 0.0, 1.0], 10).unwrap();
        assert_eq!(cols, vec![3, 7, 9]);
    }

    #[test]
    fn ties_at_the_boundary_favor_lower_columns() {
        let family = vec![Family::Word; 4];
        let rank = vec![0.5, 0.9, 0.5, 0.5];
        let cols = select_top(&rank, &family, [1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(cols, vec![0, 1]);
    }

    #[test]
    fn matrix_copies_supports() {
        let rows = vec![SparseVec::from_dense(&[1.0, 0.0, 2.0]), SparseVec::new()];
        let x = build_matrix(&rows, &[0, 1, 2]);
        assert_eq!(x.row(0).to_vec(), vec![1.0, 0.0, 2.0]);
        assert_eq!(x.row(1).to_vec(), vec![0.0; 3]);
        let y = build_matrix(&rows, &[2]);
        assert_eq!(y[[0, 0]], 2.0);
    }

    #[test]
    fn argmax_assignment() {
        let h = Array2::from_shape_vec((2, 3), vec![0.1, 0.5, 0.0, 0.9, 0.5, 0.0]).unwrap();
        assert_eq!(assign_topics(&h), vec![1, 0, 0]);
        let eye = Array2::<f64>::eye(3);
        assert_eq!(assign_topics(&eye), vec![0, 1, 2]);
    }

    #[test]
    fn contributions_bucket_by_topic() {
        assert_eq!(topic_contributions(&[1.0, 2.0, 3.0], &[0, 1, 0], 2), vec![4.0, 2.0]);
        assert_eq!(topic_contributions(&[1.0, 2.0], &[0, 0], 3), vec![3.0, 0.0, 0.0]);
        assert_eq!(topic_contributions(&[0.0, 0.0], &[1, 0], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn profiles() {
        let p = group_profile(&[vec![1.0, 1.0], vec![3.0, 1.0]]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(group_profile(&[vec![4.0, 0.0, 1.0]]).unwrap(), vec![0.8, 0.0, 0.2]);
        assert_eq!(group_profile(&[]), None);
        assert_eq!(group_profile(&[vec![0.0, 0.0]]), None);
    }

    #[test]
    fn topic_model_fits_two_blocks() {
        // columns 0-2 co-occur, columns 3-5 co-occur
        let rows: Vec<SparseVec> = (0..20)
            .map(|i| {
                let base = if i % 2 == 0 { 0 } else { 3 };
                SparseVec::from_pairs((base..base + 3).map(|c| (c, 1.0 + (i % 3) as f64 * 0.1)).collect())
            })
            .collect();
        let cfg = ProfilingConfig {
            k: 6,
            rho: [1.0, 0.0, 0.0],
            topics: 2,
            ..Default::default()
        };
        let tm = TopicModel::fit(Polarity::Pos, &rows, &[Family::Word; 6], &cfg, 1).unwrap();
        tm.check().unwrap();
        let a = &tm.assignment;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        assert_eq!(a[3], a[4]);
        assert_ne!(a[0], a[3]);
    }

    fn arb_supports() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(
            proptest::collection::vec(prop_oneof![3 => Just(0.0), 2 => 0.0f64..3.0], 12),
            1..25,
        )
    }

    proptest! {
        #[test]
        fn contributions_partition_row_mass(row in proptest::collection::vec(0.0f64..5.0, 1..30), m in 1usize..6, seed in 0u64..1000) {
            let assignment: Vec<usize> = (0..row.len()).map(|j| (j as u64 * 2654435761 ^ seed) as usize % m).collect();
            let tc = topic_contributions(&row, &assignment, m);
            let a: f64 = tc.iter().sum();
            let b: f64 = row.iter().sum();
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn profiles_are_on_the_simplex(tcs in proptest::collection::vec(proptest::collection::vec(0.0f64..4.0, 5), 1..20)) {
            if let Some(p) = group_profile(&tcs) {
                prop_assert!(p.iter().all(|v| *v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn selection_respects_quotas_and_ignores_row_order(rows in arb_supports(), k in 1usize..12, rot in 0usize..25) {
            let family: Vec<Family> = (0..12).map(|j| Family::ALL[j % 3]).collect();
            let rho = [0.5, 0.3, 0.2];
            let sparse: Vec<SparseVec> = rows.iter().map(|r| SparseVec::from_dense(r)).collect();
            let sel = select_top(&rank_score(&feature_stats(&sparse, 12), 0.05), &family, rho, k).unwrap();
            let q = family_quotas(rho, k).unwrap();
            for f in Family::ALL {
                prop_assert!(sel.iter().filter(|&&c| family[c] == f).count() <= q[f.index()]);
            }
            let mut rotated = sparse.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            rotated.reverse();
            let again = select_top(&rank_score(&feature_stats(&rotated, 12), 0.05), &family, rho, k).unwrap();
            prop_assert_eq!(sel, again);
        }
    }
}
