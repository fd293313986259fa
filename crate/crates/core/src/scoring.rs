//! Divergence scores, detector metrics and the repair layer.
//!
//! Detector scores are oriented so that higher means "more likely
//! misclassified". A detector rejects a message iff its score is at or above
//! the cutoff; the cutoff is the largest one whose true rejection rate (share
//! of misclassified messages rejected) reaches the target.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2: f64 = std::f64::consts::LN_2;

fn kl_to_mid(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, clamped to `[0, ln 2]` against
/// round-off.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mid(p, &m) + 0.5 * kl_to_mid(q, &m);
    Ok(js.clamp(0.0, LN_2))
}

/// Probability that a random misclassified message outscores a random
/// correct one, ties counting one half. `None` unless both kinds are present.
pub fn auroc(scores: &[f64], misclassified: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), misclassified.len());
    let n_mis = misclassified.iter().filter(|m| **m).count() as u64;
    let n_cor = scores.len() as u64 - n_mis;
    if n_mis == 0 || n_cor == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney count, kept integral
    let mut twice_wins: u128 = 0;
    let mut correct_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        let (mut mis_here, mut cor_here) = (0u64, 0u64);
        for &k in &order[i..j] {
            if misclassified[k] {
                mis_here += 1;
            } else {
                cor_here += 1;
            }
        }
        twice_wins += 2 * mis_here as u128 * correct_below as u128 + mis_here as u128 * cor_here as u128;
        correct_below += cor_here;
        i = j;
    }
    Some(twice_wins as f64 / (2 * n_mis as u128 * n_cor as u128) as f64)
}

/// Largest cutoff that rejects at least `ceil(target * n_mis)` misclassified
/// messages; `+inf` when there is nothing to reject.
pub fn trr_cutoff(scores: &[f64], misclassified: &[bool], target: f64) -> f64 {
    let mut mis: Vec<f64> = scores
        .iter()
        .zip(misclassified)
        .filter(|(_, m)| **m)
        .map(|(s, _)| *s)
        .collect();
    let need = (target * mis.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    if mis.is_empty() || need == 0 {
        return f64::INFINITY;
    }
    mis.sort_by(|a, b| b.total_cmp(a));
    mis[need.min(mis.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionCounts {
    /// Misclassified and rejected.
    pub true_rejections: usize,
    /// Correct but rejected.
    pub false_rejections: usize,
    pub correct_accepted: usize,
    pub misclassified_accepted: usize,
}

impl RejectionCounts {
    pub fn at_cutoff(scores: &[f64], misclassified: &[bool], cutoff: f64) -> Self {
        let mut c = RejectionCounts {
            true_rejections: 0,
            false_rejections: 0,
            correct_accepted: 0,
            misclassified_accepted: 0,
        };
        for (s, m) in scores.iter().zip(misclassified) {
            match (*s >= cutoff, *m) {
                (true, true) => c.true_rejections += 1,
                (true, false) => c.false_rejections += 1,
                (false, false) => c.correct_accepted += 1,
                (false, true) => c.misclassified_accepted += 1,
            }
        }
        c
    }

    pub fn trr(&self) -> Option<f64> {
        ratio(self.true_rejections, self.true_rejections + self.misclassified_accepted)
    }

    pub fn frr(&self) -> Option<f64> {
        ratio(self.false_rejections, self.false_rejections + self.correct_accepted)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Share of correct messages rejected at the cutoff reaching `target` TRR.
pub fn frr_at_trr(scores: &[f64], misclassified: &[bool], target: f64) -> Option<f64> {
    let has_both = misclassified.iter().any(|m| *m) && misclassified.iter().any(|m| !*m);
    if !has_both {
        return None;
    }
    let cutoff = trr_cutoff(scores, misclassified, target);
    RejectionCounts::at_cutoff(scores, misclassified, cutoff).frr()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectSet {
    pub threshold: f64,
    pub true_rejections: Vec<u64>,
    pub false_rejections: Vec<u64>,
}

impl RejectSet {
    pub fn len(&self) -> usize {
        self.true_rejections.len() + self.false_rejections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Messages a base detector rejects at the fixed true rejection rate.
pub fn reject_set(ids: &[u64], scores: &[f64], misclassified: &[bool], trr_fix: f64) -> Result<RejectSet> {
    if !(trr_fix > 0.0 && trr_fix <= 1.0) {
        return Err(Error::invalid(format!("trr_fix must lie in (0, 1], got {trr_fix}")));
    }
    let threshold = trr_cutoff(scores, misclassified, trr_fix);
    let mut set = RejectSet {
        threshold,
        true_rejections: Vec::new(),
        false_rejections: Vec::new(),
    };
    for ((id, s), m) in ids.iter().zip(scores).zip(misclassified) {
        if *s >= threshold {
            if *m {
                set.true_rejections.push(*id);
            } else {
                set.false_rejections.push(*id);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub detector: String,
    pub subset: String,
    pub n: usize,
    pub n_misclassified: usize,
    pub auroc: Option<f64>,
    pub frr_at_trr: Option<f64>,
    pub trr_target: f64,
    pub threshold: Option<f64>,
    pub counts: Option<RejectionCounts>,
}

/// Scores with `None` entries (unavailable representation) are left out.
pub fn evaluate_detector(
    detector: &str,
    subset: &str,
    scores: &[Option<f64>],
    misclassified: &[bool],
    trr_target: f64,
) -> DetectorReport {
    let (s, m): (Vec<f64>, Vec<bool>) = scores
        .iter()
        .zip(misclassified)
        .filter_map(|(s, m)| s.map(|v| (v, *m)))
        .unzip();
    let auc = auroc(&s, &m);
    let (threshold, counts) = if auc.is_some() {
        let cut = trr_cutoff(&s, &m, trr_target);
        (Some(cut), Some(RejectionCounts::at_cutoff(&s, &m, cut)))
    } else {
        (None, None)
    };
    DetectorReport {
        detector: detector.to_string(),
        subset: subset.to_string(),
        n: s.len(),
        n_misclassified: m.iter().filter(|v| **v).count(),
        auroc: auc,
        frr_at_trr: counts.and_then(|c| c.frr()),
        trr_target,
        threshold,
        counts,
    }
}

/// Re-acceptance threshold so that scores below the cutoff reaching
/// `trr_fix` on the calibration set are re-accepted.
///
/// Without misclassified calibration messages the cutoff is undefined; the
/// `fallback_quantile` of correct scores is used instead.
pub fn calibrate_tau(scores: &[f64], misclassified: &[bool], trr_fix: f64, fallback_quantile: f64) -> Option<f64> {
    if misclassified.iter().any(|m| *m) {
        return Some(trr_cutoff(scores, misclassified, trr_fix).next_down());
    }
    let mut correct: Vec<f64> = scores.to_vec();
    if correct.is_empty() {
        return None;
    }
    correct.sort_by(|a, b| a.total_cmp(b));
    let pos = ((fallback_quantile * correct.len() as f64).ceil() as usize).clamp(1, correct.len()) - 1;
    Some(correct[pos])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectedMessage {
    pub id: u64,
    pub misclassified: bool,
    pub positive_prediction: bool,
    /// `None` when no score is available; such messages stay rejected.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub base_detector: String,
    pub representation: String,
    pub tau_pos: Option<f64>,
    pub tau_neg: Option<f64>,
    pub n_false_rejections: usize,
    pub n_true_rejections: usize,
    pub n_recovery: usize,
    pub n_leakage: usize,
    pub n_correct_fix: i64,
    pub recov_r: Option<f64>,
    pub leak_r: Option<f64>,
    pub reaccepted: Vec<u64>,
}

/// Re-accepts a rejected message iff its score is at most the threshold of
/// its predicted polarity.
pub fn repair(
    base_detector: &str,
    representation: &str,
    rejected: &[RejectedMessage],
    tau_pos: Option<f64>,
    tau_neg: Option<f64>,
) -> RepairReport {
    let mut r = RepairReport {
        base_detector: base_detector.to_string(),
        representation: representation.to_string(),
        tau_pos,
        tau_neg,
        n_false_rejections: 0,
        n_true_rejections: 0,
        n_recovery: 0,
        n_leakage: 0,
        n_correct_fix: 0,
        recov_r: None,
        leak_r: None,
        reaccepted: Vec::new(),
    };
    for msg in rejected {
        if msg.misclassified {
            r.n_true_rejections += 1;
        } else {
            r.n_false_rejections += 1;
        }
        let tau = if msg.positive_prediction { tau_pos } else { tau_neg };
        let accept = matches!((msg.score, tau), (Some(s), Some(t)) if s <= t);
        if accept {
            r.reaccepted.push(msg.id);
            if msg.misclassified {
                r.n_leakage += 1;
            } else {
                r.n_recovery += 1;
            }
        }
    }
    r.n_correct_fix = r.n_recovery as i64 - r.n_leakage as i64;
    r.recov_r = ratio(r.n_recovery, r.n_false_rejections);
    r.leak_r = ratio(r.n_leakage, r.n_true_rejections);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auroc(scores: &[f64], mis: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if mis[i] && !mis[j] {
                    pairs += 1.0;
                    acc += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn js_reference_values() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
        // 0.5 ln(4/3) + 0.5 (0.5 ln(2/3) + 0.5 ln 2)
        let want = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
        let got = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.21576).abs() < 1e-5);
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]), Some(0.75));
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(auroc(&[0.4; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn frr_examples() {
        let mis = [true, true, false, false, false];
        assert_eq!(frr_at_trr(&[0.9, 0.8, 0.3, 0.2, 0.1], &mis, 0.95), Some(0.0));
        assert_eq!(frr_at_trr(&[0.5; 5], &mis, 0.95), Some(1.0));

        // 20 misclassified at 0.9, 0.85, ..., correct at 0.5
        let mut scores: Vec<f64> = (0..20).map(|i| 0.9 - 0.05 * i as f64).collect();
        let mut flags = vec![true; 20];
        scores.extend([0.5; 100]);
        flags.extend([false; 100]);
        // 19 of 20 must be rejected: cutoff is the 19th largest, 0.9 - 0.05 * 18 = 0.0
        // and every correct message sits above it
        let cut = trr_cutoff(&scores, &flags, 0.95);
        assert!((cut - (0.9 - 0.05 * 18.0)).abs() < 1e-12);
        let brute = (0..scores.len())
            .filter(|&i| !flags[i] && scores[i] >= cut)
            .count() as f64
            / 100.0;
        assert_eq!(frr_at_trr(&scores, &flags, 0.95), Some(brute));
        assert_eq!(brute, 1.0);
        // at 0.5 TRR only the top 10 misclassified are needed, cutoff 0.45 < 0.5
        assert_eq!(frr_at_trr(&scores, &flags, 0.5), Some(1.0));
        assert_eq!(frr_at_trr(&scores, &flags, 0.4), Some(0.0));
    }

    #[test]
    fn reject_set_edge_cases() {
        let ids = [1, 2, 3, 4];
        let s = [0.9, 0.2, 0.6, 0.4];
        let full = reject_set(&ids, &s, &[false, true, true, false], 1.0).unwrap();
        assert_eq!(full.threshold, 0.2);
        assert_eq!(full.len(), 4);
        let none = reject_set(&ids, &s, &[false; 4], 0.95).unwrap();
        assert_eq!(none.threshold, f64::INFINITY);
        assert!(none.is_empty());
        assert!(reject_set(&ids, &s, &[false; 4], 0.0).is_err());
    }

    #[test]
    fn reject_set_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ids: Vec<u64> = (0..10).collect();
            let s: Vec<f64> = (0..10).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let m: Vec<bool> = (0..10).map(|_| rng.random_bool(0.4)).collect();
            let n_mis = m.iter().filter(|v| **v).count();
            let set = reject_set(&ids, &s, &m, 0.95).unwrap();
            if n_mis == 0 {
                assert!(set.is_empty());
                continue;
            }
            // the largest candidate cutoff over observed scores reaching the target
            let need = (0.95 * n_mis as f64 - 1e-9).ceil() as usize;
            let best = s
                .iter()
                .copied()
                .filter(|&c| (0..10).filter(|&i| m[i] && s[i] >= c).count() >= need)
                .fold(f64::NEG_INFINITY, f64::max);
            let tr: Vec<u64> = (0..10).filter(|&i| m[i] && s[i] >= best).map(|i| i as u64).collect();
            let fr: Vec<u64> = (0..10).filter(|&i| !m[i] && s[i] >= best).map(|i| i as u64).collect();
            assert_eq!(set.threshold, best);
            assert_eq!(set.true_rejections, tr);
            assert_eq!(set.false_rejections, fr);
        }
    }

    fn synthetic_rejections(rng: &mut ChaCha8Rng, n: usize) -> Vec<RejectedMessage> {
        (0..n)
            .map(|i| RejectedMessage {
                id: i as u64,
                misclassified: rng.random_bool(0.5),
                positive_prediction: rng.random_bool(0.5),
                score: if rng.random_bool(0.1) {
                    None
                } else {
                    Some(rng.random_range(1e-6..LN_2))
                },
            })
            .collect()
    }

    #[test]
    fn repair_gate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rejected: Vec<RejectedMessage> = synthetic_rejections(&mut rng, 40)
            .into_iter()
            .map(|m| RejectedMessage {
                score: m.score.or(Some(0.3)),
                ..m
            })
            .collect();
        let closed = repair("entropy", "original", &rejected, Some(0.0), Some(0.0));
        assert_eq!((closed.recov_r, closed.leak_r), (Some(0.0), Some(0.0)));
        let open = repair("entropy", "original", &rejected, Some(LN_2), Some(LN_2));
        assert_eq!((open.recov_r, open.leak_r), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn repair_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let rejected = synthetic_rejections(&mut rng, 30);
            let (tp, tn) = (rng.random_range(0.0..LN_2), rng.random_range(0.0..LN_2));
            let r = repair("d", "r", &rejected, Some(tp), Some(tn));
            let mut rec = 0;
            let mut leak = 0;
            for m in &rejected {
                let tau = if m.positive_prediction { tp } else { tn };
                if let Some(s) = m.score {
                    if s <= tau {
                        if m.misclassified {
                            leak += 1;
                        } else {
                            rec += 1;
                        }
                    }
                }
            }
            let fr = rejected.iter().filter(|m| !m.misclassified).count();
            let tr = rejected.len() - fr;
            assert_eq!((r.n_recovery, r.n_leakage), (rec, leak));
            assert_eq!(r.n_correct_fix, rec as i64 - leak as i64);
            assert_eq!(r.recov_r, Some(rec as f64 / fr as f64));
            assert_eq!(r.leak_r, Some(leak as f64 / tr as f64));
            assert_eq!(r.reaccepted.len(), rec + leak);
        }
    }

    #[test]
    fn missing_scores_stay_rejected() {
        let rejected = [RejectedMessage {
            id: 7,
            misclassified: false,
            positive_prediction: true,
            score: None,
        }];
        let r = repair("d", "r", &rejected, Some(LN_2), Some(LN_2));
        assert_eq!(r.n_recovery, 0);
        assert!(r.reaccepted.is_empty());
    }

    #[test]
    fn tau_reaccepts_strictly_below_cutoff() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let m = [false, true, false, true];
        let tau = calibrate_tau(&s, &m, 1.0, 0.95).unwrap();
        assert!(tau < 0.2 && tau > 0.19999);
        assert_eq!(calibrate_tau(&s, &[false; 4], 0.95, 0.95), Some(0.4));
    }

    fn simplex(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn js_bounds_and_symmetry(a in proptest::collection::vec(0.0f64..1.0, 1..12), b in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let n = a.len().min(b.len());
            prop_assume!(a[..n].iter().sum::<f64>() > 0.0 && b[..n].iter().sum::<f64>() > 0.0);
            let (p, q) = (simplex(&a[..n]), simplex(&b[..n]));
            let pq = js_divergence(&p, &q).unwrap();
            prop_assert!(pq >= 0.0 && pq <= LN_2 + 1e-12);
            prop_assert_eq!(pq, js_divergence(&q, &p).unwrap());
            prop_assert!(js_divergence(&p, &p).unwrap() <= 1e-9);
        }

        #[test]
        fn auroc_equals_all_pairs(data in proptest::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let m: Vec<bool> = data.iter().map(|d| d.1).collect();
            match auroc(&s, &m) {
                Some(v) => prop_assert_eq!(v, brute_auroc(&s, &m)),
                None => prop_assert!(m.iter().all(|x| *x) || m.iter().all(|x| !*x)),
            }
        }

        #[test]
        fn frr_is_monotone_in_target(data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..100), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let s: Vec<f64> = data.iter().map(|d| d.0).collect();
            let m: Vec<bool> = data.iter().map(|d| d.1).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if let (Some(a), Some(b)) = (frr_at_trr(&s, &m, lo), frr_at_trr(&s, &m, hi)) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn reject_set_is_rank_only(data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..60)) {
            let ids: Vec<u64> = (0..data.len() as u64).collect();
            let s: Vec<f64> = data.iter().map(|d| d.0).collect();
            let m: Vec<bool> = data.iter().map(|d| d.1).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 2.0).collect();
            let a = reject_set(&ids, &s, &m, 0.95).unwrap();
            let b = reject_set(&ids, &t, &m, 0.95).unwrap();
            prop_assert_eq!(a.true_rejections, b.true_rejections);
            prop_assert_eq!(a.false_rejections, b.false_rejections);
        }
    }
}
