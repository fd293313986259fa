//! Kernel SHAP.
//!
//! The value function averages the model over background rows, and Shapley
//! values are linear in the game, so the estimate is the mean of one
//! constrained weighted regression per background row. Each row's game only
//! involves the columns where the message differs from that row, which keeps
//! the regressions small for sparse text vectors.

use std::collections::HashMap;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{message_seed, Explained, ShapVector};
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

const ACTIVE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Coalitions per background row; `None` means `2 * players + 2048`.
    pub n_coalitions: Option<usize>,
    /// Enumerate every coalition when a row game has at most this many players.
    pub full_enumeration_max: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            n_coalitions: None,
            full_enumeration_max: 12,
        }
    }
}

/// A proper, non-empty coalition. With `complement` set it is every player
/// except `members`; this keeps large coalitions as cheap as small ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Coalition {
    pub members: Vec<usize>,
    pub complement: bool,
    pub weight: f64,
}

impl Coalition {
    pub fn size(&self, m: usize) -> usize {
        if self.complement {
            m - self.members.len()
        } else {
            self.members.len()
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Coalitions and regression weights for an `m`-player game.
///
/// With `budget >= 2^m - 2` every proper coalition is listed with its exact
/// Shapley-kernel weight. Otherwise coalition sizes are enumerated from the
/// outside in (each size paired with its complement size) while the budget
/// covers them, and the rest is sampled by size with complements paired.
pub fn coalition_plan(m: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<Coalition> {
    assert!(m >= 2, "coalition plan needs at least two players");
    let all = if m < 63 { (1u64 << m) - 2 } else { u64::MAX };
    let mut plan = Vec::new();

    if (budget as u64) >= all {
        for s in 1..m {
            let w = (m - 1) as f64 / (binomial(m, s) * (s * (m - s)) as f64);
            for_each_combination(m, s.min(m - s), |c| {
                plan.push(Coalition {
                    members: c.to_vec(),
                    complement: s > m - s,
                    weight: w,
                })
            });
        }
        return plan;
    }

    let n_sizes = m / 2; // ceil((m - 1) / 2)
    let n_paired = (m - 1) / 2;
    let mut weight: Vec<f64> = (1..=n_sizes).map(|s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
    for w in weight.iter_mut().take(n_paired) {
        *w *= 2.0;
    }
    let total: f64 = weight.iter().sum();
    weight.iter_mut().for_each(|w| *w /= total);

    let mut remaining = weight.clone();
    let mut left = budget as f64;
    let mut n_full = 0;
    for s in 1..=n_sizes {
        let paired = s <= n_paired;
        let n_subsets = binomial(m, s) * if paired { 2.0 } else { 1.0 };
        if left * remaining[s - 1] / n_subsets < 1.0 - 1e-8 {
            break;
        }
        n_full += 1;
        left -= n_subsets;
        if remaining[s - 1] < 1.0 {
            let r = 1.0 - remaining[s - 1];
            remaining.iter_mut().for_each(|w| *w /= r);
        }
        let w = weight[s - 1] / n_subsets;
        for_each_combination(m, s, |c| {
            plan.push(Coalition {
                members: c.to_vec(),
                complement: false,
                weight: w,
            });
            if paired {
                plan.push(Coalition {
                    members: c.to_vec(),
                    complement: true,
                    weight: w,
                });
            }
        });
    }

    if n_full == n_sizes {
        return plan;
    }
    let fixed = plan.len();
    let mut samples_left = left.max(0.0) as usize;
    let mut draw_weights: Vec<f64> = weight.clone();
    for w in draw_weights.iter_mut().take(n_paired) {
        *w /= 2.0;
    }
    let draw_weights = &draw_weights[n_full..];
    let sizes = WeightedIndex::new(draw_weights).expect("positive size weights");
    let mut seen: HashMap<Vec<usize>, (usize, bool)> = HashMap::new();
    let mut draws = 0;
    while samples_left > 0 && draws < 4 * budget {
        draws += 1;
        let s = sizes.sample(rng) + n_full + 1;
        let mut members = sample(rng, m, s).into_vec();
        members.sort_unstable();
        let paired = s <= n_paired;
        match seen.get(&members) {
            Some(&(at, with_complement)) => {
                plan[at].weight += 1.0;
                if with_complement {
                    plan[at + 1].weight += 1.0;
                }
            }
            None => {
                samples_left -= 1;
                let with_complement = paired && samples_left > 0;
                seen.insert(members.clone(), (plan.len(), with_complement));
                plan.push(Coalition {
                    members: members.clone(),
                    complement: false,
                    weight: 1.0,
                });
                if with_complement {
                    samples_left -= 1;
                    plan.push(Coalition {
                        members,
                        complement: true,
                        weight: 1.0,
                    });
                }
            }
        }
    }
    let weight_left: f64 = weight[n_full..].iter().sum();
    let sampled: f64 = plan[fixed..].iter().map(|c| c.weight).sum();
    if sampled > 0.0 {
        for c in &mut plan[fixed..] {
            c.weight *= weight_left / sampled;
        }
    }
    plan
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, n x n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}

/// Weighted least squares for `y ~ sum_{j in S} phi_j` subject to
/// `sum(phi) = delta`, with the last player eliminated.
fn solve_game(m: usize, plan: &[Coalition], y: &[f64], delta: f64) -> Vec<f64> {
    // G = Z^T W Z and g = Z^T W y assembled from the stored side of each
    // coalition: complemented ones use (1 - z)(1 - z)^T = 11^T - 1z^T - z1^T + zz^T
    let mut gs = vec![0.0; m * m];
    let mut u = vec![0.0; m];
    let mut g = vec![0.0; m];
    let (mut wc, mut yc) = (0.0, 0.0);
    for (c, &yk) in plan.iter().zip(y) {
        let w = c.weight;
        if c.complement {
            wc += w;
            yc += w * yk;
        }
        let sign = if c.complement { -1.0 } else { 1.0 };
        for &i in &c.members {
            g[i] += sign * w * yk;
            if c.complement {
                u[i] += w;
            }
            let row = &mut gs[i * m..(i + 1) * m];
            for &j in &c.members {
                row[j] += w;
            }
        }
    }
    let gram = |i: usize, j: usize| gs[i * m + j] + wc - u[i] - u[j];
    let gvec = |i: usize| g[i] + yc;

    let last = m - 1;
    let n = m - 1;
    let mut a = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    let gll = gram(last, last);
    for i in 0..n {
        let gil = gram(i, last);
        rhs[i] = gvec(i) - gvec(last) - delta * (gil - gll);
        for j in 0..n {
            a[i * n + j] = gram(i, j) - gil - gram(last, j) + gll;
        }
    }
    let mut solution = cholesky_solve(&a, &rhs, n);
    let mut ridge = 1e-8;
    while solution.is_none() && ridge < 1.0 {
        warn!("singular coalition regression with {m} players; adding ridge {ridge:e}");
        let mut ar = a.clone();
        for i in 0..n {
            ar[i * n + i] += ridge;
        }
        solution = cholesky_solve(&ar, &rhs, n);
        ridge *= 100.0;
    }
    let mut phi = solution.unwrap_or_else(|| vec![0.0; n]);
    let rest: f64 = phi.iter().sum();
    phi.push(delta - rest);
    phi
}

/// Columns where `x` and `row` differ, as `(column, x value, row value)`.
fn differing(x: &SparseVec, row: &SparseVec) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    let (mut a, mut b) = (x.iter().peekable(), row.iter().peekable());
    loop {
        let (col, xv, rv) = match (a.peek().copied(), b.peek().copied()) {
            (None, None) => break,
            (Some((i, v)), None) => {
                a.next();
                (i, v, 0.0)
            }
            (None, Some((j, w))) => {
                b.next();
                (j, 0.0, w)
            }
            (Some((i, v)), Some((j, w))) => {
                if i < j {
                    a.next();
                    (i, v, 0.0)
                } else if j < i {
                    b.next();
                    (j, 0.0, w)
                } else {
                    a.next();
                    b.next();
                    (i, v, w)
                }
            }
        };
        if (xv - rv).abs() > ACTIVE_EPS {
            out.push((col, xv, rv));
        }
    }
    out
}

/// Kernel SHAP values of `model` at `x` against `background`.
///
/// `seed` is mixed with each background row index, so results do not depend
/// on how messages are scheduled.
pub fn kernel_shap(
    model: &Explained<'_>,
    x: &SparseVec,
    background: &[SparseVec],
    opts: &KernelOptions,
    seed: u64,
) -> Result<ShapVector> {
    let dim = model.dim();
    x.check_dim(dim)?;
    if background.is_empty() {
        return Err(Error::invalid("kernel explainer needs at least one background row"));
    }
    let f1 = model.output(x);
    let nb = background.len() as f64;
    let mut base_value = 0.0;
    let mut phi = HashMap::<usize, f64>::new();
    let mut any_active = false;

    for (r, row) in background.iter().enumerate() {
        row.check_dim(dim)?;
        let f0 = model.output(row);
        base_value += f0 / nb;
        let active = differing(x, row);
        let m = active.len();
        if m == 0 {
            continue;
        }
        any_active = true;
        let delta = f1 - f0;
        let local = if m == 1 {
            vec![delta]
        } else {
            let budget = if m <= opts.full_enumeration_max {
                usize::MAX
            } else {
                opts.n_coalitions.unwrap_or(2 * m + 2048)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(message_seed(seed, r as u64));
            let plan = coalition_plan(m, budget, &mut rng);
            let y: Vec<f64> = plan.iter().map(|c| coalition_value(model, x, row, &active, c) - f0).collect();
            solve_game(m, &plan, &y, delta)
        };
        for ((col, _, _), v) in active.iter().zip(local) {
            *phi.entry(*col).or_insert(0.0) += v / nb;
        }
    }
    if !any_active {
        warn!("message does not differ from any background row; attributions are zero");
    }
    let mut pairs: Vec<(usize, f64)> = phi.into_iter().collect();
    pairs.sort_unstable_by_key(|p| p.0);
    Ok(ShapVector {
        id: 0,
        phi: SparseVec::from_pairs(pairs),
        base_value,
        output: f1,
    })
}

fn coalition_value(
    model: &Explained<'_>,
    x: &SparseVec,
    row: &SparseVec,
    active: &[(usize, f64, f64)],
    c: &Coalition,
) -> f64 {
    match model {
        Explained::LinearLink { weights, bias, link } => {
            let shift = |k: usize| {
                let (col, xv, rv) = active[k];
                weights[col] * (xv - rv)
            };
            let partial: f64 = c.members.iter().map(|&k| shift(k)).sum();
            let margin = if c.complement {
                x.dot(weights) + bias - partial
            } else {
                row.dot(weights) + bias + partial
            };
            link.apply(margin)
        }
        Explained::Dense { dim, f } => {
            let mut z = if c.complement { x.to_dense(*dim) } else { row.to_dense(*dim) };
            for &k in &c.members {
                let (col, xv, rv) = active[k];
                z[col] = if c.complement { rv } else { xv };
            }
            f(&z)
        }
    }
}
