//! Topic-level uncertainty representations and output-level uncertainty
//! scores.
//!
//! Each representation maps a message's topic contributions to a point on
//! the topic simplex. When a transform has no mass to normalize, the output
//! is the uniform distribution with `degenerate` set; when its reference
//! context is missing the representation is unavailable (`None`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::js_divergence;

/// Floor applied before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Original,
    Vacuity,
    Dissonance,
    Aleatory,
    DoctorAlpha,
    DoctorBeta,
    Odin,
    RelU,
}

impl Representation {
    pub const ALL: [Representation; 8] = [
        Representation::Original,
        Representation::Vacuity,
        Representation::Dissonance,
        Representation::Aleatory,
        Representation::DoctorAlpha,
        Representation::DoctorBeta,
        Representation::Odin,
        Representation::RelU,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Original => "original",
            Representation::Vacuity => "vacuity",
            Representation::Dissonance => "dissonance",
            Representation::Aleatory => "aleatory",
            Representation::DoctorAlpha => "doctor_alpha",
            Representation::DoctorBeta => "doctor_beta",
            Representation::Odin => "odin",
            Representation::RelU => "rel_u",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepVector {
    pub values: Vec<f64>,
    /// The transform produced no mass and the uniform vector was substituted.
    pub degenerate: bool,
}

impl RepVector {
    fn uniform(m: usize) -> Self {
        RepVector {
            values: vec![1.0 / m as f64; m],
            degenerate: true,
        }
    }
}

/// L1-normalizes nonnegative weights; uniform and flagged if they sum to 0.
pub fn normalize(v: Vec<f64>) -> RepVector {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return RepVector::uniform(v.len().max(1));
    }
    RepVector {
        values: v.into_iter().map(|x| x / total).collect(),
        degenerate: false,
    }
}

pub fn original(tc: &[f64]) -> RepVector {
    normalize(tc.to_vec())
}

/// Weak evidence for a topic gives it high weight: `1 / (1 + tc_m / s)`.
pub fn vacuity_vector(tc: &[f64], scale: f64) -> RepVector {
    normalize(tc.iter().map(|t| 1.0 / (1.0 + t / scale)).collect())
}

fn balance(x: f64, y: f64) -> f64 {
    if x + y == 0.0 {
        0.0
    } else {
        1.0 - (x - y).abs() / (x + y)
    }
}

/// Conflict between comparably supported topics, with beliefs
/// `b_m = r_m / (M + sum r)` and `r = tc / s`.
pub fn dissonance_vector(tc: &[f64], scale: f64) -> RepVector {
    let m = tc.len();
    let r: Vec<f64> = tc.iter().map(|t| t / scale).collect();
    let strength = m as f64 + r.iter().sum::<f64>();
    let b: Vec<f64> = r.iter().map(|x| x / strength).collect();
    let d = (0..m)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in (0..m).filter(|&j| j != i) {
                num += b[j] * balance(b[j], b[i]);
                den += b[j];
            }
            if den == 0.0 {
                0.0
            } else {
                b[i] * num / den
            }
        })
        .collect();
    normalize(d)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each topic, the `k` other topics whose loading rows are most
/// cosine-similar (lower index first on ties).
pub fn topic_neighbors(h: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let m = h.len();
    if k >= m {
        return Err(Error::invalid(format!("need fewer than {m} neighbor topics, got {k}")));
    }
    Ok((0..m)
        .map(|i| {
            let mut others: Vec<(usize, f64)> = (0..m).filter(|&j| j != i).map(|j| (j, cosine(&h[i], &h[j]))).collect();
            others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            others.into_iter().take(k).map(|(j, _)| j).collect()
        })
        .collect())
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Entropy of `p` restricted to each topic and its neighbors.
pub fn aleatory_vector(p: &[f64], neighbors: &[Vec<usize>]) -> RepVector {
    let a = neighbors
        .iter()
        .enumerate()
        .map(|(m, nb)| {
            let local: Vec<f64> = std::iter::once(m).chain(nb.iter().copied()).map(|j| p[j]).collect();
            let mass: f64 = local.iter().sum();
            if mass > 0.0 {
                entropy(&local.iter().map(|x| x / mass).collect::<Vec<_>>())
            } else {
                0.0
            }
        })
        .collect();
    normalize(a)
}

/// `(1 - g) / g` with `g = u^2 + (1 - u)^2`, written through `1 - g = 2u(1 - u)`.
fn doctor_alpha(u: f64) -> f64 {
    let e = 2.0 * u * (1.0 - u);
    e / (1.0 - e)
}

/// `min / max` of the pair `(u, 1 - u)`.
fn doctor_beta(u: f64) -> f64 {
    let (lo, hi) = if u <= 0.5 { (u, 1.0 - u) } else { (1.0 - u, u) };
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

pub fn doctor_alpha_vector(p: &[f64]) -> RepVector {
    normalize(p.iter().map(|&x| doctor_alpha(x)).collect())
}

pub fn doctor_beta_vector(p: &[f64]) -> RepVector {
    normalize(p.iter().map(|&x| doctor_beta(x)).collect())
}

/// Tempered topic distribution `q = softmax(ln p / T)`, then per topic the
/// binary uncertainty `1 - max(q_m, 1 - q_m)`.
pub fn odin_vector(p: &[f64], temperature: f64) -> RepVector {
    let logits: Vec<f64> = p.iter().map(|x| x.max(LOG_FLOOR).ln() / temperature).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    normalize(exps.iter().map(|e| e / z).map(|q| 1.0 - q.max(1.0 - q)).collect())
}

/// Mean absolute per-topic disagreement with the `k_nn` reference
/// distributions nearest to `p` in JS divergence. `None` without references.
pub fn rel_u_vector(p: &[f64], reference: &[Vec<f64>], k_nn: usize) -> Option<RepVector> {
    if reference.is_empty() {
        return None;
    }
    let mut dist: Vec<(usize, f64)> = reference
        .iter()
        .enumerate()
        .map(|(i, q)| (i, js_divergence(p, q).unwrap_or(f64::INFINITY)))
        .collect();
    dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let k = k_nn.clamp(1, reference.len());
    let mut u = vec![0.0; p.len()];
    for &(i, _) in &dist[..k] {
        for (um, (pm, qm)) in u.iter_mut().zip(p.iter().zip(&reference[i])) {
            *um += (pm - qm).abs() / k as f64;
        }
    }
    Some(normalize(u))
}

/// Context for mapping one polarity's topic contributions to every
/// representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationContext {
    /// Evidence scale for vacuity and dissonance.
    pub scale: f64,
    pub neighbors: Vec<Vec<usize>>,
    pub temperature: f64,
    pub k_nn: usize,
    /// Original representations of the reliable training group.
    pub reference: Vec<Vec<f64>>,
}

impl RepresentationContext {
    pub fn represent(&self, tc: &[f64], rep: Representation) -> Option<RepVector> {
        let p = original(tc);
        Some(match rep {
            Representation::Original => p,
            Representation::Vacuity => vacuity_vector(tc, self.scale),
            Representation::Dissonance => dissonance_vector(tc, self.scale),
            Representation::Aleatory => aleatory_vector(&p.values, &self.neighbors),
            Representation::DoctorAlpha => doctor_alpha_vector(&p.values),
            Representation::DoctorBeta => doctor_beta_vector(&p.values),
            Representation::Odin => odin_vector(&p.values, self.temperature),
            Representation::RelU => return rel_u_vector(&p.values, &self.reference, self.k_nn),
        })
    }
}

/// Median total contribution of the reliable group, or 1 when that is 0.
pub fn evidence_scale(totals: &[f64]) -> f64 {
    let mut t: Vec<f64> = totals.iter().copied().filter(|v| v.is_finite()).collect();
    if t.is_empty() {
        return 1.0;
    }
    t.sort_by(|a, b| a.total_cmp(b));
    let n = t.len();
    let med = if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMethod {
    Entropy,
    DoctorAlpha,
    DoctorBeta,
    Odin,
    RelU,
    Vacuity,
    Dissonance,
}

impl OutputMethod {
    pub const ALL: [OutputMethod; 7] = [
        OutputMethod::Entropy,
        OutputMethod::DoctorAlpha,
        OutputMethod::DoctorBeta,
        OutputMethod::Odin,
        OutputMethod::RelU,
        OutputMethod::Vacuity,
        OutputMethod::Dissonance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OutputMethod::Entropy => "entropy",
            OutputMethod::DoctorAlpha => "doctor_alpha",
            OutputMethod::DoctorBeta => "doctor_beta",
            OutputMethod::Odin => "odin",
            OutputMethod::RelU => "rel_u",
            OutputMethod::Vacuity => "vacuity",
            OutputMethod::Dissonance => "dissonance",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Settings for the output-level scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputContext {
    pub temperature: f64,
    /// Evidence per unit probability for vacuity and dissonance.
    pub prior_strength: f64,
}

impl Default for OutputContext {
    fn default() -> Self {
        OutputContext {
            temperature: 1000.0,
            prior_strength: 2.0,
        }
    }
}

/// Uncertainty of a binary prediction, higher = more uncertain.
///
/// Every method except vacuity is computed from `u = min(p, 1 - p)` through
/// increasing functions, so they rank predictions identically.
pub fn output_uq_score(p_pos: f64, method: OutputMethod, ctx: &OutputContext) -> f64 {
    let p = p_pos.clamp(0.0, 1.0);
    let u = if p <= 0.5 { p } else { 1.0 - p };
    match method {
        OutputMethod::Entropy => {
            let a = if u > 0.0 { -u * u.ln() } else { 0.0 };
            a - (1.0 - u) * (-u).ln_1p()
        }
        OutputMethod::DoctorAlpha => doctor_alpha(u),
        OutputMethod::DoctorBeta => doctor_beta(u),
        OutputMethod::Odin => {
            // tempered minority probability: r / (1 + r), r = (u / (1 - u))^(1/T)
            if u == 0.0 {
                0.0
            } else {
                let r = ((u.ln() - (-u).ln_1p()) / ctx.temperature).exp();
                r / (1.0 + r)
            }
        }
        OutputMethod::RelU => 2.0 * u * (1.0 - u),
        OutputMethod::Vacuity => {
            // two outcomes with evidence c p and c (1 - p)
            2.0 / (2.0 + ctx.prior_strength)
        }
        OutputMethod::Dissonance => {
            let s = 2.0 + ctx.prior_strength;
            let (b1, b2) = (ctx.prior_strength * p / s, ctx.prior_strength * (1.0 - p) / s);
            b1 * balance(b2, b1) + b2 * balance(b1, b2)
        }
    }
}
