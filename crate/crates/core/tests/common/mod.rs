//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod opcheck;

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `exp(-(i-j)^2 / (2 (pmax - pmin + 1)^2))`, written out term by term.
pub fn gaussian_oracle(i: i64, j: i64, pmin: i64, pmax: i64) -> f64 {
    let num = ((i - j) * (i - j)) as f64;
    let w = (pmax - pmin + 1) as f64;
    (-num / (2.0 * w.powi(2))).exp()
}

/// `sigmoid(ln xi / ln(1-xi) + (pmax - pv + 1)/(pmax - pmin + 1)) / tau`.
pub fn hawkes_oracle(pv: i64, pmax: i64, pmin: i64, xi: f64, tau: f64) -> f64 {
    let xi = xi.max(1e-6).min(1.0 - 1e-6);
    let z = xi.ln() / (1.0 - xi).ln() + (pmax - pv + 1) as f64 / (pmax - pmin + 1) as f64;
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        z.exp() / (1.0 + z.exp())
    };
    s / tau
}

/// Every ordered pair satisfying the intra-modal membership predicate.
pub fn brute_intra_edges(p: usize, span: usize, dilation: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..p {
        for j in 0..p {
            let d = (i as i64 - j as i64).unsigned_abs() as usize;
            if i == j || (d <= span && d % dilation == 0) {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Precision at each positive's rank, where item `k` ranks after every item
/// with a larger score and after equal-scored items with a smaller index.
pub fn brute_ap(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos: Vec<usize> = (0..n).filter(|&k| labels[k] > 0.5).collect();
    if pos.is_empty() {
        return None;
    }
    let ahead_or_self = |k: usize, m: usize| scores[m] > scores[k] || (scores[m] == scores[k] && m <= k);
    let mut total = 0.0;
    for &k in &pos {
        let rank = (0..n).filter(|&m| ahead_or_self(k, m)).count();
        let hits = pos.iter().filter(|&&m| ahead_or_self(k, m)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / pos.len() as f64)
}

/// Pairwise comparison count with ties worth one half.
pub fn brute_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y > 0.5).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y <= 0.5).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Macro average over the classes the per-class oracle can score.
pub fn brute_macro(
    scores: &[f64],
    labels: &[f64],
    classes: usize,
    f: impl Fn(&[f64], &[f64]) -> Option<f64>,
) -> Option<f64> {
    let rows = scores.len() / classes;
    let vals: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = (0..rows).map(|r| scores[r * classes + c]).collect();
            let l: Vec<f64> = (0..rows).map(|r| labels[r * classes + c]).collect();
            f(&s, &l)
        })
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Triple-loop matrix product of row-major `m x k` and `k x n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Mean binary cross-entropy of sigmoid outputs, clamped like the focal loss.
pub fn bce_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-z).exp());
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        let q = (1.0 - p).clamp(1e-7, 1.0 - 1e-7);
        total -= y * p.ln() + (1.0 - y) * q.ln();
    }
    total / logits.len() as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Both directions of the contrastive loss with positives excluded from the
/// denominator, evaluated directly with nested loops.
pub fn contrastive_oracle(a: &[Vec<f64>], v: &[Vec<f64>], t: f64) -> f64 {
    let b = a.len();
    let dir = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..b {
            let pos = (cosine(&x[i], &y[i]) / t).exp();
            let mut den = 0.0;
            for j in 0..b {
                if j != i {
                    den += (cosine(&x[i], &y[j]) / t).exp();
                }
            }
            s += (pos / den).ln();
        }
        -s / b as f64
    };
    dir(v, a) + dir(a, v)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()
}
