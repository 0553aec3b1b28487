//! Brute-force reference implementations used as test oracles. Everything
//! here is written with plain loops over slices, independent of the graph.

#![allow(dead_code)]

use cocolm::config::Config;
use cocolm::dataset::Dataset;
use cocolm::encoder::DualModel;
use cocolm::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `exp(z_t) / sum_j exp(z_j)` by direct summation.
pub fn softmax_at(z: &[f64], t: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut den = 0.0;
    for &x in z {
        den += (x - m).exp();
    }
    (z[t] - m).exp() / den
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    (0..z.len()).map(|t| softmax_at(z, t)).collect()
}

/// `-log softmax(z)[t]`.
pub fn cross_entropy(z: &[f64], t: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut den = 0.0;
    for &x in z {
        den += (x - m).exp();
    }
    m + den.ln() - z[t]
}

/// Binary cross-entropy of logit `z` against target `y` (1 = copy).
pub fn bce(z: f64, y: f64) -> f64 {
    let p = sigmoid(z);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Corrective probability of `target` given LM logits, copy logit and the
/// input token at that position.
pub fn p_lm(z: &[f64], copy_logit: f64, input: usize, target: usize) -> f64 {
    let p1 = sigmoid(copy_logit);
    let copy = if input == target { p1 } else { 0.0 };
    copy + (1.0 - p1) * softmax_at(z, target)
}

/// Contrastive loss over `2N` rows where `k` and `k + N` are positives,
/// averaged over every anchor, self excluded from the denominator.
pub fn scl(rows: &[Vec<f64>], tau: f64) -> f64 {
    let r = rows.len();
    let n = r / 2;
    let mut total = 0.0;
    for i in 0..r {
        let pos = (i + n) % r;
        let mut den = 0.0;
        for j in 0..r {
            if j != i {
                den += (cosine(&rows[i], &rows[j]) / tau).exp();
            }
        }
        let num = (cosine(&rows[i], &rows[pos]) / tau).exp();
        total += -(num / den).ln();
    }
    total / r as f64
}

/// `rows x d` times the transpose of `table` (`v x d`), as nested vectors.
pub fn times_transpose(rows: &[Vec<f64>], table: &[f64], d: usize) -> Vec<Vec<f64>> {
    let v = table.len() / d;
    rows.iter()
        .map(|h| (0..v).map(|j| dot(h, &table[j * d..(j + 1) * d])).collect())
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// The micro configuration with the given seed and a small synthetic
/// dataset generated from it.
pub fn micro(seed: u64) -> (Config, Dataset) {
    let mut c = Config::micro();
    c.seed = seed;
    let data = Dataset::generate(&c).expect("micro dataset");
    (c, data)
}

/// A freshly initialized model for `config` over `vocab_size` tokens.
pub fn model(config: &Config, vocab_size: usize) -> (DualModel, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    DualModel::new(&config.model, vocab_size, &mut rng).expect("model")
}

/// Exact bucket by integer comparison: the logarithmic part is the
/// largest k with (n / e)^(h - e) >= (m / e)^k.
pub fn bucket_oracle(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let offset = if rel > 0 { half } else { 0 };
    let n = rel.unsigned_abs() as u32;
    let exact = half / 2;
    if (n as usize) < exact {
        return offset + n as usize;
    }
    let pow = |b: u32, e: usize| num_bigint::BigUint::from(b).pow(e as u32);
    let (e, m) = (exact as u32, max_distance as u32);
    let lhs = |k: usize| pow(n, half - exact) * pow(e, k);
    let rhs = |k: usize| pow(m, k) * pow(e, half - exact);
    let mut k = 0;
    while k < half && lhs(k + 1) >= rhs(k + 1) {
        k += 1;
    }
    offset + (exact + k).min(half - 1)
}
