//! Building blocks of the capsule scorer.
//!
//! Shapes follow one convention throughout: the input matrix has `k` rows of
//! `[v_s[i], v_r[i], v_o[i]]`, feature maps are stored filter-major (`N × k`),
//! and the first capsule layer holds `k` capsules of `N` neurons.

use crate::{Error, Result};

/// Squash keeps the direction of `s` and maps its norm `n` to `n²/(1+n²)`.
/// Norms below this are treated as zero.
pub const SQUASH_EPS: f64 = 1e-12;

/// Row-major `N × k` feature maps: entry `(f, i)` is filter `f` applied to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub n_filters: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl FeatureMaps {
    pub fn get(&self, filter: usize, row: usize) -> f64 {
        self.values[filter * self.k + row]
    }

    pub fn map(&self, filter: usize) -> &[f64] {
        &self.values[filter * self.k..(filter + 1) * self.k]
    }
}

/// Pre-activations `ω_f · A_i + b_f` for every filter and row.
pub fn conv_pre_activations(
    input: &[[f64; 3]],
    filters: &[f64],
    biases: &[f64],
    k: usize,
) -> Result<FeatureMaps> {
    if input.len() != k {
        return Err(Error::Shape(format!(
            "input has {} rows, expected k = {k}",
            input.len()
        )));
    }
    if filters.len() != 3 * biases.len() {
        return Err(Error::Shape(format!(
            "{} filter weights for {} biases",
            filters.len(),
            biases.len()
        )));
    }
    let n = biases.len();
    let mut values = Vec::with_capacity(n * k);
    for (w, b) in filters.chunks_exact(3).zip(biases) {
        for row in input {
            values.push(w[0] * row[0] + w[1] * row[1] + w[2] * row[2] + b);
        }
    }
    Ok(FeatureMaps {
        n_filters: n,
        k,
        values,
    })
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `q[f][i] = ReLU(ω_f · A_i + b_f)`.
pub fn conv_forward(
    input: &[[f64; 3]],
    filters: &[f64],
    biases: &[f64],
    k: usize,
) -> Result<FeatureMaps> {
    let mut maps = conv_pre_activations(input, filters, biases, k)?;
    maps.values.iter_mut().for_each(|v| *v = relu(*v));
    Ok(maps)
}

/// Regroups `N` feature maps of length `k` into `k` capsules of `N`
/// neurons: `u_i[f] = q[f][i]`.
pub fn build_capsules(maps: &FeatureMaps) -> Vec<Vec<f64>> {
    (0..maps.k)
        .map(|i| (0..maps.n_filters).map(|f| maps.get(f, i)).collect())
        .collect()
}

pub fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`, with `squash(0) = 0`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2 = squared_norm(s);
    let n = n2.sqrt();
    if n < SQUASH_EPS {
        return vec![0.0; s.len()];
    }
    let scale = n / (1.0 + n2);
    s.iter().map(|x| x * scale).collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|b| (b - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Result of routing the first-layer predictions into the single output capsule.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Weighted sum fed to the squash in the last iteration.
    pub s: Vec<f64>,
    /// Output capsule.
    pub e: Vec<f64>,
    /// Couplings of the last iteration, one per input capsule.
    pub couplings: Vec<f64>,
}

/// Dynamic routing towards one output capsule. The softmax normalises over
/// the input capsules; logits start at zero and grow by the agreement
/// `û_i · e` after every iteration.
pub fn route(predictions: &[Vec<f64>], iterations: usize) -> Routing {
    assert!(iterations >= 1, "routing needs at least one iteration");
    assert!(
        !predictions.is_empty(),
        "routing needs at least one capsule"
    );
    let d = predictions[0].len();
    let mut logits = vec![0.0; predictions.len()];
    let mut routing = Routing {
        s: vec![0.0; d],
        e: vec![0.0; d],
        couplings: Vec::new(),
    };
    for _ in 0..iterations {
        let c = softmax(&logits);
        let mut s = vec![0.0; d];
        for (ci, u) in c.iter().zip(predictions) {
            for (acc, x) in s.iter_mut().zip(u) {
                *acc += ci * x;
            }
        }
        let e = squash(&s);
        for (b, u) in logits.iter_mut().zip(predictions) {
            *b += dot(u, &e);
        }
        routing = Routing { s, e, couplings: c };
    }
    routing
}
