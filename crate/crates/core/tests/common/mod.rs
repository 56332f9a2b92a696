//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the library's forward pass, gradient code or
//! ranking code; only data types and constructors are reused.

#![allow(dead_code)]

use std::collections::HashMap;

use capse::embed::EmbeddingTable;
use capse::kg::{Side, Triple, TripleSet};
use capse::model::{CapsE, CapsEShape, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Gradient oracle

/// Flat parameter vector: filters, biases, weights, then every entity row
/// and every relation row.
#[derive(Debug, Clone)]
pub struct Instance {
    pub shape: CapsEShape,
    pub filters: Vec<f64>,
    pub biases: Vec<f64>,
    pub weights: Vec<f64>,
    pub emb: EmbeddingTable,
    pub batch: Vec<(Triple, Label)>,
}

impl Instance {
    /// `k ≤ 8`, `N ≤ 6`, `d ≤ 3`, `m ∈ {1, 2, 3}`.
    pub fn random(rng: &mut ChaCha8Rng) -> Instance {
        let shape = CapsEShape {
            k: rng.gen_range(1..=8),
            n_filters: rng.gen_range(1..=6),
            d: rng.gen_range(1..=3),
            iterations: rng.gen_range(1..=3),
        };
        Self::with_shape(shape, rng)
    }

    pub fn with_shape(shape: CapsEShape, rng: &mut ChaCha8Rng) -> Instance {
        let (ne, nr) = (4, 2);
        let mut draw =
            |n: usize, r: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-r..r)).collect() };
        let filters = draw(3 * shape.n_filters, 1.0);
        let biases = draw(shape.n_filters, 0.5);
        let weights = draw(shape.weight_len(), 1.0);
        let ents = draw(ne * shape.k, 1.0);
        let rels = draw(nr * shape.k, 1.0);
        let emb = EmbeddingTable::from_parts(shape.k, ents, rels).unwrap();
        let len = rng.gen_range(1..=3);
        let batch = (0..len)
            .map(|_| {
                let t = Triple::new(
                    rng.gen_range(0..ne),
                    rng.gen_range(0..nr),
                    rng.gen_range(0..ne),
                );
                let label = if rng.gen_bool(0.5) {
                    Label::Valid
                } else {
                    Label::Invalid
                };
                (t, label)
            })
            .collect();
        Instance {
            shape,
            filters,
            biases,
            weights,
            emb,
            batch,
        }
    }

    pub fn model(&self) -> CapsE {
        CapsE::from_parts(
            self.shape,
            self.filters.clone(),
            self.biases.clone(),
            self.weights.clone(),
        )
        .unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.filters.len()
            + self.biases.len()
            + self.weights.len()
            + self.emb.entity_data().len()
            + self.emb.relation_data().len()
    }

    pub fn get(&self, idx: usize) -> f64 {
        let mut i = idx;
        for buf in [
            &self.filters[..],
            &self.biases[..],
            &self.weights[..],
            self.emb.entity_data(),
            self.emb.relation_data(),
        ] {
            if i < buf.len() {
                return buf[i];
            }
            i -= buf.len();
        }
        panic!("parameter index {idx} out of range")
    }

    pub fn with(&self, idx: usize, value: f64) -> Instance {
        let mut out = self.clone();
        let mut i = idx;
        let sizes = [
            out.filters.len(),
            out.biases.len(),
            out.weights.len(),
            out.emb.entity_data().len(),
        ];
        if i < sizes[0] {
            out.filters[i] = value;
            return out;
        }
        i -= sizes[0];
        if i < sizes[1] {
            out.biases[i] = value;
            return out;
        }
        i -= sizes[1];
        if i < sizes[2] {
            out.weights[i] = value;
            return out;
        }
        i -= sizes[2];
        if i < sizes[3] {
            out.emb.entity_data_mut()[i] = value;
            return out;
        }
        i -= sizes[3];
        out.emb.relation_data_mut()[i] = value;
        out
    }

    /// Analytic gradient from the library, flattened in parameter order.
    pub fn analytic(&self) -> Vec<f64> {
        let model = self.model();
        let (_, g) = capse::model::loss_and_gradients(&self.batch, &self.emb, &model).unwrap();
        let k = self.shape.k;
        let mut ent = vec![0.0; self.emb.entity_data().len()];
        for (id, row) in &g.entities {
            ent[id * k..(id + 1) * k].copy_from_slice(row);
        }
        let mut rel = vec![0.0; self.emb.relation_data().len()];
        for (id, row) in &g.relations {
            rel[id * k..(id + 1) * k].copy_from_slice(row);
        }
        [g.filters, g.biases, g.weights, ent, rel].concat()
    }

    /// Couplings of every example's final routing iteration at the current
    /// parameters.
    pub fn couplings(&self) -> Vec<Vec<f64>> {
        self.batch.iter().map(|&(t, _)| routed(self, t).1).collect()
    }

    /// Pre-activations `ω_f · A_i + b_f` of every example.
    pub fn pre_activations(&self) -> Vec<f64> {
        self.batch
            .iter()
            .flat_map(|&(t, _)| pre_activations(self, t))
            .collect()
    }
}

fn rows(inst: &Instance, t: Triple) -> Vec<[f64; 3]> {
    let (s, r, o) = (
        inst.emb.entity(t.s),
        inst.emb.relation(t.r),
        inst.emb.entity(t.o),
    );
    (0..inst.shape.k).map(|i| [s[i], r[i], o[i]]).collect()
}

fn pre_activations(inst: &Instance, t: Triple) -> Vec<f64> {
    let a = rows(inst, t);
    let mut out = Vec::new();
    for f in 0..inst.shape.n_filters {
        for row in &a {
            let w = &inst.filters[3 * f..3 * f + 3];
            out.push(w[0] * row[0] + w[1] * row[1] + w[2] * row[2] + inst.biases[f]);
        }
    }
    out
}

/// `û_i` for every capsule position, computed from scratch.
fn predictions(inst: &Instance, t: Triple) -> Vec<Vec<f64>> {
    let CapsEShape {
        k, n_filters: n, d, ..
    } = inst.shape;
    let pre = pre_activations(inst, t);
    (0..k)
        .map(|i| {
            let u: Vec<f64> = (0..n).map(|f| pre[f * k + i].max(0.0)).collect();
            let w = &inst.weights[i * d * n..(i + 1) * d * n];
            (0..d)
                .map(|a| (0..n).map(|f| w[a * n + f] * u[f]).sum())
                .collect()
        })
        .collect()
}

fn squash_norm(s: &[f64]) -> f64 {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    n2 / (1.0 + n2)
}

/// Score and final couplings under full dynamic routing.
fn routed(inst: &Instance, t: Triple) -> (f64, Vec<f64>) {
    let u_hat = predictions(inst, t);
    let k = u_hat.len();
    let d = inst.shape.d;
    let mut b = vec![0.0; k];
    let mut c = vec![0.0; k];
    let mut score = 0.0;
    for _ in 0..inst.shape.iterations {
        let max = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = b.iter().map(|x| (x - max).exp()).sum();
        c = b.iter().map(|x| (x - max).exp() / z).collect();
        let s: Vec<f64> = (0..d)
            .map(|a| (0..k).map(|i| c[i] * u_hat[i][a]).sum())
            .collect();
        let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        score = squash_norm(&s);
        let e: Vec<f64> = if norm < 1e-12 {
            vec![0.0; d]
        } else {
            s.iter().map(|x| score * x / norm).collect()
        };
        for i in 0..k {
            b[i] += (0..d).map(|a| u_hat[i][a] * e[a]).sum::<f64>();
        }
    }
    (score, c)
}

/// Batch loss with each example's couplings held at `couplings`.
pub fn frozen_coupling_loss(inst: &Instance, couplings: &[Vec<f64>]) -> f64 {
    let d = inst.shape.d;
    let total: f64 = inst
        .batch
        .iter()
        .zip(couplings)
        .map(|(&(t, label), c)| {
            let u_hat = predictions(inst, t);
            let s: Vec<f64> = (0..d)
                .map(|a| u_hat.iter().zip(c).map(|(u, ci)| ci * u[a]).sum())
                .collect();
            let f = squash_norm(&s);
            let sign = if label == Label::Valid { 1.0 } else { -1.0 };
            (1.0 + (-sign * f).exp()).ln()
        })
        .sum();
    total / inst.batch.len() as f64
}

/// Loss with couplings re-routed at every evaluation.
pub fn routed_loss(inst: &Instance) -> f64 {
    let total: f64 = inst
        .batch
        .iter()
        .map(|&(t, label)| {
            let f = routed(inst, t).0;
            let sign = if label == Label::Valid { 1.0 } else { -1.0 };
            (1.0 + (-sign * f).exp()).ln()
        })
        .sum();
    total / inst.batch.len() as f64
}

pub const FD_STEP: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// Compares the library gradient with central differences of the
/// frozen-coupling loss. Coordinates whose ±h perturbation moves any
/// pre-activation across zero, or leaves one within [`KINK_MARGIN`] of it,
/// are skipped.
pub fn grad_check(inst: &Instance) -> GradCheck {
    let analytic = inst.analytic();
    let couplings = inst.couplings();
    let base_pre = inst.pre_activations();
    let mut out = GradCheck::default();
    if base_pre.iter().any(|p| p.abs() < KINK_MARGIN) {
        out.skipped_kinks = analytic.len();
        return out;
    }
    for (idx, &exact) in analytic.iter().enumerate() {
        let x = inst.get(idx);
        let plus = inst.with(idx, x + FD_STEP);
        let minus = inst.with(idx, x - FD_STEP);
        let crosses = |p: &Instance| {
            p.pre_activations()
                .iter()
                .zip(&base_pre)
                .any(|(a, b)| a.abs() < KINK_MARGIN || (a > &0.0) != (b > &0.0))
        };
        if crosses(&plus) || crosses(&minus) {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (frozen_coupling_loss(&plus, &couplings)
            - frozen_coupling_loss(&minus, &couplings))
            / (2.0 * FD_STEP);
        out.max_rel_error = out.max_rel_error.max(relative_error(exact, numeric));
        out.checked += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Ranking oracle

#[derive(Debug, Clone)]
pub struct ToyGraph {
    pub num_entities: usize,
    pub num_relations: usize,
    pub train: TripleSet,
    pub test: TripleSet,
    pub known: TripleSet,
}

/// A random graph with at most 10 entities, split into train and test.
pub fn random_graph(rng: &mut ChaCha8Rng) -> ToyGraph {
    let ne = rng.gen_range(2..=10);
    let nr = rng.gen_range(1..=3);
    let mut all = Vec::new();
    for s in 0..ne {
        for r in 0..nr {
            for o in 0..ne {
                if rng.gen_bool(0.2) {
                    all.push(Triple::new(s, r, o));
                }
            }
        }
    }
    if all.is_empty() {
        all.push(Triple::new(0, 0, 1));
    }
    let test_len = (all.len() / 3).max(1);
    let test: TripleSet = all[..test_len].iter().copied().collect();
    let train: TripleSet = all[test_len..].iter().copied().collect();
    let known = TripleSet::union([&train, &test]);
    ToyGraph {
        num_entities: ne,
        num_relations: nr,
        train,
        test,
        known,
    }
}

/// Scores drawn from a small set of levels so that ties are common.
pub fn random_score_table(g: &ToyGraph, rng: &mut ChaCha8Rng) -> HashMap<Triple, f64> {
    let levels = rng.gen_range(1..=4);
    let mut table = HashMap::new();
    for s in 0..g.num_entities {
        for r in 0..g.num_relations {
            for o in 0..g.num_entities {
                table.insert(Triple::new(s, r, o), rng.gen_range(0..levels) as f64 * 0.5);
            }
        }
    }
    table
}

/// Filtered rank by sorting: the mean of the target's first and last
/// positions among equal scores, rounded up.
pub fn brute_force_rank(
    t: Triple,
    side: Side,
    score: &dyn Fn(Triple) -> f64,
    num_entities: usize,
    known: &TripleSet,
) -> usize {
    let mut list: Vec<f64> = vec![score(t)];
    for e in 0..num_entities {
        let c = match side {
            Side::Head => Triple::new(e, t.r, t.o),
            Side::Tail => Triple::new(t.s, t.r, e),
        };
        if c != t && !known.contains(&c) {
            list.push(score(c));
        }
    }
    let target = list[0];
    list.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let first = list.iter().position(|&x| x == target).unwrap() + 1;
    let last = list.iter().rposition(|&x| x == target).unwrap() + 1;
    (first + last).div_ceil(2)
}

/// Ranks for every test triple, head then tail, in test order.
pub fn brute_force_ranks(g: &ToyGraph, score: &dyn Fn(Triple) -> f64) -> Vec<usize> {
    g.test
        .iter()
        .flat_map(|&t| {
            [Side::Head, Side::Tail]
                .into_iter()
                .map(move |side| brute_force_rank(t, side, score, g.num_entities, &g.known))
        })
        .collect()
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> f64 {
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

pub fn mean_rank(ranks: &[usize]) -> f64 {
    ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64
}

pub fn hits(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}
