//! Reverse-mode gradients of the mean softplus loss.
//!
//! Couplings are taken from the last routing iteration and held constant,
//! so gradients flow through `s = Σ c_i û_i` and the squash only. With a
//! single routing iteration the couplings are uniform and this is the exact
//! gradient.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{loss_term, sigmoid, CapsE, ForwardTrace, Label};
use crate::embed::EmbeddingTable;
use crate::kg::Triple;
use crate::{Error, Result};

/// Examples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Gradients for every model parameter and the embedding rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub filters: Vec<f64>,
    pub biases: Vec<f64>,
    pub weights: Vec<f64>,
    pub entities: BTreeMap<usize, Vec<f64>>,
    pub relations: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn zeros(model: &CapsE) -> Self {
        Gradients {
            filters: vec![0.0; model.filters.len()],
            biases: vec![0.0; model.biases.len()],
            weights: vec![0.0; model.weights.len()],
            entities: BTreeMap::new(),
            relations: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        add_into(&mut self.filters, &other.filters);
        add_into(&mut self.biases, &other.biases);
        add_into(&mut self.weights, &other.weights);
        for (id, row) in &other.entities {
            match self.entities.get_mut(id) {
                Some(dst) => add_into(dst, row),
                None => {
                    self.entities.insert(*id, row.clone());
                }
            }
        }
        for (id, row) in &other.relations {
            match self.relations.get_mut(id) {
                Some(dst) => add_into(dst, row),
                None => {
                    self.relations.insert(*id, row.clone());
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.filters
            .iter()
            .chain(&self.biases)
            .chain(&self.weights)
            .chain(self.entities.values().flatten())
            .chain(self.relations.values().flatten())
            .all(|v| v.is_finite())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_entry(map: &mut BTreeMap<usize, Vec<f64>>, id: usize, k: usize) -> &mut Vec<f64> {
    map.entry(id).or_insert_with(|| vec![0.0; k])
}

/// Accumulates `upstream · ∂f/∂θ` for one example into `grads`, where `f`
/// is the example's score.
fn accumulate(
    model: &CapsE,
    t: Triple,
    trace: &ForwardTrace,
    upstream: f64,
    grads: &mut Gradients,
) {
    let shape = model.shape;
    let (k, n, d) = (shape.k, shape.n_filters, shape.d);

    // f = ‖s‖² / (1 + ‖s‖²)  ⇒  ∂f/∂s = 2s / (1 + ‖s‖²)²
    let n2: f64 = trace.s.iter().map(|x| x * x).sum();
    let scale = upstream * 2.0 / ((1.0 + n2) * (1.0 + n2));
    let ds: Vec<f64> = trace.s.iter().map(|x| x * scale).collect();

    // ∂ pre-activation, filter-major like the feature maps.
    let mut dpre = vec![0.0; n * k];
    for i in 0..k {
        let c = trace.couplings[i];
        let u = &trace.capsules[i];
        let w = model.weight(i);
        let gw = &mut grads.weights[i * d * n..(i + 1) * d * n];
        for a in 0..d {
            let du_hat = c * ds[a];
            if du_hat == 0.0 {
                continue;
            }
            let row = &mut gw[a * n..(a + 1) * n];
            for f in 0..n {
                row[f] += du_hat * u[f];
                dpre[f * k + i] += w[a * n + f] * du_hat;
            }
        }
    }
    for (g, pre) in dpre.iter_mut().zip(&trace.pre_activations.values) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }

    let mut da = vec![[0.0f64; 3]; k];
    for f in 0..n {
        let omega = &model.filters[3 * f..3 * f + 3];
        let mut gb = 0.0;
        let mut gf = [0.0f64; 3];
        for i in 0..k {
            let g = dpre[f * k + i];
            if g == 0.0 {
                continue;
            }
            gb += g;
            for c in 0..3 {
                gf[c] += g * trace.input[i][c];
                da[i][c] += g * omega[c];
            }
        }
        grads.biases[f] += gb;
        for (dst, g) in grads.filters[3 * f..3 * f + 3].iter_mut().zip(gf) {
            *dst += g;
        }
    }

    // Column order of the input matrix is (subject, relation, object).
    let gs = row_entry(&mut grads.entities, t.s, k);
    for i in 0..k {
        gs[i] += da[i][0];
    }
    let gr = row_entry(&mut grads.relations, t.r, k);
    for i in 0..k {
        gr[i] += da[i][1];
    }
    let go = row_entry(&mut grads.entities, t.o, k);
    for i in 0..k {
        go[i] += da[i][2];
    }
}

/// `∂L/∂f` for one example of a batch of `batch_len` under the mean loss.
fn loss_slope(score: f64, label: Label, batch_len: usize) -> f64 {
    let t = label.sign();
    -t * sigmoid(-t * score) / batch_len as f64
}

/// Gradients of the mean batch loss given precomputed forward traces.
pub fn capse_backward(
    batch: &[(Triple, Label)],
    model: &CapsE,
    traces: &[ForwardTrace],
) -> Result<Gradients> {
    if batch.len() != traces.len() {
        return Err(Error::Shape(format!(
            "{} traces for a batch of {}",
            traces.len(),
            batch.len()
        )));
    }
    let mut grads = Gradients::zeros(model);
    for (&(t, label), trace) in batch.iter().zip(traces) {
        accumulate(
            model,
            t,
            trace,
            loss_slope(trace.score, label, batch.len()),
            &mut grads,
        );
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

/// Mean loss and its gradients, computed in parallel over fixed-size chunks.
pub fn loss_and_gradients(
    batch: &[(Triple, Label)],
    emb: &EmbeddingTable,
    model: &CapsE,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("gradient of an empty batch".into()));
    }
    let partials: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros(model);
            let mut loss = 0.0;
            for &(t, label) in chunk {
                let (score, trace) = model.score_with_trace(emb, t)?;
                loss += loss_term(score, label);
                accumulate(
                    model,
                    t,
                    &trace,
                    loss_slope(score, label, batch.len()),
                    &mut grads,
                );
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros(model);
    for part in partials {
        let (loss, g) = part?;
        total += loss;
        grads.add_assign(&g);
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} or gradient"
        )));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::init_random_sized;
    use crate::model::{capse_loss, CapsEShape};

    fn setup(m: usize) -> (CapsE, EmbeddingTable) {
        let shape = CapsEShape {
            k: 4,
            n_filters: 5,
            d: 2,
            iterations: m,
        };
        (
            CapsE::new_random(shape, 5).unwrap(),
            init_random_sized(4, 2, 4, 3),
        )
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let (model, emb) = setup(1);
        let one = [(Triple::new(0, 1, 2), Label::Valid)];
        let two = [one[0], one[0]];
        let (l1, g1) = loss_and_gradients(&one, &emb, &model).unwrap();
        let (l2, g2) = loss_and_gradients(&two, &emb, &model).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.weights.iter().zip(&g2.weights) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in g1.filters.iter().zip(&g2.filters) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_matches_forward_loss() {
        let (model, emb) = setup(2);
        let batch = [
            (Triple::new(0, 1, 2), Label::Valid),
            (Triple::new(3, 0, 2), Label::Invalid),
        ];
        let (loss, _) = loss_and_gradients(&batch, &emb, &model).unwrap();
        assert!((loss - capse_loss(&batch, &emb, &model).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn zero_filters_kill_filter_gradient_but_not_bias_gradient() {
        let shape = CapsEShape {
            k: 3,
            n_filters: 2,
            d: 2,
            iterations: 1,
        };
        // Positive biases keep every ReLU active even with zero filters.
        let model = CapsE::from_parts(
            shape,
            vec![0.0; 6],
            vec![0.3, -0.2],
            (0..12).map(|i| 0.1 * (i as f64 - 5.0)).collect(),
        )
        .unwrap();
        let emb = init_random_sized(3, 1, 3, 8);
        let batch = [(Triple::new(0, 0, 1), Label::Valid)];
        let (_, g) = loss_and_gradients(&batch, &emb, &model).unwrap();
        assert_ne!(g.biases[0], 0.0);
        // Filter 1 is dead everywhere (pre-activation −0.2).
        assert_eq!(g.biases[1], 0.0);
        assert_eq!(&g.filters[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn trace_count_must_match_batch() {
        let (model, _) = setup(1);
        let batch = [(Triple::new(0, 1, 2), Label::Valid)];
        assert!(capse_backward(&batch, &model, &[]).is_err());
    }

    #[test]
    fn backward_from_traces_equals_fused_path() {
        let (model, emb) = setup(3);
        let batch = [
            (Triple::new(0, 1, 2), Label::Valid),
            (Triple::new(1, 0, 3), Label::Invalid),
        ];
        let traces: Vec<_> = batch
            .iter()
            .map(|(t, _)| model.score_with_trace(&emb, *t).unwrap().1)
            .collect();
        let a = capse_backward(&batch, &model, &traces).unwrap();
        let (_, b) = loss_and_gradients(&batch, &emb, &model).unwrap();
        assert_eq!(a, b);
    }
}
