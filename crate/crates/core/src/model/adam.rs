use super::{CapsE, Gradients};
use crate::embed::EmbeddingTable;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update at step `t` (1-based).
    pub fn step(&mut self, opt: &Adam, t: u64, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter/state length mismatch"
        );
        assert_eq!(grads.len(), self.m.len(), "gradient/state length mismatch");
        let (bc1, bc2) = bias_corrections(opt, t);
        for i in 0..params.len() {
            self.update(opt, bc1, bc2, i, &mut params[i], grads[i]);
        }
    }

    /// Like [`AdamState::step`] but only touches rows of length `row_len`
    /// whose `trainable` flag is set. Skipped rows keep both their values and
    /// their moments.
    pub fn step_rows(
        &mut self,
        opt: &Adam,
        t: u64,
        params: &mut [f64],
        grads: &[f64],
        row_len: usize,
        trainable: &[bool],
    ) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter/state length mismatch"
        );
        assert_eq!(grads.len(), self.m.len(), "gradient/state length mismatch");
        assert_eq!(
            trainable.len() * row_len,
            params.len(),
            "mask length mismatch"
        );
        let (bc1, bc2) = bias_corrections(opt, t);
        for (row, _) in trainable.iter().enumerate().filter(|(_, on)| **on) {
            for i in row * row_len..(row + 1) * row_len {
                self.update(opt, bc1, bc2, i, &mut params[i], grads[i]);
            }
        }
    }

    #[inline]
    fn update(&mut self, opt: &Adam, bc1: f64, bc2: f64, i: usize, param: &mut f64, g: f64) {
        self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
        self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = self.m[i] / bc1;
        let v_hat = self.v[i] / bc2;
        *param -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
}

fn bias_corrections(opt: &Adam, t: u64) -> (f64, f64) {
    assert!(t >= 1, "Adam steps are 1-based");
    let t = t as i32;
    (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t))
}

/// Adam over a model and its embedding table, with optional per-row freezing
/// of embeddings.
#[derive(Debug, Clone)]
pub struct ModelOptimizer {
    pub adam: Adam,
    step: u64,
    filters: AdamState,
    biases: AdamState,
    weights: AdamState,
    entities: AdamState,
    relations: AdamState,
    trainable_entities: Vec<bool>,
    trainable_relations: Vec<bool>,
    entity_grad: Vec<f64>,
    relation_grad: Vec<f64>,
}

impl ModelOptimizer {
    pub fn new(adam: Adam, model: &CapsE, emb: &EmbeddingTable) -> Self {
        ModelOptimizer {
            adam,
            step: 0,
            filters: AdamState::new(model.filters().len()),
            biases: AdamState::new(model.biases().len()),
            weights: AdamState::new(model.weights().len()),
            entities: AdamState::new(emb.entity_data().len()),
            relations: AdamState::new(emb.relation_data().len()),
            trainable_entities: vec![true; emb.num_entities()],
            trainable_relations: vec![true; emb.num_relations()],
            entity_grad: vec![0.0; emb.entity_data().len()],
            relation_grad: vec![0.0; emb.relation_data().len()],
        }
    }

    /// Marks which entity and relation rows may change. Frozen rows receive
    /// no update at all.
    pub fn with_trainable_rows(mut self, entities: Vec<bool>, relations: Vec<bool>) -> Self {
        assert_eq!(entities.len(), self.trainable_entities.len());
        assert_eq!(relations.len(), self.trainable_relations.len());
        self.trainable_entities = entities;
        self.trainable_relations = relations;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, model: &mut CapsE, emb: &mut EmbeddingTable, grads: &Gradients) {
        self.step += 1;
        let t = self.step;
        let (filters, biases, weights) = model.parts_mut();
        self.filters.step(&self.adam, t, filters, &grads.filters);
        self.biases.step(&self.adam, t, biases, &grads.biases);
        self.weights.step(&self.adam, t, weights, &grads.weights);

        let k = emb.dim();
        scatter(&mut self.entity_grad, &grads.entities, k);
        scatter(&mut self.relation_grad, &grads.relations, k);
        self.entities.step_rows(
            &self.adam,
            t,
            emb.entity_data_mut(),
            &self.entity_grad,
            k,
            &self.trainable_entities,
        );
        self.relations.step_rows(
            &self.adam,
            t,
            emb.relation_data_mut(),
            &self.relation_grad,
            k,
            &self.trainable_relations,
        );
        clear(&mut self.entity_grad, &grads.entities, k);
        clear(&mut self.relation_grad, &grads.relations, k);
    }
}

fn scatter(dense: &mut [f64], rows: &std::collections::BTreeMap<usize, Vec<f64>>, k: usize) {
    for (id, row) in rows {
        dense[id * k..(id + 1) * k].copy_from_slice(row);
    }
}

fn clear(dense: &mut [f64], rows: &std::collections::BTreeMap<usize, Vec<f64>>, k: usize) {
    for id in rows.keys() {
        dense[id * k..(id + 1) * k]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}
