//! The capsule triple scorer and its training machinery.

mod adam;
mod backward;
mod convkb;
pub mod layers;
mod train;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::EmbeddingTable;
use crate::kg::Triple;
use crate::{Error, Result};

pub use adam::{Adam, AdamState, ModelOptimizer};
pub use backward::{capse_backward, loss_and_gradients, Gradients};
pub use convkb::ConvKB;
pub use layers::{build_capsules, conv_forward, route, squash, FeatureMaps, Routing};
pub use train::{train, train_batch, EpochSummary, TrainConfig, Trainer};

/// Range of the uniform initialiser for filters and capsule weights.
pub const INIT_RANGE: f64 = 0.1;

/// Hyper-parameters that fix the shape of a [`CapsE`] model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsEShape {
    /// Embedding size.
    pub k: usize,
    /// Number of 1×3 filters, equal to the neurons per first-layer capsule.
    pub n_filters: usize,
    /// Neurons in the output capsule.
    pub d: usize,
    /// Routing iterations.
    pub iterations: usize,
}

impl CapsEShape {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_filters == 0 || self.d == 0 || self.iterations == 0 {
            return Err(Error::Config(format!(
                "k, N, d and m must all be positive (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Length of the flattened transformation matrices.
    pub fn weight_len(&self) -> usize {
        self.k * self.d * self.n_filters
    }
}

/// Convolution filters, their biases and one `d × N` transformation matrix
/// per capsule position.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsE {
    shape: CapsEShape,
    /// `N × 3`, row-major.
    filters: Vec<f64>,
    biases: Vec<f64>,
    /// `k` consecutive row-major `d × N` blocks.
    weights: Vec<f64>,
}

impl CapsE {
    /// Filters and weights from uniform(−0.1, 0.1), zero biases.
    pub fn new_random(shape: CapsEShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..3 * shape.n_filters)
            .map(|_| dist.sample(&mut rng))
            .collect();
        let weights = (0..shape.weight_len())
            .map(|_| dist.sample(&mut rng))
            .collect();
        Ok(CapsE {
            shape,
            filters,
            biases: vec![0.0; shape.n_filters],
            weights,
        })
    }

    pub fn from_parts(
        shape: CapsEShape,
        filters: Vec<f64>,
        biases: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        shape.validate()?;
        if filters.len() != 3 * shape.n_filters
            || biases.len() != shape.n_filters
            || weights.len() != shape.weight_len()
        {
            return Err(Error::Shape(format!(
                "parameter buffers ({}, {}, {}) do not fit {shape:?}",
                filters.len(),
                biases.len(),
                weights.len()
            )));
        }
        let model = CapsE {
            shape,
            filters,
            biases,
            weights,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn shape(&self) -> CapsEShape {
        self.shape
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `W_i` as a row-major `d × N` slice.
    pub fn weight(&self, i: usize) -> &[f64] {
        let len = self.shape.d * self.shape.n_filters;
        &self.weights[i * len..(i + 1) * len]
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.filters, &mut self.biases, &mut self.weights)
    }

    pub fn set_iterations(&mut self, iterations: usize) -> Result<()> {
        let shape = CapsEShape {
            iterations,
            ..self.shape
        };
        shape.validate()?;
        self.shape = shape;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.filters
            .iter()
            .chain(&self.biases)
            .chain(&self.weights)
            .all(|v| v.is_finite())
    }

    /// `û_i = W_i u_i`.
    pub fn predict(&self, i: usize, capsule: &[f64]) -> Vec<f64> {
        self.weight(i)
            .chunks_exact(self.shape.n_filters)
            .map(|row| layers::dot(row, capsule))
            .collect()
    }

    fn check_embeddings(&self, emb: &EmbeddingTable, t: Triple) -> Result<()> {
        if emb.dim() != self.shape.k {
            return Err(Error::Shape(format!(
                "embeddings have k = {}, model expects {}",
                emb.dim(),
                self.shape.k
            )));
        }
        if t.s >= emb.num_entities() || t.o >= emb.num_entities() || t.r >= emb.num_relations() {
            return Err(Error::Shape(format!(
                "triple {t:?} outside the embedding table"
            )));
        }
        Ok(())
    }

    /// Full forward pass keeping every intermediate for backpropagation.
    pub fn forward(&self, input: Vec<[f64; 3]>) -> Result<ForwardTrace> {
        let pre = layers::conv_pre_activations(&input, &self.filters, &self.biases, self.shape.k)?;
        let mut maps = pre.clone();
        maps.values.iter_mut().for_each(|v| *v = layers::relu(*v));
        let capsules = build_capsules(&maps);
        let predictions: Vec<Vec<f64>> = capsules
            .iter()
            .enumerate()
            .map(|(i, u)| self.predict(i, u))
            .collect();
        let routing = route(&predictions, self.shape.iterations);
        let score = layers::squared_norm(&routing.e).sqrt();
        Ok(ForwardTrace {
            input,
            pre_activations: pre,
            feature_maps: maps,
            capsules,
            predictions,
            couplings: routing.couplings,
            s: routing.s,
            e: routing.e,
            score,
        })
    }

    /// Score of `t` and the trace of its forward pass. Higher is better.
    pub fn score_with_trace(&self, emb: &EmbeddingTable, t: Triple) -> Result<(f64, ForwardTrace)> {
        self.check_embeddings(emb, t)?;
        let trace = self.forward(triple_matrix(emb, t))?;
        Ok((trace.score, trace))
    }

    /// Score only, without keeping a trace. Panics on out-of-range triples;
    /// use [`CapsE::score_with_trace`] for checked access.
    pub fn score(&self, emb: &EmbeddingTable, t: Triple) -> f64 {
        let CapsEShape {
            k, n_filters: n, d, ..
        } = self.shape;
        let (vs, vr, vo) = (emb.entity(t.s), emb.relation(t.r), emb.entity(t.o));
        let mut u = vec![0.0; n];
        let mut predictions = Vec::with_capacity(k);
        for i in 0..k {
            for (f, (w, b)) in self.filters.chunks_exact(3).zip(&self.biases).enumerate() {
                u[f] = layers::relu(w[0] * vs[i] + w[1] * vr[i] + w[2] * vo[i] + b);
            }
            let block = &self.weight(i)[..d * n];
            predictions.push(
                block
                    .chunks_exact(n)
                    .map(|row| layers::dot(row, &u))
                    .collect(),
            );
        }
        let routing = route(&predictions, self.shape.iterations);
        layers::squared_norm(&routing.e).sqrt()
    }
}

/// The `k × 3` matrix `[v_s, v_r, v_o]`.
pub fn triple_matrix(emb: &EmbeddingTable, t: Triple) -> Vec<[f64; 3]> {
    let (s, r, o) = (emb.entity(t.s), emb.relation(t.r), emb.entity(t.o));
    (0..emb.dim()).map(|i| [s[i], r[i], o[i]]).collect()
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `k` rows `[v_s[i], v_r[i], v_o[i]]`.
    pub input: Vec<[f64; 3]>,
    pub pre_activations: FeatureMaps,
    pub feature_maps: FeatureMaps,
    /// `k` capsules of `N` neurons.
    pub capsules: Vec<Vec<f64>>,
    /// `k` vectors `û_i` of length `d`.
    pub predictions: Vec<Vec<f64>>,
    pub couplings: Vec<f64>,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub score: f64,
}

/// Training label: +1 for valid triples, −1 for invalid ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Valid,
    Invalid,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Valid => 1.0,
            Label::Invalid => -1.0,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-example loss term `softplus(−t · f)`.
pub fn loss_term(score: f64, label: Label) -> f64 {
    softplus(-label.sign() * score)
}

/// Mean of `softplus(−t · f(s, r, o))` over the batch.
pub fn capse_loss(batch: &[(Triple, Label)], emb: &EmbeddingTable, model: &CapsE) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for &(t, label) in batch {
        let (score, _) = model.score_with_trace(emb, t)?;
        total += loss_term(score, label);
    }
    Ok(total / batch.len() as f64)
}
