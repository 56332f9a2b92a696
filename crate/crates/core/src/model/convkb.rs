use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{conv_forward, dot};
use super::{triple_matrix, INIT_RANGE};
use crate::embed::EmbeddingTable;
use crate::kg::Triple;
use crate::{Error, Result};

/// ConvKB baseline: the same 1×3 convolution, with the feature maps
/// concatenated and dotted with a weight vector of length `N · k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKB {
    k: usize,
    filters: Vec<f64>,
    biases: Vec<f64>,
    weights: Vec<f64>,
}

impl ConvKB {
    pub fn from_parts(
        k: usize,
        filters: Vec<f64>,
        biases: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = biases.len();
        if k == 0 || n == 0 || filters.len() != 3 * n || weights.len() != n * k {
            return Err(Error::Shape(format!(
                "ConvKB buffers ({}, {n}, {}) do not fit k = {k}",
                filters.len(),
                weights.len()
            )));
        }
        Ok(ConvKB {
            k,
            filters,
            biases,
            weights,
        })
    }

    pub fn new_random(k: usize, n_filters: usize, seed: u64) -> Result<Self> {
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..3 * n_filters).map(|_| dist.sample(&mut rng)).collect();
        let weights = (0..n_filters * k).map(|_| dist.sample(&mut rng)).collect();
        Self::from_parts(k, filters, vec![0.0; n_filters], weights)
    }

    /// `w · concat(q_1, …, q_N)`. Higher is better.
    pub fn score(&self, emb: &EmbeddingTable, t: Triple) -> Result<f64> {
        if emb.dim() != self.k {
            return Err(Error::Shape(format!(
                "embeddings have k = {}, ConvKB expects {}",
                emb.dim(),
                self.k
            )));
        }
        let maps = conv_forward(&triple_matrix(emb, t), &self.filters, &self.biases, self.k)?;
        Ok(dot(&self.weights, &maps.values))
    }
}
