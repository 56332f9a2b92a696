use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_and_gradients, Adam, CapsE, Label, ModelOptimizer};
use crate::embed::EmbeddingTable;
use crate::kg::{BernoulliSampler, Triple, TripleSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Positives per batch; each brings its own corrupted negative.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("need lr > 0 and batch_size ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean loss over every example seen in the epoch, measured before each
    /// batch's update.
    pub mean_loss: f64,
}

/// One Adam step on `batch`. Returns the batch's mean loss before the update.
pub fn train_batch(
    batch: &[(Triple, Label)],
    emb: &mut EmbeddingTable,
    model: &mut CapsE,
    optimizer: &mut ModelOptimizer,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(batch, emb, model)?;
    optimizer.apply(model, emb, &grads);
    Ok(loss)
}

/// Epoch-by-epoch trainer on a knowledge graph with Bernoulli negatives.
/// Negatives are redrawn every epoch.
pub struct Trainer<'a> {
    train: &'a TripleSet,
    sampler: &'a BernoulliSampler,
    config: TrainConfig,
    optimizer: ModelOptimizer,
    rng: ChaCha8Rng,
    order: Vec<Triple>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a TripleSet,
        sampler: &'a BernoulliSampler,
        config: TrainConfig,
        model: &CapsE,
        emb: &EmbeddingTable,
    ) -> Result<Self> {
        config.validate()?;
        if model.shape().k != emb.dim() {
            return Err(Error::Shape(format!(
                "model k = {} but embeddings have k = {}",
                model.shape().k,
                emb.dim()
            )));
        }
        Ok(Trainer {
            train,
            sampler,
            optimizer: ModelOptimizer::new(Adam::new(config.lr), model, emb),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: train.as_slice().to_vec(),
            config,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(
        &mut self,
        emb: &mut EmbeddingTable,
        model: &mut CapsE,
    ) -> Result<EpochSummary> {
        self.order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        let mut batch = Vec::with_capacity(2 * self.config.batch_size);
        for chunk in self.order.chunks(self.config.batch_size) {
            batch.clear();
            for &pos in chunk {
                let neg = self.sampler.corrupt(pos, self.train, &mut self.rng)?;
                batch.push((pos, Label::Valid));
                batch.push((neg, Label::Invalid));
            }
            let loss = train_batch(&batch, emb, model, &mut self.optimizer)
                .map_err(|e| Error::Numeric(format!("epoch {}: {e}", self.epoch + 1)))?;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        self.epoch += 1;
        let mean_loss = if seen == 0 { 0.0 } else { total / seen as f64 };
        debug!("epoch {}: mean loss {mean_loss:.6}", self.epoch);
        Ok(EpochSummary {
            epoch: self.epoch,
            mean_loss,
        })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
/// With zero epochs nothing is modified.
pub fn train<F>(
    train: &TripleSet,
    emb: &mut EmbeddingTable,
    model: &mut CapsE,
    sampler: &BernoulliSampler,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochSummary>>
where
    F: FnMut(&EpochSummary, &EmbeddingTable, &CapsE) -> Result<()>,
{
    let mut trainer = Trainer::new(train, sampler, config.clone(), model, emb)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let summary = trainer.run_epoch(emb, model)?;
        on_epoch(&summary, emb, model)?;
        log.push(summary);
    }
    Ok(log)
}
