//! Personalised re-ranking of search results.
//!
//! Each impression `(query, user, document)` is scored as a triple with the
//! query in the subject slot, the user in the relation slot and the document
//! in the object slot. Query and document embeddings are topic
//! distributions and stay fixed during training; only user profiles and the
//! capsule parameters are learned.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::EmbeddingTable;
use crate::kg::{Triple, Vocab};
use crate::model::{train_batch, Adam, CapsE, Label, ModelOptimizer, TrainConfig};
use crate::{Error, Result};

/// Results per impression returned by the search engine.
pub const LIST_LEN: usize = 10;
/// Default decay for query and profile weights.
pub const DEFAULT_DECAY: f64 = 0.8;
/// Largest accepted deviation of a document's topic mass from 1.
pub const TOPIC_SUM_TOLERANCE: f64 = 1e-3;

/// Topic-proportion vectors keyed by document id, in file order.
#[derive(Debug, Clone, Default)]
pub struct TopicEmbeddings {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl TopicEmbeddings {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, doc: &str) -> Option<&[f64]> {
        self.index.get(doc).map(|&i| self.vectors[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Validates and inserts a vector, renormalising it to sum exactly 1.
    pub fn insert(&mut self, id: &str, mut vector: Vec<f64>) -> Result<()> {
        if self.ids.is_empty() {
            if vector.is_empty() {
                return Err(Error::Format(format!("document `{id}` has no topics")));
            }
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(Error::Format(format!(
                "document `{id}` has {} topics, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(v) = vector.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Format(format!(
                "document `{id}` has invalid proportion {v}"
            )));
        }
        let sum: f64 = vector.iter().sum();
        if (sum - 1.0).abs() > TOPIC_SUM_TOLERANCE {
            return Err(Error::Format(format!(
                "topic proportions of `{id}` sum to {sum}"
            )));
        }
        vector.iter_mut().for_each(|v| *v /= sum);
        if self.index.contains_key(id) {
            return Err(Error::Format(format!("duplicate document `{id}`")));
        }
        self.index.insert(id.to_owned(), self.ids.len());
        self.ids.push(id.to_owned());
        self.vectors.push(vector);
        Ok(())
    }
}

/// Reads `doc_id p1 … pk` lines.
pub fn read_topic_embeddings<R: BufRead>(reader: R, source: &Path) -> Result<TopicEmbeddings> {
    let mut table = TopicEmbeddings::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let values = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(source, idx + 1, format!("bad number: {e}")))?;
        table
            .insert(id, values)
            .map_err(|e| Error::parse(source, idx + 1, e.to_string()))?;
    }
    Ok(table)
}

pub fn load_topic_embeddings(path: &Path) -> Result<TopicEmbeddings> {
    read_topic_embeddings(BufReader::new(File::open(path)?), path)
}

/// `λ_i = δ^(i−1) / Σ_j δ^(j−1)` for `i = 1..=n`.
pub fn decay_weights(n: usize, delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "decay must lie in (0, 1), got {delta}"
        )));
    }
    let raw: Vec<f64> = (0..n).map(|i| delta.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn weighted_mix(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (v, w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Decay-weighted mix of the top-ranked documents, best first.
pub fn query_embedding(top_docs: &[&[f64]], delta: f64) -> Result<Vec<f64>> {
    if top_docs.is_empty() {
        return Err(Error::Config(
            "query embedding needs at least one document".into(),
        ));
    }
    let weights = decay_weights(top_docs.len(), delta)?;
    Ok(weighted_mix(top_docs, &weights))
}

/// Decay-weighted mix of clicked documents, newest first. Without history
/// the profile is the uniform distribution over `dim` topics.
pub fn user_profile(clicked_newest_first: &[&[f64]], delta: f64, dim: usize) -> Result<Vec<f64>> {
    if clicked_newest_first.is_empty() {
        warn!("user without click history; using a uniform profile");
        return Ok(vec![1.0 / dim as f64; dim]);
    }
    let weights = decay_weights(clicked_newest_first.len(), delta)?;
    Ok(weighted_mix(clicked_newest_first, &weights))
}

/// One line of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub user: String,
    pub query: String,
    pub doc: String,
    pub relevant: bool,
    /// Search-engine position, 1-based.
    pub orig_rank: usize,
    pub timestamp: i64,
}

/// Reads `user<TAB>query<TAB>doc<TAB>label<TAB>orig_rank<TAB>timestamp` lines.
pub fn read_log<R: BufRead>(reader: R, source: &Path) -> Result<Vec<LogRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected 6 tab-separated fields, found {}", f.len()),
            ));
        }
        let relevant = match f[3].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::parse(
                    source,
                    line_no,
                    format!("label `{other}` is not 0/1"),
                ))
            }
        };
        let orig_rank: usize = f[4]
            .trim()
            .parse()
            .ok()
            .filter(|r| (1..=LIST_LEN).contains(r))
            .ok_or_else(|| {
                Error::parse(
                    source,
                    line_no,
                    format!("rank `{}` not in 1..={LIST_LEN}", f[4]),
                )
            })?;
        let timestamp: i64 = f[5]
            .trim()
            .parse()
            .map_err(|_| Error::parse(source, line_no, format!("bad timestamp `{}`", f[5])))?;
        if f[..3].iter().any(|s| s.trim().is_empty()) {
            return Err(Error::parse(source, line_no, "empty identifier"));
        }
        records.push(LogRecord {
            user: f[0].trim().to_owned(),
            query: f[1].trim().to_owned(),
            doc: f[2].trim().to_owned(),
            relevant,
            orig_rank,
            timestamp,
        });
    }
    Ok(records)
}

/// One impression: a user's query and the ten results shown for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub user: String,
    pub query: String,
    /// Search-engine order.
    pub ranked_docs: Vec<String>,
    /// Parallel to `ranked_docs`.
    pub relevant: Vec<bool>,
    pub timestamp: i64,
}

impl LogEntry {
    pub fn relevant_docs(&self) -> impl Iterator<Item = &str> {
        self.ranked_docs
            .iter()
            .zip(&self.relevant)
            .filter(|(_, r)| **r)
            .map(|(d, _)| d.as_str())
    }

    pub fn has_relevant(&self) -> bool {
        self.relevant.iter().any(|r| *r)
    }
}

/// Groups records by `(user, query, timestamp)` in order of first
/// appearance. Every group must cover ranks 1..=10 exactly once.
pub fn group_entries(records: &[LogRecord]) -> Result<Vec<LogEntry>> {
    let mut index: HashMap<(&str, &str, i64), usize> = HashMap::new();
    // Each impression with its result slots, indexed by rank - 1.
    type Slots = Vec<Option<(String, bool)>>;
    let mut slots: Vec<(LogEntry, Slots)> = Vec::new();
    for rec in records {
        let key = (rec.user.as_str(), rec.query.as_str(), rec.timestamp);
        let pos = *index.entry(key).or_insert_with(|| {
            slots.push((
                LogEntry {
                    user: rec.user.clone(),
                    query: rec.query.clone(),
                    ranked_docs: Vec::new(),
                    relevant: Vec::new(),
                    timestamp: rec.timestamp,
                },
                vec![None; LIST_LEN],
            ));
            slots.len() - 1
        });
        let slot = &mut slots[pos].1[rec.orig_rank - 1];
        if slot.is_some() {
            return Err(Error::Format(format!(
                "impression ({}, {}, {}) has rank {} twice",
                rec.user, rec.query, rec.timestamp, rec.orig_rank
            )));
        }
        *slot = Some((rec.doc.clone(), rec.relevant));
    }
    slots
        .into_iter()
        .map(|(mut entry, ranks)| {
            for (i, slot) in ranks.into_iter().enumerate() {
                let (doc, rel) = slot.ok_or_else(|| {
                    Error::Format(format!(
                        "impression ({}, {}, {}) is missing rank {}",
                        entry.user,
                        entry.query,
                        entry.timestamp,
                        i + 1
                    ))
                })?;
                entry.ranked_docs.push(doc);
                entry.relevant.push(rel);
            }
            Ok(entry)
        })
        .collect()
}

pub fn load_log(path: &Path) -> Result<Vec<LogEntry>> {
    let records = read_log(BufReader::new(File::open(path)?), path)?;
    group_entries(&records)
}

fn query_key(q: &str) -> String {
    format!("q:{q}")
}

fn doc_key(d: &str) -> String {
    format!("d:{d}")
}

/// Vocabulary and embeddings for the re-ranking task.
#[derive(Debug, Clone)]
pub struct RerankModel {
    /// Entities are `q:<query>` and `d:<doc>` names; relations are user ids.
    pub vocab: Vocab,
    pub emb: EmbeddingTable,
    pub capse: CapsE,
}

impl RerankModel {
    pub fn triple(&self, query: &str, user: &str, doc: &str) -> Result<Triple> {
        let q = self
            .vocab
            .entity_id(&query_key(query))
            .ok_or_else(|| Error::Lookup(format!("unknown query `{query}`")))?;
        let u = self
            .vocab
            .relation_id(user)
            .ok_or_else(|| Error::Lookup(format!("unknown user `{user}`")))?;
        let d = self
            .vocab
            .entity_id(&doc_key(doc))
            .ok_or_else(|| Error::Lookup(format!("unknown document `{doc}`")))?;
        Ok(Triple::new(q, u, d))
    }

    pub fn score(&self, query: &str, user: &str, doc: &str) -> Result<f64> {
        Ok(self.capse.score(&self.emb, self.triple(query, user, doc)?))
    }

    /// Documents of `ranked_docs` reordered by descending score.
    pub fn rerank(&self, query: &str, user: &str, ranked_docs: &[String]) -> Result<Vec<String>> {
        let scores = ranked_docs
            .iter()
            .map(|d| self.score(query, user, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(rerank_order(&scores)
            .into_iter()
            .map(|i| ranked_docs[i].clone())
            .collect())
    }

    /// Every entity row is a fixed topic vector; users are trainable.
    pub fn trainable_rows(&self) -> (Vec<bool>, Vec<bool>) {
        (
            vec![false; self.vocab.num_entities()],
            vec![true; self.vocab.num_relations()],
        )
    }
}

/// Indices sorted by descending score; ties keep their original order.
pub fn rerank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Builds the entity/relation tables from topic vectors.
///
/// * a query's vector mixes the results of its first impression in `all`;
/// * a document's vector is its topic distribution;
/// * a user's profile mixes the relevant documents of their `train`
///   impressions, newest first.
pub fn build_embeddings(
    train: &[LogEntry],
    all: &[&[LogEntry]],
    docs: &TopicEmbeddings,
    delta: f64,
) -> Result<(Vocab, EmbeddingTable)> {
    let dim = docs.dim();
    if dim == 0 {
        return Err(Error::Config("no document embeddings".into()));
    }
    let lookup = |d: &str| {
        docs.get(d)
            .ok_or_else(|| Error::Lookup(format!("no topic vector for document `{d}`")))
    };

    let mut vocab = Vocab::new();
    let mut entity_rows: Vec<Vec<f64>> = Vec::new();
    for entry in all.iter().flat_map(|split| split.iter()) {
        let qk = query_key(&entry.query);
        if vocab.entity_id(&qk).is_none() {
            let top: Vec<&[f64]> = entry
                .ranked_docs
                .iter()
                .map(|d| lookup(d))
                .collect::<Result<_>>()?;
            vocab.intern_entity(&qk);
            entity_rows.push(query_embedding(&top, delta)?);
        }
        for d in &entry.ranked_docs {
            let dk = doc_key(d);
            if vocab.entity_id(&dk).is_none() {
                vocab.intern_entity(&dk);
                entity_rows.push(lookup(d)?.to_vec());
            }
        }
        vocab.intern_relation(&entry.user);
    }

    // Clicks per user, newest first; stable sort keeps later log lines first
    // among equal timestamps because the input is reversed.
    let mut clicks: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for entry in train.iter().rev() {
        for d in entry.relevant_docs() {
            clicks
                .entry(entry.user.as_str())
                .or_default()
                .push((entry.timestamp, d));
        }
    }
    let mut relation_rows = Vec::with_capacity(vocab.num_relations());
    for user in vocab.relation_names() {
        let mut history = clicks.remove(user.as_str()).unwrap_or_default();
        history.sort_by_key(|h| std::cmp::Reverse(h.0));
        let vectors: Vec<&[f64]> = history
            .iter()
            .map(|(_, d)| lookup(d))
            .collect::<Result<_>>()?;
        relation_rows.push(user_profile(&vectors, delta, dim)?);
    }

    let emb = EmbeddingTable::from_parts(
        dim,
        entity_rows.into_iter().flatten().collect(),
        relation_rows.into_iter().flatten().collect(),
    )?;
    Ok((vocab, emb))
}

/// Labelled triples of every impression: relevant results are valid,
/// the rest invalid.
pub fn training_examples(
    model: &RerankModel,
    entries: &[LogEntry],
) -> Result<Vec<(Triple, Label)>> {
    let mut out = Vec::new();
    for e in entries {
        for (doc, rel) in e.ranked_docs.iter().zip(&e.relevant) {
            let label = if *rel { Label::Valid } else { Label::Invalid };
            out.push((model.triple(&e.query, &e.user, doc)?, label));
        }
    }
    Ok(out)
}

/// Trains user profiles and capsule parameters on labelled impressions.
/// Query and document rows never change. `on_epoch` receives the 1-based
/// epoch, its mean loss and the current model.
pub fn train_rerank<F>(
    model: &mut RerankModel,
    examples: &[(Triple, Label)],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &RerankModel) -> Result<()>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training impressions".into()));
    }
    let (ent_mask, rel_mask) = model.trainable_rows();
    let mut optimizer = ModelOptimizer::new(Adam::new(config.lr), &model.capse, &model.emb)
        .with_trainable_rows(ent_mask, rel_mask);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = examples.to_vec();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = train_batch(batch, &mut model.emb, &mut model.capse, &mut optimizer)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / order.len() as f64;
        losses.push(mean);
        on_epoch(epoch, mean, model)?;
    }
    info!("re-ranker trained for {} epochs", config.epochs);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankMetrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub evaluated: usize,
    /// Impressions without any relevant result.
    pub skipped: usize,
}

/// MRR and Hits@1 of the first relevant result after reordering each entry
/// with `order` (a permutation of result indices).
pub fn eval_with<F>(entries: &[LogEntry], mut order: F) -> Result<RerankMetrics>
where
    F: FnMut(&LogEntry) -> Result<Vec<usize>>,
{
    let (mut rr, mut hits, mut evaluated, mut skipped) = (0.0, 0usize, 0usize, 0usize);
    for entry in entries {
        if !entry.has_relevant() {
            skipped += 1;
            continue;
        }
        let perm = order(entry)?;
        let pos = perm
            .iter()
            .position(|&i| entry.relevant[i])
            .ok_or_else(|| Error::Shape("ranking lost the relevant results".into()))?;
        rr += 1.0 / (pos + 1) as f64;
        if pos == 0 {
            hits += 1;
        }
        evaluated += 1;
    }
    if skipped > 0 {
        warn!("{skipped} impressions without relevant results skipped");
    }
    let n = evaluated.max(1) as f64;
    Ok(RerankMetrics {
        mrr: rr / n,
        hits_at_1: hits as f64 / n,
        evaluated,
        skipped,
    })
}

/// Metrics of the model's reordering.
pub fn eval_rerank(entries: &[LogEntry], model: &RerankModel) -> Result<RerankMetrics> {
    eval_with(entries, |e| {
        let scores = e
            .ranked_docs
            .iter()
            .map(|d| model.score(&e.query, &e.user, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(rerank_order(&scores))
    })
}

/// Metrics of the original search-engine order.
pub fn eval_search_engine(entries: &[LogEntry]) -> Result<RerankMetrics> {
    eval_with(entries, |e| Ok((0..e.ranked_docs.len()).collect()))
}
