//! Entity and relation embedding tables: initialisation, text I/O and
//! TransE pretraining.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, info};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kg::{BernoulliSampler, Triple, TripleSet, Vocab};
use crate::{Error, Result};

/// Row-major `|E| × k` and `|R| × k` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entities: Vec<f64>,
    relations: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entities: vec![0.0; num_entities * dim],
            relations: vec![0.0; num_relations * dim],
        }
    }

    pub fn from_parts(dim: usize, entities: Vec<f64>, relations: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if !entities.len().is_multiple_of(dim) || !relations.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "buffers of length {} / {} are not multiples of k = {dim}",
                entities.len(),
                relations.len()
            )));
        }
        Ok(EmbeddingTable {
            dim,
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.dim.max(1)
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len() / self.dim.max(1)
    }

    pub fn entity(&self, id: usize) -> &[f64] {
        &self.entities[id * self.dim..(id + 1) * self.dim]
    }

    pub fn entity_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.entities[id * self.dim..(id + 1) * self.dim]
    }

    pub fn relation(&self, id: usize) -> &[f64] {
        &self.relations[id * self.dim..(id + 1) * self.dim]
    }

    pub fn relation_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.relations[id * self.dim..(id + 1) * self.dim]
    }

    pub fn entity_data(&self) -> &[f64] {
        &self.entities
    }

    pub fn entity_data_mut(&mut self) -> &mut [f64] {
        &mut self.entities
    }

    pub fn relation_data(&self) -> &[f64] {
        &self.relations
    }

    pub fn relation_data_mut(&mut self) -> &mut [f64] {
        &mut self.relations
    }

    pub fn is_finite(&self) -> bool {
        self.entities
            .iter()
            .chain(&self.relations)
            .all(|v| v.is_finite())
    }

    /// Checks that the row counts match `vocab` exactly.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.num_entities() != vocab.num_entities()
            || self.num_relations() != vocab.num_relations()
        {
            return Err(Error::Shape(format!(
                "table has {}/{} entity/relation rows, vocabulary has {}/{}",
                self.num_entities(),
                self.num_relations(),
                vocab.num_entities(),
                vocab.num_relations()
            )));
        }
        Ok(())
    }

    /// Scales every entity row to unit L2 norm. Zero rows are left alone.
    pub fn normalize_entities(&mut self) {
        let dim = self.dim;
        for row in self.entities.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    fn check_triple(&self, t: Triple) -> Result<()> {
        let ne = self.num_entities();
        if t.s >= ne || t.o >= ne || t.r >= self.num_relations() {
            return Err(Error::Shape(format!(
                "triple {t:?} out of range for {ne} entities / {} relations",
                self.num_relations()
            )));
        }
        Ok(())
    }
}

/// Uniform(−6/√k, 6/√k) entries, deterministic in `seed`.
pub fn init_random(vocab: &Vocab, k: usize, seed: u64) -> EmbeddingTable {
    init_random_sized(vocab.num_entities(), vocab.num_relations(), k, seed)
}

pub fn init_random_sized(
    num_entities: usize,
    num_relations: usize,
    k: usize,
    seed: u64,
) -> EmbeddingTable {
    assert!(k >= 1, "embedding dimension must be positive");
    let bound = 6.0 / (k as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = (0..num_entities * k)
        .map(|_| dist.sample(&mut rng))
        .collect();
    let relations = (0..num_relations * k)
        .map(|_| dist.sample(&mut rng))
        .collect();
    EmbeddingTable {
        dim: k,
        entities,
        relations,
    }
}

/// Writes the table as two sections, `entities N k` and `relations M k`,
/// each followed by `name v1 … vk` rows.
pub fn write_embeddings<W: Write>(mut w: W, table: &EmbeddingTable, vocab: &Vocab) -> Result<()> {
    table.check_vocab(vocab)?;
    write_section(
        &mut w,
        "entities",
        vocab.entity_names(),
        table.entity_data(),
        table.dim,
    )?;
    write_section(
        &mut w,
        "relations",
        vocab.relation_names(),
        table.relation_data(),
        table.dim,
    )?;
    Ok(())
}

fn write_section<W: Write>(
    w: &mut W,
    label: &str,
    names: &[String],
    data: &[f64],
    dim: usize,
) -> Result<()> {
    writeln!(w, "{label} {} {dim}", names.len())?;
    for (name, row) in names.iter().zip(data.chunks(dim)) {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!(
                "name `{name}` cannot be written in a whitespace-separated file"
            )));
        }
        w.write_all(name.as_bytes())?;
        for v in row {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the format produced by [`write_embeddings`] from an iterator over
/// numbered lines. Shared with the checkpoint reader.
pub(crate) fn read_embedding_sections<I>(
    lines: &mut I,
    source: &Path,
) -> Result<(Vocab, EmbeddingTable)>
where
    I: Iterator<Item = (usize, std::io::Result<String>)>,
{
    let (ent_names, ent_data, k1) = read_section(lines, source, "entities")?;
    let (rel_names, rel_data, k2) = read_section(lines, source, "relations")?;
    if k1 != k2 {
        return Err(Error::Format(format!(
            "entity dimension {k1} differs from relation dimension {k2}"
        )));
    }
    let vocab = Vocab::from_names(ent_names, rel_names)?;
    let table = EmbeddingTable::from_parts(k1, ent_data, rel_data)?;
    Ok((vocab, table))
}

fn next_line<I>(lines: &mut I, source: &Path, expecting: &str) -> Result<(usize, String)>
where
    I: Iterator<Item = (usize, std::io::Result<String>)>,
{
    match lines.next() {
        Some((idx, line)) => Ok((idx + 1, line?)),
        None => Err(Error::Format(format!(
            "{}: unexpected end of file, expected {expecting}",
            source.display()
        ))),
    }
}

fn read_section<I>(
    lines: &mut I,
    source: &Path,
    label: &str,
) -> Result<(Vec<String>, Vec<f64>, usize)>
where
    I: Iterator<Item = (usize, std::io::Result<String>)>,
{
    let (line_no, header) = next_line(lines, source, label)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match parts.as_slice() {
        [l, n, k] if *l == label => {
            let n: usize = n
                .parse()
                .map_err(|_| Error::parse(source, line_no, "bad row count"))?;
            let k: usize = k
                .parse()
                .map_err(|_| Error::parse(source, line_no, "bad dimension"))?;
            (n, k)
        }
        _ => {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected `{label} <count> <dim>` header"),
            ))
        }
    };
    if dim == 0 {
        return Err(Error::parse(source, line_no, "dimension must be positive"));
    }
    let mut names = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let (line_no, line) = next_line(lines, source, "embedding row")?;
        let mut fields = line.split_whitespace();
        let name = fields
            .next()
            .ok_or_else(|| Error::parse(source, line_no, "empty row"))?;
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(source, line_no, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(source, line_no, "non-finite value"));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected {dim} values, found {}", data.len() - before),
            ));
        }
        names.push(name.to_owned());
    }
    Ok((names, data, dim))
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable, vocab: &Vocab) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(&mut buf, table, vocab)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(Vocab, EmbeddingTable)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    read_embedding_sections(&mut lines, path)
}

/// Loads a saved table and reorders its rows to follow `vocab`. Every name in
/// `vocab` must be present in the file.
pub fn load_embeddings_for(path: &Path, vocab: &Vocab) -> Result<EmbeddingTable> {
    let (file_vocab, file_table) = load_embeddings(path)?;
    let k = file_table.dim();
    let mut table = EmbeddingTable::zeros(vocab.num_entities(), vocab.num_relations(), k);
    for (id, name) in vocab.entity_names().iter().enumerate() {
        let src = file_vocab
            .entity_id(name)
            .ok_or_else(|| Error::Vocabulary {
                kind: "entity",
                name: name.clone(),
            })?;
        table.entity_mut(id).copy_from_slice(file_table.entity(src));
    }
    for (id, name) in vocab.relation_names().iter().enumerate() {
        let src = file_vocab
            .relation_id(name)
            .ok_or_else(|| Error::Vocabulary {
                kind: "relation",
                name: name.clone(),
            })?;
        table
            .relation_mut(id)
            .copy_from_slice(file_table.relation(src));
    }
    Ok(table)
}

/// Pretrained word vectors keyed by token.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn from_map(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut dim = None;
        for (word, v) in &vectors {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Format(format!(
                        "word `{word}` has dimension {} instead of {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(WordVectors {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    /// Dimension of the vectors, 0 when empty.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Reads `word v1 … vk` lines (GloVe text format).
pub fn read_word_vectors<R: BufRead>(reader: R, source: &Path) -> Result<WordVectors> {
    let mut vectors = HashMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(source, idx + 1, format!("bad number: {e}")))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    source,
                    idx + 1,
                    format!("dimension {} differs from {d}", values.len()),
                ))
            }
            _ => {}
        }
        vectors.insert(word.to_owned(), values);
    }
    Ok(WordVectors {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    read_word_vectors(BufReader::new(File::open(path)?), path)
}

/// Surface tokens of a WordNet-style entity name such as
/// `__spiritual_leader_NN_1`: split on `_`, drop the trailing sense number
/// and part-of-speech tag, lowercase.
pub fn surface_tokens(name: &str) -> Vec<String> {
    let mut tokens: Vec<&str> = name.split('_').filter(|t| !t.is_empty()).collect();
    while let Some(last) = tokens.last() {
        let is_sense = last.chars().all(|c| c.is_ascii_digit());
        let is_pos = last.len() <= 3 && last.chars().all(|c| c.is_ascii_uppercase());
        if is_sense || is_pos {
            tokens.pop();
        } else {
            break;
        }
    }
    tokens.into_iter().map(str::to_lowercase).collect()
}

/// Outcome counters for [`synset_init`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynsetCoverage {
    pub averaged: usize,
    pub fallback: usize,
}

/// Entity rows are the mean of their in-vocabulary token vectors; entities
/// without any known token keep the [`init_random`] row, as do relations.
pub fn synset_init(
    words: &WordVectors,
    entity_tokens: &HashMap<String, Vec<String>>,
    vocab: &Vocab,
    k: usize,
    seed: u64,
) -> Result<(EmbeddingTable, SynsetCoverage)> {
    if !words.is_empty() && words.dim() != k {
        return Err(Error::Shape(format!(
            "word vectors have dimension {}, embeddings need {k}",
            words.dim()
        )));
    }
    let mut table = init_random(vocab, k, seed);
    let mut coverage = SynsetCoverage::default();
    for (id, name) in vocab.entity_names().iter().enumerate() {
        let known: Vec<&[f64]> = entity_tokens
            .get(name)
            .into_iter()
            .flatten()
            .filter_map(|tok| words.get(tok))
            .collect();
        if known.is_empty() {
            coverage.fallback += 1;
            continue;
        }
        let row = table.entity_mut(id);
        row.iter_mut().for_each(|v| *v = 0.0);
        for vec in &known {
            for (dst, src) in row.iter_mut().zip(vec.iter()) {
                *dst += src;
            }
        }
        let n = known.len() as f64;
        row.iter_mut().for_each(|v| *v /= n);
        coverage.averaged += 1;
    }
    info!(
        "synset init: {} entities averaged, {} random fallbacks",
        coverage.averaged, coverage.fallback
    );
    Ok((table, coverage))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::Config(format!("unknown norm `{s}`"))),
        }
    }
}

/// ‖v_s + v_r − v_o‖ under `norm`. Lower means more plausible.
pub fn transe_score(t: Triple, emb: &EmbeddingTable, norm: Norm) -> f64 {
    let (s, r, o) = (emb.entity(t.s), emb.relation(t.r), emb.entity(t.o));
    let diffs = s.iter().zip(r).zip(o).map(|((s, r), o)| s + r - o);
    match norm {
        Norm::L1 => diffs.map(f64::abs).sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

/// Hinge term of the TransE objective.
pub fn margin_loss(margin: f64, positive: f64, negative: f64) -> f64 {
    (margin + positive - negative).max(0.0)
}

#[derive(Debug, Clone)]
pub struct TranseConfig {
    pub margin: f64,
    pub lr: f64,
    pub norm: Norm,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TranseConfig {
    fn default() -> Self {
        TranseConfig {
            margin: 5.0,
            lr: 5e-3,
            norm: Norm::L1,
            epochs: 3000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranseOutcome {
    pub table: EmbeddingTable,
    /// Summed hinge loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Gradient of the chosen norm of `x` with respect to `x`.
fn norm_gradient(x: &[f64], norm: Norm, out: &mut [f64]) {
    match norm {
        Norm::L1 => {
            for (g, v) in out.iter_mut().zip(x) {
                *g = if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Norm::L2 => {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (g, v) in out.iter_mut().zip(x) {
                *g = if n > 0.0 { v / n } else { 0.0 };
            }
        }
    }
}

fn translation_residual(t: Triple, emb: &EmbeddingTable, out: &mut [f64]) {
    let (s, r, o) = (emb.entity(t.s), emb.relation(t.r), emb.entity(t.o));
    for (i, d) in out.iter_mut().enumerate() {
        *d = s[i] + r[i] - o[i];
    }
}

fn add_scaled(row: &mut [f64], scale: f64, g: &[f64]) {
    for (p, gi) in row.iter_mut().zip(g) {
        *p += scale * gi;
    }
}

/// Margin-ranking SGD with one Bernoulli negative per positive per epoch.
/// Entity rows are renormalised to unit L2 at the start of every epoch.
pub fn transe_train(
    train: &TripleSet,
    init: &EmbeddingTable,
    sampler: &BernoulliSampler,
    config: &TranseConfig,
) -> Result<TranseOutcome> {
    if !(config.margin > 0.0) || !(config.lr > 0.0) {
        return Err(Error::Config("TransE needs margin > 0 and lr > 0".into()));
    }
    for &t in train {
        init.check_triple(t)?;
    }
    let mut table = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = table.dim();
    let (mut res, mut g_pos, mut g_neg) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut order: Vec<Triple> = train.as_slice().to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        table.normalize_entities();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &pos in &order {
            let neg = sampler.corrupt(pos, train, &mut rng)?;
            let d_pos = transe_score(pos, &table, config.norm);
            let d_neg = transe_score(neg, &table, config.norm);
            let term = margin_loss(config.margin, d_pos, d_neg);
            if !term.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite TransE loss at epoch {epoch}"
                )));
            }
            total += term;
            if term <= 0.0 {
                continue;
            }
            translation_residual(pos, &table, &mut res);
            norm_gradient(&res, config.norm, &mut g_pos);
            translation_residual(neg, &table, &mut res);
            norm_gradient(&res, config.norm, &mut g_neg);

            let lr = config.lr;
            add_scaled(table.entity_mut(pos.s), -lr, &g_pos);
            add_scaled(table.entity_mut(pos.o), lr, &g_pos);
            add_scaled(table.relation_mut(pos.r), -lr, &g_pos);
            add_scaled(table.entity_mut(neg.s), lr, &g_neg);
            add_scaled(table.entity_mut(neg.o), -lr, &g_neg);
            add_scaled(table.relation_mut(neg.r), lr, &g_neg);
        }
        if epoch % 100 == 0 {
            debug!("transe epoch {epoch}: loss {total:.4}");
        }
        epoch_losses.push(total);
    }
    if !table.is_finite() {
        return Err(Error::Numeric(
            "TransE produced non-finite embeddings".into(),
        ));
    }
    Ok(TranseOutcome {
        table,
        epoch_losses,
    })
}
