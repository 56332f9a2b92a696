//! Triple datasets: vocabularies, splits, relation statistics and negative
//! sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::{Error, Result};

/// Dense name ↔ index maps for entities and relations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from ordered name lists. Duplicate names are rejected.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut vocab = Vocab::new();
        for name in entities {
            if vocab.entity_ids.contains_key(&name) {
                return Err(Error::Format(format!("duplicate entity `{name}`")));
            }
            vocab.intern_entity(&name);
        }
        for name in relations {
            if vocab.relation_ids.contains_key(&name) {
                return Err(Error::Format(format!("duplicate relation `{name}`")));
            }
            vocab.intern_relation(&name);
        }
        Ok(vocab)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    /// Returns the index of `name`, appending it if unseen.
    pub fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_owned());
        self.entity_ids.insert(name.to_owned(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(name.to_owned());
        self.relation_ids.insert(name.to_owned(), id);
        id
    }
}

/// An integer-indexed `(subject, relation, object)` fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl Triple {
    pub const fn new(s: usize, r: usize, o: usize) -> Self {
        Triple { s, r, o }
    }

    /// The entity sitting on `side`.
    pub fn entity(&self, side: Side) -> usize {
        match side {
            Side::Head => self.s,
            Side::Tail => self.o,
        }
    }

    /// Copy of the triple with the entity on `side` replaced.
    pub fn with_entity(&self, side: Side, entity: usize) -> Triple {
        match side {
            Side::Head => Triple { s: entity, ..*self },
            Side::Tail => Triple { o: entity, ..*self },
        }
    }
}

/// Which entity of a triple is being predicted or replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Head, Side::Tail];

    pub fn label(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Ordered list of unique triples with O(1) membership tests.
#[derive(Debug, Clone, Default)]
pub struct TripleSet {
    triples: Vec<Triple>,
    members: HashSet<Triple>,
}

impl TripleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `t` unless already present. Returns whether it was added.
    pub fn insert(&mut self, t: Triple) -> bool {
        if self.members.insert(t) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn as_slice(&self) -> &[Triple] {
        &self.triples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triple> {
        self.triples.iter()
    }

    /// Union of several splits, keeping first-seen order.
    pub fn union<'a>(sets: impl IntoIterator<Item = &'a TripleSet>) -> TripleSet {
        let mut out = TripleSet::new();
        for set in sets {
            for &t in set.iter() {
                out.insert(t);
            }
        }
        out
    }
}

impl FromIterator<Triple> for TripleSet {
    fn from_iter<I: IntoIterator<Item = Triple>>(iter: I) -> Self {
        let mut set = TripleSet::new();
        for t in iter {
            set.insert(t);
        }
        set
    }
}

impl<'a> IntoIterator for &'a TripleSet {
    type Item = &'a Triple;
    type IntoIter = std::slice::Iter<'a, Triple>;

    fn into_iter(self) -> Self::IntoIter {
        self.triples.iter()
    }
}

/// Whether loading may add unseen names to the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    Grow,
    Frozen,
}

/// Parses `subject<TAB>relation<TAB>object` lines. Blank lines are skipped.
/// Repeated triples are dropped with a warning. `source` is only used in
/// error messages.
pub fn read_triples<R: BufRead>(
    reader: R,
    source: &Path,
    vocab: &mut Vocab,
    mode: VocabMode,
) -> Result<TripleSet> {
    let mut set = TripleSet::new();
    let mut duplicates = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::parse(source, line_no, "empty field"));
        }
        let (s, r, o) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        let t = match mode {
            VocabMode::Grow => Triple::new(
                vocab.intern_entity(s),
                vocab.intern_relation(r),
                vocab.intern_entity(o),
            ),
            VocabMode::Frozen => {
                let lookup_entity = |name: &str| {
                    vocab.entity_id(name).ok_or_else(|| Error::Vocabulary {
                        kind: "entity",
                        name: name.to_owned(),
                    })
                };
                let rel = vocab.relation_id(r).ok_or_else(|| Error::Vocabulary {
                    kind: "relation",
                    name: r.to_owned(),
                })?;
                Triple::new(lookup_entity(s)?, rel, lookup_entity(o)?)
            }
        };
        if !set.insert(t) {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        warn!(
            "{}: dropped {duplicates} repeated triples",
            source.display()
        );
    }
    Ok(set)
}

pub fn load_triples(path: &Path, vocab: &mut Vocab, mode: VocabMode) -> Result<TripleSet> {
    let file = File::open(path)?;
    read_triples(BufReader::new(file), path, vocab, mode)
}

/// The three standard splits of a link-prediction benchmark.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: TripleSet,
    pub valid: TripleSet,
    pub test: TripleSet,
}

impl Dataset {
    pub const TRAIN_FILE: &'static str = "train.txt";
    pub const VALID_FILE: &'static str = "valid.txt";
    pub const TEST_FILE: &'static str = "test.txt";

    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    ///
    /// The vocabulary is built over all three splits in that order, so
    /// train names get the lowest indices and the entity count matches the
    /// published dataset totals (a few valid/test entities never occur in
    /// train for the public benchmark releases).
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset directory {} not found", dir.display()),
            )));
        }
        let mut vocab = Vocab::new();
        let train = load_triples(&dir.join(Self::TRAIN_FILE), &mut vocab, VocabMode::Grow)?;
        let valid = load_triples(&dir.join(Self::VALID_FILE), &mut vocab, VocabMode::Grow)?;
        let test = load_triples(&dir.join(Self::TEST_FILE), &mut vocab, VocabMode::Grow)?;
        Ok(Dataset {
            vocab,
            train,
            valid,
            test,
        })
    }

    /// Filter set for the filtered ranking protocol: train ∪ valid ∪ test.
    pub fn known(&self) -> TripleSet {
        TripleSet::union([&self.train, &self.valid, &self.test])
    }
}

/// Relation category from thresholding heads-per-tail and tails-per-head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::OneToOne,
        Category::OneToMany,
        Category::ManyToOne,
        Category::ManyToMany,
    ];

    pub const THRESHOLD: f64 = 1.5;

    pub fn classify(hpt: f64, tph: f64) -> Category {
        match (hpt < Self::THRESHOLD, tph < Self::THRESHOLD) {
            (true, true) => Category::OneToOne,
            (true, false) => Category::OneToMany,
            (false, true) => Category::ManyToOne,
            (false, false) => Category::ManyToMany,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::OneToOne => "1-1",
            Category::OneToMany => "1-M",
            Category::ManyToOne => "M-1",
            Category::ManyToMany => "M-M",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationStat {
    pub triples: usize,
    pub distinct_heads: usize,
    pub distinct_tails: usize,
    /// Mean number of head entities per tail entity.
    pub hpt: f64,
    /// Mean number of tail entities per head entity.
    pub tph: f64,
    pub category: Category,
    /// False when the relation has no training triple; the entry then holds
    /// placeholder values (hpt = tph = 1, category M-M).
    pub observed: bool,
}

/// Per-relation multiplicity statistics of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationStats {
    per_relation: Vec<RelationStat>,
}

impl RelationStats {
    pub fn compute(train: &TripleSet, num_relations: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config(
                "relation statistics need a nonempty training set".into(),
            ));
        }
        let mut heads: Vec<HashSet<usize>> = vec![HashSet::new(); num_relations];
        let mut tails: Vec<HashSet<usize>> = vec![HashSet::new(); num_relations];
        let mut counts = vec![0usize; num_relations];
        for t in train {
            if t.r >= num_relations {
                return Err(Error::Shape(format!(
                    "relation index {} out of range for {num_relations} relations",
                    t.r
                )));
            }
            heads[t.r].insert(t.s);
            tails[t.r].insert(t.o);
            counts[t.r] += 1;
        }
        let per_relation = (0..num_relations)
            .map(|r| {
                if counts[r] == 0 {
                    warn!("relation {r} has no training triples; treating it as M-M");
                    return RelationStat {
                        triples: 0,
                        distinct_heads: 0,
                        distinct_tails: 0,
                        hpt: 1.0,
                        tph: 1.0,
                        category: Category::ManyToMany,
                        observed: false,
                    };
                }
                let n = counts[r] as f64;
                let hpt = n / tails[r].len() as f64;
                let tph = n / heads[r].len() as f64;
                RelationStat {
                    triples: counts[r],
                    distinct_heads: heads[r].len(),
                    distinct_tails: tails[r].len(),
                    hpt,
                    tph,
                    category: Category::classify(hpt, tph),
                    observed: true,
                }
            })
            .collect();
        Ok(RelationStats { per_relation })
    }

    pub fn len(&self) -> usize {
        self.per_relation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_relation.is_empty()
    }

    pub fn get(&self, relation: usize) -> &RelationStat {
        &self.per_relation[relation]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationStat> {
        self.per_relation.iter()
    }

    pub fn category(&self, relation: usize) -> Category {
        self.per_relation[relation].category
    }

    /// Probability of corrupting the head: tph / (tph + hpt).
    pub fn head_replace_probability(&self, relation: usize) -> f64 {
        let s = &self.per_relation[relation];
        s.tph / (s.tph + s.hpt)
    }

    /// Number of observed relations per category, indexed by [`Category::index`].
    pub fn category_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for s in self.per_relation.iter().filter(|s| s.observed) {
            counts[s.category.index()] += 1;
        }
        counts
    }

    /// `relation<TAB>hpt<TAB>tph<TAB>category` lines, one per relation.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (r, s) in self.per_relation.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\n",
                vocab.relation_name(r),
                s.hpt,
                s.tph,
                s.category
            ));
        }
        out
    }
}

/// Bernoulli negative sampler: corrupts the head with probability
/// tph / (tph + hpt) of the triple's relation, otherwise the tail.
#[derive(Debug, Clone)]
pub struct BernoulliSampler {
    head_prob: Vec<f64>,
    num_entities: usize,
    max_retries: usize,
}

impl BernoulliSampler {
    pub const DEFAULT_MAX_RETRIES: usize = 100;

    pub fn new(stats: &RelationStats, num_entities: usize) -> Result<Self> {
        if num_entities < 2 {
            return Err(Error::Config(
                "negative sampling needs at least 2 entities".into(),
            ));
        }
        Ok(BernoulliSampler {
            head_prob: (0..stats.len())
                .map(|r| stats.head_replace_probability(r))
                .collect(),
            num_entities,
            max_retries: Self::DEFAULT_MAX_RETRIES,
        })
    }

    pub fn with_max_retries(mut self, retries: usize) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn head_probability(&self, relation: usize) -> f64 {
        self.head_prob[relation]
    }

    /// Picks the side to corrupt, then redraws the replacement entity until
    /// the result is not a member of `known`.
    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        t: Triple,
        known: &TripleSet,
        rng: &mut R,
    ) -> Result<Triple> {
        let side = if rng.gen::<f64>() < self.head_prob[t.r] {
            Side::Head
        } else {
            Side::Tail
        };
        for _ in 0..self.max_retries {
            let candidate = t.with_entity(side, rng.gen_range(0..self.num_entities));
            if !known.contains(&candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::Sampling {
            triple: t,
            retries: self.max_retries,
        })
    }
}

/// Every corruption of `t` on `side` that is not in `known`. The original
/// triple is never included.
pub fn filtered_candidates(
    t: Triple,
    side: Side,
    num_entities: usize,
    known: &TripleSet,
) -> Vec<Triple> {
    let own = t.entity(side);
    (0..num_entities)
        .filter(|&e| e != own)
        .map(|e| t.with_entity(side, e))
        .filter(|c| !known.contains(c))
        .collect()
}
