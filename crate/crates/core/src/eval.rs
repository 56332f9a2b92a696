//! Filtered link-prediction evaluation.
//!
//! Every test triple is ranked twice, once against all head corruptions and
//! once against all tail corruptions, after removing corruptions that are
//! themselves known facts. Ties are split: the rank is the mean of the
//! optimistic and pessimistic positions, rounded up, so a constant scorer
//! lands in the middle of the list instead of at the top.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::embed::{transe_score, EmbeddingTable, Norm};
use crate::kg::{
    filtered_candidates, BernoulliSampler, Category, RelationStats, Side, Triple, TripleSet, Vocab,
};
use crate::model::{self, CapsE, ConvKB, TrainConfig};
use crate::{Error, Result};

/// Cut-offs reported for Hits@k.
pub const HITS_AT: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Anything that assigns a plausibility score to a triple.
pub trait Scorer: Sync {
    fn score(&self, t: Triple) -> f64;

    fn direction(&self) -> Direction {
        Direction::HigherBetter
    }

    /// Score mapped so that higher is always better.
    fn oriented(&self, t: Triple) -> f64 {
        match self.direction() {
            Direction::HigherBetter => self.score(t),
            Direction::LowerBetter => -self.score(t),
        }
    }
}

pub struct CapsEScorer<'a> {
    pub model: &'a CapsE,
    pub emb: &'a EmbeddingTable,
}

impl Scorer for CapsEScorer<'_> {
    fn score(&self, t: Triple) -> f64 {
        self.model.score(self.emb, t)
    }
}

pub struct TranseScorer<'a> {
    pub emb: &'a EmbeddingTable,
    pub norm: Norm,
}

impl Scorer for TranseScorer<'_> {
    fn score(&self, t: Triple) -> f64 {
        transe_score(t, self.emb, self.norm)
    }

    fn direction(&self) -> Direction {
        Direction::LowerBetter
    }
}

pub struct ConvKBScorer<'a> {
    pub model: &'a ConvKB,
    pub emb: &'a EmbeddingTable,
}

impl Scorer for ConvKBScorer<'_> {
    fn score(&self, t: Triple) -> f64 {
        self.model.score(self.emb, t).unwrap_or(f64::NAN)
    }
}

/// Adapts a closure into a [`Scorer`].
pub struct FnScorer<F> {
    pub f: F,
    pub direction: Direction,
}

impl<F: Fn(Triple) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score(&self, t: Triple) -> f64 {
        (self.f)(t)
    }

    fn direction(&self) -> Direction {
        self.direction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOutcome {
    pub triple: Triple,
    pub side: Side,
    /// In `1..=num_candidates + 1`.
    pub rank: usize,
    pub num_candidates: usize,
}

/// `1 + #better + ⌈#tied / 2⌉` over higher-is-better scores. A NaN target
/// ranks last; NaN candidates count as worse.
pub fn rank_among(target: f64, candidates: impl IntoIterator<Item = f64>) -> (usize, usize) {
    let (mut better, mut tied, mut total) = (0usize, 0usize, 0usize);
    for c in candidates {
        total += 1;
        if c > target {
            better += 1;
        } else if c == target {
            tied += 1;
        }
    }
    if target.is_nan() {
        return (total + 1, total);
    }
    (1 + better + tied.div_ceil(2), total)
}

/// Filtered rank of `t` against every corruption of `side` not in `known`.
pub fn rank_triple<S: Scorer + ?Sized>(
    t: Triple,
    side: Side,
    scorer: &S,
    num_entities: usize,
    known: &TripleSet,
) -> RankOutcome {
    let target = scorer.oriented(t);
    let candidates = filtered_candidates(t, side, num_entities, known);
    let (rank, num_candidates) = rank_among(target, candidates.iter().map(|c| scorer.oriented(*c)));
    RankOutcome {
        triple: t,
        side,
        rank,
        num_candidates,
    }
}

/// MR, MRR and Hits@k over a group of outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mr: f64,
    pub mrr: f64,
    /// `(k, fraction with rank ≤ k)` for each k in [`HITS_AT`].
    pub hits: Vec<(usize, f64)>,
}

impl Summary {
    pub fn from_ranks(ranks: &[usize]) -> Option<Summary> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len() as f64;
        let mr = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits = HITS_AT
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect();
        Some(Summary {
            count: ranks.len(),
            mr,
            mrr,
            hits,
        })
    }

    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// MR ≥ 1, MRR in (0, 1], Hits@k nondecreasing in k.
    pub fn check_invariants(&self) -> Result<()> {
        let ok_hits = self.hits.windows(2).all(|w| w[0].1 <= w[1].1)
            && self.hits.iter().all(|(_, h)| (0.0..=1.0).contains(h));
        if self.mr >= 1.0 && self.mrr > 0.0 && self.mrr <= 1.0 && ok_hits {
            Ok(())
        } else {
            Err(Error::Numeric(format!("inconsistent metrics {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub outcomes: Vec<RankOutcome>,
    pub overall: Summary,
    pub per_relation: BTreeMap<usize, Summary>,
    pub per_category: BTreeMap<(Category, Side), Summary>,
}

impl MetricsReport {
    /// Aggregates outcomes; all outcomes are pooled for the overall numbers.
    /// Category breakdowns need `stats`.
    pub fn from_outcomes(
        outcomes: Vec<RankOutcome>,
        stats: Option<&RelationStats>,
    ) -> Result<Self> {
        let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
        let overall = Summary::from_ranks(&ranks)
            .ok_or_else(|| Error::Config("cannot summarise an empty evaluation".into()))?;

        let mut by_relation: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut by_category: BTreeMap<(Category, Side), Vec<usize>> = BTreeMap::new();
        for o in &outcomes {
            by_relation.entry(o.triple.r).or_default().push(o.rank);
            if let Some(stats) = stats {
                if o.triple.r < stats.len() {
                    by_category
                        .entry((stats.category(o.triple.r), o.side))
                        .or_default()
                        .push(o.rank);
                }
            }
        }
        let per_relation = by_relation
            .into_iter()
            .filter_map(|(r, ranks)| Summary::from_ranks(&ranks).map(|s| (r, s)))
            .collect();
        let per_category = by_category
            .into_iter()
            .filter_map(|(key, ranks)| Summary::from_ranks(&ranks).map(|s| (key, s)))
            .collect();
        let report = MetricsReport {
            outcomes,
            overall,
            per_relation,
            per_category,
        };
        report.check_invariants()?;
        Ok(report)
    }

    pub fn mr(&self) -> f64 {
        self.overall.mr
    }

    pub fn mrr(&self) -> f64 {
        self.overall.mrr
    }

    pub fn hits_at(&self, k: usize) -> f64 {
        self.overall.hits_at(k).unwrap_or(f64::NAN)
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.overall.check_invariants()?;
        for s in self.per_relation.values().chain(self.per_category.values()) {
            s.check_invariants()?;
        }
        Ok(())
    }

    fn hits_header() -> String {
        HITS_AT.iter().map(|k| format!("\thits@{k}")).collect()
    }

    fn hits_cells(s: &Summary) -> String {
        s.hits.iter().map(|(_, h)| format!("\t{h:.6}")).collect()
    }

    /// `metric<TAB>value` lines.
    pub fn overall_tsv(&self) -> String {
        let s = &self.overall;
        let mut out = format!("count\t{}\nmr\t{:.6}\nmrr\t{:.6}\n", s.count, s.mr, s.mrr);
        for (k, h) in &s.hits {
            let _ = writeln!(out, "hits@{k}\t{h:.6}");
        }
        out
    }

    pub fn per_relation_tsv(&self, vocab: &Vocab) -> String {
        let mut out = format!("relation\tcount\tmr\tmrr{}\n", Self::hits_header());
        for (&r, s) in &self.per_relation {
            let name = vocab
                .relation_names()
                .get(r)
                .map(String::as_str)
                .unwrap_or("?");
            let _ = writeln!(
                out,
                "{name}\t{}\t{:.6}\t{:.6}{}",
                s.count,
                s.mr,
                s.mrr,
                Self::hits_cells(s)
            );
        }
        out
    }

    /// Always lists the four categories for both sides; empty cells read `NA`.
    pub fn per_category_tsv(&self) -> String {
        let mut out = format!("category\tside\tcount\tmrr{}\n", Self::hits_header());
        for cat in Category::ALL {
            for side in Side::BOTH {
                match self.per_category.get(&(cat, side)) {
                    Some(s) => {
                        let _ = writeln!(
                            out,
                            "{cat}\t{side}\t{}\t{:.6}{}",
                            s.count,
                            s.mrr,
                            Self::hits_cells(s)
                        );
                    }
                    None => {
                        let na: String = HITS_AT.iter().map(|_| "\tNA").collect();
                        let _ = writeln!(out, "{cat}\t{side}\t0\tNA{na}");
                    }
                }
            }
        }
        out
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let s = &self.overall;
        let _ = writeln!(out, "outcomes   {}", s.count);
        let _ = writeln!(out, "MR         {:.1}", s.mr);
        let _ = writeln!(out, "MRR        {:.4}", s.mrr);
        for (k, h) in &s.hits {
            let _ = writeln!(out, "Hits@{k:<5} {:.2}%", 100.0 * h);
        }
        let _ = writeln!(
            out,
            "\n{:<10} {:>5} {:>8} {:>8}",
            "category", "side", "MRR", "H@10"
        );
        for cat in Category::ALL {
            for side in Side::BOTH {
                match self.per_category.get(&(cat, side)) {
                    Some(c) => {
                        let h10 = c.hits_at(10).unwrap_or(f64::NAN) * 100.0;
                        let _ = writeln!(
                            out,
                            "{:<10} {:>5} {:>8.4} {:>7.2}%",
                            cat.label(),
                            side.label(),
                            c.mrr,
                            h10
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            "{:<10} {:>5} {:>8} {:>8}",
                            cat.label(),
                            side.label(),
                            "-",
                            "-"
                        );
                    }
                }
            }
        }
        let _ = writeln!(
            out,
            "\n{:<40} {:>7} {:>9} {:>8} {:>8}",
            "relation", "count", "MR", "MRR", "H@10"
        );
        for (&r, c) in &self.per_relation {
            let name = vocab
                .relation_names()
                .get(r)
                .map(String::as_str)
                .unwrap_or("?");
            let h10 = c.hits_at(10).unwrap_or(f64::NAN) * 100.0;
            let _ = writeln!(
                out,
                "{name:<40} {:>7} {:>9.1} {:>8.4} {:>7.2}%",
                c.count, c.mr, c.mrr, h10
            );
        }
        out
    }
}

/// Head and tail outcomes for every triple in `test`, in test order (head
/// first), aggregated into a report.
pub fn evaluate<S: Scorer + ?Sized>(
    test: &TripleSet,
    scorer: &S,
    num_entities: usize,
    known: &TripleSet,
    stats: Option<&RelationStats>,
) -> Result<MetricsReport> {
    let outcomes: Vec<RankOutcome> = test
        .as_slice()
        .par_iter()
        .flat_map_iter(|&t| {
            Side::BOTH
                .into_iter()
                .map(move |side| rank_triple(t, side, scorer, num_entities, known))
        })
        .collect();
    MetricsReport::from_outcomes(outcomes, stats)
}

/// Settings for comparing routing iteration counts.
#[derive(Debug, Clone)]
pub struct RoutingStudyConfig {
    pub iterations: Vec<usize>,
    /// Shape of every trained model; its `iterations` field is overridden.
    pub shape: model::CapsEShape,
    pub train: TrainConfig,
    pub eval_every: usize,
    pub model_seed: u64,
    pub hits_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStudyRow {
    pub iterations: usize,
    /// `(epoch, Hits@k on the validation split)`.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Trains one model per routing-iteration count from the same initial
/// embeddings and records validation Hits@k every `eval_every` epochs. With
/// zero epochs the initial model is evaluated once at epoch 0.
pub fn routing_study(
    train: &TripleSet,
    valid: &TripleSet,
    known: &TripleSet,
    init: &EmbeddingTable,
    sampler: &BernoulliSampler,
    config: &RoutingStudyConfig,
) -> Result<Vec<RoutingStudyRow>> {
    if config.eval_every == 0 {
        return Err(Error::Config("eval_every must be positive".into()));
    }
    let num_entities = init.num_entities();
    let mut rows = Vec::with_capacity(config.iterations.len());
    for &m in &config.iterations {
        let shape = model::CapsEShape {
            iterations: m,
            ..config.shape
        };
        let mut capse = CapsE::new_random(shape, config.model_seed)?;
        let mut emb = init.clone();
        let mut checkpoints = Vec::new();
        if config.train.epochs == 0 {
            let scorer = CapsEScorer {
                model: &capse,
                emb: &emb,
            };
            let report = evaluate(valid, &scorer, num_entities, known, None)?;
            checkpoints.push((0, report.hits_at(config.hits_k)));
        } else {
            model::train(
                train,
                &mut emb,
                &mut capse,
                sampler,
                &config.train,
                |summary, emb, capse| {
                    if summary.epoch % config.eval_every == 0 {
                        let scorer = CapsEScorer { model: capse, emb };
                        let report = evaluate(valid, &scorer, num_entities, known, None)?;
                        checkpoints.push((summary.epoch, report.hits_at(config.hits_k)));
                    }
                    Ok(())
                },
            )?;
        }
        rows.push(RoutingStudyRow {
            iterations: m,
            checkpoints,
        });
    }
    Ok(rows)
}

/// Tab-separated table: one row per iteration count, one column per checkpoint.
pub fn routing_table_tsv(rows: &[RoutingStudyRow]) -> String {
    let mut out = String::from("m");
    if let Some(first) = rows.first() {
        for (epoch, _) in &first.checkpoints {
            let _ = write!(out, "\t{epoch}");
        }
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{}", row.iterations);
        for (_, h) in &row.checkpoints {
            let _ = write!(out, "\t{:.2}", 100.0 * h);
        }
        out.push('\n');
    }
    out
}
