mod common;

use capse::eval::{evaluate, rank_triple, Direction, FnScorer, MetricsReport, HITS_AT};
use capse::kg::{RelationStats, Side, Triple, TripleSet};
use common::{
    brute_force_ranks, hits, mean_rank, mean_reciprocal_rank, random_graph, random_score_table,
};
use proptest::prelude::*;

fn check_against_oracle(seed: u64) {
    let mut rng = common::rng(seed);
    let g = random_graph(&mut rng);
    let table = random_score_table(&g, &mut rng);
    let score = |t: Triple| table[&t];
    let scorer = FnScorer {
        f: score,
        direction: Direction::HigherBetter,
    };
    let report = evaluate(&g.test, &scorer, g.num_entities, &g.known, None).unwrap();
    let ranks = brute_force_ranks(&g, &score);
    let got: Vec<usize> = report.outcomes.iter().map(|o| o.rank).collect();
    assert_eq!(got, ranks, "seed {seed}");
    assert_eq!(report.mr(), mean_rank(&ranks));
    assert_eq!(report.mrr(), mean_reciprocal_rank(&ranks));
    for k in HITS_AT {
        assert_eq!(report.hits_at(k), hits(&ranks, k));
    }
    report.check_invariants().unwrap();
}

#[test]
fn hundred_random_graphs_match_enumeration() {
    for seed in 0..100 {
        check_against_oracle(seed);
    }
}

#[test]
fn six_entity_hand_scorer() {
    // Score favours small object ids; ties on parity of s + o.
    let test: TripleSet = [Triple::new(0, 0, 1), Triple::new(2, 0, 3)]
        .into_iter()
        .collect();
    let train: TripleSet = [Triple::new(0, 0, 2), Triple::new(4, 0, 3)]
        .into_iter()
        .collect();
    let known = TripleSet::union([&train, &test]);
    let f = |t: Triple| -(t.o as f64) + 0.5 * ((t.s + t.o) % 2) as f64;
    let g = common::ToyGraph {
        num_entities: 6,
        num_relations: 1,
        train: train.clone(),
        test: test.clone(),
        known: known.clone(),
    };
    let scorer = FnScorer {
        f,
        direction: Direction::HigherBetter,
    };
    let report = evaluate(&test, &scorer, 6, &known, None).unwrap();
    let ranks: Vec<usize> = report.outcomes.iter().map(|o| o.rank).collect();
    assert_eq!(ranks, brute_force_ranks(&g, &f));
    // (0,0,1) head: target −0.5, candidates s ∈ {1,2,3,4,5}: −1, −0.5, −1, −0.5, −1
    //   → 0 better, 2 tied → rank 2.
    // (0,0,1) tail: target −0.5, candidates o ∈ {0,3,4,5} (2 is known):
    //   0, −3+0.5, −4, −5+0.5 → 1 better → rank 2.
    // (2,0,3) head: target −2.5, candidates s ∈ {0,1,3,5} (4 is known):
    //   −2.5, −3, −3, −3 → 1 tie → rank 2.
    // (2,0,3) tail: target −2.5, candidates o ∈ {0,1,2,4,5}:
    //   0, −0.5, −2, −4, −4.5 → 3 better → rank 4.
    assert_eq!(ranks, vec![2, 2, 2, 4]);
    assert_eq!(report.mr(), 2.5);
}

#[test]
fn lower_better_scorers_rank_like_negated_higher_better() {
    let mut rng = common::rng(5);
    let g = random_graph(&mut rng);
    let table = random_score_table(&g, &mut rng);
    let lower = FnScorer {
        f: |t: Triple| table[&t],
        direction: Direction::LowerBetter,
    };
    let negated = FnScorer {
        f: |t: Triple| -table[&t],
        direction: Direction::HigherBetter,
    };
    let a = evaluate(&g.test, &lower, g.num_entities, &g.known, None).unwrap();
    let b = evaluate(&g.test, &negated, g.num_entities, &g.known, None).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
}

#[test]
fn category_breakdown_partitions_outcomes() {
    let mut rng = common::rng(11);
    let g = random_graph(&mut rng);
    let stats = RelationStats::compute(&g.train, g.num_relations).unwrap();
    let table = random_score_table(&g, &mut rng);
    let scorer = FnScorer {
        f: |t: Triple| table[&t],
        direction: Direction::HigherBetter,
    };
    let report = evaluate(&g.test, &scorer, g.num_entities, &g.known, Some(&stats)).unwrap();
    let total: usize = report.per_category.values().map(|s| s.count).sum();
    assert_eq!(total, report.outcomes.len());
    let by_relation: usize = report.per_relation.values().map(|s| s.count).sum();
    assert_eq!(by_relation, report.outcomes.len());
    let tsv = report.per_category_tsv();
    for label in ["1-1", "1-M", "M-1", "M-M"] {
        assert!(tsv.contains(label));
    }
}

fn outcomes_for(report: &MetricsReport) -> Vec<(Triple, Side, usize)> {
    report
        .outcomes
        .iter()
        .map(|o| (o.triple, o.side, o.rank))
        .collect()
}

proptest! {
    #[test]
    fn monotone_transforms_keep_every_rank(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0, cubic in any::<bool>()) {
        let mut rng = common::rng(seed);
        let g = random_graph(&mut rng);
        let table = random_score_table(&g, &mut rng);
        let base = FnScorer { f: |t: Triple| table[&t], direction: Direction::HigherBetter };
        let transformed = FnScorer {
            f: |t: Triple| {
                let x = table[&t];
                if cubic { x * x * x + a * x + b } else { a * x + b }
            },
            direction: Direction::HigherBetter,
        };
        let r1 = evaluate(&g.test, &base, g.num_entities, &g.known, None).unwrap();
        let r2 = evaluate(&g.test, &transformed, g.num_entities, &g.known, None).unwrap();
        prop_assert_eq!(outcomes_for(&r1), outcomes_for(&r2));
    }

    #[test]
    fn ranks_are_within_candidate_bounds(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g = random_graph(&mut rng);
        let table = random_score_table(&g, &mut rng);
        let scorer = FnScorer { f: |t: Triple| table[&t], direction: Direction::HigherBetter };
        for &t in g.test.iter() {
            for side in Side::BOTH {
                let o = rank_triple(t, side, &scorer, g.num_entities, &g.known);
                prop_assert!(o.rank >= 1 && o.rank <= o.num_candidates + 1);
            }
        }
    }
}
