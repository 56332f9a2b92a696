use capse::embed::EmbeddingTable;
use capse::kg::Triple;
use capse::model::layers::{softmax, squared_norm};
use capse::model::{capse_loss, loss_term, route, squash, CapsE, CapsEShape, Label};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    squared_norm(v).sqrt()
}

/// `(n² / (1 + n²)) · s / n` written out directly.
fn squash_oracle(s: &[f64]) -> Vec<f64> {
    let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| n * n / (1.0 + n * n) * x / n).collect()
}

#[test]
fn squash_hand_values() {
    assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
    assert_eq!(squash(&[1.0, 0.0]), vec![0.5, 0.0]);
    let out = squash(&[3.0, 4.0]);
    let expected = [25.0 / 26.0 * 0.6, 25.0 / 26.0 * 0.8];
    assert!((out[0] - expected[0]).abs() < 1e-15 && (out[1] - expected[1]).abs() < 1e-15);
    assert!((out[0] - 0.576923).abs() < 1e-6 && (out[1] - 0.769231).abs() < 1e-6);
}

#[test]
fn two_orthogonal_predictions_one_iteration() {
    let r = route(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
    assert_eq!(r.s, vec![0.5, 0.5]);
    let oracle = squash_oracle(&[0.5, 0.5]);
    assert!((r.e[0] - oracle[0]).abs() < 1e-15);
    // 0.5 / 1.5 / √0.5 · 0.5 = √2 / 6.
    assert!((r.e[0] - 2f64.sqrt() / 6.0).abs() < 1e-15);
    assert!((r.e[1] - 0.23570).abs() < 1e-5);
}

#[test]
fn loss_hand_values() {
    assert!((loss_term(0.0, Label::Valid) - 2f64.ln()).abs() < 1e-15);
    assert!((loss_term(0.0, Label::Invalid) - 2f64.ln()).abs() < 1e-15);
    let oracle = (1.0 + (-0.9f64).exp()).ln();
    assert!((loss_term(0.9, Label::Valid) - oracle).abs() < 1e-15);
    assert!((oracle - 0.341153).abs() < 1e-6);
}

fn vector(len: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, len)
}

fn predictions() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8, 1usize..5).prop_flat_map(|(k, d)| prop::collection::vec(vector(d, 10.0), k))
}

fn shape() -> impl Strategy<Value = CapsEShape> {
    (1usize..=8, 1usize..=6, 1usize..=4, 1usize..=4).prop_map(|(k, n, d, m)| CapsEShape {
        k,
        n_filters: n,
        d,
        iterations: m,
    })
}

fn model_and_table() -> impl Strategy<Value = (CapsE, EmbeddingTable)> {
    shape().prop_flat_map(|s| {
        (
            vector(3 * s.n_filters, 2.0),
            vector(s.n_filters, 1.0),
            vector(s.weight_len(), 2.0),
            vector(3 * s.k, 2.0),
            vector(2 * s.k, 2.0),
        )
            .prop_map(move |(f, b, w, ents, rels)| {
                (
                    CapsE::from_parts(s, f, b, w).unwrap(),
                    EmbeddingTable::from_parts(s.k, ents, rels).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn squash_norm_follows_formula(s in vector(4, 100.0)) {
        let n = norm(&s);
        let out = squash(&s);
        let expected = n * n / (1.0 + n * n);
        prop_assert!((norm(&out) - expected).abs() <= 1e-12);
        prop_assert!(norm(&out) < 1.0);
        if n > 1e-9 {
            let cos = out.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / (norm(&out) * n);
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squash_norm_is_strictly_increasing(dir in vector(3, 1.0), a in 1e-3f64..50.0, gap in 1e-3f64..50.0) {
        let n = norm(&dir);
        prop_assume!(n > 1e-3);
        let at = |len: f64| norm(&squash(&dir.iter().map(|x| x / n * len).collect::<Vec<_>>()));
        prop_assert!(at(a) < at(a + gap));
    }

    #[test]
    fn couplings_sum_to_one(preds in predictions(), m in 1usize..6) {
        let r = route(&preds, m);
        prop_assert!((r.couplings.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(r.couplings.iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn single_iteration_is_squashed_mean(preds in predictions()) {
        let k = preds.len() as f64;
        let d = preds[0].len();
        let mean: Vec<f64> = (0..d).map(|a| preds.iter().map(|p| p[a]).sum::<f64>() / k).collect();
        let oracle = squash_oracle(&mean);
        let r = route(&preds, 1);
        for (x, y) in r.e.iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(r.couplings.iter().all(|c| (c - 1.0 / k).abs() <= 1e-15));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0f64..700.0, 1..10)) {
        let c = softmax(&logits);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn score_is_below_one_and_loss_positive((model, emb) in model_and_table(), s in 0usize..3, r in 0usize..2, o in 0usize..3) {
        let t = Triple::new(s, r, o);
        let f = model.score(&emb, t);
        prop_assert!((0.0..1.0).contains(&f));
        let (checked, trace) = model.score_with_trace(&emb, t).unwrap();
        prop_assert_eq!(checked, f);
        prop_assert!(norm(&trace.e) < 1.0);
        for label in [Label::Valid, Label::Invalid] {
            prop_assert!(capse_loss(&[(t, label)], &emb, &model).unwrap() > 0.0);
        }
    }

    #[test]
    fn regrouping_symmetry((model, emb) in model_and_table(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let s = model.shape();
        let n = s.n_filters;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let filters: Vec<f64> = perm.iter().flat_map(|&p| model.filters()[3 * p..3 * p + 3].to_vec()).collect();
        let biases: Vec<f64> = perm.iter().map(|&p| model.biases()[p]).collect();
        let mut weights = Vec::with_capacity(s.weight_len());
        for i in 0..s.k {
            for row in model.weight(i).chunks(n) {
                weights.extend(perm.iter().map(|&p| row[p]));
            }
        }
        let permuted = CapsE::from_parts(s, filters, biases, weights).unwrap();
        for t in [Triple::new(0, 0, 1), Triple::new(2, 1, 0)] {
            prop_assert!((model.score(&emb, t) - permuted.score(&emb, t)).abs() <= 1e-12);
        }
    }
}
