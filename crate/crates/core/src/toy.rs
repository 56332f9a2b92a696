//! Small seeded problem instances for tests, examples and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{Triple, TripleSet, Vocab};
use crate::rerank::{LogEntry, TopicEmbeddings, LIST_LEN};

/// A layered knowledge graph. Entities are split into layers of the given
/// sizes and relation `links[l]` connects every entity of layer `l` to every
/// entity of layer `l + 1`. Entity names are assigned to layers at random.
///
/// The graph is consistent with a translation model, so both TransE and the
/// capsule scorer can fit it exactly.
pub fn layered_kg(sizes: &[usize], links: &[usize], seed: u64) -> (Vocab, TripleSet) {
    assert_eq!(
        links.len() + 1,
        sizes.len(),
        "one link per adjacent layer pair"
    );
    let num_entities: usize = sizes.iter().sum();
    let num_relations = links.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    for e in 0..num_entities {
        vocab.intern_entity(&format!("e{e}"));
    }
    for r in 0..num_relations {
        vocab.intern_relation(&format!("r{r}"));
    }
    let mut ids: Vec<usize> = (0..num_entities).collect();
    ids.shuffle(&mut rng);
    let mut layers = Vec::with_capacity(sizes.len());
    let mut rest = ids.as_slice();
    for &n in sizes {
        let (layer, tail) = rest.split_at(n);
        layers.push(layer);
        rest = tail;
    }
    let mut triples: Vec<Triple> = Vec::new();
    for (l, &r) in links.iter().enumerate() {
        for &s in layers[l] {
            for &o in layers[l + 1] {
                triples.push(Triple::new(s, r, o));
            }
        }
    }
    triples.shuffle(&mut rng);
    (vocab, triples.into_iter().collect())
}

/// The 20-triple toy graph: 10 entities in layers of 2, 2, 4 and 2 joined
/// by relations `r0`, `r1`, `r0`.
pub fn toy_kg(seed: u64) -> (Vocab, TripleSet) {
    layered_kg(&[2, 2, 4, 2], &[0, 1, 0], seed)
}

/// A search log in which relevance is decided by the user alone.
#[derive(Debug, Clone)]
pub struct ToySearch {
    pub docs: TopicEmbeddings,
    pub entries: Vec<LogEntry>,
}

/// Topics in the toy search instance.
pub const TOY_TOPICS: usize = 6;

/// `users` users (at most [`TOY_TOPICS`]) and `queries` queries with ten
/// results each. User `u` prefers topic `u`; every result list holds one
/// document dominated by each user's topic, and that document is the one
/// the user clicks. Each user issues every query `repeats` times, with the
/// search engine's order reshuffled per impression.
pub fn toy_search(users: usize, queries: usize, repeats: usize, seed: u64) -> ToySearch {
    assert!(users >= 1 && users <= TOY_TOPICS.min(LIST_LEN));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = TopicEmbeddings::default();
    let mut lists: Vec<Vec<String>> = Vec::new();
    for q in 0..queries {
        let mut list = Vec::with_capacity(LIST_LEN);
        for j in 0..LIST_LEN {
            let id = format!("q{q}d{j}");
            let mut v: Vec<f64> = (0..TOY_TOPICS).map(|_| rng.gen_range(0.05..0.3)).collect();
            if j < users {
                v[j] += 3.0;
            } else {
                // Background documents carry little mass on user topics.
                v.iter_mut().take(users).for_each(|x| *x *= 0.2);
                let t = rng.gen_range(users.min(TOY_TOPICS - 1)..TOY_TOPICS);
                v[t] += 1.0;
            }
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= total);
            docs.insert(&id, v)
                .expect("generated topic vectors are valid");
            list.push(id);
        }
        lists.push(list);
    }
    let mut entries = Vec::new();
    let mut timestamp = 0;
    for _ in 0..repeats {
        for u in 0..users {
            for (q, list) in lists.iter().enumerate() {
                let mut shown = list.clone();
                shown.shuffle(&mut rng);
                let clicked = &list[u];
                let relevant = shown.iter().map(|d| d == clicked).collect();
                timestamp += 1;
                entries.push(LogEntry {
                    user: format!("u{u}"),
                    query: format!("q{q}"),
                    ranked_docs: shown,
                    relevant,
                    timestamp,
                });
            }
        }
    }
    ToySearch { docs, entries }
}
