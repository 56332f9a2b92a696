//! Subcommand bodies. Every command reads all of its inputs before it
//! creates the output directory, so a failed load leaves nothing behind.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use capse::checkpoint::{load_checkpoint_for, write_checkpoint};
use capse::embed::{
    init_random, load_embeddings_for, load_word_vectors, surface_tokens, synset_init, transe_train,
    write_embeddings, EmbeddingTable, TranseConfig,
};
use capse::eval::{
    evaluate, routing_study as run_routing_study, routing_table_tsv, CapsEScorer,
    RoutingStudyConfig,
};
use capse::kg::{BernoulliSampler, Category, Dataset, RelationStats};
use capse::model::{self, CapsE, CapsEShape, TrainConfig};
use capse::rerank::{
    build_embeddings, eval_rerank, eval_search_engine, load_log, load_topic_embeddings,
    train_rerank, training_examples, LogEntry, RerankMetrics, RerankModel,
};

use crate::config::{Init, RunConfig};

pub const TRAIN_LOG: &str = "train.log";
pub const VALID_LOG: &str = "valid.log";
pub const TEST_LOG: &str = "test.log";
pub const DOC_TOPICS: &str = "doc_topics.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Creates `dir` and writes every `(file name, contents)` pair into it.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dir = config.dataset_dir()?;
    let data =
        Dataset::load(dir).with_context(|| format!("cannot load dataset {}", dir.display()))?;
    info!(
        "{}: {} entities, {} relations, {}/{}/{} train/valid/test triples",
        dir.display(),
        data.vocab.num_entities(),
        data.vocab.num_relations(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    Ok(data)
}

fn sampler_for(data: &Dataset) -> Result<(RelationStats, BernoulliSampler)> {
    let stats = RelationStats::compute(&data.train, data.vocab.num_relations())?;
    let sampler = BernoulliSampler::new(&stats, data.vocab.num_entities())?;
    Ok((stats, sampler))
}

fn transe_config(config: &RunConfig) -> TranseConfig {
    TranseConfig {
        margin: config.margin,
        lr: config.transe_lr,
        epochs: config.transe_epochs,
        seed: config.seed,
        ..TranseConfig::default()
    }
}

/// Starting table before any TransE refinement.
fn base_embeddings(config: &RunConfig, data: &Dataset) -> Result<EmbeddingTable> {
    let table = match &config.init {
        Init::Random | Init::Transe => init_random(&data.vocab, config.k, config.seed),
        Init::Pretrained(path) => load_embeddings_for(path, &data.vocab)
            .with_context(|| format!("cannot load embeddings {}", path.display()))?,
        Init::Synset(path) => {
            let words = load_word_vectors(path)
                .with_context(|| format!("cannot load word vectors {}", path.display()))?;
            let tokens: HashMap<String, Vec<String>> = data
                .vocab
                .entity_names()
                .iter()
                .map(|n| (n.clone(), surface_tokens(n)))
                .collect();
            synset_init(&words, &tokens, &data.vocab, config.k, config.seed)?.0
        }
    };
    if table.dim() != config.k {
        bail!("embeddings have size {} but k = {}", table.dim(), config.k);
    }
    Ok(table)
}

/// Initial table for the capsule scorer.
fn initial_embeddings(
    config: &RunConfig,
    data: &Dataset,
    sampler: &BernoulliSampler,
) -> Result<EmbeddingTable> {
    let base = base_embeddings(config, data)?;
    if config.init == Init::Transe {
        info!("pretraining TransE for {} epochs", config.transe_epochs);
        return Ok(transe_train(&data.train, &base, sampler, &transe_config(config))?.table);
    }
    Ok(base)
}

fn shape(config: &RunConfig, k: usize) -> CapsEShape {
    CapsEShape {
        k,
        n_filters: config.n_filters,
        d: config.d,
        iterations: config.m,
    }
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        lr: config.lr,
        batch_size: config.batch,
        epochs: config.epochs,
        seed: config.seed,
    }
}

pub fn pretrain(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config)?;
    let (_, sampler) = sampler_for(&data)?;
    let base = base_embeddings(config, &data)?;
    let outcome = transe_train(&data.train, &base, &sampler, &transe_config(config))?;
    let mut emb = Vec::new();
    write_embeddings(&mut emb, &outcome.table, &data.vocab)?;
    let mut losses = String::from("epoch\tloss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(losses, "{}\t{l:.6}", i + 1);
    }
    write_outputs(
        &config.out,
        &[
            ("transe.emb", emb),
            ("transe_loss.tsv", losses.into_bytes()),
        ],
    )?;
    if let Some(last) = outcome.epoch_losses.last() {
        println!(
            "TransE: {} epochs, final loss {last:.6}",
            outcome.epoch_losses.len()
        );
    }
    Ok(())
}

struct Best {
    epoch: usize,
    hits10: f64,
    emb: EmbeddingTable,
    model: CapsE,
}

pub fn train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config)?;
    let (_, sampler) = sampler_for(&data)?;
    let mut emb = initial_embeddings(config, &data, &sampler)?;
    let mut capse = CapsE::new_random(shape(config, config.k), config.seed)?;
    let known = data.known();
    let n = data.vocab.num_entities();

    let mut loss_log = String::from("epoch\tmean_loss\n");
    let mut valid_log = String::from("epoch\tmrr\thits@10\n");
    let mut best: Option<Best> = None;
    let mut validate = |epoch: usize, emb: &EmbeddingTable, capse: &CapsE| -> capse::Result<()> {
        let scorer = CapsEScorer { model: capse, emb };
        let report = evaluate(&data.valid, &scorer, n, &known, None)?;
        let h10 = report.hits_at(10);
        let _ = writeln!(valid_log, "{epoch}\t{:.6}\t{h10:.6}", report.mrr());
        info!(
            "epoch {epoch}: validation MRR {:.4}, Hits@10 {:.2}%",
            report.mrr(),
            100.0 * h10
        );
        if best.as_ref().is_none_or(|b| h10 > b.hits10) {
            best = Some(Best {
                epoch,
                hits10: h10,
                emb: emb.clone(),
                model: capse.clone(),
            });
        }
        Ok(())
    };
    model::train(
        &data.train,
        &mut emb,
        &mut capse,
        &sampler,
        &train_config(config),
        |summary, emb, capse| {
            let _ = writeln!(loss_log, "{}\t{:.6}", summary.epoch, summary.mean_loss);
            if summary.epoch % config.eval_every == 0 {
                validate(summary.epoch, emb, capse)?;
            }
            Ok(())
        },
    )?;
    if config.epochs < config.eval_every {
        // No scheduled validation ran; keep the final state.
        validate(config.epochs, &emb, &capse)?;
    }
    let best = best.expect("validation ran at least once");

    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &data.vocab, &best.emb, &best.model, best.epoch)?;
    write_outputs(
        &config.out,
        &[
            (BEST_CHECKPOINT, ckpt),
            ("loss.tsv", loss_log.into_bytes()),
            ("valid.tsv", valid_log.into_bytes()),
        ],
    )?;
    println!(
        "best validation Hits@10 {:.2}% at epoch {}",
        100.0 * best.hits10,
        best.epoch
    );
    Ok(())
}

pub fn eval(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config)?;
    let path: PathBuf = config
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.out.join(BEST_CHECKPOINT));
    let ckpt = load_checkpoint_for(&path, &data.vocab)
        .with_context(|| format!("cannot use checkpoint {}", path.display()))?;
    let (stats, _) = sampler_for(&data)?;
    let scorer = CapsEScorer {
        model: &ckpt.model,
        emb: &ckpt.emb,
    };
    let report = evaluate(
        &data.test,
        &scorer,
        data.vocab.num_entities(),
        &data.known(),
        Some(&stats),
    )?;
    report.check_invariants()?;
    let table = report.to_table(&data.vocab);
    write_outputs(
        &config.out,
        &[
            ("eval_overall.tsv", report.overall_tsv().into_bytes()),
            (
                "eval_per_relation.tsv",
                report.per_relation_tsv(&data.vocab).into_bytes(),
            ),
            (
                "eval_per_category.tsv",
                report.per_category_tsv().into_bytes(),
            ),
            ("eval_table.txt", table.clone().into_bytes()),
        ],
    )?;
    print!("{table}");
    Ok(())
}

pub fn analyze(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config)?;
    let (stats, _) = sampler_for(&data)?;
    let relations = stats.category_counts();
    let mut test_counts = [0usize; 4];
    let mut unseen = 0;
    for t in &data.test {
        let s = stats.get(t.r);
        if s.observed {
            test_counts[s.category.index()] += 1;
        } else {
            unseen += 1;
        }
    }
    let total = data.test.len().max(1) as f64;
    let mut summary = String::from("category\trelations\ttest_triples\ttest_fraction\n");
    for cat in Category::ALL {
        let i = cat.index();
        let _ = writeln!(
            summary,
            "{cat}\t{}\t{}\t{:.6}",
            relations[i],
            test_counts[i],
            test_counts[i] as f64 / total
        );
    }
    if unseen > 0 {
        let _ = writeln!(summary, "unseen\t0\t{unseen}\t{:.6}", unseen as f64 / total);
    }
    write_outputs(
        &config.out,
        &[
            ("relation_stats.tsv", stats.to_tsv(&data.vocab).into_bytes()),
            ("categories.tsv", summary.clone().into_bytes()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

struct SearchData {
    train: Vec<LogEntry>,
    valid: Vec<LogEntry>,
    test: Vec<LogEntry>,
}

fn metrics_row(out: &mut String, split: &str, system: &str, m: &RerankMetrics) {
    let _ = writeln!(
        out,
        "{split}\t{system}\t{:.6}\t{:.6}\t{}",
        m.mrr, m.hits_at_1, m.evaluated
    );
}

pub fn rerank(config: &RunConfig) -> Result<()> {
    let dir = config.dataset_dir()?;
    let load = |name: &str| load_log(&dir.join(name));
    let logs = SearchData {
        train: load(TRAIN_LOG)?,
        valid: load(VALID_LOG)?,
        test: load(TEST_LOG)?,
    };
    let docs = load_topic_embeddings(&dir.join(DOC_TOPICS))?;
    let (vocab, emb) = build_embeddings(
        &logs.train,
        &[&logs.train, &logs.valid, &logs.test],
        &docs,
        config.delta,
    )?;
    let k = docs.dim();
    if k != config.k {
        info!("embedding size follows the {k} topics of {DOC_TOPICS}");
    }
    let mut model = RerankModel {
        vocab,
        emb,
        capse: CapsE::new_random(shape(config, k), config.seed)?,
    };
    let examples = training_examples(&model, &logs.train)?;
    info!("{} training triples", examples.len());

    let mut loss_log = String::from("epoch\tmean_loss\n");
    let mut valid_log = String::from("epoch\tmrr\thits@1\n");
    let mut best: Option<(usize, f64, RerankModel)> = None;
    train_rerank(
        &mut model,
        &examples,
        &train_config(config),
        |epoch, loss, m| {
            let _ = writeln!(loss_log, "{epoch}\t{loss:.6}");
            if epoch % config.eval_every == 0 {
                let v = eval_rerank(&logs.valid, m)?;
                let _ = writeln!(valid_log, "{epoch}\t{:.6}\t{:.6}", v.mrr, v.hits_at_1);
                if best.as_ref().is_none_or(|b| v.mrr > b.1) {
                    best = Some((epoch, v.mrr, m.clone()));
                }
            }
            Ok(())
        },
    )?;
    let (best_epoch, model) = match best {
        Some((epoch, _, m)) => (epoch, m),
        None => (config.epochs, model),
    };

    let mut report = String::from("split\tsystem\tmrr\thits@1\timpressions\n");
    for (split, entries) in [
        ("train", &logs.train),
        ("valid", &logs.valid),
        ("test", &logs.test),
    ] {
        metrics_row(&mut report, split, "capse", &eval_rerank(entries, &model)?);
        metrics_row(
            &mut report,
            split,
            "search_engine",
            &eval_search_engine(entries)?,
        );
    }
    write_outputs(
        &config.out,
        &[
            ("rerank_metrics.tsv", report.clone().into_bytes()),
            ("rerank_loss.tsv", loss_log.into_bytes()),
            ("rerank_valid.tsv", valid_log.into_bytes()),
        ],
    )?;
    println!("model selected at epoch {best_epoch}");
    print!("{report}");
    Ok(())
}

pub fn routing_study(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config)?;
    let (_, sampler) = sampler_for(&data)?;
    let init = initial_embeddings(config, &data, &sampler)?;
    let study = RoutingStudyConfig {
        iterations: config.grid.clone(),
        shape: shape(config, config.k),
        train: train_config(config),
        eval_every: config.eval_every,
        model_seed: config.seed,
        hits_k: 10,
    };
    let rows = run_routing_study(
        &data.train,
        &data.valid,
        &data.known(),
        &init,
        &sampler,
        &study,
    )?;
    let table = routing_table_tsv(&rows);
    write_outputs(
        &config.out,
        &[("routing_study.tsv", table.clone().into_bytes())],
    )?;
    print!("{table}");
    Ok(())
}
