//! File-level stages: synth, prepare, pretrain, train-estimator, finetune,
//! evaluate and suggest. Every output directory gets the resolved config and
//! a manifest of SHA-256 hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::synth::synthesize_logs;
use crate::corpus::{
    build_vocab, encode, encode_pairs, normalize_query, pairs_from_sessions, read_log, read_pairs, segment_sessions,
    split_dataset, write_log, write_pairs, EncodedPair, FeedbackIndex, QueryPair, Vocabulary,
};
use crate::error::{ensure, Error, Result};
use crate::estimator::{Estimator, EstimatorReport, NegativeGenerator};
use crate::generator::{Generator, PretrainReport};
use crate::metrics::{compare, format_suggestions, mean_with_ci, MetricRow, MetricsReport, SuggestionSet};
use crate::reinforce::{finetune, suggest, FinetuneReport, RlQuery};
use crate::reward::RewardEngine;
use crate::SeedRng;

pub const VOCAB: &str = "vocab.tsv";
pub const TRAIN: &str = "train.tsv";
pub const VALID: &str = "valid.tsv";
pub const TEST: &str = "test.tsv";
pub const CONFIG: &str = "config.txt";
pub const MANIFEST: &str = "manifest.tsv";
pub const GENERATOR: &str = "generator.ckpt";
pub const ESTIMATOR: &str = "estimator.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const PRETRAIN_REPORT: &str = "pretrain_report.tsv";
pub const ESTIMATOR_REPORT: &str = "estimator_report.tsv";
pub const TRAINING_STATS: &str = "training_stats.tsv";
pub const VALIDATION_REPORT: &str = "validation.tsv";
pub const METRICS: &str = "metrics.tsv";
pub const SUGGESTIONS: &str = "suggestions.tsv";
pub const COMPARISON: &str = "comparison.tsv";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `config.txt` and `manifest.tsv` into `dir`. The manifest lists the
/// config hash, each input file and each named output with its hash.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    cfg.save(&dir.join(CONFIG))?;
    let mut m = String::from("kind\tname\tsha256\n");
    let _ = writeln!(m, "version\t{}\t-", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "config\t{CONFIG}\t{}", sha256_file(&dir.join(CONFIG))?);
    for p in inputs {
        let _ = writeln!(m, "input\t{}\t{}", p.display(), sha256_file(p)?);
    }
    for o in outputs {
        let _ = writeln!(m, "output\t{o}\t{}", sha256_file(&dir.join(o))?);
    }
    write(&dir.join(MANIFEST), &m)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let events = synthesize_logs(&cfg.synth, cfg.seed)?;
    write_log(out, &events)?;
    Ok(events.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub events: usize,
    pub sessions: usize,
    pub pairs: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
}

/// Sessions, pairs, a seeded 90/5/5 split and a vocabulary over the
/// training pairs.
pub fn prepare(cfg: &RunConfig, log: &Path, dir: &Path) -> Result<PrepareSummary> {
    let events = read_log(log)?;
    let sessions = segment_sessions(&events, cfg.session_window);
    let pairs = pairs_from_sessions(&sessions, cfg.t_max);
    ensure!(!pairs.is_empty(), Data, "{} yields no query pairs", log.display());
    let f = [1.0 - cfg.valid_fraction - cfg.test_fraction, cfg.valid_fraction, cfg.test_fraction];
    let (train, valid, test) = split_dataset(&pairs, f, cfg.seed)?;
    ensure!(
        !train.is_empty() && !valid.is_empty() && !test.is_empty(),
        Data,
        "too few pairs ({}) to split",
        pairs.len()
    );
    let vocab = build_vocab(train.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]), cfg.vocab_size)?;
    create_dir(dir)?;
    vocab.save(&dir.join(VOCAB))?;
    write_pairs(&dir.join(TRAIN), &train)?;
    write_pairs(&dir.join(VALID), &valid)?;
    write_pairs(&dir.join(TEST), &test)?;
    write_manifest(dir, cfg, &[log], &[VOCAB, TRAIN, VALID, TEST])?;
    Ok(PrepareSummary {
        events: events.len(),
        sessions: sessions.len(),
        pairs: pairs.len(),
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
        vocab: vocab.len(),
    })
}

/// Everything `prepare` writes, plus one feedback index per split: the
/// training index answers reward lookups, the others Sessions+@6.
pub struct Data {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub train: Vec<QueryPair>,
    pub valid: Vec<QueryPair>,
    pub test: Vec<QueryPair>,
    pub feedback_train: FeedbackIndex,
    pub feedback_valid: FeedbackIndex,
    pub feedback_test: FeedbackIndex,
}

impl Data {
    pub fn load(dir: &Path) -> Result<Self> {
        let train = read_pairs(&dir.join(TRAIN))?;
        let valid = read_pairs(&dir.join(VALID))?;
        let test = read_pairs(&dir.join(TEST))?;
        Ok(Data {
            dir: dir.to_path_buf(),
            vocab: Vocabulary::load(&dir.join(VOCAB))?,
            feedback_train: FeedbackIndex::from_pairs(&train),
            feedback_valid: FeedbackIndex::from_pairs(&valid),
            feedback_test: FeedbackIndex::from_pairs(&test),
            train,
            valid,
            test,
        })
    }

    pub fn encoded(&self, pairs: &[QueryPair], t_max: usize) -> Result<Vec<EncodedPair>> {
        encode_pairs(pairs, &self.vocab, t_max)
    }

    fn files(&self) -> Vec<PathBuf> {
        [VOCAB, TRAIN, VALID, TEST].iter().map(|f| self.dir.join(f)).collect()
    }
}

fn cap<T>(items: &[T], n: usize) -> &[T] {
    if n == 0 {
        items
    } else {
        &items[..n.min(items.len())]
    }
}

/// Distinct source queries in first-occurrence order.
pub fn rl_queries(pairs: &[QueryPair], vocab: &Vocabulary, t_max: usize) -> Result<Vec<RlQuery>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in pairs {
        if seen.insert(p.source.as_str()) {
            out.push(RlQuery { text: p.source.clone(), source: encode(&p.source, vocab, t_max)? });
        }
    }
    Ok(out)
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    Generator::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_estimator(path: &Path) -> Result<Estimator<f32>> {
    Estimator::from_checkpoint(&Checkpoint::load(path)?)
}

fn check_vocab(expected: usize, got: usize, what: &str) -> Result<()> {
    ensure!(expected == got, Checkpoint, "{what} has vocabulary size {got} but the data directory has {expected}");
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(Generator<f32>, PretrainReport)> {
    let data = Data::load(data_dir)?;
    let train = data.encoded(&data.train, cfg.t_max)?;
    let valid = data.encoded(&data.valid, cfg.t_max)?;
    let mut gen = Generator::<f32>::seeded(cfg.generator_config(data.vocab.len()), cfg.model_seed)?;
    let report = gen.pretrain(&train, &valid, &cfg.pretrain_config())?;
    create_dir(out)?;
    gen.to_checkpoint().save(&out.join(GENERATOR))?;
    let mut s = String::from("epoch\ttrain_loss\tvalid_loss\n");
    for (e, (t, v)) in report.train_loss.iter().zip(&report.valid_loss).enumerate() {
        let _ = writeln!(s, "{e}\t{t}\t{v}");
    }
    write(&out.join(PRETRAIN_REPORT), &s)?;
    let inputs = data.files();
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(out, cfg, &inputs, &[GENERATOR, PRETRAIN_REPORT])?;
    Ok((gen, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorOutcome {
    pub report: EstimatorReport,
    /// Metrics on examples built from the test pairs.
    pub test: crate::estimator::BinaryMetrics,
}

/// Trains the naturalness estimator on negatives derived from the given
/// pre-trained generator.
pub fn train_estimator(
    cfg: &RunConfig,
    data_dir: &Path,
    generator: &Path,
    out: &Path,
) -> Result<(Estimator<f32>, EstimatorOutcome)> {
    let data = Data::load(data_dir)?;
    let policy = load_generator(generator)?;
    check_vocab(data.vocab.len(), policy.vocab_size(), "generator checkpoint")?;
    let negs = NegativeGenerator::new(&policy, &data.vocab, cfg.t_max)?;
    let build = |pairs: &[QueryPair], seed: u64| -> Result<_> {
        let enc = data.encoded(cap(pairs, cfg.est_max_pairs), cfg.t_max)?;
        negs.build_dataset(&enc, seed)
    };
    let train = build(&data.train, cfg.model_seed)?;
    let valid = build(&data.valid, cfg.model_seed.wrapping_add(1))?;
    let test = build(&data.test, cfg.model_seed.wrapping_add(2))?;
    let mut est = Estimator::<f32>::seeded(cfg.estimator_config(data.vocab.len()), cfg.model_seed)?;
    let report = est.train(&train, &valid, &cfg.estimator_train_config())?;
    let test = est.evaluate(&test)?;
    create_dir(out)?;
    est.to_checkpoint().save(&out.join(ESTIMATOR))?;
    let mut s = String::from("split\taccuracy\tprecision\trecall\tf1\n");
    for (name, m) in [("valid", report.best()), ("test", test)] {
        let _ = writeln!(s, "{name}\t{}\t{}\t{}\t{}", m.accuracy, m.precision, m.recall, m.f1);
    }
    write(&out.join(ESTIMATOR_REPORT), &s)?;
    let mut inputs = data.files();
    inputs.push(generator.to_path_buf());
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(out, cfg, &inputs, &[ESTIMATOR, ESTIMATOR_REPORT])?;
    Ok((est, EstimatorOutcome { report, test }))
}

pub fn finetune_stage(
    cfg: &RunConfig,
    data_dir: &Path,
    generator: &Path,
    estimator: &Path,
    out: &Path,
    on_epoch: impl FnMut(usize, &crate::reinforce::ValidationStats),
) -> Result<(Generator<f32>, FinetuneReport)> {
    let data = Data::load(data_dir)?;
    let policy = load_generator(generator)?;
    let est = load_estimator(estimator)?;
    check_vocab(data.vocab.len(), policy.vocab_size(), "generator checkpoint")?;
    check_vocab(data.vocab.len(), est.cfg.vocab_size, "estimator checkpoint")?;
    let engine = RewardEngine { feedback: &data.feedback_train, estimator: &est, vocab: &data.vocab, eta: cfg.eta() };
    let train = rl_queries(&data.train, &data.vocab, cfg.t_max)?;
    let valid = rl_queries(&data.valid, &data.vocab, cfg.t_max)?;
    let valid = cap(&valid, cfg.rl_valid_queries);
    let (gen, report) = finetune(policy, &engine, &train, valid, &data.feedback_valid, &cfg.train_config(), on_epoch)?;
    create_dir(out)?;
    gen.to_checkpoint().save(&out.join(FINETUNED))?;
    report.save_stats(&out.join(TRAINING_STATS))?;
    let mut s = String::from("epoch\tmean_reward\tsessions_plus@6\n");
    for (e, v) in report.valid.iter().enumerate() {
        let _ = writeln!(s, "{e}\t{}\t{}", v.mean_reward, v.sessions_plus);
    }
    let _ = writeln!(s, "# best_epoch {} converged {} syncs {}", report.best_epoch, report.converged, report.syncs);
    write(&out.join(VALIDATION_REPORT), &s)?;
    let mut inputs = data.files();
    inputs.extend([generator.to_path_buf(), estimator.to_path_buf()]);
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(out, cfg, &inputs, &[FINETUNED, TRAINING_STATS, VALIDATION_REPORT])?;
    Ok((gen, report))
}

/// Six suggestions for each test source.
pub fn suggestion_sets(cfg: &RunConfig, data: &Data, policy: &Generator<f32>) -> Result<Vec<SuggestionSet>> {
    let pairs = cap(&data.test, cfg.eval_max_pairs);
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let src = encode(&p.source, &data.vocab, cfg.t_max)?;
        let suggestions = suggest(policy, &data.vocab, &src, cfg.eval_strategy, cfg.t_max, &mut rng)?;
        out.push(SuggestionSet { source: p.source.clone(), next: p.target.clone(), suggestions });
    }
    Ok(out)
}

/// Per-query mean composite reward of the suggestions, as a metric row.
pub fn reward_row(sets: &[SuggestionSet], engine: &RewardEngine<'_>, t_max: usize) -> Result<MetricRow> {
    let mut values = Vec::with_capacity(sets.len());
    for s in sets {
        let src = encode(&s.source, engine.vocab, t_max)?;
        let mut total = 0.0;
        for text in &s.suggestions {
            let y: Vec<u32> = text.split_whitespace().map(|w| engine.vocab.id(w)).collect();
            total += engine.score(&s.source, &src, &y)?.reward;
        }
        values.push(total / s.suggestions.len().max(1) as f64);
    }
    let (mean, ci) = mean_with_ci(&values)?;
    Ok(MetricRow { name: "reward".into(), mean, ci, n: values.len() })
}

pub fn evaluate(
    cfg: &RunConfig,
    data_dir: &Path,
    generator: &Path,
    estimator: Option<&Path>,
    baseline: Option<&Path>,
    out: &Path,
) -> Result<MetricsReport> {
    let data = Data::load(data_dir)?;
    let policy = load_generator(generator)?;
    check_vocab(data.vocab.len(), policy.vocab_size(), "generator checkpoint")?;
    let sets = suggestion_sets(cfg, &data, &policy)?;
    let mut report = MetricsReport::compute(&sets, &data.feedback_test, &data.vocab)?;
    let mut inputs = data.files();
    inputs.push(generator.to_path_buf());
    if let Some(path) = estimator {
        let est = load_estimator(path)?;
        check_vocab(data.vocab.len(), est.cfg.vocab_size, "estimator checkpoint")?;
        let engine =
            RewardEngine { feedback: &data.feedback_test, estimator: &est, vocab: &data.vocab, eta: cfg.eta() };
        report.rows.push(reward_row(&sets, &engine, cfg.t_max)?);
        inputs.push(path.to_path_buf());
    }
    create_dir(out)?;
    report.save(&out.join(METRICS))?;
    let rows: Vec<(String, Vec<String>)> = sets.into_iter().map(|s| (s.source, s.suggestions)).collect();
    write(&out.join(SUGGESTIONS), &format_suggestions(&rows))?;
    let mut outputs = vec![METRICS, SUGGESTIONS];
    if let Some(b) = baseline {
        let base = MetricsReport::load(b)?;
        write(&out.join(COMPARISON), &compare(&base, &report))?;
        outputs.push(COMPARISON);
        inputs.push(b.to_path_buf());
    }
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(out, cfg, &inputs, &outputs)?;
    Ok(report)
}

/// Exactly six suggestions per non-empty input line. Missing beam
/// hypotheses (tiny vocabularies) are filled with empty strings.
pub fn suggest_lines(
    cfg: &RunConfig,
    policy: &Generator<f32>,
    vocab: &Vocabulary,
    input: &str,
) -> Result<Vec<(String, Vec<String>)>> {
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for line in input.lines() {
        let Some(q) = normalize_query(line, cfg.t_max) else { continue };
        let src = encode(&q, vocab, cfg.t_max)?;
        let mut s = suggest(policy, vocab, &src, cfg.eval_strategy, cfg.t_max, &mut rng)?;
        s.resize(crate::metrics::SUGGESTIONS, String::new());
        out.push((q, s));
    }
    Ok(out)
}
