//! Contextual naturalness classifier `D_phi(q_i, y)` and the negative
//! example generators used to train it.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{decode, encode, EncodedPair, Vocabulary, END, PAD, SEP, UNK};
use crate::error::{ensure, Error, Result};
use crate::generator::Generator;
use crate::nn::{apply_dropout, uniform_tensor, BiLstm, Linear, INIT_RANGE};
use crate::optim::Adam;
use crate::tensor::{kernels, Real};
use crate::SeedRng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledExample {
    pub context: Vec<u32>,
    pub candidate: Vec<u32>,
    pub natural: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeMethod {
    /// Sample from the pre-trained generator.
    Sampled,
    /// Duplicate one word at a random position.
    Duplicate,
    /// Replace one word with `<UNK>`.
    Unknown,
    /// One prior-drawn word repeated `r` times.
    Repeat,
}

pub const NEGATIVE_METHODS: [NegativeMethod; 4] =
    [NegativeMethod::Sampled, NegativeMethod::Duplicate, NegativeMethod::Unknown, NegativeMethod::Repeat];

/// Regeneration attempts before the collision guard gives up on a method.
const MAX_ATTEMPTS: usize = 32;

/// Builds the four unnatural variants of a logged next query.
pub struct NegativeGenerator<'a> {
    policy: &'a Generator<f32>,
    prior: WeightedIndex<f64>,
    prior_ids: Vec<u32>,
    t_max: usize,
}

impl<'a> NegativeGenerator<'a> {
    pub fn new(policy: &'a Generator<f32>, vocab: &Vocabulary, t_max: usize) -> Result<Self> {
        ensure!(t_max >= 2, Config, "repeat negatives need a maximum length of at least 2");
        ensure!(
            policy.vocab_size() == vocab.len(),
            Config,
            "generator vocabulary {} does not match {}",
            policy.vocab_size(),
            vocab.len()
        );
        let prior = WeightedIndex::new(vocab.priors()).map_err(|e| Error::Data(format!("word prior: {e}")))?;
        Ok(NegativeGenerator { policy, prior, prior_ids: vocab.real_ids().collect(), t_max })
    }

    /// A single negative for `target` (tokens without `<END>`) by `method`.
    pub fn negative(
        &self,
        method: NegativeMethod,
        context: &[u32],
        target: &[u32],
        rng: &mut SeedRng,
    ) -> Result<Vec<u32>> {
        ensure!(!target.is_empty(), Invalid, "next query has no tokens");
        match method {
            NegativeMethod::Sampled => {
                for _ in 0..MAX_ATTEMPTS {
                    let h = self.policy.sample_categorical(context, 1, self.t_max, 1.0, rng)?.remove(0);
                    let body = h.body();
                    if !body.is_empty() && body != target {
                        return Ok(body.to_vec());
                    }
                }
                // The policy keeps reproducing the real query; fall back to a
                // structural corruption so the label stays truthful.
                self.negative(NegativeMethod::Duplicate, context, target, rng)
            }
            NegativeMethod::Duplicate => {
                let i = rng.random_range(0..target.len());
                let j = rng.random_range(0..=target.len());
                let mut out = target.to_vec();
                out.insert(j, target[i]);
                Ok(out)
            }
            NegativeMethod::Unknown => {
                let known: Vec<usize> = (0..target.len()).filter(|&i| target[i] != UNK).collect();
                if known.is_empty() {
                    return self.negative(NegativeMethod::Repeat, context, target, rng);
                }
                let mut out = target.to_vec();
                out[known[rng.random_range(0..known.len())]] = UNK;
                Ok(out)
            }
            NegativeMethod::Repeat => {
                for _ in 0..MAX_ATTEMPTS {
                    let r = rng.random_range(1..self.t_max);
                    let w = self.prior_ids[self.prior.sample(rng)];
                    let out = vec![w; r];
                    if out != target {
                        return Ok(out);
                    }
                }
                Err(Error::Data("could not draw a repeat negative distinct from the query".into()))
            }
        }
    }

    /// One negative per method for a logged pair.
    pub fn generate(&self, pair: &EncodedPair, rng: &mut SeedRng) -> Result<Vec<LabeledExample>> {
        let target = strip_end(&pair.target);
        NEGATIVE_METHODS
            .iter()
            .map(|&m| {
                Ok(LabeledExample {
                    context: pair.source.clone(),
                    candidate: self.negative(m, &pair.source, target, rng)?,
                    natural: false,
                })
            })
            .collect()
    }

    /// Positives plus four negatives each; pair `k` uses random stream `k`.
    pub fn build_dataset(&self, pairs: &[EncodedPair], seed: u64) -> Result<Vec<LabeledExample>> {
        let mut out = Vec::with_capacity(pairs.len() * 5);
        for (k, p) in pairs.iter().enumerate() {
            let mut rng = SeedRng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            out.push(LabeledExample {
                context: p.source.clone(),
                candidate: strip_end(&p.target).to_vec(),
                natural: true,
            });
            out.extend(self.generate(p, &mut rng)?);
        }
        Ok(out)
    }
}

fn strip_end(y: &[u32]) -> &[u32] {
    match y.last() {
        Some(&END) => &y[..y.len() - 1],
        _ => y,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

/// Embedding, stacked BiLSTM over `context <SEP> candidate` and a logistic
/// head on the final forward and first backward states of the top layer.
#[derive(Clone, Debug)]
pub struct Estimator<F: Real = f32> {
    pub cfg: EstimatorConfig,
    pub params: ParamStore<F>,
    emb: ParamId,
    encoder: BiLstm,
    head: Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryMetrics {
    /// Positive class is "natural"; predictions threshold at 0.5.
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
            correct += usize::from(p == t);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        BinaryMetrics { accuracy: ratio(correct, pred.len()), precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorReport {
    pub train_loss: Vec<f64>,
    pub valid: Vec<BinaryMetrics>,
    pub best_epoch: usize,
}

impl EstimatorReport {
    pub fn best(&self) -> BinaryMetrics {
        self.valid[self.best_epoch]
    }
}

impl<F: Real> Estimator<F> {
    pub fn new(cfg: EstimatorConfig, rng: &mut impl Rng) -> Result<Self> {
        ensure!(cfg.vocab_size > SEP as usize, Config, "vocabulary too small: {}", cfg.vocab_size);
        ensure!(cfg.emb_dim > 0 && cfg.hidden > 0 && cfg.layers > 0, Config, "estimator dimensions must be positive");
        ensure!((0.0..1.0).contains(&cfg.dropout), Config, "dropout must lie in [0, 1)");
        let mut params = ParamStore::new();
        let emb = params.add("emb", uniform_tensor(&[cfg.vocab_size, cfg.emb_dim], INIT_RANGE, rng));
        let encoder = BiLstm::new(&mut params, "enc", cfg.emb_dim, cfg.hidden, cfg.layers, rng);
        let head = Linear::new(&mut params, "head", 2 * cfg.hidden, 1, rng);
        Ok(Estimator { cfg, params, emb, encoder, head })
    }

    pub fn seeded(cfg: EstimatorConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut SeedRng::seed_from_u64(seed))
    }

    pub fn cast<G: Real>(&self) -> Estimator<G> {
        Estimator {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            emb: self.emb,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    fn sequence(&self, context: &[u32], candidate: &[u32]) -> Result<Vec<u32>> {
        let end = candidate.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        let candidate = &candidate[..end];
        ensure!(!candidate.is_empty(), Invalid, "candidate query is empty");
        ensure!(!context.is_empty(), Invalid, "context query is empty");
        let mut seq = Vec::with_capacity(context.len() + candidate.len() + 1);
        seq.extend_from_slice(context);
        seq.push(SEP);
        seq.extend_from_slice(candidate);
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token {bad} outside vocabulary")));
        }
        Ok(seq)
    }

    /// Logit of `D_phi` recorded on `g`.
    pub fn logit_graph(
        &self,
        g: &mut Graph<'_, F>,
        context: &[u32],
        candidate: &[u32],
        mut drop: Option<&mut SeedRng>,
    ) -> Result<crate::autodiff::Var> {
        let seq = self.sequence(context, candidate)?;
        let mut xs = Vec::with_capacity(seq.len());
        for &t in &seq {
            let e = g.embed(self.emb, t as usize)?;
            xs.push(apply_dropout(g, e, self.cfg.dropout, drop.as_deref_mut())?);
        }
        let states = self.encoder.encode(g, &xs)?;
        let h = self.cfg.hidden;
        let fwd = g.slice(states[states.len() - 1], 0, h)?;
        let bwd = g.slice(states[0], h, h)?;
        let feat = g.concat(&[fwd, bwd]);
        self.head.forward(g, feat)
    }

    /// Probability that `candidate` is a natural follow-up of `context`.
    /// Trailing `<PAD>` tokens in the candidate are ignored.
    pub fn naturalness(&self, context: &[u32], candidate: &[u32]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let z = self.logit_graph(&mut g, context, candidate, None)?;
        let p = kernels::sigmoid(g.scalar(z)).to_f64();
        ensure!(p.is_finite(), NonFinite, "non-finite naturalness");
        Ok(p)
    }

    pub fn evaluate(&self, examples: &[LabeledExample]) -> Result<BinaryMetrics> {
        let mut pred = Vec::with_capacity(examples.len());
        for e in examples {
            pred.push(self.naturalness(&e.context, &e.candidate)? >= 0.5);
        }
        let truth: Vec<bool> = examples.iter().map(|e| e.natural).collect();
        Ok(BinaryMetrics::from_predictions(&pred, &truth))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::Estimator);
        ck.set_meta("vocab_size", self.cfg.vocab_size);
        ck.set_meta("emb_dim", self.cfg.emb_dim);
        ck.set_meta("hidden", self.cfg.hidden);
        ck.set_meta("layers", self.cfg.layers);
        ck.set_meta("dropout", self.cfg.dropout);
        ck.add_store("param/", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Estimator)?;
        let cfg = EstimatorConfig {
            vocab_size: ck.meta("vocab_size")?,
            emb_dim: ck.meta("emb_dim")?,
            hidden: ck.meta("hidden")?,
            layers: ck.meta("layers")?,
            dropout: ck.meta("dropout")?,
        };
        let mut est = Self::seeded(cfg, 0)?;
        ck.load_store("param/", &mut est.params)?;
        Ok(est)
    }
}

impl Estimator<f32> {
    /// Binary cross-entropy training with Adam; keeps the epoch with the best
    /// validation F1.
    pub fn train(
        &mut self,
        train: &[LabeledExample],
        valid: &[LabeledExample],
        cfg: &EstimatorTrainConfig,
    ) -> Result<EstimatorReport> {
        let positives = train.iter().filter(|e| e.natural).count();
        ensure!(
            positives > 0 && positives < train.len(),
            Data,
            "estimator training data must contain both natural and unnatural examples"
        );
        ensure!(!valid.is_empty(), Data, "no validation examples");
        ensure!(cfg.batch_size >= 1 && cfg.epochs >= 1, Config, "batch size and epochs must be positive");
        let mut rng = SeedRng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(&self.params, cfg.lr);
        let mut grads = Gradients::zeros_like(&self.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut report = EstimatorReport::default();
        let mut best = self.params.clone();
        for epoch in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grads.zero();
                let w = 1.0 / batch.len() as f32;
                for &i in batch {
                    let e = &train[i];
                    let mut g = Graph::new(&self.params);
                    let z = self.logit_graph(&mut g, &e.context, &e.candidate, Some(&mut rng))?;
                    let l = g.bce_logit(z, if e.natural { 1.0 } else { 0.0 })?;
                    let v = g.scalar(l);
                    ensure!(v.is_finite(), NonFinite, "non-finite estimator loss in epoch {epoch}");
                    sum += v as f64;
                    let l = g.scale(l, w);
                    g.backward(l, &mut grads)?;
                }
                opt.step(&mut self.params, &grads)?;
            }
            report.train_loss.push(sum / train.len() as f64);
            let m = self.evaluate(valid)?;
            if report.valid.is_empty() || m.f1 > report.best().f1 {
                report.best_epoch = epoch;
                best.copy_from(&self.params)?;
            }
            report.valid.push(m);
        }
        self.params.copy_from(&best)?;
        Ok(report)
    }
}

pub fn format_examples(examples: &[LabeledExample], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for e in examples {
        let _ =
            writeln!(out, "{}\t{}\t{}", decode(&e.context, vocab), decode(&e.candidate, vocab), u8::from(e.natural));
    }
    out
}

pub fn write_examples(path: &Path, examples: &[LabeledExample], vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, format_examples(examples, vocab)).map_err(|e| Error::io(path, e))
}

pub fn parse_examples(text: &str, vocab: &Vocabulary, origin: &Path) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let natural = match f[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        let context = encode(f[0], vocab, usize::MAX).map_err(|e| bad(e.to_string()))?;
        let candidate = encode(f[1], vocab, usize::MAX).map_err(|e| bad(e.to_string()))?;
        out.push(LabeledExample { context, candidate, natural });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::generator::tests::tiny_cfg;
    use std::collections::HashMap;

    fn setup(text: &str) -> (Vocabulary, Generator<f32>) {
        let v = build_vocab([text], 100).unwrap();
        let g = Generator::seeded(tiny_cfg(v.len()), 0).unwrap();
        (v, g)
    }

    #[test]
    fn duplicate_and_unknown_contracts() {
        let (v, g) = setup("ai jobs");
        let ng = NegativeGenerator::new(&g, &v, 8).unwrap();
        let (ai, jobs) = (v.id("ai"), v.id("jobs"));
        let mut rng = SeedRng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let d = ng.negative(NegativeMethod::Duplicate, &[ai], &[ai, jobs], &mut rng).unwrap();
            assert_eq!(d.len(), 3);
            assert!(d.contains(&ai) && d.contains(&jobs));
            seen.insert(decode(&d, &v));
            let u = ng.negative(NegativeMethod::Unknown, &[ai], &[ai, jobs], &mut rng).unwrap();
            assert!(u == vec![UNK, jobs] || u == vec![ai, UNK]);
        }
        let expect: std::collections::HashSet<String> =
            ["ai ai jobs", "ai jobs ai", "ai jobs jobs", "jobs ai jobs"].iter().map(|s| s.to_string()).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn repeat_follows_prior() {
        let (v, g) = setup("a a a a a a a a a b");
        let ng = NegativeGenerator::new(&g, &v, 8).unwrap();
        let mut rng = SeedRng::seed_from_u64(2);
        let (a, b) = (v.id("a"), v.id("b"));
        let target = [v.id("b"), v.id("a")];
        let mut count_a = 0;
        let mut lengths: HashMap<usize, usize> = HashMap::new();
        for _ in 0..10_000 {
            let r = ng.negative(NegativeMethod::Repeat, &[a], &target, &mut rng).unwrap();
            assert!((1..8).contains(&r.len()));
            assert!(r.iter().all(|&t| t == r[0]) && (r[0] == a || r[0] == b));
            count_a += usize::from(r[0] == a);
            *lengths.entry(r.len()).or_default() += 1;
        }
        assert!((count_a as f64 / 10_000.0 - 0.9).abs() < 0.02, "{count_a}");
        assert_eq!(lengths.len(), 7);
    }

    #[test]
    fn sampled_negative_never_equals_target() {
        let (v, g) = setup("x y");
        let ng = NegativeGenerator::new(&g, &v, 3).unwrap();
        let mut rng = SeedRng::seed_from_u64(3);
        let x = v.id("x");
        for _ in 0..200 {
            let s = ng.negative(NegativeMethod::Sampled, &[x], &[x], &mut rng).unwrap();
            assert!(!s.is_empty() && s != vec![x]);
            assert!(!s.contains(&END));
        }
    }

    #[test]
    fn dataset_ratio_is_four_to_one() {
        let (v, g) = setup("p q r s");
        let ng = NegativeGenerator::new(&g, &v, 8).unwrap();
        let pairs: Vec<EncodedPair> = (0..25)
            .map(|i| EncodedPair { source: vec![5 + i % 4], target: vec![5 + (i + 1) % 4, END], u_plus: false })
            .collect();
        let data = ng.build_dataset(&pairs, 9).unwrap();
        assert_eq!(data.len(), 125);
        assert_eq!(data.iter().filter(|e| e.natural).count(), 25);
        assert_eq!(data, ng.build_dataset(&pairs, 9).unwrap());
        assert!(ng.negative(NegativeMethod::Duplicate, &[5], &[], &mut SeedRng::seed_from_u64(0)).is_err());
    }

    fn est(vocab: usize) -> Estimator<f32> {
        Estimator::seeded(EstimatorConfig { vocab_size: vocab, emb_dim: 6, hidden: 5, layers: 2, dropout: 0.0 }, 4)
            .unwrap()
    }

    #[test]
    fn naturalness_is_a_deterministic_probability_ignoring_padding() {
        let e = est(12);
        let p = e.naturalness(&[5, 6], &[7, 8]).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(p, e.naturalness(&[5, 6], &[7, 8]).unwrap());
        assert_eq!(p, e.naturalness(&[5, 6], &[7, 8, PAD, PAD]).unwrap());
        assert!(e.naturalness(&[5], &[]).is_err());
        assert!(e.naturalness(&[5], &[PAD]).is_err());
    }

    #[test]
    fn single_class_training_is_rejected() {
        let mut e = est(12);
        let ex = vec![LabeledExample { context: vec![5], candidate: vec![6], natural: true }; 4];
        let cfg = EstimatorTrainConfig { epochs: 1, batch_size: 2, lr: 0.01, seed: 0 };
        assert!(matches!(e.train(&ex, &ex, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn learns_a_separable_toy() {
        let mut e = est(12);
        let mut ex = Vec::new();
        for i in 0..40u32 {
            ex.push(LabeledExample { context: vec![5 + i % 3], candidate: vec![8, 9], natural: true });
            ex.push(LabeledExample { context: vec![5 + i % 3], candidate: vec![10, 10, 10], natural: false });
        }
        let cfg = EstimatorTrainConfig { epochs: 15, batch_size: 8, lr: 0.02, seed: 1 };
        let rep = e.train(&ex, &ex, &cfg).unwrap();
        assert_eq!(rep.best().accuracy, 1.0, "{rep:?}");
        assert_eq!(e.evaluate(&ex).unwrap(), rep.best());
    }

    #[test]
    fn metrics_by_hand() {
        let m = BinaryMetrics::from_predictions(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn example_file_roundtrip() {
        let (v, _) = setup("ai jobs");
        let ex = vec![LabeledExample { context: vec![v.id("ai")], candidate: vec![v.id("jobs"), UNK], natural: false }];
        let text = format_examples(&ex, &v);
        assert_eq!(text, "ai\tjobs <UNK>\t0\n");
        assert_eq!(parse_examples(&text, &v, Path::new("e")).unwrap(), ex);
    }

    #[test]
    fn checkpoint_kind_is_checked() {
        let e = est(12);
        let ck = e.to_checkpoint();
        let back = Estimator::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back.naturalness(&[5], &[6]).unwrap(), e.naturalness(&[5], &[6]).unwrap());
        assert!(Generator::<f32>::from_checkpoint(&ck).is_err());
    }
}
