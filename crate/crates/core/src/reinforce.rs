//! REINFORCE fine-tuning. Sequences are rolled out from the start state by a
//! frozen snapshot `beta` of the policy; their log-probabilities and
//! gradients are taken under the live parameters `theta`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;

use crate::autodiff::Gradients;
use crate::corpus::{decode, FeedbackIndex};
use crate::error::{ensure, Error, Result};
use crate::generator::{Generator, Hypothesis, Strategy};
use crate::metrics::{sessions_plus_at6, SUGGESTIONS};
use crate::optim::Sgd;
use crate::reward::RewardEngine;
use crate::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Samples per query.
    pub k: usize,
    pub eta: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Optimisation steps between `beta <- theta`; `None` syncs once per epoch.
    pub sync_interval: Option<usize>,
    pub strategy: Strategy,
    pub t_max: usize,
    pub max_epochs: usize,
    /// Caps the steps in one epoch; `None` walks the whole training set.
    pub steps_per_epoch: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, Config, "K must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive");
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), Config, "eta must be non-negative");
        ensure!(self.batch_size >= 1, Config, "batch size must be at least 1");
        ensure!(self.sync_interval != Some(0), Config, "sync interval must be at least 1");
        ensure!(self.steps_per_epoch != Some(0), Config, "steps per epoch must be at least 1");
        ensure!(self.t_max >= 1, Config, "maximum length must be at least 1");
        ensure!(self.max_epochs >= 1, Config, "at least one epoch is required");
        if let Some(c) = self.clip {
            ensure!(c > 0.0, Config, "clip norm must be positive");
        }
        if let Strategy::Categorical { temperature } = self.strategy {
            ensure!(temperature > 0.0 && temperature.is_finite(), Config, "temperature must be positive");
        }
        Ok(())
    }
}

/// A source query: its logged text (for feedback lookups) and its ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RlQuery {
    pub text: String,
    pub source: Vec<u32>,
}

/// One scored rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub reward: f64,
}

/// `(1/KB) sum -R(y) log G(y)` over a batch.
pub fn monitor_loss(rewards: &[f64], log_probs: &[f64]) -> Result<f64> {
    ensure!(rewards.len() == log_probs.len(), Shape, "reward/log-prob count mismatch");
    ensure!(!rewards.is_empty(), Invalid, "empty batch");
    let s: f64 = rewards.iter().zip(log_probs).map(|(r, lp)| -r * lp).sum();
    Ok(s / rewards.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub monitor_loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    /// Largest decoder-step count spent rolling out one query.
    pub max_decoder_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationStats {
    pub mean_reward: f64,
    pub sessions_plus: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: Vec<StepStats>,
    /// Index 0 holds the starting policy.
    pub valid: Vec<ValidationStats>,
    pub best_epoch: usize,
    pub syncs: usize,
    pub converged: bool,
}

impl FinetuneReport {
    pub fn stats_file_string(&self) -> String {
        let mut s = String::from("step\tmean_reward\tmonitor_loss\tgrad_norm\n");
        for r in &self.steps {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.step, r.mean_reward, r.monitor_loss, r.grad_norm);
        }
        s
    }

    pub fn save_stats(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.stats_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// Live policy, rollout snapshot and optimiser state.
pub struct Trainer {
    pub theta: Generator<f32>,
    pub beta: Generator<f32>,
    pub cfg: TrainConfig,
    pub opt: Sgd,
    pub rng: SeedRng,
    grads: Gradients<f32>,
    pub steps: usize,
    pub syncs: usize,
}

impl Trainer {
    pub fn new(policy: Generator<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let grads = Gradients::zeros_like(&policy.params);
        Ok(Trainer {
            beta: policy.clone(),
            theta: policy,
            opt: Sgd::new(cfg.lr),
            rng: SeedRng::seed_from_u64(cfg.seed),
            grads,
            cfg,
            steps: 0,
            syncs: 1,
        })
    }

    /// `beta <- theta`.
    pub fn sync(&mut self) -> Result<()> {
        self.beta.params.copy_from(&self.theta.params)?;
        self.syncs += 1;
        Ok(())
    }

    /// K rollouts from the snapshot; returns them with the decoder steps spent.
    pub fn rollout(&mut self, q: &RlQuery) -> Result<(Vec<Hypothesis>, usize)> {
        self.beta.rollout(&q.source, self.cfg.k, self.cfg.t_max, self.cfg.strategy, &mut self.rng)
    }

    /// Rolls out and scores every query of a batch.
    pub fn collect(&mut self, batch: &[RlQuery], engine: &RewardEngine<'_>) -> Result<(Vec<Vec<Sample>>, usize)> {
        let mut out = Vec::with_capacity(batch.len());
        let mut max_steps = 0;
        for q in batch {
            let (hyps, steps) = self.rollout(q)?;
            max_steps = max_steps.max(steps);
            let mut samples = Vec::with_capacity(hyps.len());
            for h in hyps {
                let r = engine.score(&q.text, &q.source, h.body())?.reward;
                samples.push(Sample { tokens: h.tokens, reward: r });
            }
            out.push(samples);
        }
        Ok((out, max_steps))
    }

    /// Gradient of `-(1/B) sum_i (1/K) sum_k R_ik log G_theta(y_ik)` into the
    /// trainer's buffer. Returns the monitoring loss and the gradient norm.
    pub fn accumulate(&mut self, batch: &[RlQuery], samples: &[Vec<Sample>]) -> Result<(f64, f64)> {
        ensure!(batch.len() == samples.len() && !batch.is_empty(), Shape, "batch/sample count mismatch");
        self.grads.zero();
        let b = batch.len() as f64;
        let (mut rewards, mut lps) = (Vec::new(), Vec::new());
        for (q, ys) in batch.iter().zip(samples) {
            ensure!(!ys.is_empty(), Invalid, "query {:?} has no rollouts", q.text);
            let k = ys.len() as f64;
            let weighted: Vec<(&[u32], f64)> = ys.iter().map(|s| (s.tokens.as_slice(), s.reward / (k * b))).collect();
            let (_, lp) = self.theta.weighted_nll_backward(&q.source, &weighted, &mut self.grads)?;
            rewards.extend(ys.iter().map(|s| s.reward));
            lps.extend(lp);
        }
        let loss = monitor_loss(&rewards, &lps)?;
        ensure!(loss.is_finite(), NonFinite, "monitoring loss diverged at step {}", self.steps);
        Ok((loss, self.grads.global_norm()))
    }

    pub fn gradients(&self) -> &Gradients<f32> {
        &self.grads
    }

    /// One full optimisation step on a batch of queries.
    pub fn step(&mut self, batch: &[RlQuery], engine: &RewardEngine<'_>) -> Result<StepStats> {
        let (samples, max_steps) = self.collect(batch, engine)?;
        let (loss, norm) = self.accumulate(batch, &samples)?;
        if let Some(c) = self.cfg.clip {
            self.grads.clip_global_norm(c);
        }
        self.opt.step(&mut self.theta.params, &self.grads)?;
        self.steps += 1;
        let n: usize = samples.iter().map(Vec::len).sum();
        let mean_reward = samples.iter().flatten().map(|s| s.reward).sum::<f64>() / n as f64;
        Ok(StepStats {
            step: self.steps,
            mean_reward,
            monitor_loss: loss,
            grad_norm: norm,
            max_decoder_steps: max_steps,
        })
    }
}

/// Mean composite reward of `k` rollouts per query under `strategy`.
pub fn mean_reward(
    policy: &Generator<f32>,
    engine: &RewardEngine<'_>,
    queries: &[RlQuery],
    strategy: Strategy,
    k: usize,
    t_max: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(!queries.is_empty(), Data, "no queries to score");
    let mut rng = SeedRng::seed_from_u64(seed);
    let (mut total, mut n) = (0.0, 0usize);
    for q in queries {
        let (hyps, _) = policy.rollout(&q.source, k, t_max, strategy, &mut rng)?;
        for h in &hyps {
            total += engine.score(&q.text, &q.source, h.body())?.reward;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Six suggestion texts per query: the top beam hypotheses, or independent
/// samples for the categorical strategy.
pub fn suggest(
    policy: &Generator<f32>,
    vocab: &crate::corpus::Vocabulary,
    source: &[u32],
    strategy: Strategy,
    t_max: usize,
    rng: &mut SeedRng,
) -> Result<Vec<String>> {
    let (hyps, _) = policy.rollout(source, SUGGESTIONS, t_max, strategy, rng)?;
    Ok(hyps.iter().map(|h| decode(h.body(), vocab)).collect())
}

/// Mean reward under the training engine and Sessions+@6 against
/// `feedback`, the engaged queries of the validation sessions.
pub fn validate_policy(
    policy: &Generator<f32>,
    engine: &RewardEngine<'_>,
    queries: &[RlQuery],
    feedback: &FeedbackIndex,
    cfg: &TrainConfig,
) -> Result<ValidationStats> {
    let mean_reward = mean_reward(policy, engine, queries, cfg.strategy, cfg.k, cfg.t_max, cfg.seed ^ 0x5eed)?;
    let mut rng = SeedRng::seed_from_u64(cfg.seed ^ 0x6a);
    let mut hits = 0usize;
    for q in queries {
        let s = suggest(policy, engine.vocab, &q.source, cfg.strategy, cfg.t_max, &mut rng)?;
        hits += usize::from(sessions_plus_at6(&s, feedback));
    }
    Ok(ValidationStats { mean_reward, sessions_plus: hits as f64 / queries.len() as f64 })
}

const SMOOTH: usize = 5;
const TOL: f64 = 1e-3;

/// Relative change between consecutive 5-epoch means of the per-epoch
/// monitoring loss falls below the tolerance.
pub fn converged(epoch_losses: &[f64]) -> bool {
    let n = epoch_losses.len();
    if n <= SMOOTH {
        return false;
    }
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let cur = mean(&epoch_losses[n - SMOOTH..]);
    let prev = mean(&epoch_losses[n - SMOOTH - 1..n - 1]);
    (cur - prev).abs() / prev.abs().max(1e-12) < TOL
}

/// Runs epochs until convergence or the epoch cap and leaves the policy of
/// the epoch with the best validation Sessions+@6 (ties broken by mean
/// reward) in the returned generator.
pub fn finetune(
    policy: Generator<f32>,
    engine: &RewardEngine<'_>,
    train: &[RlQuery],
    valid: &[RlQuery],
    valid_feedback: &FeedbackIndex,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ValidationStats),
) -> Result<(Generator<f32>, FinetuneReport)> {
    ensure!(!train.is_empty(), Data, "no training queries");
    ensure!(!valid.is_empty(), Data, "no validation queries");
    let mut tr = Trainer::new(policy, cfg.clone())?;
    let batches_per_pass = train.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = cfg.steps_per_epoch.map_or(batches_per_pass, |s| s.min(batches_per_pass));
    let sync_every = cfg.sync_interval.unwrap_or(steps_per_epoch);
    let mut report = FinetuneReport::default();
    report.valid.push(validate_policy(&tr.theta, engine, valid, valid_feedback, cfg)?);
    on_epoch(0, &report.valid[0]);
    let mut best: Option<(usize, Generator<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();
    let mut epoch_losses = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            if cursor + cfg.batch_size > train.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut tr.rng);
                cursor = 0;
            }
            let batch: Vec<RlQuery> =
                order[cursor..cursor + cfg.batch_size.min(train.len())].iter().map(|&i| train[i].clone()).collect();
            cursor += cfg.batch_size;
            let st = tr.step(&batch, engine)?;
            loss_sum += st.monitor_loss;
            report.steps.push(st);
            if tr.steps % sync_every == 0 {
                tr.sync()?;
            }
        }
        epoch_losses.push(loss_sum / steps_per_epoch as f64);
        let v = validate_policy(&tr.theta, engine, valid, valid_feedback, cfg)?;
        on_epoch(epoch, &v);
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let bv = &report.valid[*b];
                (v.sessions_plus, v.mean_reward) > (bv.sessions_plus, bv.mean_reward)
            }
        };
        report.valid.push(v);
        if better {
            best = Some((epoch, tr.theta.clone()));
        }
        if converged(&epoch_losses) {
            report.converged = true;
            break;
        }
    }
    report.syncs = tr.syncs;
    let (best_epoch, gen) = best.expect("at least one epoch ran");
    report.best_epoch = best_epoch;
    Ok((gen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::END;
    use crate::corpus::{build_vocab, QueryPair};
    use crate::estimator::{Estimator, EstimatorConfig};
    use crate::generator::tests::tiny_cfg;

    #[test]
    fn monitor_loss_cases() {
        assert_eq!(monitor_loss(&[0.0, 0.0], &[-1.0, -3.0]).unwrap(), 0.0);
        assert_eq!(monitor_loss(&[1.0], &[-2.0]).unwrap(), 2.0);
        assert!(monitor_loss(&[-1.0], &[-2.0]).unwrap() < 0.0);
        assert!(monitor_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn convergence_window() {
        assert!(!converged(&[1.0; 5]));
        assert!(converged(&[1.0; 6]));
        assert!(!converged(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]));
    }

    #[test]
    fn config_invariants() {
        let ok = TrainConfig {
            k: 2,
            eta: 1.0,
            lr: 0.1,
            batch_size: 2,
            sync_interval: None,
            strategy: Strategy::Beam,
            t_max: 4,
            max_epochs: 1,
            steps_per_epoch: None,
            clip: Some(5.0),
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { k: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { sync_interval: Some(0), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { strategy: Strategy::Categorical { temperature: 0.0 }, ..ok }.validate().is_err());
    }

    struct Fixture {
        vocab: crate::corpus::Vocabulary,
        fb: FeedbackIndex,
        est: Estimator<f32>,
    }

    fn fixture() -> Fixture {
        let vocab = build_vocab(["a b c d e"], 100).unwrap();
        let fb = FeedbackIndex::from_pairs(&[QueryPair { source: "a b".into(), target: "c".into(), u_plus: true }]);
        let est = Estimator::<f32>::seeded(
            EstimatorConfig { vocab_size: vocab.len(), emb_dim: 4, hidden: 3, layers: 1, dropout: 0.0 },
            3,
        )
        .unwrap();
        Fixture { vocab, fb, est }
    }

    fn queries(v: &crate::corpus::Vocabulary) -> Vec<RlQuery> {
        ["a b", "c d", "e", "b c a"]
            .iter()
            .map(|t| RlQuery { text: t.to_string(), source: t.split(' ').map(|w| v.id(w)).collect() })
            .collect()
    }

    fn cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            k: 3,
            eta: 1.0,
            lr: 0.05,
            batch_size: 2,
            sync_interval: Some(2),
            strategy,
            t_max: 4,
            max_epochs: 3,
            steps_per_epoch: None,
            clip: Some(5.0),
            seed: 9,
        }
    }

    #[test]
    fn snapshot_frozen_between_syncs() {
        let f = fixture();
        let engine = RewardEngine { feedback: &f.fb, estimator: &f.est, vocab: &f.vocab, eta: 1.0 };
        let gen = Generator::<f32>::seeded(tiny_cfg(f.vocab.len()), 1).unwrap();
        let qs = queries(&f.vocab);
        let mut tr = Trainer::new(gen, cfg(Strategy::Categorical { temperature: 1.0 })).unwrap();
        let snap = tr.beta.params.clone();
        tr.step(&qs[..2], &engine).unwrap();
        assert_eq!(tr.beta.params.max_abs_diff(&snap), 0.0);
        assert!(tr.theta.params.max_abs_diff(&snap) > 0.0);
        tr.sync().unwrap();
        assert_eq!(tr.beta.params.max_abs_diff(&tr.theta.params), 0.0);
    }

    #[test]
    fn zero_rewards_leave_theta_unchanged() {
        let f = fixture();
        let gen = Generator::<f32>::seeded(tiny_cfg(f.vocab.len()), 1).unwrap();
        let qs = queries(&f.vocab);
        let mut tr = Trainer::new(gen, cfg(Strategy::Beam)).unwrap();
        let before = tr.theta.params.clone();
        let samples: Vec<Vec<Sample>> = qs
            .iter()
            .map(|_| vec![Sample { tokens: vec![5, 6, END], reward: 0.0 }, Sample { tokens: vec![7], reward: 0.0 }])
            .collect();
        let (loss, norm) = tr.accumulate(&qs, &samples).unwrap();
        assert_eq!((loss, norm), (0.0, 0.0));
        let g = tr.grads.clone();
        tr.opt.step(&mut tr.theta.params, &g).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(tr.theta.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn doubling_rewards_doubles_gradient() {
        let f = fixture();
        let gen = Generator::<f32>::seeded(tiny_cfg(f.vocab.len()), 1).unwrap();
        let qs = queries(&f.vocab);
        let mut tr = Trainer::new(gen, cfg(Strategy::Beam)).unwrap();
        let mk = |s: f64| -> Vec<Vec<Sample>> {
            qs.iter()
                .map(|_| {
                    vec![
                        Sample { tokens: vec![5, END], reward: 0.3 * s },
                        Sample { tokens: vec![6, 8], reward: -0.7 * s },
                    ]
                })
                .collect()
        };
        let (_, n1) = tr.accumulate(&qs, &mk(1.0)).unwrap();
        let (_, n2) = tr.accumulate(&qs, &mk(2.0)).unwrap();
        assert!((n2 / n1 - 2.0).abs() < 1e-5, "{n1} {n2}");
    }

    #[test]
    fn decoder_steps_bounded_by_k_t() {
        let f = fixture();
        let engine = RewardEngine { feedback: &f.fb, estimator: &f.est, vocab: &f.vocab, eta: 1.0 };
        let gen = Generator::<f32>::seeded(tiny_cfg(f.vocab.len()), 2).unwrap();
        let qs = queries(&f.vocab);
        for strategy in [Strategy::Beam, Strategy::Categorical { temperature: 1.0 }] {
            let mut tr = Trainer::new(gen.clone(), cfg(strategy)).unwrap();
            let st = tr.step(&qs, &engine).unwrap();
            assert!(st.max_decoder_steps <= 3 * 4 && st.max_decoder_steps > 0);
        }
    }

    #[test]
    fn finetune_runs_and_is_deterministic() {
        let f = fixture();
        let engine = RewardEngine { feedback: &f.fb, estimator: &f.est, vocab: &f.vocab, eta: 1.0 };
        let gen = Generator::<f32>::seeded(tiny_cfg(f.vocab.len()), 2).unwrap();
        let qs = queries(&f.vocab);
        let c = cfg(Strategy::Categorical { temperature: 1.0 });
        let mut seen = Vec::new();
        let (a, ra) = finetune(gen.clone(), &engine, &qs, &qs[..2], &f.fb, &c, |e, _| seen.push(e)).unwrap();
        let (b, rb) = finetune(gen, &engine, &qs, &qs[..2], &f.fb, &c, |_, _| {}).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(ra, rb);
        assert_eq!(a.params.max_abs_diff(&b.params), 0.0);
        assert_eq!(ra.steps.len(), 6);
        assert_eq!(ra.valid.len(), 4);
        assert!(ra.best_epoch >= 1);
        // Initial snapshot plus a sync every two steps.
        assert_eq!(ra.syncs, 4);
        let text = ra.stats_file_string();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("step\tmean_reward\tmonitor_loss\tgrad_norm\n1\t"));
    }
}
