//! Flat `key = value` run configuration. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::synth::SynthConfig;
use crate::corpus::NUM_RESERVED;
use crate::error::{ensure, Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorTrainConfig};
use crate::generator::{GeneratorConfig, PretrainConfig, Strategy};
use crate::reinforce::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model_seed: u64,
    pub rl_seed: u64,
    pub synth: SynthConfig,

    pub t_max: usize,
    pub vocab_size: usize,
    pub session_window: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,

    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,

    pub est_layers: usize,
    pub est_dropout: f64,
    pub est_epochs: usize,
    pub est_lr: f64,
    /// Positive pairs used to build the estimator data; 0 uses all.
    pub est_max_pairs: usize,

    pub strategy: Strategy,
    /// Unset values resolve to the tuned optimum of the chosen strategy.
    pub rl_k: Option<usize>,
    pub eta: Option<f64>,
    pub rl_lr: Option<f64>,
    pub rl_batch_size: usize,
    /// 0 syncs once per epoch.
    pub sync_interval: usize,
    pub rl_epochs: usize,
    /// 0 walks the whole training set each epoch.
    pub rl_steps_per_epoch: usize,
    /// 0 disables clipping.
    pub clip: f64,
    /// Validation queries scored after each epoch; 0 uses all.
    pub rl_valid_queries: usize,

    /// Decoder used to produce the six suggestions at evaluation time.
    pub eval_strategy: Strategy,
    /// Test pairs evaluated; 0 uses all.
    pub eval_max_pairs: usize,

    pub range_check: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model_seed: 1,
            rl_seed: 1,
            synth: SynthConfig::default(),
            t_max: 8,
            vocab_size: 2000,
            session_window: 300,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            emb_dim: 128,
            hidden: 256,
            layers: 2,
            attn_dim: 128,
            dropout: 0.2,
            batch_size: 256,
            pretrain_epochs: 10,
            pretrain_lr: 1e-3,
            est_layers: 2,
            est_dropout: 0.0,
            est_epochs: 5,
            est_lr: 1e-3,
            est_max_pairs: 0,
            strategy: Strategy::Beam,
            rl_k: None,
            eta: None,
            rl_lr: None,
            rl_batch_size: 256,
            sync_interval: 0,
            rl_epochs: 20,
            rl_steps_per_epoch: 0,
            clip: 5.0,
            rl_valid_queries: 0,
            eval_strategy: Strategy::Beam,
            eval_max_pairs: 0,
            range_check: false,
        }
    }
}

fn parse_strategy(v: &str) -> Result<Strategy> {
    match v.split_once(':') {
        None if v == "beam" => Ok(Strategy::Beam),
        None if v == "categorical" => Ok(Strategy::Categorical { temperature: 1.0 }),
        Some(("categorical", t)) => {
            let temperature: f64 = t.parse().map_err(|_| Error::Config(format!("bad temperature {t:?}")))?;
            Ok(Strategy::Categorical { temperature })
        }
        _ => Err(Error::Config(format!("unknown strategy {v:?}; expected beam or categorical[:temperature]"))),
    }
}

fn fmt_strategy(s: Strategy) -> String {
    match s {
        Strategy::Beam => "beam".into(),
        Strategy::Categorical { temperature } => format!("categorical:{temperature}"),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

/// Keys in file order.
pub const KEYS: [&str; 52] = [
    "seed",
    "model_seed",
    "rl_seed",
    "synth_users",
    "synth_sessions_per_user",
    "synth_continue_prob",
    "synth_topics",
    "synth_domains",
    "synth_zipf_exponent",
    "synth_relatedness",
    "synth_engage_related",
    "synth_engage_unrelated",
    "synth_engage_modifier_bonus",
    "synth_duplicate_prob",
    "synth_engage_duplicate",
    "synth_window_seconds",
    "synth_start_time",
    "t_max",
    "vocab_size",
    "session_window",
    "valid_fraction",
    "test_fraction",
    "emb_dim",
    "hidden",
    "layers",
    "attn_dim",
    "dropout",
    "batch_size",
    "pretrain_epochs",
    "pretrain_lr",
    "est_layers",
    "est_dropout",
    "est_epochs",
    "est_lr",
    "est_max_pairs",
    "strategy",
    "rl_k",
    "eta",
    "rl_lr",
    "rl_batch_size",
    "sync_interval",
    "rl_epochs",
    "rl_steps_per_epoch",
    "clip",
    "rl_valid_queries",
    "eval_strategy",
    "eval_max_pairs",
    "range_check",
    // Derived, read-only: written to resolved configs for auditing.
    "resolved_rl_k",
    "resolved_eta",
    "resolved_rl_lr",
    "version",
];

const READ_ONLY: [&str; 4] = ["resolved_rl_k", "resolved_eta", "resolved_rl_lr", "version"];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = num(key, v)?,
            "model_seed" => self.model_seed = num(key, v)?,
            "rl_seed" => self.rl_seed = num(key, v)?,
            "synth_users" => s.users = num(key, v)?,
            "synth_sessions_per_user" => s.sessions_per_user = num(key, v)?,
            "synth_continue_prob" => s.continue_prob = num(key, v)?,
            "synth_topics" => s.topics = num(key, v)?,
            "synth_domains" => s.domains = num(key, v)?,
            "synth_zipf_exponent" => s.zipf_exponent = num(key, v)?,
            "synth_relatedness" => s.relatedness = num(key, v)?,
            "synth_engage_related" => s.engage_related = num(key, v)?,
            "synth_engage_unrelated" => s.engage_unrelated = num(key, v)?,
            "synth_engage_modifier_bonus" => s.engage_modifier_bonus = num(key, v)?,
            "synth_duplicate_prob" => s.duplicate_prob = num(key, v)?,
            "synth_engage_duplicate" => s.engage_duplicate = num(key, v)?,
            "synth_window_seconds" => s.window_seconds = num(key, v)?,
            "synth_start_time" => s.start_time = num(key, v)?,
            "t_max" => self.t_max = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "session_window" => self.session_window = num(key, v)?,
            "valid_fraction" => self.valid_fraction = num(key, v)?,
            "test_fraction" => self.test_fraction = num(key, v)?,
            "emb_dim" => self.emb_dim = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "attn_dim" => self.attn_dim = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = num(key, v)?,
            "est_layers" => self.est_layers = num(key, v)?,
            "est_dropout" => self.est_dropout = num(key, v)?,
            "est_epochs" => self.est_epochs = num(key, v)?,
            "est_lr" => self.est_lr = num(key, v)?,
            "est_max_pairs" => self.est_max_pairs = num(key, v)?,
            "strategy" => self.strategy = parse_strategy(v)?,
            "rl_k" => self.rl_k = opt(key, v)?,
            "eta" => self.eta = opt(key, v)?,
            "rl_lr" => self.rl_lr = opt(key, v)?,
            "rl_batch_size" => self.rl_batch_size = num(key, v)?,
            "sync_interval" => self.sync_interval = num(key, v)?,
            "rl_epochs" => self.rl_epochs = num(key, v)?,
            "rl_steps_per_epoch" => self.rl_steps_per_epoch = num(key, v)?,
            "clip" => self.clip = num(key, v)?,
            "rl_valid_queries" => self.rl_valid_queries = num(key, v)?,
            "eval_strategy" => self.eval_strategy = parse_strategy(v)?,
            "eval_max_pairs" => self.eval_max_pairs = num(key, v)?,
            "range_check" => self.range_check = num(key, v)?,
            k if READ_ONLY.contains(&k) => {}
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let s = &self.synth;
        match key {
            "seed" => self.seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "rl_seed" => self.rl_seed.to_string(),
            "synth_users" => s.users.to_string(),
            "synth_sessions_per_user" => s.sessions_per_user.to_string(),
            "synth_continue_prob" => s.continue_prob.to_string(),
            "synth_topics" => s.topics.to_string(),
            "synth_domains" => s.domains.to_string(),
            "synth_zipf_exponent" => s.zipf_exponent.to_string(),
            "synth_relatedness" => s.relatedness.to_string(),
            "synth_engage_related" => s.engage_related.to_string(),
            "synth_engage_unrelated" => s.engage_unrelated.to_string(),
            "synth_engage_modifier_bonus" => s.engage_modifier_bonus.to_string(),
            "synth_duplicate_prob" => s.duplicate_prob.to_string(),
            "synth_engage_duplicate" => s.engage_duplicate.to_string(),
            "synth_window_seconds" => s.window_seconds.to_string(),
            "synth_start_time" => s.start_time.to_string(),
            "t_max" => self.t_max.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "session_window" => self.session_window.to_string(),
            "valid_fraction" => self.valid_fraction.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "emb_dim" => self.emb_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "attn_dim" => self.attn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "est_layers" => self.est_layers.to_string(),
            "est_dropout" => self.est_dropout.to_string(),
            "est_epochs" => self.est_epochs.to_string(),
            "est_lr" => self.est_lr.to_string(),
            "est_max_pairs" => self.est_max_pairs.to_string(),
            "strategy" => fmt_strategy(self.strategy),
            "rl_k" => fmt_opt(&self.rl_k),
            "eta" => fmt_opt(&self.eta),
            "rl_lr" => fmt_opt(&self.rl_lr),
            "rl_batch_size" => self.rl_batch_size.to_string(),
            "sync_interval" => self.sync_interval.to_string(),
            "rl_epochs" => self.rl_epochs.to_string(),
            "rl_steps_per_epoch" => self.rl_steps_per_epoch.to_string(),
            "clip" => self.clip.to_string(),
            "rl_valid_queries" => self.rl_valid_queries.to_string(),
            "eval_strategy" => fmt_strategy(self.eval_strategy),
            "eval_max_pairs" => self.eval_max_pairs.to_string(),
            "range_check" => self.range_check.to_string(),
            "resolved_rl_k" => self.k().to_string(),
            "resolved_eta" => self.eta().to_string(),
            "resolved_rl_lr" => self.lr().to_string(),
            "version" => env!("CARGO_PKG_VERSION").to_string(),
            _ => unreachable!("key list and getter disagree on {key}"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Later lines win.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| perr(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{}: {m}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Every key with its value, including the resolved strategy defaults.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn k(&self) -> usize {
        self.rl_k.unwrap_or(match self.strategy {
            Strategy::Beam => 4,
            Strategy::Categorical { .. } => 2,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(match self.strategy {
            Strategy::Beam => 1.0,
            Strategy::Categorical { .. } => 0.01,
        })
    }

    pub fn lr(&self) -> f64 {
        self.rl_lr.unwrap_or(match self.strategy {
            Strategy::Beam => 3e-5,
            Strategy::Categorical { .. } => 5e-5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        ensure!(self.t_max >= 2, Config, "t_max must be at least 2");
        ensure!(self.vocab_size >= 1, Config, "vocab_size must be positive");
        ensure!(self.session_window >= 1, Config, "session_window must be positive");
        let (v, t) = (self.valid_fraction, self.test_fraction);
        ensure!(v > 0.0 && t > 0.0 && v + t < 1.0, Config, "valid/test fractions must be positive and sum below 1");
        ensure!(self.batch_size >= 1 && self.rl_batch_size >= 1, Config, "batch sizes must be positive");
        ensure!(self.est_layers >= 1, Config, "est_layers must be positive");
        ensure!(self.pretrain_epochs >= 1 && self.est_epochs >= 1, Config, "epoch counts must be positive");
        ensure!(self.pretrain_lr > 0.0 && self.est_lr > 0.0, Config, "learning rates must be positive");
        ensure!((0.0..1.0).contains(&self.est_dropout), Config, "est_dropout must lie in [0, 1)");
        ensure!(self.clip >= 0.0, Config, "clip must be non-negative");
        self.generator_config(NUM_RESERVED as usize + 1).validate()?;
        self.train_config().validate()?;
        if self.range_check {
            self.check_ranges()?;
        }
        Ok(())
    }

    /// Tuning ranges of the original study.
    pub fn check_ranges(&self) -> Result<()> {
        ensure!(
            [64, 128, 256, 512].contains(&self.batch_size),
            Config,
            "batch_size {} outside {{64, 128, 256, 512}}",
            self.batch_size
        );
        ensure!((4..=8).contains(&self.t_max), Config, "t_max {} outside [4, 8]", self.t_max);
        ensure!((0.0..=0.4).contains(&self.dropout), Config, "dropout {} outside [0, 0.4]", self.dropout);
        ensure!((0.0..=0.4).contains(&self.est_dropout), Config, "est_dropout {} outside [0, 0.4]", self.est_dropout);
        ensure!((1..=3).contains(&self.layers), Config, "layers {} outside [1, 3]", self.layers);
        ensure!([128, 256].contains(&self.hidden), Config, "hidden {} outside {{128, 256}}", self.hidden);
        let lrs = [1e-4, 1e-6, 1e-5, 2e-5, 3e-5, 4e-5, 5e-5];
        ensure!(lrs.contains(&self.lr()), Config, "rl_lr {} outside the tuning grid {lrs:?}", self.lr());
        ensure!((1..=5).contains(&self.k()), Config, "rl_k {} outside [1, 5]", self.k());
        let etas = [1.0, 0.1, 0.01, 0.001];
        ensure!(etas.contains(&self.eta()), Config, "eta {} outside {etas:?}", self.eta());
        Ok(())
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            enc_layers: self.layers,
            dec_layers: self.layers,
            attn_dim: self.attn_dim,
            dropout: self.dropout,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            lr: self.pretrain_lr,
            seed: self.model_seed,
        }
    }

    /// The estimator shares the generator's embedding and hidden widths.
    pub fn estimator_config(&self, vocab_size: usize) -> EstimatorConfig {
        EstimatorConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            layers: self.est_layers,
            dropout: self.est_dropout,
        }
    }

    pub fn estimator_train_config(&self) -> EstimatorTrainConfig {
        EstimatorTrainConfig {
            epochs: self.est_epochs,
            batch_size: self.batch_size,
            lr: self.est_lr,
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k(),
            eta: self.eta(),
            lr: self.lr(),
            batch_size: self.rl_batch_size,
            sync_interval: (self.sync_interval > 0).then_some(self.sync_interval),
            strategy: self.strategy,
            t_max: self.t_max,
            max_epochs: self.rl_epochs,
            steps_per_epoch: (self.rl_steps_per_epoch > 0).then_some(self.rl_steps_per_epoch),
            clip: (self.clip > 0.0).then_some(self.clip),
            seed: self.rl_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::default();
        let text = cfg.to_file_string();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text, Path::new("c")).unwrap(), cfg);
        assert_eq!((cfg.k(), cfg.eta(), cfg.lr()), (4, 1.0, 3e-5));
        let cat = RunConfig { strategy: Strategy::Categorical { temperature: 1.0 }, ..cfg };
        assert_eq!((cat.k(), cat.eta(), cat.lr()), (2, 0.01, 5e-5));
        assert!(text.contains("resolved_rl_lr = 0.00003\n"));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = RunConfig::parse("hiden = 3\n", Path::new("c")).unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("hiden") && m.contains("c:1")), "{e}");
        assert!(matches!(RunConfig::parse("hidden 3", Path::new("c")), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("hidden = x", Path::new("c")), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg =
            RunConfig::parse("# desk\nhidden = 32 # small\nstrategy = categorical:0.5\neta = 2\n", Path::new("c"))
                .unwrap();
        assert_eq!(cfg.hidden, 32);
        assert_eq!(cfg.strategy, Strategy::Categorical { temperature: 0.5 });
        assert_eq!(cfg.eta(), 2.0);
        cfg.apply_overrides(&["eta=auto", "rl_k = 3"]).unwrap();
        assert_eq!((cfg.eta(), cfg.k()), (0.01, 3));
        assert!(cfg.apply_overrides(&["rl_k"]).is_err());
        assert!(cfg.apply_overrides(&["rl_k=0"]).is_err());
    }

    #[test]
    fn range_check_is_opt_in() {
        let small = "hidden = 32\nbatch_size = 16\n";
        assert!(RunConfig::parse(small, Path::new("c")).is_ok());
        let e = RunConfig::parse(&format!("{small}range_check = true\n"), Path::new("c")).unwrap_err();
        assert!(e.to_string().contains("batch_size"));
        assert!(RunConfig::parse("range_check = true\n", Path::new("c")).is_ok());
        assert!(RunConfig::parse("range_check = true\neta = 0.5\n", Path::new("c")).is_err());
    }
}
