use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relquery::config::RunConfig;
use relquery::corpus::Vocabulary;
use relquery::metrics::format_suggestions;
use relquery::pipeline::{self, load_generator};
use relquery::Error;

/// Related search query suggestion: synthesize logs, pre-train a seq2seq
/// generator, train a naturalness estimator, fine-tune with REINFORCE and
/// evaluate.
#[derive(Parser)]
#[command(name = "relquery", version)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a synthetic query log.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sessions, pairs, split and vocabulary.
    Prepare {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Supervised pre-training of the generator.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the naturalness estimator against generated negatives.
    TrainEstimator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// REINFORCE fine-tuning of a pre-trained generator.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        estimator: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-set metrics; with `--baseline` also a relative-delta report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        /// Adds the mean composite reward of the suggestions.
        #[arg(long)]
        estimator: Option<PathBuf>,
        /// `metrics.tsv` of the model to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Six suggestions for every input line, tab-separated after the query.
    Suggest {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Reads standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 4,
        Error::NonFinite(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::Shape(_) | Error::Invalid(_) | Error::Contract(_) => 7,
    }
}

fn resolve(cli: &Cli) -> relquery::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> relquery::Result<()> {
    let cfg = resolve(cli)?;
    if !matches!(cli.cmd, Cmd::Suggest { .. }) {
        eprint!("{}", cfg.to_file_string());
    }
    match &cli.cmd {
        Cmd::Synth { out } => {
            let n = pipeline::synth(&cfg, out)?;
            eprintln!("wrote {n} events to {}", out.display());
        }
        Cmd::Prepare { log, data } => {
            let s = pipeline::prepare(&cfg, log, data)?;
            eprintln!(
                "{} events, {} sessions, {} pairs (train {}, valid {}, test {}), vocabulary {}",
                s.events, s.sessions, s.pairs, s.train, s.valid, s.test, s.vocab
            );
        }
        Cmd::Pretrain { data, out } => {
            let (_, r) = pipeline::pretrain(&cfg, data, out)?;
            eprintln!("best epoch {} validation loss {:.4}", r.best_epoch, r.best_valid_loss());
        }
        Cmd::TrainEstimator { data, generator, out } => {
            let (_, o) = pipeline::train_estimator(&cfg, data, generator, out)?;
            let b = o.report.best();
            eprintln!(
                "validation accuracy {:.4} f1 {:.4}; test accuracy {:.4} f1 {:.4}",
                b.accuracy, b.f1, o.test.accuracy, o.test.f1
            );
        }
        Cmd::Finetune { data, generator, estimator, out } => {
            let (_, r) = pipeline::finetune_stage(&cfg, data, generator, estimator, out, |e, v| {
                eprintln!("epoch {e}: validation reward {:.4} sessions+@6 {:.4}", v.mean_reward, v.sessions_plus);
            })?;
            eprintln!("best epoch {} (converged: {})", r.best_epoch, r.converged);
        }
        Cmd::Evaluate { data, generator, estimator, baseline, out } => {
            let r = pipeline::evaluate(&cfg, data, generator, estimator.as_deref(), baseline.as_deref(), out)?;
            eprint!("{}", r.to_file_string());
        }
        Cmd::Suggest { generator, vocab, input } => {
            let policy = load_generator(generator)?;
            let vocab = Vocabulary::load(vocab)?;
            let text = read_input(input.as_deref())?;
            let rows = pipeline::suggest_lines(&cfg, &policy, &vocab, &text)?;
            let mut out = std::io::stdout().lock();
            out.write_all(format_suggestions(&rows).as_bytes())
                .map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?;
        }
    }
    Ok(())
}

fn read_input(path: Option<&Path>) -> relquery::Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
            Ok(s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
