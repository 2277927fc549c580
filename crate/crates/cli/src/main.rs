use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ctfwp::data::{Split, SynthKind, SynthOptions};
use ctfwp_cli::commands::{cmd_eval, cmd_gradcheck, cmd_paramcount, cmd_synth, cmd_train, SynthRequest};
use ctfwp_cli::config::{keys_help, RunConfig};

#[derive(Parser)]
#[command(name = "ctfwp", version, about = "Train and inspect continuous-time fast weight models", after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and best.ckpt into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides [train] seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sequences processed in parallel within a batch.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Report accuracy (and AUC for binary tasks) of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare adjoint gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Scale the analytic gradient of this tensor (checker self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Parameter counts of the vanilla NCDE field vs the fast weight layer.
    Paramcount {
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128, 256])]
        d: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        d_in: usize,
    },
    /// Generate a synthetic dataset (csv sequences and manifest.txt).
    Synth {
        #[arg(long)]
        task: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        valid: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        writes: Option<usize>,
        #[arg(long)]
        n_values: Option<usize>,
        #[arg(long)]
        min_events: Option<usize>,
        #[arg(long)]
        max_events: Option<usize>,
        #[arg(long)]
        noise_channels: Option<usize>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, seed, threads } => {
            let cfg = load(&config, seed)?;
            cmd_train(&cfg, &out, threads, &mut std::io::stdout())?;
        }
        Command::Eval { config, checkpoint, split, threads, out } => {
            let report = cmd_eval(&load(&config, None)?, &checkpoint, split, threads)?;
            print!("{report}");
            if let Some(p) = out {
                std::fs::write(&p, &report).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { config, tolerance, seed, corrupt } => {
            let (ok, table) = cmd_gradcheck(&load(&config, seed)?, tolerance, corrupt.as_deref())?;
            print!("{table}");
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Paramcount { d, d_in } => print!("{}", cmd_paramcount(&d, d_in)?),
        Command::Synth { task, out, seed, train, valid, test, distractors, writes, n_values, min_events, max_events, noise_channels } => {
            let mut o = SynthOptions::default();
            o.distractors = distractors.unwrap_or(o.distractors);
            o.writes = writes.unwrap_or(o.writes);
            o.n_values = n_values.unwrap_or(o.n_values);
            o.min_events = min_events.unwrap_or(o.min_events);
            o.max_events = max_events.unwrap_or(o.max_events);
            o.noise_channels = noise_channels.unwrap_or(o.noise_channels);
            let req = SynthRequest { kind: task, n_train: train, n_valid: valid, n_test: test, seed, options: o };
            let manifest = cmd_synth(&req, &out)?;
            println!("wrote {} sequences and {}", train + valid + test, manifest.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
