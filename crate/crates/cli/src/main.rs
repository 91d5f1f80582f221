mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, RunConfig, WORKERS_ENV};

macro_rules! options {
    ($($field:ident: $help:literal),* $(,)?) => {
        /// Settings shared by every command. Each `--key VALUE` overrides the
        /// same key from `--config`.
        #[derive(Args, Debug, Default)]
        struct Options {
            /// File of `key = value` lines; `#` starts a comment.
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[doc = $help]
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Options {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field), x.as_str()));
                    }
                )*
                v
            }
        }
    };
}

options! {
    seed: "RNG seed",
    dtype: "Element type: f32 or f64",
    workers: "Inversion worker threads (default from FINCFLOW_WORKERS, else 1)",
    out: "Output directory",
    data: "Training data: `synthetic`, a directory of PGM/PPM files, an image, or a .ften archive",
    samples: "Image count of the synthetic dataset",
    epochs: "Training epochs",
    batch: "Batch size",
    lr: "Adam learning rate",
    decay: "Learning-rate multiplier per epoch",
    decay_per_step: "Apply the decay per step instead of per epoch",
    grad_clip: "Clip gradients elementwise to [-VALUE, VALUE], or `none`",
    levels: "Flow levels L",
    steps: "Steps per level K",
    kernel: "Masked kernel size k",
    hidden: "Hidden channels of the coupling networks",
    channels: "Image channels",
    height: "Image height",
    width: "Image width",
    init: "Parameter init: random or identity",
    resume: "Checkpoint to continue training from",
    checkpoint: "Checkpoint to read (default OUT/model.ckpt)",
    count: "Number of samples",
    temperature: "Sampling temperature",
    input: "Input image",
    output: "Output image",
    sizes: "Comma-separated image sizes",
    seeds: "Random instances per check",
    fault: "Set one kernel anchor to VALUE to exercise the checks",
    strategies: "Comma-separated inversion strategies: reference, wavefront, dense",
    target: "Bench target: block or unit",
    gnuplot: "Also write a gnuplot data file",
}

/// Invertible-convolution normalizing flows: training, sampling,
/// reconstruction, correctness checks and inversion benchmarks.
#[derive(Parser, Debug)]
#[command(name = "fincflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a flow by maximum likelihood; writes metrics.csv and model.ckpt.
    Train(Options),
    /// Draw images from a trained checkpoint.
    Sample(Options),
    /// Encode an image and decode it back, reporting the error.
    Reconstruct(Options),
    /// Run the inversion and gradient checks; exit 1 on any failure.
    Check(Options),
    /// Time block or unit inversion; writes bench.csv.
    Bench(Options),
}

fn resolve(cmd: Command, opts: &Options) -> Result<RunConfig, String> {
    let env = std::env::var(WORKERS_ENV).ok();
    let mut cfg = RunConfig::defaults(cmd, env.as_deref())?;
    if let Some(path) = &opts.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in opts.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate(cmd)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, opts) = match &cli.command {
        Cmd::Train(o) => (Command::Train, o),
        Cmd::Sample(o) => (Command::Sample, o),
        Cmd::Reconstruct(o) => (Command::Reconstruct, o),
        Cmd::Check(o) => (Command::Check, o),
        Cmd::Bench(o) => (Command::Bench, o),
    };
    let cfg = match resolve(cmd, opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cmd, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {cmd}: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_config_key_has_a_flag() {
        let cmd = Cli::command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in config::KEYS {
            let flag = key.replace('_', "-");
            assert!(
                train.get_arguments().any(|a| a.get_long() == Some(flag.as_str())),
                "missing --{flag}"
            );
        }
    }
}
