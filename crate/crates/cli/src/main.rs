//! `thoughtroute`: data generation, training, evaluation, routing dumps and
//! gradient checks.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
//! The last stdout line of every successful command is `OK key=value ...`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "thoughtroute", version, about = "Latent thought routing for segmental translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` run configuration; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key after the file is read (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    All,
    Encoder,
    Thinking,
    Decoder,
    Objectives,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic split as an SGTD1 file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Number of samples; the split's configured count when omitted.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on `train.sgtd`, evaluating on `dev.sgtd`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Set both regularizer weights to zero (the terms are still logged).
        #[arg(long)]
        no_regularizers: bool,
        /// Disable the decoder's temporal prior.
        #[arg(long)]
        no_prior: bool,
        /// Continue from an SGTC1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a dataset and report translation and routing metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        len_penalty: f64,
        /// Maximum hypothesis length; the checkpoint's setting when omitted.
        #[arg(long)]
        max_len: Option<usize>,
        /// Metrics CSV (header plus one row).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Decoded token ids, one hypothesis per line.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Dump one sample's binding and priors as CSV and PGM.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out_prefix: String,
    },
    /// Finite-difference gradient check on a tiny model.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Seed of the random evaluation point.
        #[arg(long, default_value_t = thoughtroute::selfcheck::DEFAULT_POINT_SEED)]
        point_seed: u64,
        /// Multiply the analytic gradient before comparing (test fixture).
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_analytic: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::GenData {
            config,
            out,
            split,
            count,
        } => commands::gen_data(&config, &out, split, count),
        Command::Train {
            config,
            data_dir,
            out_dir,
            no_regularizers,
            no_prior,
            resume,
        } => commands::train(&config, &data_dir, &out_dir, no_regularizers, no_prior, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            beam,
            len_penalty,
            max_len,
            out,
            hyp_out,
        } => commands::eval(
            &checkpoint,
            &data,
            beam,
            len_penalty,
            max_len,
            out.as_deref(),
            hyp_out.as_deref(),
        ),
        Command::InspectRouting {
            checkpoint,
            data,
            sample,
            out_prefix,
        } => commands::inspect_routing(&checkpoint, &data, sample, &out_prefix),
        Command::GradCheck {
            config,
            module,
            eps,
            tol,
            point_seed,
            corrupt_analytic,
        } => commands::grad_check(&config, module, eps, tol, point_seed, corrupt_analytic),
    };
    match out {
        Ok(line) => {
            println!("OK {line}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
