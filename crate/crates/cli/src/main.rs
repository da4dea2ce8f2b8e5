use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softmark_core::Error;

mod commands;

/// Soft-label watermarking toolkit: embed watermarks into classifier output
/// distributions, attack them, and verify ownership.
#[derive(Parser)]
#[command(name = "softmark", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a clean adversary model from scratch.
    Pretrain {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a watermark and co-train its detector.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained adversary checkpoint; trained in-place when omitted.
        #[arg(long)]
        adversary: Option<PathBuf>,
    },
    /// Run a removal attack against a watermarked model.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Watermarked victim checkpoint.
        #[arg(long)]
        victim: PathBuf,
        /// Co-trained detector checkpoint.
        #[arg(long)]
        detector: PathBuf,
        /// Clean reference (adversary) checkpoint.
        #[arg(long)]
        reference: PathBuf,
        /// Override the attack kind from the config.
        #[arg(long)]
        kind: Option<String>,
        /// Distillation: override the student architecture.
        #[arg(long)]
        student: Option<String>,
        /// Pruning: override the fraction of weights to zero.
        #[arg(long)]
        ratio: Option<f32>,
    },
    /// Check whether a suspect model carries the watermark.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        suspect: PathBuf,
        /// Clean reference checkpoint for the balanced verification set.
        #[arg(long)]
        reference: PathBuf,
        /// Ownership threshold on watermark accuracy, percent.
        #[arg(long, default_value_t = 85.0)]
        tau: f64,
    },
    /// Aggregate run directories into summary tables.
    Report {
        /// Run directories containing summary.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.json and report.csv to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed once per threshold value and tabulate the outcomes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// Re-embed/ownership thresholds to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![75.0, 80.0, 85.0, 90.0, 95.0])]
        taus: Vec<f32>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out } => commands::pretrain(&config, &out),
        Command::Embed {
            config,
            out,
            adversary,
        } => commands::embed(&config, &out, adversary.as_deref()),
        Command::Attack {
            config,
            out,
            victim,
            detector,
            reference,
            kind,
            student,
            ratio,
        } => commands::attack(
            &config,
            &out,
            &victim,
            &detector,
            &reference,
            kind.as_deref(),
            student.as_deref(),
            ratio,
        ),
        Command::Verify {
            config,
            detector,
            suspect,
            reference,
            tau,
        } => commands::verify(&config, &detector, &suspect, &reference, tau),
        Command::Report { runs, out } => commands::report(&runs, out.as_deref()),
        Command::Sweep {
            config,
            out,
            adversary,
            taus,
        } => commands::sweep(&config, &out, adversary.as_deref(), &taus),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
