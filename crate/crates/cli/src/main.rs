//! `qreli`: quantization-reliability experiments over exported tensor bundles.

mod cmd;
mod io;
mod manifest;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "qreli", version, about = "Fake quantization, desk-scale QAT, calibration, OOD and spectral metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fake-quantize tensors of a bundle and optionally verify the unique-value limit.
    Quantize(cmd::quantize::Args),
    /// Zero-shot logits and accuracy from image and class-text embeddings.
    Zeroshot(cmd::zeroshot::Args),
    /// Reliability bins, ECE/NLL, temperature fitting and bin-wise shift.
    Calibrate(cmd::calibrate::Args),
    /// Score ID and OOD sets and report AUROC / FPR@95TPR.
    Ood(cmd::ood::Args),
    /// Quantization-aware training of a head over frozen embeddings.
    Qat(cmd::qat::Args),
    /// Fourier spectra of feature maps and relative spectral error.
    Spectral(cmd::spectral::Args),
    /// Merge result CSVs into one sorted table, optionally against a baseline.
    Report(cmd::report::Args),
    /// Write a seeded synthetic fixture (embeddings, head, feature maps).
    Synth(cmd::synth::Args),
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("QRELI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("QRELI_THREADS={raw:?} is not a thread count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Quantize(a) => cmd::quantize::run(a),
        Command::Zeroshot(a) => cmd::zeroshot::run(a),
        Command::Calibrate(a) => cmd::calibrate::run(a),
        Command::Ood(a) => cmd::ood::run(a),
        Command::Qat(a) => cmd::qat::run(a),
        Command::Spectral(a) => cmd::spectral::run(a),
        Command::Report(a) => cmd::report::run(a),
        Command::Synth(a) => cmd::synth::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // help and version go to stdout with status 0
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(io::exit_code(&e))
        }
    }
}
