use std::path::PathBuf;

use anyhow::Result;
use qreli_core::metrics::{ece, ReliabilityReport, DEFAULT_BINS};
use qreli_core::zeroshot::{accuracy, zero_shot_logits, EmbeddingSet};
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Embedding bundle with `image`, `labels`, `class_text`.
    #[arg(long)]
    pub emb: PathBuf,
    /// Logit bundle to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Accuracy / calibration summary JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Serialize)]
struct Report {
    n: usize,
    classes: usize,
    logit_scale: f32,
    accuracy: f64,
    ece: f64,
    nll: f64,
    reliability: ReliabilityReport,
}

pub fn run(args: Args) -> Result<()> {
    let manifest = RunManifest::new("zeroshot", &args, None, &[&args.emb])?;
    let set = EmbeddingSet::from_bundle(&io::read_bundle(&args.emb)?)?;
    let logits = zero_shot_logits(&set)?;
    let mut out = logits.to_bundle();
    out.set_meta("logit_scale", set.logit_scale.to_string());
    io::write_bundle(&args.out, out, &manifest)?;

    if let Some(path) = &args.report {
        let reliability = ece(&logits, args.bins)?;
        let report = Report {
            n: logits.n(),
            classes: logits.classes(),
            logit_scale: set.logit_scale,
            accuracy: accuracy(&logits)?,
            ece: reliability.ece,
            nll: reliability.nll,
            reliability,
        };
        io::write_json(path, &report, &manifest)?;
    }
    Ok(())
}
