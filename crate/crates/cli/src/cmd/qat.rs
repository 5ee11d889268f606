use std::path::PathBuf;

use anyhow::{Context, Result};
use qreli_core::fmt::sig6;
use qreli_core::qat::{self, QatConfig, QatError, QatState, TrainOutcome};
use qreli_core::zeroshot::EmbeddingSet;
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// TOML file with QatConfig fields.
    #[arg(long)]
    pub config: PathBuf,
    /// Training embeddings.
    #[arg(long)]
    pub train: PathBuf,
    /// Evaluation embedding bundles, comma separated; named by file stem.
    #[arg(long, value_delimiter = ',')]
    pub eval: Vec<PathBuf>,
    /// Steps (counted within this run) at which to evaluate; default `0,steps`.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<u64>,
    /// Initial head: `layer{l}.weight`/`layer{l}.bias`, or a state written by this command to resume.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Final state bundle.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    /// Per-step training loss CSV.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    args: &'a Args,
    qat: &'a QatConfig,
}

fn write_outputs(args: &Args, cfg: &QatConfig, outcome: &TrainOutcome, manifest: &RunManifest) -> Result<()> {
    let mut bundle = outcome.state.to_bundle(cfg);
    bundle.set_meta("qat_config", serde_json::to_string(cfg)?);
    io::write_bundle(&args.out, bundle, manifest)?;
    if let Some(path) = &args.timeline {
        let header = qat::TimelineRow::CSV_HEADER.split(',').collect::<Vec<_>>();
        let rows: Vec<Vec<String>> = outcome
            .timeline
            .iter()
            .map(|r| r.csv_line().split(',').map(str::to_owned).collect())
            .collect();
        io::write_csv(path, &header, &rows, manifest)?;
    }
    if let Some(path) = &args.losses {
        let first = outcome.state.step - outcome.losses.len() as u64;
        let rows: Vec<Vec<String>> = outcome
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| {
                vec![
                    (first + i as u64).to_string(),
                    sig6(l.total),
                    sig6(l.task),
                    sig6(l.distill),
                ]
            })
            .collect();
        io::write_csv(path, &["step", "total", "task", "distill"], &rows, manifest)?;
    }
    Ok(())
}

pub fn run(args: Args) -> Result<()> {
    let text = io::read_text(&args.config)?;
    let mut cfg: QatConfig =
        toml::from_str(&text).with_context(|| format!("parsing QAT config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let checkpoints = if args.checkpoints.is_empty() {
        vec![0, cfg.steps]
    } else {
        args.checkpoints.clone()
    };

    let mut inputs = vec![args.config.as_path(), args.train.as_path()];
    inputs.extend(args.eval.iter().map(PathBuf::as_path));
    if let Some(p) = &args.init {
        inputs.push(p);
    }
    let resolved = Resolved { args: &args, qat: &cfg };
    let manifest = RunManifest::new("qat", &resolved, Some(cfg.seed), &inputs)?;

    let train_set = EmbeddingSet::from_bundle(&io::read_bundle(&args.train)?)
        .with_context(|| format!("training set {}", args.train.display()))?;
    let eval_sets = args
        .eval
        .iter()
        .map(|p| {
            let set = EmbeddingSet::from_bundle(&io::read_bundle(p)?).with_context(|| format!("{}", p.display()))?;
            Ok((io::stem(p), set))
        })
        .collect::<Result<Vec<_>>>()?;
    let init = match &args.init {
        Some(p) => QatState::from_bundle(&cfg, &io::read_bundle(p)?)?,
        None => QatState::init(&cfg)?,
    };

    match qat::train(&cfg, init, &train_set, &eval_sets, &checkpoints) {
        Ok(outcome) => write_outputs(&args, &cfg, &outcome, &manifest),
        Err(QatError::NumericalDivergence {
            stage,
            step,
            last_good: Some(last),
        }) => {
            write_outputs(&args, &cfg, &last, &manifest)?;
            anyhow::bail!("training diverged in {stage} at step {step}; last good state written to {}", args.out.display())
        }
        Err(e) => Err(e.into()),
    }
}
