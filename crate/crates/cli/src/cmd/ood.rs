use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use qreli_core::fmt::sig6;
use qreli_core::ood::{evaluate, score, OodReport, ScoreInput, ScorerConfig, ScorerKind};
use qreli_core::zeroshot::{EmbeddingSet, LogitSet};
use qreli_core::TensorBundle;
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Msp,
    Energy,
    Mcm,
    GenericNegative,
    Neglabel,
}

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// In-distribution bundle: embeddings, or logits for msp/energy.
    #[arg(long)]
    pub id: PathBuf,
    /// Out-of-distribution bundle, same kind as --id.
    #[arg(long)]
    pub ood: PathBuf,
    #[arg(long, value_enum, default_value = "msp")]
    pub scorer: Scorer,
    /// Softmax temperature over cosine similarities (mcm, generic-negative, neglabel).
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Energy temperature.
    #[arg(long = "temperature", default_value_t = 1.0)]
    pub energy_t: f64,
    /// Bundle with negative concept embeddings (generic-negative, neglabel).
    #[arg(long)]
    pub neg: Option<PathBuf>,
    #[arg(long, default_value = "negative_text")]
    pub neg_tensor: String,
    /// Scenario label; defaults to the OOD file stem.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Method label; defaults to meta `method` of the ID bundle, then its file stem.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

enum Loaded {
    Embeddings(EmbeddingSet),
    Logits(LogitSet),
}

impl Loaded {
    fn read(path: &Path) -> Result<(Self, TensorBundle)> {
        let b = io::read_bundle(path)?;
        let set = if b.contains("logits") {
            Loaded::Logits(LogitSet::from_bundle(&b)?)
        } else {
            Loaded::Embeddings(EmbeddingSet::from_bundle(&b).with_context(|| format!("{}", path.display()))?)
        };
        Ok((set, b))
    }

    fn input(&self) -> ScoreInput<'_> {
        match self {
            Loaded::Embeddings(e) => ScoreInput::Embeddings(e),
            Loaded::Logits(l) => ScoreInput::Logits(l),
        }
    }
}

pub const HEADER: [&str; 5] = ["scenario", "method", "scorer", "auroc", "fpr95"];

pub fn run(args: Args) -> Result<()> {
    let kind = match args.scorer {
        Scorer::Msp => ScorerKind::Msp,
        Scorer::Energy => ScorerKind::Energy { t: args.energy_t },
        Scorer::Mcm => ScorerKind::Mcm { tau: args.tau },
        Scorer::GenericNegative => ScorerKind::GenericNegative { tau: args.tau },
        Scorer::Neglabel => ScorerKind::NegLabel { tau: args.tau },
    };
    let mut inputs = vec![args.id.as_path(), args.ood.as_path()];
    if let Some(p) = &args.neg {
        inputs.push(p);
    }
    let manifest = RunManifest::new("ood", &args, None, &inputs)?;

    let mut cfg = ScorerConfig::new(kind);
    if let Some(p) = &args.neg {
        let b = io::read_bundle(p)?;
        cfg = cfg.with_negatives(b.f32(&args.neg_tensor)?)?;
    }
    let ((id, id_bundle), (ood, _)) = (Loaded::read(&args.id)?, Loaded::read(&args.ood)?);
    let (id_scores, ood_scores) = rayon::join(|| score(&cfg, id.input()), || score(&cfg, ood.input()));
    let report: OodReport = evaluate(&id_scores?, &ood_scores?)?;

    let scenario = args.scenario.clone().unwrap_or_else(|| io::stem(&args.ood));
    let method = args
        .method
        .clone()
        .or_else(|| id_bundle.meta.get("method").cloned())
        .unwrap_or_else(|| io::stem(&args.id));
    let row = vec![
        scenario,
        method,
        kind.name().to_owned(),
        sig6(report.auroc),
        sig6(report.fpr_at_95tpr),
    ];
    io::write_csv(&args.out, &HEADER, &[row], &manifest)
}
