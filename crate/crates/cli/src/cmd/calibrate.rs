use std::path::PathBuf;

use anyhow::{bail, Result};
use qreli_core::fmt::sig6;
use qreli_core::metrics::{bin_shift, ece, fit_temperature, BinShiftReport, ReliabilityReport, DEFAULT_BINS, T_HI, T_LO};
use qreli_core::zeroshot::LogitSet;
use qreli_core::Rng;
use serde::Serialize;

use crate::cmd::check_fraction;
use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Logit bundle with `logits` and `labels`.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Fit a single temperature on a seeded split and report the held-out effect.
    #[arg(long)]
    pub fit_temperature: bool,
    /// Fraction of rows used for fitting; 1 fits and evaluates on all rows.
    #[arg(long, default_value_t = 0.5)]
    pub fit_split: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Second model's logits on the same rows, tracked through the first model's bins.
    #[arg(long)]
    pub bin_shift: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-ready reliability bins.
    #[arg(long)]
    pub bins_csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct TemperatureSection {
    t_star: f64,
    fit_rows: usize,
    eval_rows: usize,
    /// NLL on the fitting rows before and after scaling.
    nll_fit_before: f64,
    nll_fit_after: f64,
    eval_before: ReliabilityReport,
    eval_after: ReliabilityReport,
}

#[derive(Serialize)]
struct Report {
    input: ReliabilityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<TemperatureSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bin_shift: Option<BinShiftReport>,
}

fn temperature(l: &LogitSet, args: &Args) -> Result<TemperatureSection> {
    check_fraction("--fit-split", args.fit_split)?;
    let n = l.n();
    let (fit_rows, eval_rows): (Vec<usize>, Vec<usize>) = if args.fit_split == 1.0 {
        ((0..n).collect(), (0..n).collect())
    } else {
        let perm = Rng::new(args.seed).permutation(n);
        let k = (args.fit_split * n as f64).round() as usize;
        if k == 0 || k == n {
            bail!("--fit-split {} leaves an empty side with {n} rows", args.fit_split);
        }
        (perm[..k].to_vec(), perm[k..].to_vec())
    };
    let fit_set = l.select(&fit_rows);
    let eval_set = l.select(&eval_rows);
    let fit = fit_temperature(&fit_set, T_LO, T_HI)?;
    Ok(TemperatureSection {
        t_star: fit.t_star,
        fit_rows: fit_rows.len(),
        eval_rows: eval_rows.len(),
        nll_fit_before: fit.nll_before,
        nll_fit_after: fit.nll_after,
        eval_before: ece(&eval_set, args.bins)?,
        eval_after: ece(&eval_set.scaled(fit.t_star), args.bins)?,
    })
}

fn bin_rows(set: &str, r: &ReliabilityReport) -> Vec<Vec<String>> {
    r.bins
        .iter()
        .enumerate()
        .map(|(i, b)| {
            vec![
                set.to_owned(),
                i.to_string(),
                sig6(b.lo),
                sig6(b.hi),
                b.count.to_string(),
                sig6(b.mean_confidence),
                sig6(b.empirical_accuracy),
            ]
        })
        .collect()
}

pub fn run(args: Args) -> Result<()> {
    let mut inputs = vec![args.logits.as_path()];
    if let Some(p) = &args.bin_shift {
        inputs.push(p);
    }
    let manifest = RunManifest::new("calibrate", &args, args.fit_temperature.then_some(args.seed), &inputs)?;
    let l = LogitSet::from_bundle(&io::read_bundle(&args.logits)?)?;

    let report = Report {
        input: ece(&l, args.bins)?,
        temperature: if args.fit_temperature { Some(temperature(&l, &args)?) } else { None },
        bin_shift: match &args.bin_shift {
            Some(p) => Some(bin_shift(&l, &LogitSet::from_bundle(&io::read_bundle(p)?)?, args.bins)?),
            None => None,
        },
    };
    io::write_json(&args.out, &report, &manifest)?;

    if let Some(path) = &args.bins_csv {
        let mut rows = bin_rows("input", &report.input);
        if let Some(t) = &report.temperature {
            rows.extend(bin_rows("eval_before", &t.eval_before));
            rows.extend(bin_rows("eval_after", &t.eval_after));
        }
        let header = ["set", "bin", "lo", "hi", "count", "mean_confidence", "empirical_accuracy"];
        io::write_csv(path, &header, &rows, &manifest)?;
    }
    Ok(())
}
