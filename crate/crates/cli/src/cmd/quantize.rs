use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use qreli_core::bundle::Array;
use qreli_core::quantize::{
    compute_qparams, fake_quantize, verify_unique_values, Calibration, Granularity, QuantConfig, QuantParams,
};
use qreli_core::Tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Input bundle.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Tensor to quantize; repeat for several.
    #[arg(long = "tensor", required = true)]
    pub tensors: Vec<String>,
    #[arg(long)]
    pub bits: u32,
    /// Symmetric grid (zero point 0); asymmetric otherwise.
    #[arg(long)]
    pub symmetric: bool,
    /// `per-tensor`, `per-channel` (axis 0) or `per-channel:AXIS`.
    #[arg(long, default_value = "per-tensor")]
    pub granularity: String,
    /// `minmax` or `percentile:P` with P in (0, 1].
    #[arg(long, default_value = "minmax")]
    pub calibration: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Count unique values per quantization group and write `<out>.verify.json`.
    #[arg(long)]
    pub verify: bool,
}

fn parse_granularity(s: &str) -> Result<Granularity> {
    match s.split_once(':') {
        None if s == "per-tensor" => Ok(Granularity::PerTensor),
        None if s == "per-channel" => Ok(Granularity::PerChannel(0)),
        Some(("per-channel", axis)) => Ok(Granularity::PerChannel(
            axis.parse().with_context(|| format!("bad channel axis {axis:?}"))?,
        )),
        _ => bail!("unknown granularity {s:?}; use per-tensor or per-channel[:AXIS]"),
    }
}

fn parse_calibration(s: &str) -> Result<Calibration> {
    match s.split_once(':') {
        None if s == "minmax" => Ok(Calibration::MinMax),
        Some(("percentile", p)) => Ok(Calibration::Percentile(
            p.parse().with_context(|| format!("bad percentile {p:?}"))?,
        )),
        _ => bail!("unknown calibration {s:?}; use minmax or percentile:P"),
    }
}

#[derive(Serialize)]
struct TensorVerification {
    tensor: String,
    bits: u32,
    groups: usize,
    /// Largest distinct-value count over the quantization groups.
    max_unique_per_group: usize,
    limit: u64,
    pass: bool,
}

#[derive(Serialize)]
struct Verification {
    pass: bool,
    tensors: Vec<TensorVerification>,
}

/// Distinct-value check on each quantization group separately, since
/// per-channel groups each have their own grid.
fn verify(name: &str, q: &Tensor<f32>, qp: &QuantParams, bits: u32) -> TensorVerification {
    let shape = q.shape();
    let (stride, groups) = match qp.axis {
        Some(a) => (shape[a + 1..].iter().product::<usize>(), shape[a]),
        None => (1, 1),
    };
    let mut slices = vec![Vec::new(); groups];
    for (i, &v) in q.data().iter().enumerate() {
        slices[(i / stride) % groups].push(v);
    }
    let reports: Vec<_> = slices
        .into_iter()
        .map(|s| verify_unique_values(&Tensor::vector(s), bits))
        .collect();
    TensorVerification {
        tensor: name.into(),
        bits,
        groups,
        max_unique_per_group: reports.iter().map(|r| r.unique_count).max().unwrap_or(0),
        limit: reports.first().map_or(1 << bits, |r| r.limit),
        pass: reports.iter().all(|r| r.pass),
    }
}

pub fn run(args: Args) -> Result<()> {
    let cfg = QuantConfig::new(
        args.bits,
        args.symmetric,
        parse_granularity(&args.granularity)?,
        parse_calibration(&args.calibration)?,
    )?;
    let manifest = RunManifest::new("quantize", &args, None, &[&args.input])?;
    let mut bundle = io::read_bundle(&args.input)?;

    let results = args
        .tensors
        .par_iter()
        .map(|name| {
            let t = bundle.f32(name)?;
            let (qp, degenerate) =
                compute_qparams(t, &cfg).with_context(|| format!("calibrating tensor {name:?}"))?;
            for d in &degenerate {
                log::warn!("tensor {name:?} group {}: zero range, scale set to 1.0", d.group);
            }
            let q = fake_quantize(t, &qp)?;
            Ok((name.clone(), q, qp))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut verification = Verification {
        pass: true,
        tensors: Vec::new(),
    };
    for (name, q, qp) in results {
        if args.verify {
            let v = verify(&name, &q, &qp, args.bits);
            verification.pass &= v.pass;
            verification.tensors.push(v);
        }
        bundle.set_meta(
            format!("quant.{name}"),
            serde_json::json!({ "config": cfg, "params": qp }).to_string(),
        );
        bundle.entries.insert(name, Array::F32(q));
    }
    io::write_bundle(&args.out, bundle, &manifest)?;

    if args.verify {
        let path = args.out.with_extension("verify.json");
        io::write_json(&path, &verification, &manifest)?;
        if !verification.pass {
            let bad: Vec<&str> = verification
                .tensors
                .iter()
                .filter(|t| !t.pass)
                .map(|t| t.tensor.as_str())
                .collect();
            bail!("unique-value verification failed for {bad:?}; see {}", path.display());
        }
    }
    Ok(())
}
