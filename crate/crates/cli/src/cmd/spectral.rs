use std::path::PathBuf;

use anyhow::{bail, Result};
use qreli_core::fmt::sig6;
use qreli_core::quantize::QuantConfig;
use qreli_core::spectral::{band_energy, parse_grid, proxy_quantize, rse, spectrum, FeatureMapSet, DEFAULT_EPSILON};
use qreli_core::TensorBundle;
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// FP32 feature maps (`tokens`, N×T×D).
    #[arg(long)]
    pub base: PathBuf,
    /// Quantized-model feature maps on the same inputs.
    #[arg(long, required_unless_present = "proxy_bits", conflicts_with = "proxy_bits")]
    pub quant: Option<PathBuf>,
    /// Build the quantized maps by fake-quantizing --base per sample at this bit-width.
    #[arg(long)]
    pub proxy_bits: Option<u32>,
    /// Token grid `HxW`; defaults to meta `grid` of the bundle.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f32,
    #[arg(long)]
    pub out: PathBuf,
    /// Low/mid/high band means of both spectra and the RSE map.
    #[arg(long)]
    pub bands: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    if !(args.epsilon > 0.0) {
        bail!("--epsilon must be positive");
    }
    let grid = args.grid.as_deref().map(parse_grid).transpose()?;
    let mut inputs = vec![args.base.as_path()];
    if let Some(p) = &args.quant {
        inputs.push(p);
    }
    let manifest = RunManifest::new("spectral", &args, None, &inputs)?;

    let base = FeatureMapSet::from_bundle(&io::read_bundle(&args.base)?, grid)?;
    let (quant, mode) = match (&args.quant, args.proxy_bits) {
        (Some(p), _) => (FeatureMapSet::from_bundle(&io::read_bundle(p)?, Some(grid.unwrap_or(base.grid)))?, "exported"),
        (None, Some(bits)) => (proxy_quantize(&base, &QuantConfig::activations(bits))?, "proxy"),
        (None, None) => bail!("need --quant or --proxy-bits"),
    };
    if quant.grid != base.grid {
        bail!("grids differ: base {:?}, quant {:?}", base.grid, quant.grid);
    }
    let s_base = spectrum(&base)?;
    let s_quant = spectrum(&quant)?;
    let r = rse(&s_base, &s_quant, args.epsilon)?;

    let mut out = TensorBundle::new()
        .with("base_spectrum", s_base.mag.clone())
        .with("quant_spectrum", s_quant.mag.clone())
        .with("rse", r.rse.clone());
    out.set_meta("grid", format!("{}x{}", base.grid.0, base.grid.1));
    out.set_meta("epsilon", args.epsilon.to_string());
    out.set_meta("quant_mode", mode);
    if let Some(bits) = args.proxy_bits {
        out.set_meta("proxy_bits", bits.to_string());
    }
    io::write_bundle(&args.out, out, &manifest)?;

    if let Some(path) = &args.bands {
        let mut rows = Vec::new();
        for (name, map) in [("base_spectrum", &s_base.mag), ("quant_spectrum", &s_quant.mag), ("rse", &r.rse)] {
            let b = band_energy(map)?;
            rows.push(vec![name.to_owned(), sig6(b.low), sig6(b.mid), sig6(b.high)]);
        }
        io::write_csv(path, &["map", "low", "mid", "high"], &rows, &manifest)?;
    }
    Ok(())
}
