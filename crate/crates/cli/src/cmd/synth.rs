use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use qreli_core::fixtures::{feature_maps, gaussian_task, GaussianTaskSpec};
use qreli_core::qat::light_qat_config;
use qreli_core::spectral::parse_grid;
use qreli_core::{Tensor, TensorBundle};
use serde::Serialize;

use crate::io::{self, IoFailure};
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Directory to create the fixture in.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval: usize,
    /// Rows drawn from unseen classes for the OOD set.
    #[arg(long, default_value_t = 500)]
    pub ood: usize,
    #[arg(long, default_value_t = 10)]
    pub unseen_classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 4.0)]
    pub mixing: f64,
    #[arg(long, default_value_t = 1.0)]
    pub outlier_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub outlier_channels: usize,
    /// Feature-map samples.
    #[arg(long, default_value_t = 8)]
    pub maps: usize,
    #[arg(long, default_value = "7x7")]
    pub grid: String,
    #[arg(long, default_value_t = 16)]
    pub map_channels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub map_noise: f64,
}

pub fn run(args: Args) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    let manifest = RunManifest::new("synth", &args, Some(args.seed), &[])?;
    fs::create_dir_all(&args.out_dir).map_err(|source| IoFailure {
        path: args.out_dir.clone(),
        source,
    })?;
    let path = |name: &str| args.out_dir.join(name);

    let task = gaussian_task(&GaussianTaskSpec {
        dim: args.dim,
        classes: args.classes,
        train: args.train,
        eval: args.eval,
        noise: args.noise,
        mixing: args.mixing,
        outlier_gain: args.outlier_gain,
        outlier_channels: args.outlier_channels,
        seed: args.seed,
    });
    io::write_bundle(&path("train.qrb"), task.train.to_bundle(), &manifest)?;
    let mut id = task.eval.to_bundle();
    id.set_meta("method", "fp32");
    io::write_bundle(&path("id.qrb"), id, &manifest)?;

    let (ood, negatives) = task.ood(args.ood, args.unseen_classes, args.seed);
    io::write_bundle(&path("ood.qrb"), ood.to_bundle(), &manifest)?;
    io::write_bundle(
        &path("negatives.qrb"),
        TensorBundle::new().with("negative_text", negatives),
        &manifest,
    )?;
    io::write_bundle(
        &path("head.qrb"),
        TensorBundle::new()
            .with("layer0.weight", task.head.clone())
            .with("layer0.bias", Tensor::vector(vec![0.0f32; args.dim])),
        &manifest,
    )?;

    let mut maps = TensorBundle::new().with("tokens", feature_maps(args.maps, grid, args.map_channels, args.map_noise, args.seed).tokens);
    maps.set_meta("grid", args.grid.clone());
    io::write_bundle(&path("maps.qrb"), maps, &manifest)?;

    io::write_bytes(&path("qat.toml"), light_toml(args.dim, args.seed).as_bytes())?;
    Ok(())
}

/// Light QAT schedule at w4 (FP32 activations) for `qreli qat --init head.qrb`.
/// Written by hand so the learning rates read as typed instead of as widened f32.
fn light_toml(dim: usize, seed: u64) -> String {
    let c = light_qat_config(dim, 4, qreli_core::qat::FULL_PRECISION_BITS, seed);
    format!(
        "layer_dims = [{dim}, {dim}]\n\
         bits_w = {}\n\
         bits_a = {}\n\
         use_lsq = {}\n\
         lora_rank = {}\n\
         lora_alpha = {:?}\n\
         lr_base = {:e}\n\
         lr_lsq_scale = {:e}\n\
         steps = {}\n\
         batch = {}\n\
         unique_samples = 100\n\
         seed = {seed}\n\
         init = \"identity\"\n\
         \n\
         [optimizer]\n\
         beta1 = 0.9\n\
         beta2 = 0.999\n\
         eps = 1e-8\n\
         weight_decay = 0.0\n\
         \n\
         [distill]\n\
         kind = \"none\"\n",
        c.bits_w, c.bits_a, c.use_lsq, c.lora_rank, c.lora_alpha, c.lr_base, c.lr_lsq_scale, c.steps, c.batch
    )
}
