pub mod calibrate;
pub mod ood;
pub mod qat;
pub mod quantize;
pub mod report;
pub mod spectral;
pub mod synth;
pub mod zeroshot;

use anyhow::{bail, Result};

pub fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        bail!("{name} must be in (0, 1], got {v}");
    }
    Ok(())
}
