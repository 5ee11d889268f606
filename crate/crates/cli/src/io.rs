//! File access for the subcommands. Failures to read or write a path are
//! wrapped in [`IoFailure`] so `main` can map them to exit status 2; anything
//! else (malformed input, bad flags, failed checks) exits with 1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qreli_core::bundle::{decode_bundle, encode_bundle, WriteOptions};
use qreli_core::TensorBundle;
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Debug)]
pub struct IoFailure {
    pub path: PathBuf,
    pub source: std::io::Error,
}

impl fmt::Display for IoFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot access {}", self.path.display())
    }
}

impl std::error::Error for IoFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<IoFailure>()) {
        2
    } else {
        1
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        IoFailure {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        IoFailure {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| {
        IoFailure {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

pub fn read_bundle(path: &Path) -> Result<TensorBundle> {
    let bytes = read_bytes(path)?;
    decode_bundle(&bytes).with_context(|| format!("reading bundle {}", path.display()))
}

/// Writes `bundle` with the run manifest stored under meta `run_manifest`.
pub fn write_bundle(path: &Path, mut bundle: TensorBundle, manifest: &RunManifest) -> Result<()> {
    bundle.set_meta("run_manifest", manifest.to_json());
    let bytes = encode_bundle(&bundle, WriteOptions::default())
        .with_context(|| format!("encoding bundle {}", path.display()))?;
    write_bytes(path, &bytes)
}

/// Pretty JSON with the run manifest added as a top-level `run_manifest` field.
pub fn write_json(path: &Path, value: &impl Serialize, manifest: &RunManifest) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("run_manifest".into(), serde_json::to_value(manifest)?);
        }
        None => anyhow::bail!("internal: JSON report is not an object"),
    }
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// CSV text whose first line is `# run_manifest=<json>`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], manifest: &RunManifest) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    let mut out = format!("# run_manifest={}\n", manifest.to_json()).into_bytes();
    out.extend_from_slice(&body);
    write_bytes(path, &out)
}

/// Header and records of a CSV written by [`write_csv`] (comment lines skipped).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .with_context(|| format!("reading CSV header of {}", path.display()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// `a/b/name.ext` → `name`.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
