use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use qreli_core::fmt::sig6;
use serde::Serialize;

use crate::io;
use crate::manifest::RunManifest;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Result CSVs with identical headers, each containing `scenario` and `method`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Merged CSV, sorted by (scenario, method).
    #[arg(long)]
    pub out: PathBuf,
    /// Pretty JSON of the same table.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Baseline CSV (e.g. the FP32 rows); adds `<metric>_rel_change = (v - base) / |base|`.
    #[arg(long)]
    pub delta: Option<PathBuf>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn load(paths: &[PathBuf]) -> Result<Table> {
    let mut table: Option<Table> = None;
    for p in paths {
        let (header, rows) = io::read_csv(p)?;
        match &mut table {
            None => table = Some(Table { header, rows }),
            Some(t) => {
                if t.header != header {
                    bail!(
                        "header mismatch: {} has {:?}, expected {:?}",
                        p.display(),
                        header,
                        t.header
                    );
                }
                t.rows.extend(rows);
            }
        }
    }
    table.ok_or_else(|| anyhow::anyhow!("no input files"))
}

fn rel_change(v: f64, base: f64) -> f64 {
    if v == base {
        0.0
    } else {
        (v - base) / base.abs()
    }
}

pub fn run(args: Args) -> Result<()> {
    let mut inputs: Vec<&std::path::Path> = args.inputs.iter().map(PathBuf::as_path).collect();
    if let Some(p) = &args.delta {
        inputs.push(p);
    }
    let manifest = RunManifest::new("report", &args, None, &inputs)?;

    let mut table = load(&args.inputs)?;
    let col = |name: &str| table.header.iter().position(|h| h == name);
    let (Some(si), Some(mi)) = (col("scenario"), col("method")) else {
        bail!("inputs need scenario and method columns, got {:?}", table.header);
    };
    // a column is numeric when every cell parses as a number
    let numeric: Vec<bool> = (0..table.header.len())
        .map(|c| c != si && c != mi && table.rows.iter().all(|r| r[c].trim().parse::<f64>().is_ok()))
        .collect();
    table.rows.sort_by(|a, b| (&a[si], &a[mi]).cmp(&(&b[si], &b[mi])));

    let mut header = table.header.clone();
    let mut rows = table.rows.clone();
    let metric_cols: Vec<usize> = (0..numeric.len()).filter(|&c| numeric[c]).collect();
    if let Some(path) = &args.delta {
        let base = load(std::slice::from_ref(path))?;
        if base.header != table.header {
            bail!("header mismatch: baseline {} has {:?}, expected {:?}", path.display(), base.header, table.header);
        }
        // baseline rows are matched on every text column except the method
        let key = |r: &[String]| -> Vec<String> {
            (0..r.len()).filter(|&c| c != mi && !numeric[c]).map(|c| r[c].clone()).collect()
        };
        let mut lookup: BTreeMap<Vec<String>, &Vec<String>> = BTreeMap::new();
        for r in &base.rows {
            if lookup.insert(key(r), r).is_some() {
                bail!("baseline {} has duplicate rows for {:?}", path.display(), key(r));
            }
        }
        for &c in &metric_cols {
            header.push(format!("{}_rel_change", table.header[c]));
        }
        for r in &mut rows {
            let b = lookup.get(&key(r)).copied();
            let extra: Vec<String> = metric_cols
                .iter()
                .map(|&c| match b.and_then(|b| b[c].trim().parse::<f64>().ok()) {
                    Some(base) => sig6(rel_change(r[c].trim().parse().expect("numeric column"), base)),
                    None => String::new(),
                })
                .collect();
            r.extend(extra);
        }
    }

    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(&args.out, &header_refs, &rows, &manifest)?;

    if let Some(path) = &args.json {
        let n_orig = table.header.len();
        let json_rows: Vec<serde_json::Map<String, serde_json::Value>> = rows
            .iter()
            .map(|r| {
                header
                    .iter()
                    .zip(r)
                    .enumerate()
                    .map(|(c, (h, v))| {
                        let is_num = if c < n_orig { numeric[c] } else { true };
                        let value = match (is_num, v.trim().parse::<f64>()) {
                            (true, Ok(x)) => serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, Into::into),
                            (true, Err(_)) => serde_json::Value::Null,
                            (false, _) => v.clone().into(),
                        };
                        (h.clone(), value)
                    })
                    .collect()
            })
            .collect();
        io::write_json(path, &serde_json::json!({ "columns": header, "rows": json_rows }), &manifest)?;
    }
    Ok(())
}
