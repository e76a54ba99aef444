//! File formats: labeled CSV datasets, run manifests, metric reports, the
//! per-step log, and plot-data CSVs.
//!
//! Dataset files are plain CSV with header `label,x1,...,xd`, UTF-8,
//! line-feed endings. Floats print in shortest round-trip form, so a
//! write/read cycle is bit-exact and identical runs produce identical
//! bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ConfigMap;
use crate::metrics::MetricReport;
use crate::numerics::Point;
use crate::pipeline::StepRecord;
use crate::{Error, Result};

/// Write per-class points as `label,x1,...,xd` rows in class order.
pub fn write_dataset_csv(path: &Path, per_class: &[Vec<Point>]) -> Result<()> {
    let dim = per_class
        .iter()
        .find_map(|c| c.first().map(|p| p.len()))
        .ok_or(Error::EmptyInput("dataset to write"))?;
    let mut out = String::new();
    out.push_str("label");
    for i in 1..=dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (label, points) in per_class.iter().enumerate() {
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            out.push_str(&label.to_string());
            for v in p.iter() {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Shortest representation that round-trips through `f64::from_str`.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Read a labeled CSV dataset back into per-class points. Labels must form
/// a contiguous `0..C` set.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<Vec<Point>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: expected header `label,x1,...`, got `{header}`",
            path.display()
        )));
    }
    let dim = cols.len() - 1;
    let mut by_label: BTreeMap<usize, Vec<Point>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Data(format!(
                "{} line {}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::Data(format!(
                "{} line {}: bad label `{}`",
                path.display(),
                lineno + 2,
                fields[0]
            ))
        })?;
        let mut coords = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {}: bad number `{f}`",
                    path.display(),
                    lineno + 2
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{} line {}: non-finite coordinate",
                    path.display(),
                    lineno + 2
                )));
            }
            coords.push(v);
        }
        by_label
            .entry(label)
            .or_default()
            .push(Point::from_vec(coords));
    }
    if by_label.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let max_label = *by_label.keys().last().unwrap();
    let mut per_class = Vec::with_capacity(max_label + 1);
    for label in 0..=max_label {
        match by_label.remove(&label) {
            Some(points) => per_class.push(points),
            None => {
                return Err(Error::Data(format!(
                    "{}: labels must be contiguous; class {label} has no rows",
                    path.display()
                )))
            }
        }
    }
    Ok(per_class)
}

/// Provenance record emitted next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// The effective configuration (file values with overrides applied).
    pub config: ConfigMap,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_hash: u64, config: ConfigMap) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: format!("{config_hash:016x}"),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn finish(&mut self) {
        self.finished_unix = unix_now();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        write_atomic(path, json.as_bytes())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_metrics_json(path: &Path, report: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    write_atomic(path, json.as_bytes())
}

pub fn read_metrics_json(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Per-step diagnostics as CSV: class, sample, t, rho_t, transport value
/// (empty outside the window), gradient norm, label-fallback flag.
pub fn write_step_log(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut out = String::from("class,sample,t,rho_t,ot_value,grad_norm,label_fallback\n");
    for rec in steps {
        let d = rec.diagnostics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.class,
            rec.sample,
            d.t,
            format_float(d.rho_t),
            d.ot_value.map(format_float).unwrap_or_default(),
            format_float(d.grad_norm),
            d.label_fallback,
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Per-class plot data: target and surrogate coordinates with a source
/// column, one file per class.
pub fn write_plot_csv(
    dir: &Path,
    label: usize,
    target: &[Point],
    surrogate: &[Point],
) -> Result<PathBuf> {
    let dim = target
        .first()
        .or(surrogate.first())
        .map(|p| p.len())
        .ok_or(Error::EmptyInput("plot data"))?;
    let mut out = String::from("source,label");
    for i in 1..=dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (source, points) in [("target", target), ("surrogate", surrogate)] {
        for p in points {
            out.push_str(source);
            out.push_str(&format!(",{label}"));
            for v in p.iter() {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
    }
    let path = dir.join(format!("class_{label}.csv"));
    write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

/// Serialized form of one class's quantized target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedClassFile {
    pub label: usize,
    /// Support points, one coordinate row per point.
    pub support: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
    /// Cluster sizes for count-based quantizers (empty otherwise).
    pub counts: Vec<usize>,
}

/// Write per-class quantized targets for reuse across runs.
pub fn write_quantized_json(
    path: &Path,
    per_class: &[crate::quantization::QuantizedTarget],
) -> Result<()> {
    let classes: Vec<QuantizedClassFile> = per_class
        .iter()
        .enumerate()
        .map(|(label, qt)| QuantizedClassFile {
            label,
            support: qt.support().iter().map(|p| p.iter().cloned().collect()).collect(),
            masses: qt.masses().to_vec(),
            counts: qt.counts().to_vec(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&classes)
        .map_err(|e| Error::Data(format!("quantized-target serialization: {e}")))?;
    write_atomic(path, json.as_bytes())
}

/// Read quantized targets back as per-class weighted point sets.
pub fn read_quantized_json(
    path: &Path,
) -> Result<Vec<crate::transport::DiscreteDistribution>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let classes: Vec<QuantizedClassFile> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(classes.len());
    for (i, class) in classes.into_iter().enumerate() {
        if class.label != i {
            return Err(Error::Data(format!(
                "{}: class labels must be contiguous, got {} at position {i}",
                path.display(),
                class.label
            )));
        }
        let points: Vec<Point> = class.support.into_iter().map(Point::from_vec).collect();
        out.push(crate::transport::DiscreteDistribution::new(
            points,
            class.masses,
        )?);
    }
    Ok(out)
}

/// Dump a dense matrix (e.g. a transport plan) as a plain CSV of rows.
pub fn write_matrix_csv(path: &Path, m: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_float(m[(i, j)]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Write through a temp file then rename, so failed runs do not leave
/// truncated artifacts behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
