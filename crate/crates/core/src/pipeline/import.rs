//! Importer for per-shot CSV exports of the public multi-machine disruption
//! dataset.
//!
//! The export directory holds an index file (default `shots.csv`) with
//! columns `shot,machine,disruptive,disruption_time`, and one `<shot>.csv`
//! per discharge whose header names a time column plus signal columns. Each
//! standard channel is looked up through a list of accepted column names;
//! empty or non-numeric cells are treated as missing samples, so channels may
//! be sampled on different clocks.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{resample, RawSeries, ShotMeta, TIME_EPS};
use crate::domain::{Discharge, FeatureSchema, Machine, N_PHYSICS};
use crate::error::{Error, Result};

/// Accepted source column names per physics channel, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub channels: Vec<Vec<String>>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        let names: [&[&str]; N_PHYSICS] = [
            &["beta_p", "betap", "beta_P"],
            &["li", "l_i", "internal_inductance"],
            &["q95", "q_95"],
            &["n1_mode", "n_equal_1_mode", "n1rms", "n_equal_1_normalized"],
            &["greenwald_fraction", "Greenwald_fraction", "n_over_ncrit", "ngw"],
            &["lower_gap", "lowergap", "gapout"],
            &["kappa", "elongation"],
            &["ip_error_frac", "ip_error_fraction", "ip_error_normalized", "ip_error"],
            &["v_loop", "vloop", "v_loop_efit"],
        ];
        Self {
            channels: names
                .iter()
                .map(|alts| alts.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportConfig {
    pub index_file: String,
    pub time_column: String,
    /// Multiplier converting the export's time unit to milliseconds.
    pub time_scale_ms: f64,
    pub grid_step_ms: f64,
    pub columns: ColumnMapping,
}

impl Default for ImportConfig {
    fn default() -> Self {
        Self {
            index_file: "shots.csv".into(),
            time_column: "time".into(),
            time_scale_ms: 1000.0,
            grid_step_ms: 5.0,
            columns: ColumnMapping::default(),
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn read_index(path: &Path, cfg: &ImportConfig) -> Result<Vec<ShotMeta>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let (shot, machine, disruptive, dtime) = (col("shot")?, col("machine")?, col("disruptive")?, col("disruption_time")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let is_disruptive = parse_bool(field(disruptive)).ok_or_else(|| bad(format!("bad disruptive flag `{}`", field(disruptive))))?;
        let disruption_time_ms = if is_disruptive {
            let t: f64 = field(dtime)
                .parse()
                .map_err(|_| bad(format!("bad disruption time `{}`", field(dtime))))?;
            Some(t * cfg.time_scale_ms)
        } else {
            None
        };
        out.push(ShotMeta {
            id: field(shot).to_string(),
            machine: field(machine).parse::<Machine>().map_err(|e| bad(e.to_string()))?,
            disruptive: is_disruptive,
            disruption_time_ms,
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.into(),
        line,
        msg: e.to_string(),
    }
}

fn read_shot(path: &Path, cfg: &ImportConfig) -> Result<RawSeries> {
    let schema = FeatureSchema::standard();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let time_col = *index
        .get(cfg.time_column.as_str())
        .ok_or_else(|| Error::Schema(format!("{}: missing time column `{}`", path.display(), cfg.time_column)))?;
    let mut cols = Vec::with_capacity(N_PHYSICS);
    for (c, alts) in cfg.columns.channels.iter().enumerate() {
        let found = alts.iter().find_map(|a| index.get(a.as_str()).copied());
        cols.push(found.ok_or_else(|| {
            Error::Schema(format!(
                "{}: no column for channel `{}` (tried {})",
                path.display(),
                schema.channels()[c].name,
                alts.join(", ")
            ))
        })?);
    }
    let mut channels: Vec<Vec<(f64, f64)>> = vec![Vec::new(); N_PHYSICS];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let t: f64 = rec.get(time_col).unwrap_or("").trim().parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: i + 2,
            msg: format!("bad time value `{}`", rec.get(time_col).unwrap_or("")),
        })?;
        let t = t * cfg.time_scale_ms;
        for (c, &col) in cols.iter().enumerate() {
            if let Ok(v) = rec.get(col).unwrap_or("").trim().parse::<f64>() {
                if v.is_finite() && channels[c].last().is_none_or(|&(last, _)| t > last) {
                    channels[c].push((t, v));
                }
            }
        }
    }
    RawSeries::new(channels).map_err(|e| match e {
        Error::InsufficientData(msg) | Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads an export directory into gridded discharges (not truncated or
/// normalized; pass them through `prepare` and `NormStats` afterwards).
pub fn import_exports(dir: &Path, cfg: &ImportConfig) -> Result<Vec<Discharge>> {
    if cfg.columns.channels.len() != N_PHYSICS {
        return Err(Error::Config(format!(
            "column mapping must list {N_PHYSICS} channels, found {}",
            cfg.columns.channels.len()
        )));
    }
    if !(cfg.time_scale_ms > 0.0 && cfg.grid_step_ms > 0.0) {
        return Err(Error::Config("time scale and grid step must be positive".into()));
    }
    let metas = read_index(&dir.join(&cfg.index_file), cfg)?;
    metas
        .par_iter()
        .map(|meta| {
            let raw = read_shot(&dir.join(format!("{}.csv", meta.id)), cfg)?;
            let grid = resample(&raw, cfg.grid_step_ms)?;
            // Grid rows cover [k·step, (k+1)·step); the point at the final
            // timestamp starts an interval with no data behind it.
            let rows = ((raw.duration_ms().max(0.0) / cfg.grid_step_ms + TIME_EPS).floor() as usize)
                .clamp(1, grid.nrows());
            Ok(super::assemble(
                grid.slice(ndarray::s![..rows, ..]).to_owned(),
                meta,
                cfg.grid_step_ms,
            ))
        })
        .collect()
}
