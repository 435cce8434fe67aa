//! On-disk corpus format.
//!
//! A corpus is a directory holding a `schema` file, one `name,unit,kind`
//! line per channel, and one `NNNNNN.csv` record per discharge:
//!
//! ```text
//! # id=cmod-00003
//! # machine=CMod
//! # grid_step_ms=5
//! # disruptive=true
//! # disruption_time_ms=415
//! # rows=83
//! 6.0123456789012345e-1,...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips `f64`
//! exactly. Records are read back in file-name order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::domain::{ChannelDef, ChannelKind, Discharge, FeatureSchema, Machine, N_CHANNELS};
use crate::error::{Error, Result};

pub const SCHEMA_FILE: &str = "schema";
pub const RECORD_EXTENSION: &str = "csv";

fn kind_str(kind: ChannelKind) -> &'static str {
    match kind {
        ChannelKind::Physics => "physics",
        ChannelKind::MachineIndicator => "machine_indicator",
    }
}

/// Writes `corpus` into `dir`, creating it if needed. Existing records in
/// the directory are replaced.
pub fn write_corpus(corpus: &[Discharge], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == RECORD_EXTENSION) {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let schema = FeatureSchema::standard();
    let mut text = String::new();
    for c in schema.channels() {
        text.push_str(&format!("{},{},{}\n", c.name, c.unit, kind_str(c.kind)));
    }
    let schema_path = dir.join(SCHEMA_FILE);
    fs::write(&schema_path, text).map_err(|e| Error::io(&schema_path, e))?;

    corpus
        .par_iter()
        .enumerate()
        .try_for_each(|(i, d)| write_record(d, &record_path(dir, i)))
}

fn record_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.{RECORD_EXTENSION}"))
}

fn write_record(d: &Discharge, path: &Path) -> Result<()> {
    if d.id.contains(['\n', '\r']) {
        return Err(Error::Schema(format!("discharge id {:?} contains a line break", d.id)));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# id={}", d.id).map_err(io)?;
    writeln!(w, "# machine={}", d.machine).map_err(io)?;
    writeln!(w, "# grid_step_ms={:e}", d.grid_step_ms).map_err(io)?;
    writeln!(w, "# disruptive={}", d.disruptive).map_err(io)?;
    match d.disruption_time_ms {
        Some(t) => writeln!(w, "# disruption_time_ms={t:e}").map_err(io)?,
        None => writeln!(w, "# disruption_time_ms=none").map_err(io)?,
    }
    writeln!(w, "# rows={}", d.len()).map_err(io)?;
    let mut line = String::new();
    for row in d.samples.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads every record in `dir`. A directory with no records is an empty
/// corpus.
pub fn read_corpus(dir: &Path) -> Result<Vec<Discharge>> {
    let mut records: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == RECORD_EXTENSION))
        .collect();
    records.sort();
    if records.is_empty() {
        return Ok(Vec::new());
    }
    read_schema(&dir.join(SCHEMA_FILE))?;
    records.par_iter().map(|p| read_record(p)).collect()
}

fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut channels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        if parts.len() != 3 {
            return Err(bad(format!("expected `name,unit,kind`, found {line:?}")));
        }
        let kind = match parts[2].trim() {
            "physics" => ChannelKind::Physics,
            "machine_indicator" => ChannelKind::MachineIndicator,
            other => return Err(bad(format!("unknown channel kind `{other}`"))),
        };
        channels.push(ChannelDef {
            name: parts[0].trim().into(),
            unit: parts[1].trim().into(),
            kind,
        });
    }
    let schema = FeatureSchema::new(channels).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if schema != FeatureSchema::standard() {
        return Err(Error::Schema(format!(
            "{}: channel names/order differ from the standard schema",
            path.display()
        )));
    }
    Ok(schema)
}

fn read_record(path: &Path) -> Result<Discharge> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut id = None;
    let mut machine = None;
    let mut step = None;
    let mut disruptive = None;
    let mut dtime: Option<Option<f64>> = None;
    let mut rows_declared = None;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(header) = line.strip_prefix('#') {
            let (key, value) = header
                .trim_start()
                .split_once('=')
                .ok_or_else(|| bad(lineno, format!("malformed header line {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(lineno, format!("{key}: {e}")));
            match key.trim() {
                "id" => id = Some(value.to_string()),
                "machine" => machine = Some(value.parse::<Machine>().map_err(|e| bad(lineno, e.to_string()))?),
                "grid_step_ms" => step = Some(num(value)?),
                "disruptive" => {
                    disruptive = Some(match value.trim() {
                        "true" => true,
                        "false" => false,
                        other => return Err(bad(lineno, format!("disruptive: expected true/false, found `{other}`"))),
                    })
                }
                "disruption_time_ms" => {
                    dtime = Some(if value.trim() == "none" { None } else { Some(num(value)?) })
                }
                "rows" => {
                    rows_declared = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|e| bad(lineno, format!("rows: {e}")))?,
                    )
                }
                other => return Err(bad(lineno, format!("unknown header key `{other}`"))),
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(lineno, format!("value `{field}`: {e}")))?;
            values.push(v);
        }
        let found = values.len() - before;
        if found != N_CHANNELS {
            return Err(Error::Schema(format!(
                "{}:{lineno}: expected {N_CHANNELS} channels, found {found}",
                path.display()
            )));
        }
        rows += 1;
    }
    let missing = |key: &str| bad(0, format!("missing header `{key}`"));
    let id = id.ok_or_else(|| missing("id"))?;
    let machine = machine.ok_or_else(|| missing("machine"))?;
    let grid_step_ms = step.ok_or_else(|| missing("grid_step_ms"))?;
    let disruptive = disruptive.ok_or_else(|| missing("disruptive"))?;
    let disruption_time_ms = dtime.ok_or_else(|| missing("disruption_time_ms"))?;
    if let Some(declared) = rows_declared {
        if declared != rows {
            return Err(bad(0, format!("header declares {declared} rows, found {rows}")));
        }
    }
    let samples = Array2::from_shape_vec((rows, N_CHANNELS), values)
        .map_err(|e| bad(0, e.to_string()))?;
    Ok(Discharge {
        id,
        machine,
        samples,
        grid_step_ms,
        disruptive,
        disruption_time_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::generate_synthetic;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_synthetic(50, Machine::EAST, 0.2, &Rng::new(5)).unwrap();
        corpus[0].samples[[0, 0]] = 1e-300;
        corpus[1].samples[[1, 1]] = -0.1 + 1e-17;
        corpus[2].id = "odd id, with=#view-3".into();
        write_corpus(&corpus, dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(a, b);
            for (x, y) in a.samples.iter().zip(b.samples.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_directory_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn wrong_channel_count_names_twelve() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(1, Machine::CMod, 0.0, &Rng::new(5)).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let path = dir.path().join("000000.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[8].push_str(",1.0");
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("expected 12"), "{err}");
    }

    #[test]
    fn malformed_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(1, Machine::CMod, 0.0, &Rng::new(5)).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let path = dir.path().join("000000.csv");
        let text = fs::read_to_string(&path).unwrap().replacen("e-1,", "e-1x,", 1);
        fs::write(&path, text).unwrap();
        match read_corpus(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert!(line >= 7),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rewriting_replaces_old_records() {
        let dir = tempfile::tempdir().unwrap();
        let big = generate_synthetic(5, Machine::CMod, 0.0, &Rng::new(5)).unwrap();
        write_corpus(&big, dir.path()).unwrap();
        write_corpus(&big[..2], dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap().len(), 2);
    }
}
