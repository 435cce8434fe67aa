//! Run manifests: what a command read, what it wrote, and the configuration
//! that produced it. Manifests are numbered and never overwritten.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use plasma_views::Error;

use crate::config::ExperimentConfig;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    /// Informational only; excluded from reproducibility comparisons.
    pub wall_clock: WallClock,
    pub threads: usize,
}

pub fn now_unix_s() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file under `path` (or `path` itself), sorted.
pub fn list_files(path: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| io(&dir, e))? {
            let p = entry.map_err(|e| io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Content hash of a file or directory tree: names relative to `path` and
/// contents, in sorted order.
pub fn fingerprint(path: &Path) -> Result<String, Error> {
    let mut h = Sha256::new();
    for f in list_files(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(&f).map_err(|e| io(&f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Digests of every file under each of `paths`.
pub fn digest_all(root: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>, Error> {
    let mut out = Vec::new();
    for p in paths {
        for f in list_files(p)? {
            out.push(FileDigest {
                path: relative(root, &f),
                sha256: sha256_file(&f)?,
            });
        }
    }
    Ok(out)
}

/// Fingerprints of whole inputs (one entry per path).
pub fn fingerprint_all(root: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>, Error> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: relative(root, p),
                sha256: fingerprint(p)?,
            })
        })
        .collect()
}

impl Manifest {
    /// Writes `manifests/NNNN-<command>.json` under `root` with the next free
    /// number and returns its path.
    pub fn write(&self, root: &Path) -> Result<PathBuf, Error> {
        let dir = root.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let next = std::fs::read_dir(&dir)
            .map_err(|e| io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.get(..4)?.parse::<u32>().ok())
            .max()
            .map_or(1, |n| n + 1);
        let path = dir.join(format!("{next:04}-{}.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .and_then(|mut f| std::io::Write::write_all(&mut f, text.as_bytes()))
            .map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), "1").unwrap();
        std::fs::write(dir.path().join("b"), "2").unwrap();
        let first = fingerprint(dir.path()).unwrap();
        assert_eq!(first, fingerprint(dir.path()).unwrap());
        std::fs::write(dir.path().join("b"), "3").unwrap();
        assert_ne!(first, fingerprint(dir.path()).unwrap());
    }

    #[test]
    fn manifests_are_numbered_and_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            command: "synth".into(),
            tool_version: "0".into(),
            seed: 1,
            config: ExperimentConfig::default(),
            inputs: vec![],
            artifacts: vec![],
            wall_clock: WallClock {
                started_unix_s: 0.0,
                finished_unix_s: 1.0,
            },
            threads: 1,
        };
        let a = m.write(dir.path()).unwrap();
        let b = m.write(dir.path()).unwrap();
        assert!(a.ends_with("0001-synth.json"));
        assert!(b.ends_with("0002-synth.json"));
        assert_eq!(Manifest::load(&b).unwrap(), m);
    }
}
