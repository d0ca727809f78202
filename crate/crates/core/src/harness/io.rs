//! Artifact persistence: atomic writes, content hashes, traces and grid files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::TraceRow;
use crate::error::{MiwError, Result};
use crate::geometry::Point;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().ok_or_else(|| MiwError::Io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| MiwError::Io(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Serializes, writes atomically and returns the content hash.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let bytes = to_json(value)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| MiwError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| MiwError::Config(format!("{}: {e}", path.display())))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MiwError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| MiwError::Io(e.to_string()))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MiwError::Io(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| MiwError::Io(e.to_string()))).collect()
}

/// Whitespace-delimited columns: coordinates then value, one grid point per line.
pub fn grid_file(points: &[Point], dim: usize, values: &[f64]) -> Vec<u8> {
    let mut s = String::new();
    s.push_str(if dim == 1 { "# x value\n" } else { "# x y value\n" });
    for (p, v) in points.iter().zip(values) {
        for c in &p[..dim] {
            s.push_str(&format!("{c:.12e} "));
        }
        s.push_str(&format!("{v:.12e}\n"));
    }
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Content hashes of every artifact in an output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Manifest { kind: kind.to_string(), files: Vec::new() }
    }

    pub fn add(&mut self, file: &str, sha256: String) {
        self.files.push(ManifestEntry { file: file.to_string(), sha256 });
    }

    pub fn hash_of(&self, file: &str) -> Option<&str> {
        self.files.iter().find(|e| e.file == file).map(|e| e.sha256.as_str())
    }

    /// Rehashes every listed file under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.files {
            let got = file_hash(&dir.join(&e.file))?;
            if got != e.sha256 {
                return Err(MiwError::Io(format!("{} does not match its manifest hash", e.file)));
            }
        }
        Ok(())
    }
}

/// Non-reproducible facts about a run, kept out of the hashed artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_seconds: f64,
    #[serde(default)]
    pub iteration_wall_seconds: Vec<f64>,
    pub version: String,
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| MiwError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}
