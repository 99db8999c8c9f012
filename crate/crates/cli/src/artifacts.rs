//! Output-directory bookkeeping: every file a command writes is recorded
//! with its size and SHA-256, and `manifest.json` is emitted last so a run
//! can be verified or diffed byte-for-byte.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use resect_core::volume::{write_volume, Volume3};

use crate::errors::CliError;

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: u32,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    artifacts: &'a [ArtifactEntry],
}

/// Records artifacts written under one output directory.
pub struct ArtifactLog {
    root: PathBuf,
    entries: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl ArtifactLog {
    /// Creates the output directory (now — callers validate config first).
    pub fn new(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Hashes and records a file that already exists under the root.
    pub fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let path = self.root.join(rel);
        let bytes =
            std::fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.entries.push(ArtifactEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes `<name>.json` + `<name>.raw` and records both.
    pub fn write_volume(&mut self, name: &str, v: &Volume3) -> Result<(), CliError> {
        write_volume(v, &self.root.join(name))?;
        self.record(&format!("{name}.json"))?;
        self.record(&format!("{name}.raw"))
    }

    /// Writes text exactly as given and records it.
    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        let path = self.root.join(rel);
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.record(rel)
    }

    /// Writes a pretty-printed JSON document and records it.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Io(format!("{rel}: {e}")))?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    /// Writes `manifest.json` (not itself listed among the artifacts).
    pub fn write_manifest(&self, status: &str, error: Option<&str>) -> Result<(), CliError> {
        let manifest = Manifest {
            version: 1,
            status,
            error,
            artifacts: &self.entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Io(format!("manifest.json: {e}")))?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Formats a metric value for CSV: finite numbers with Rust's shortest
/// round-trip representation, everything absent or undefined as `nan`.
pub fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

pub fn csv_opt(v: Option<f64>) -> String {
    csv_num(v.unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn log_records_files_and_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = ArtifactLog::new(dir.path()).unwrap();
        log.write_text("a.csv", "x,y\n1,2\n").unwrap();
        log.write_json("b.json", &serde_json::json!({"k": 1})).unwrap();
        assert_eq!(log.entries.len(), 2);
        log.write_manifest("ok", None).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["status"], "ok");
        assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);
        assert_eq!(manifest["artifacts"][0]["path"], "a.csv");
        assert_eq!(
            manifest["artifacts"][0]["sha256"],
            sha256_hex(b"x,y\n1,2\n")
        );
    }

    #[test]
    fn csv_numbers_use_dot_decimal_and_nan() {
        assert_eq!(csv_num(0.5), "0.5");
        assert_eq!(csv_num(f64::NAN), "nan");
        assert_eq!(csv_opt(None), "nan");
        assert_eq!(csv_opt(Some(2.0)), "2");
    }
}
