use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trainer::{
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, OPTIMIZER_FILE, ROLLOUTS_FILE, STATE_FILE, WARM_START_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.json";

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const ARTIFACTS: [&str; 7] = [
    CONFIG_FILE,
    WARM_START_FILE,
    METRICS_FILE,
    ROLLOUTS_FILE,
    CHECKPOINT_FILE,
    OPTIMIZER_FILE,
    STATE_FILE,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// Checksum with timing columns blanked; present for files that carry wall-clock values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducible_sha256: Option<String>,
}

impl ManifestEntry {
    /// The checksum a rerun is expected to match.
    pub fn reproducible(&self) -> &str {
        self.reproducible_sha256.as_deref().unwrap_or(&self.sha256)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub path: String,
    pub expected: Option<String>,
    pub found: Option<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

/// Hash of a metrics CSV with the `wall_seconds` column emptied on every row.
pub fn metrics_reproducible_sha256(path: &Path) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut hasher = Sha256::new();
    let mut wall = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if row == 0 {
            wall = rec.iter().position(|c| c == "wall_seconds");
        }
        for (i, field) in rec.iter().enumerate() {
            if i > 0 {
                hasher.update(b",");
            }
            if row == 0 || Some(i) != wall {
                hasher.update(field.as_bytes());
            }
        }
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

fn entry(dir: &Path, name: &str) -> Result<Option<ManifestEntry>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let data = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let reproducible_sha256 = if name == METRICS_FILE {
        Some(metrics_reproducible_sha256(&path)?)
    } else {
        None
    };
    Ok(Some(ManifestEntry {
        path: name.to_string(),
        bytes: data.len() as u64,
        sha256: sha256_hex(&data),
        reproducible_sha256,
    }))
}

impl RunManifest {
    /// Checksums every run artifact present in `dir`.
    pub fn collect(config: &TrainConfig, dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for name in ARTIFACTS {
            files.extend(entry(dir, name)?);
        }
        Ok(RunManifest {
            code_version: CODE_VERSION.to_string(),
            seed: config.seed,
            out_dir: dir.to_path_buf(),
            config: config.clone(),
            files,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose reproducible checksum differs between `self` and `other`.
    pub fn mismatches(&self, other: &RunManifest) -> Vec<Mismatch> {
        let find = |m: &RunManifest, p: &str| {
            m.files
                .iter()
                .find(|e| e.path == p)
                .map(|e| e.reproducible().to_string())
        };
        let mut names: Vec<&str> = self.files.iter().chain(&other.files).map(|e| e.path.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
            .into_iter()
            .filter_map(|p| {
                let (expected, found) = (find(self, p), find(other, p));
                (expected != found).then(|| Mismatch {
                    path: p.to_string(),
                    expected,
                    found,
                })
            })
            .collect()
    }
}
