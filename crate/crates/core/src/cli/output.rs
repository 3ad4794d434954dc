//! Run directory: deterministic artifacts, an artifact manifest and a
//! provenance record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const PROVENANCE_FILE: &str = "provenance.json";
/// Command line and timestamps: the only file whose bytes change between
/// identical runs.
pub const INVOCATION_FILE: &str = "invocation.json";

/// Every report carries these fields next to its payload.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub toolkit_version: &'static str,
    pub config_hash: &'a str,
    pub seed: Option<u64>,
    pub task: &'a str,
    pub payload: T,
}

#[derive(Debug, Clone, Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

pub struct RunDir {
    root: PathBuf,
    task: String,
    config_hash: String,
    seed: Option<u64>,
    artifacts: Vec<Artifact>,
    started: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Refuses a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut it = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() && !force {
            return Err(Error::InvalidInput(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl RunDir {
    pub fn create(root: &Path, force: bool, task: &str, config_hash: &str, seed: Option<u64>) -> Result<Self> {
        prepare_output_dir(root, force)?;
        Ok(Self {
            root: root.to_path_buf(),
            task: task.into(),
            config_hash: config_hash.into(),
            seed,
            artifacts: Vec::new(),
            started: now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(p)
    }

    /// Records a file some other writer already produced under the root.
    pub fn register(&mut self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(rel, text.as_bytes())
    }

    /// Pretty JSON wrapped in the provenance envelope.
    pub fn write_report<T: Serialize>(&mut self, rel: &str, payload: T) -> Result<PathBuf> {
        let env = Envelope {
            toolkit_version: TOOLKIT_VERSION,
            config_hash: &self.config_hash,
            seed: self.seed,
            task: &self.task,
            payload,
        };
        let mut s = serde_json::to_string_pretty(&env).map_err(|e| Error::InvalidInput(e.to_string()))?;
        s.push('\n');
        self.write_text(rel, &s)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
            s.push('\n');
        }
        self.write_text(rel, &s)
    }

    /// Writes the artifact manifest, the provenance record and the
    /// invocation record.
    pub fn finish<T: Serialize>(mut self, details: T) -> Result<PathBuf> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.artifacts.dedup_by(|a, b| a.path == b.path);
        let mut manifest = serde_json::to_string_pretty(&serde_json::json!({ "artifacts": self.artifacts }))
            .expect("json");
        manifest.push('\n');
        let mp = self.path(ARTIFACTS_FILE);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;

        let prov = Envelope {
            toolkit_version: TOOLKIT_VERSION,
            config_hash: &self.config_hash,
            seed: self.seed,
            task: &self.task,
            payload: details,
        };
        let mut s = serde_json::to_string_pretty(&prov).map_err(|e| Error::InvalidInput(e.to_string()))?;
        s.push('\n');
        let pp = self.path(PROVENANCE_FILE);
        fs::write(&pp, s).map_err(|e| Error::io(&pp, e))?;

        let argv: Vec<String> = std::env::args().collect();
        let ts = serde_json::json!({ "command": argv, "started_unix": self.started, "finished_unix": now() });
        let tp = self.path(INVOCATION_FILE);
        fs::write(&tp, format!("{ts}\n")).map_err(|e| Error::io(&tp, e))?;
        Ok(self.root)
    }
}
