use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use grape_core::Result;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written last into its run directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Tracks what a command read and wrote inside `dir`.
pub struct RunDir {
    pub dir: PathBuf,
    command: String,
    started: u128,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: now_ms(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Path of an output relative to the run directory, creating parents.
    pub fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(p.clone());
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.output(rel)?;
        fs::File::create(&p)?.write_all(bytes)?;
        Ok(p)
    }

    pub fn finish(self, config: BTreeMap<String, String>, error: Option<String>) -> Result<()> {
        let digest = |paths: &[PathBuf], base: Option<&Path>| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| {
                    let shown = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
                    Ok(FileDigest {
                        path: shown.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            config,
            inputs: digest(&self.inputs, None)?,
            outputs: digest(&self.outputs, Some(&self.dir))?,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            status: if error.is_some() { "failed" } else { "ok" }.to_string(),
            error,
        };
        let mut f = fs::File::create(self.dir.join(MANIFEST))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Serialize records as line-delimited JSON.
pub fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    Ok(out)
}
