use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use detox_core::formats::write_json;

pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation, written next to its primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: Value,
    pub inputs: Vec<FileHash>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<FileHash>,
    pub summary: Value,
    pub started_unix_ms: u128,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// One entry per file; directories expand to their files in name order,
/// leaving out any run manifest they hold.
pub fn hash_paths(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files.iter().filter(|f| f.is_file() && !f.ends_with(RUN_MANIFEST)) {
                out.push(FileHash { path: f.display().to_string(), sha256: sha256_file(f)? });
            }
        } else {
            out.push(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? });
        }
    }
    Ok(out)
}

/// `<dir>/run-manifest.json` for directory outputs, `<stem>.manifest.json` otherwise.
pub fn manifest_path(primary: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        primary.join(RUN_MANIFEST)
    } else {
        primary.with_extension("manifest.json")
    }
}

pub struct Recorder {
    command: String,
    flags: Value,
    started: Instant,
    started_unix_ms: u128,
}

impl Recorder {
    pub fn start(command: &str, flags: Value) -> Self {
        Self {
            command: command.to_string(),
            flags,
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
        }
    }

    pub fn finish(self, run: Finished) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            flags: self.flags,
            inputs: hash_paths(&run.inputs)?,
            seed: run.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: hash_paths(&run.outputs)?,
            summary: run.summary,
            started_unix_ms: self.started_unix_ms,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(&run.manifest, &manifest)?;
        Ok(run.manifest)
    }
}

/// What a command hands back for its manifest.
pub struct Finished {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub summary: Value,
    pub manifest: PathBuf,
}
