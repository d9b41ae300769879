use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use mcseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_FILE: &str = "run.json";

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
}

/// Provenance record written next to a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn inventory(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let meta = e.metadata().map_err(|err| Error::io(&path, err))?;
        if meta.is_dir() {
            inventory(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked below root");
            let rel: Vec<_> = rel.iter().map(|c| c.to_string_lossy()).collect();
            let rel = rel.join("/");
            if rel != RUN_MANIFEST_FILE {
                out.push(FileEntry {
                    path: rel,
                    bytes: meta.len(),
                });
            }
        }
    }
    Ok(())
}

impl RunManifest {
    /// Lists every file currently under `dir` and writes `run.json` there.
    pub fn emit(
        dir: &Path,
        command: &str,
        seed: u64,
        config: &impl Serialize,
        started_unix: u64,
    ) -> Result<Self> {
        let mut files = Vec::new();
        inventory(dir, dir, &mut files)?;
        let manifest = Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            started_unix,
            finished_unix: unix_now(),
            files,
        };
        let path = dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}
