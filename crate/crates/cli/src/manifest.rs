//! Run manifests: enough to reproduce a run from its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub corpus_hash: Option<String>,
    pub output_dir: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// Extra inputs (other corpora, checkpoints, counts) by name.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file produced, relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// SHA-256 over `relative path NUL contents` of each file, in the given order.
pub fn hash_tree(root: &Path, files: &[PathBuf]) -> io::Result<String> {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(root.join(f))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn start(command: &str, out: &Path) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            config_hash: None,
            seed: None,
            corpus_hash: None,
            output_dir: out.display().to_string(),
            started_unix: now(),
            finished_unix: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes the output directory and writes `manifest.json` via rename.
    pub fn finish(mut self) -> io::Result<()> {
        let root = PathBuf::from(&self.output_dir);
        let mut files = Vec::new();
        walk(&root, &root, &mut files)?;
        files.sort();
        for f in files {
            let name = f.to_string_lossy().into_owned();
            if name == "manifest.json" || name.ends_with(".tmp") {
                continue;
            }
            self.artifacts.insert(name, hash_file(&root.join(&f))?);
        }
        self.finished_unix = Some(now());
        let tmp = root.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self).map_err(io::Error::other)? + "\n")?;
        fs::rename(tmp, root.join("manifest.json"))
    }
}
