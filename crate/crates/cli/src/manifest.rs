//! Per-stage run records: each stage directory gets a manifest naming the
//! stage, the master seed, and content hashes of every input and output.
//! Paths are stored relative to the run directory so two runs of the same
//! config produce byte-identical manifests wherever they live.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    seed: u64,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn entries(root: &Path, files: &[PathBuf]) -> Result<Vec<FileEntry>> {
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        out.push(FileEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: file_sha256(f)?,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Writes `manifest.json` into `dir` and returns its path.
pub fn write(
    dir: &Path,
    root: &Path,
    stage: &str,
    seed: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let manifest = Manifest {
        stage,
        seed,
        inputs: entries(root, inputs)?,
        outputs: entries(root, outputs)?,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
