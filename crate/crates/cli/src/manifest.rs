// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: resolved configuration, input digests and output digests.
//!
//! Nothing machine- or time-dependent goes in: no timestamps, no absolute
//! paths and no worker count, so a rerun with the same inputs reproduces the
//! manifest byte for byte.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_KIND: &str = "run_manifest";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    /// Which argument the file came from (`out` for outputs).
    pub role: String,
    /// File name, or path relative to the directory argument.
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub kind: &'static str,
    pub version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut total = 0u64;
    loop {
        let n = file
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hex::encode(hasher.finalize())))
}

/// Collects digests while a command runs.
pub struct Recorder {
    command: &'static str,
    config: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<(PathBuf, String)>,
}

impl Recorder {
    pub fn new(command: &'static str, config: &impl Serialize) -> Self {
        Recorder {
            command,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file under `role`, named relative to `base` when it
    /// lies inside it (directory arguments) and by file name otherwise.
    pub fn input(&mut self, role: &str, path: &Path, base: Option<&Path>) -> Result<()> {
        let name = display_name(path, base);
        let (bytes, sha256) = sha256_file(path)?;
        self.inputs.push(FileDigest {
            role: role.to_string(),
            name,
            bytes,
            sha256,
        });
        Ok(())
    }

    /// Records a written output; `name` is how it appears in the manifest.
    pub fn output(&mut self, path: &Path, name: impl Into<String>) {
        self.outputs.push((path.to_path_buf(), name.into()));
    }

    /// Digests the outputs and writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<()> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (p, name) in self.outputs {
            let (bytes, sha256) = sha256_file(&p)?;
            outputs.push(FileDigest {
                role: "out".into(),
                name,
                bytes,
                sha256,
            });
        }
        outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            kind: MANIFEST_KIND,
            version: 1,
            tool: "xlg",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn display_name(path: &Path, base: Option<&Path>) -> String {
    let rel = base.and_then(|b| path.strip_prefix(b).ok());
    match rel {
        Some(r) => r.to_string_lossy().into_owned(),
        None => path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string_lossy().into_owned()),
    }
}

/// Manifest path for a file output: `report.json` → `report.manifest.json`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}
