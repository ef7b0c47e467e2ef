//! JSON sidecar written next to every output: the effective config, input
//! and output digests, and the machine that produced it.
//!
//! A manifest lives at `<output>.manifest.json`. Loading an artifact whose
//! manifest records a different digest than the file on disk is an error, as
//! is mixing a model with a codebook other than the one its tokens came from.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
}

impl Machine {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    /// Role → input file.
    pub inputs: BTreeMap<String, FileDigest>,
    /// Role → output file.
    pub outputs: BTreeMap<String, FileDigest>,
    /// Digests of upstream artifacts this output depends on indirectly,
    /// e.g. the codebook behind a token catalog.
    pub lineage: BTreeMap<String, String>,
    pub machine: Machine,
    /// Command-specific values (losses, counts).
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn digest(path: &Path) -> CliResult<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            lineage: BTreeMap::new(),
            machine: Machine::current(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<String> {
        let d = digest(path)?;
        let sha = d.sha256.clone();
        self.inputs.insert(role.into(), d);
        Ok(sha)
    }

    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.outputs.insert(role.into(), digest(path)?);
        Ok(())
    }

    /// Writes the sidecar of `primary`.
    pub fn write(&self, primary: &Path) -> CliResult<()> {
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Reads the sidecar of `artifact` if it has one.
    pub fn read_for(artifact: &Path) -> CliResult<Option<Self>> {
        let path = manifest_path(artifact);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Loads `artifact`'s manifest and checks the file still matches the digest
/// recorded when it was written. Returns the manifest and the file's digest.
pub fn verify_artifact(artifact: &Path) -> CliResult<(Option<Manifest>, String)> {
    let current = sha256_file(artifact)?;
    let manifest = Manifest::read_for(artifact)?;
    if let Some(m) = &manifest {
        let recorded = m.outputs.values().find(|d| d.path.file_name() == artifact.file_name());
        if let Some(d) = recorded {
            if d.sha256 != current {
                return Err(CliError::Stale {
                    path: artifact.to_path_buf(),
                    message: "file content differs from the digest in its manifest".into(),
                });
            }
        }
    }
    Ok((manifest, current))
}
