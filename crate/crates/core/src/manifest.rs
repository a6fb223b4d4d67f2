//! Run manifests: what a command read, what it wrote, and with which
//! settings.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, InputFile>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    /// Records an input by role, hashing its contents. Directories hash the
    /// sorted list of their files' hashes.
    pub fn add_input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        let sha256 = if path.is_dir() {
            let mut entries: Vec<PathBuf> =
                std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
            entries.retain(|p| p.is_file());
            entries.sort();
            let mut h = Sha256::new();
            for p in entries {
                h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
                h.update(sha256_file(&p)?.as_bytes());
            }
            hex::encode(h.finalize())
        } else {
            sha256_file(path)?
        };
        self.inputs.insert(role.to_string(), InputFile { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn add_artifact(&mut self, relative: impl Into<String>) {
        self.artifacts.push(relative.into());
    }

    /// Hash of everything that determines the outputs: command, settings,
    /// seed and input contents (not paths).
    pub fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(self.config.to_string().as_bytes());
        h.update(format!("{:?}", self.seed).as_bytes());
        for (role, input) in &self.inputs {
            h.update(role.as_bytes());
            h.update(input.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)
    }
}
