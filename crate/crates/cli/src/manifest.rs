//! Per-output-directory record of how its artifacts were produced.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: String) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self {
            path: recorded_as,
            sha256: vessel::framed::sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration (TOML text, also saved as `config.toml`).
    pub config: String,
    pub seeds: Vec<u64>,
    /// Input files, by absolute path.
    pub inputs: Vec<FileDigest>,
    /// Output files, relative to the manifest's directory.
    pub artifacts: Vec<FileDigest>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub tool_version: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Collects inputs and artifacts while a command runs.
pub struct ManifestBuilder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(dir: &Path, command: &str, config: String, seeds: Vec<u64>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config,
                seeds,
                inputs: Vec::new(),
                artifacts: Vec::new(),
                started_unix: unix_now(),
                finished_unix: 0.0,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let abs =
            std::fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
        let d = FileDigest::of(&abs, abs.display().to_string())?;
        self.manifest.inputs.push(d);
        Ok(())
    }

    /// Records a file inside the output directory.
    pub fn artifact(&mut self, path: &Path) -> anyhow::Result<()> {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        let d = FileDigest::of(path, rel.to_string_lossy().replace('\\', "/"))?;
        self.manifest.artifacts.push(d);
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        self.manifest.finished_unix = unix_now();
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Re-hashes every recorded input and artifact; returns the number checked.
    pub fn verify(&self, dir: &Path) -> anyhow::Result<usize> {
        let mut bad = Vec::new();
        let mut check = |d: &FileDigest, path: PathBuf| match FileDigest::of(&path, d.path.clone())
        {
            Ok(now) if now.sha256 == d.sha256 => {}
            Ok(_) => bad.push(format!("{} (hash mismatch)", d.path)),
            Err(_) => bad.push(format!("{} (missing)", d.path)),
        };
        for d in &self.artifacts {
            check(d, dir.join(&d.path));
        }
        for d in &self.inputs {
            check(d, PathBuf::from(&d.path));
        }
        if !bad.is_empty() {
            bail!("manifest verification failed: {}", bad.join(", "));
        }
        Ok(self.artifacts.len() + self.inputs.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.csv");
        std::fs::write(&f, "x\n1\n").unwrap();
        let mut b = ManifestBuilder::new(dir.path(), "test", String::new(), vec![1]);
        b.artifact(&f).unwrap();
        b.finish().unwrap();
        let m = RunManifest::load(dir.path()).unwrap();
        assert_eq!(m.artifacts[0].path, "a.csv");
        assert_eq!(m.verify(dir.path()).unwrap(), 1);
        std::fs::write(&f, "x\n2\n").unwrap();
        assert!(m.verify(dir.path()).is_err());
    }
}
