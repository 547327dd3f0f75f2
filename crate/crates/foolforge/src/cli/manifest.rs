//! Run manifests. Every subcommand that writes artifacts drops a
//! `manifest-<subcommand>.toml` beside them recording the resolved config,
//! the tool and tensor-format versions, and a SHA-256 stamp of every file it
//! read or wrote, so any result can be traced back to exact inputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::tensor::{sha256_file, TENSOR_VERSION};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub tensor_format: u32,
    pub created_unix_seconds: u64,
    pub seed: u64,
    /// Fully resolved configuration after profile, file, env and flags.
    pub config: toml::Table,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: toml::Table) -> Self {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            tensor_format: TENSOR_VERSION,
            created_unix_seconds: created,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn stamp(path: &Path) -> Result<FileStamp, CliError> {
        let sha256 = sha256_file(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(FileStamp {
            path: path.display().to_string(),
            sha256,
        })
    }

    pub fn stamp_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(Self::stamp(path)?);
        Ok(())
    }

    pub fn stamp_output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(Self::stamp(path)?);
        Ok(())
    }

    /// Writes `manifest-<subcommand>.toml` under `dir` and returns the path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("manifest-{}.toml", self.subcommand));
        let text = toml::to_string(self).map_err(|e| CliError::Config {
            msg: format!("serialize manifest: {e}"),
        })?;
        std::fs::write(&path, text).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            msg: format!("{}: {e}", path.display()),
        })
    }
}

/// Refuses to clobber an existing artifact unless the caller passed
/// `--force`. Directories are created as needed elsewhere; this guards files.
pub fn guard_fresh(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config {
            msg: format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_round_trip_with_stamps() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        let output = dir.path().join("out.bin");
        std::fs::write(&input, b"corpus").unwrap();
        std::fs::write(&output, b"result").unwrap();

        let mut table = toml::Table::new();
        table.insert("seed".into(), toml::Value::Integer(7));
        let mut m = RunManifest::new("dataset", 7, table);
        m.stamp_input(&input).unwrap();
        m.stamp_output(&output).unwrap();
        let path = m.write(dir.path()).unwrap();
        assert!(path.ends_with("manifest-dataset.toml"));

        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.inputs.len(), 1);
        assert_eq!(back.outputs[0].sha256.len(), 64);
        assert_eq!(back.tensor_format, TENSOR_VERSION);
    }

    #[test]
    fn stamping_a_missing_file_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("ghost.ffdat");
        let mut m = RunManifest::new("attack", 0, toml::Table::new());
        let err = m.stamp_input(&missing).unwrap_err();
        assert!(err.to_string().contains("ghost.ffdat"), "{err}");
    }

    #[test]
    fn freshness_guard_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        guard_fresh(&path, false).unwrap();
        std::fs::write(&path, "method\n").unwrap();
        let err = guard_fresh(&path, false).unwrap_err();
        assert!(err.to_string().contains("report.csv"), "{err}");
        guard_fresh(&path, true).unwrap();
    }
}
