//! Attack-set archives: the handoff between `attack` (which maps clean
//! images through a trained transfer net or a baseline) and `evaluate`
//! (which scores the result against victims). One file carries the
//! adversarial batch, the source batch it was derived from, and the tag the
//! report rows will use.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_archive, write_archive, Archive, Tensor};

use super::CliError;

pub const ATTACK_KIND: &str = "attack-set";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSetHeader {
    /// Method tag echoed into report rows, e.g. `ftn_cppn_grad` or `fgsm`.
    pub tag: String,
    pub target: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AttackSet {
    pub header: AttackSetHeader,
    /// `[n, c, h, w]` adversarial batch.
    pub adversarial: Tensor,
    /// Same-shape clean batch the adversarial images derive from.
    pub sources: Tensor,
}

impl AttackSet {
    fn check(&self) -> Result<(), CliError> {
        if self.adversarial.rank() != 4 || self.adversarial.shape() != self.sources.shape() {
            return Err(CliError::Config {
                msg: format!(
                    "attack set needs matching rank-4 batches, got {:?} and {:?}",
                    self.adversarial.shape(),
                    self.sources.shape()
                ),
            });
        }
        Ok(())
    }
}

pub fn save_attack_set(set: &AttackSet, path: &Path) -> Result<(), CliError> {
    set.check()?;
    let header = toml::to_string(&set.header)
        .and_then(|t| t.parse::<toml::Table>().map_err(serde::ser::Error::custom))
        .map_err(|e| CliError::Config {
            msg: format!("serialize attack header: {e}"),
        })?;
    let mut archive = Archive::new(ATTACK_KIND, header);
    archive.push("adversarial", set.adversarial.clone());
    archive.push("sources", set.sources.clone());
    write_archive(path, &archive)?;
    Ok(())
}

pub fn load_attack_set(path: &Path) -> Result<AttackSet, CliError> {
    let archive = read_archive(path)?;
    if archive.kind != ATTACK_KIND {
        return Err(CliError::Config {
            msg: format!(
                "{}: expected a {ATTACK_KIND} archive, found {:?}",
                path.display(),
                archive.kind
            ),
        });
    }
    let header: AttackSetHeader =
        toml::Value::Table(archive.header.clone())
            .try_into()
            .map_err(|e| CliError::Config {
                msg: format!("{}: bad attack header: {e}", path.display()),
            })?;
    let fetch = |name: &str| {
        archive.tensor(name).cloned().ok_or_else(|| CliError::Config {
            msg: format!("{}: archive is missing tensor {name:?}", path.display()),
        })
    };
    let set = AttackSet {
        header,
        adversarial: fetch("adversarial")?,
        sources: fetch("sources")?,
    };
    set.check()?;
    Ok(set)
}
