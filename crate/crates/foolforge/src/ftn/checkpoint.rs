//! Transfer-net checkpoints: config, input geometry and bank provenance in
//! a TOML header, plus the parameter tensors and the bank rows themselves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_archive, write_archive, Archive, Tensor};
use crate::victims::Fingerprint;

use super::model::FtnModel;
use super::{FtnConfig, FtnError, RepresentationBank, TapInfo};

const KIND: &str = "ftn-checkpoint";
const BANK_ROWS: &str = "bank.rows";

#[derive(Serialize, Deserialize)]
struct Header {
    config: FtnConfig,
    input: (usize, usize, usize),
    target: usize,
    victim_name: String,
    victim_fingerprint: Fingerprint,
    image_ids: Vec<String>,
    taps: Vec<TapInfo>,
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table, FtnError> {
    let text = toml::to_string(value).map_err(|e| FtnError::Checkpoint {
        msg: format!("header encode: {e}"),
    })?;
    toml::from_str(&text).map_err(|e| FtnError::Checkpoint {
        msg: format!("header re-parse: {e}"),
    })
}

pub fn save_ftn(model: &FtnModel, path: &Path) -> Result<(), FtnError> {
    let layout = FtnModel::param_layout(&model.config, model.input, model.bank.width())?;
    if layout.len() != model.params.len() {
        return Err(FtnError::Checkpoint {
            msg: format!(
                "model holds {} tensors, layout expects {}",
                model.params.len(),
                layout.len()
            ),
        });
    }
    let header = Header {
        config: model.config.clone(),
        input: model.input,
        target: model.bank.target,
        victim_name: model.bank.victim_name.clone(),
        victim_fingerprint: model.bank.victim_fingerprint.clone(),
        image_ids: model.bank.image_ids.clone(),
        taps: model.bank.taps.clone(),
    };
    let mut archive = Archive::new(KIND, to_table(&header)?);
    for ((name, shape), tensor) in layout.iter().zip(&model.params) {
        if shape.as_slice() != tensor.shape() {
            return Err(FtnError::Checkpoint {
                msg: format!(
                    "{name}: tensor shape {:?} does not match layout {shape:?}",
                    tensor.shape()
                ),
            });
        }
        archive.push(name, tensor.clone());
    }
    archive.push(BANK_ROWS, model.bank.rows.clone());
    write_archive(path, &archive)?;
    Ok(())
}

pub fn load_ftn(path: &Path) -> Result<FtnModel, FtnError> {
    let archive = read_archive(path)?;
    if archive.kind != KIND {
        return Err(FtnError::Checkpoint {
            msg: format!("expected kind {KIND}, found {}", archive.kind),
        });
    }
    let header: Header = toml::Value::Table(archive.header.clone())
        .try_into()
        .map_err(|e| FtnError::Checkpoint {
            msg: format!("header decode: {e}"),
        })?;
    let missing = |name: &str| FtnError::Checkpoint {
        msg: format!("missing tensor {name}"),
    };
    let rows = archive.tensor(BANK_ROWS).ok_or_else(|| missing(BANK_ROWS))?;
    let d: usize = header.taps.iter().map(TapInfo::flat_len).sum();
    if rows.rank() != 2 || rows.shape()[1] != d || rows.shape()[0] != header.image_ids.len() {
        return Err(FtnError::Checkpoint {
            msg: format!(
                "bank rows {:?} do not match {} images of width {d}",
                rows.shape(),
                header.image_ids.len()
            ),
        });
    }
    let layout = FtnModel::param_layout(&header.config, header.input, d)?;
    let mut params: Vec<Tensor> = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let t = archive.tensor(name).ok_or_else(|| missing(name))?;
        if t.shape() != shape.as_slice() {
            return Err(FtnError::Checkpoint {
                msg: format!("{name}: stored shape {:?}, layout wants {shape:?}", t.shape()),
            });
        }
        params.push(t.clone());
    }
    let bank = RepresentationBank {
        rows: rows.clone(),
        image_ids: header.image_ids,
        taps: header.taps,
        target: header.target,
        victim_name: header.victim_name,
        victim_fingerprint: header.victim_fingerprint,
    };
    Ok(FtnModel {
        config: header.config,
        input: header.input,
        params,
        bank,
    })
}
