//! Versioned JSON checkpoints.
//!
//! Layout (schema version 1):
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "n": <cause dimension>,
//!   "architecture": {"kind": "linear"} | {"kind": "blocks", "count": .., "hidden": [..]},
//!   "standardizer": {"mean": [..], "scale": [..]},
//!   "structure": {"signs": [[..], ..], "effect_signs": [..], "perms": [[..], ..]},
//!   "sections": [{"name": "base.logits", "rows": r, "cols": c, "data": [..]}, ..],
//!   "metadata": {..} | null
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so loading
//! restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Parameters, Tensor};
use crate::flow::{Architecture, FlowError, FlowModel, Layout, Standardizer};
use crate::gmm::GmmParams;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint has n = {found}, expected n = {expected}")]
    Dimension { found: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub final_val_nll: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Structure {
    signs: Vec<Vec<f64>>,
    effect_signs: Vec<f64>,
    perms: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Document {
    schema_version: u32,
    n: usize,
    architecture: Architecture,
    standardizer: Standardizer,
    structure: Structure,
    sections: Vec<Section>,
    metadata: Option<TrainMetadata>,
}

fn structure_of(model: &FlowModel) -> Structure {
    match model.layout() {
        Layout::Linear(l) => {
            let (s, e) = l.signs();
            Structure {
                signs: vec![s],
                effect_signs: vec![e],
                perms: Vec::new(),
            }
        }
        Layout::Blocks(blocks) => {
            let (signs, effect_signs) = blocks.iter().map(|b| b.signs()).unzip();
            Structure {
                signs,
                effect_signs,
                perms: blocks.iter().map(|b| b.perm().to_vec()).collect(),
            }
        }
    }
}

pub fn to_json(model: &FlowModel, metadata: Option<&TrainMetadata>) -> String {
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        n: model.n(),
        architecture: model.architecture(),
        standardizer: model.standardizer().clone(),
        structure: structure_of(model),
        sections: model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| Section {
                name,
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect(),
        metadata: metadata.cloned(),
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

fn tensor_of(s: &Section) -> Result<Tensor, CheckpointError> {
    Tensor::from_vec(s.rows, s.cols, s.data.clone()).map_err(|e| corrupt(format!("section {}: {e}", s.name)))
}

fn rebuild(doc: Document) -> Result<(FlowModel, Option<TrainMetadata>), CheckpointError> {
    let flow_err = |e: FlowError| corrupt(e.to_string());
    let find = |name: &str| {
        doc.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| corrupt(format!("missing section {name}")))
    };
    let base = GmmParams::new(
        tensor_of(find("base.logits")?)?,
        tensor_of(find("base.means")?)?,
        tensor_of(find("base.log_vars")?)?,
    )
    .map_err(|e| corrupt(e.to_string()))?;
    // A throwaway generator only sizes the skeleton; every value is overwritten.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = FlowModel::init(doc.n, &doc.architecture, base, &mut rng).map_err(flow_err)?;
    model.set_standardizer(doc.standardizer.clone()).map_err(flow_err)?;

    let expected: Vec<(String, usize, usize)> = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.rows(), t.cols()))
        .collect();
    if expected.len() != doc.sections.len() {
        return Err(corrupt(format!(
            "expected {} sections, found {}",
            expected.len(),
            doc.sections.len()
        )));
    }
    for ((name, rows, cols), (slot, s)) in expected
        .iter()
        .zip(model.tensors_mut().into_iter().zip(&doc.sections))
    {
        if &s.name != name || s.rows != *rows || s.cols != *cols {
            return Err(corrupt(format!(
                "section {} ({}x{}) does not match expected {name} ({rows}x{cols})",
                s.name, s.rows, s.cols
            )));
        }
        *slot = tensor_of(s)?;
    }

    let st = &doc.structure;
    let valid_sign = |v: &f64| *v == 1.0 || *v == -1.0;
    match model.layout_mut() {
        Layout::Linear(l) => {
            if st.signs.len() != 1 || st.effect_signs.len() != 1 || st.signs[0].len() != doc.n {
                return Err(corrupt("linear layout needs one sign vector of length n"));
            }
            if !st.signs[0].iter().chain(&st.effect_signs).all(valid_sign) {
                return Err(corrupt("signs must be +1 or -1"));
            }
            l.set_signs(st.signs[0].clone(), st.effect_signs[0]);
        }
        Layout::Blocks(blocks) => {
            if st.signs.len() != blocks.len() || st.effect_signs.len() != blocks.len() || st.perms.len() != blocks.len()
            {
                return Err(corrupt("structure does not match the block count"));
            }
            for (i, b) in blocks.iter_mut().enumerate() {
                if st.signs[i].len() != doc.n || !st.signs[i].iter().chain([&st.effect_signs[i]]).all(valid_sign) {
                    return Err(corrupt(format!("block {i} has invalid signs")));
                }
                if !is_permutation(&st.perms[i], doc.n) {
                    return Err(corrupt(format!("block {i} has an invalid permutation")));
                }
                b.set_signs(st.signs[i].clone(), st.effect_signs[i]);
                b.set_perm(st.perms[i].clone());
            }
        }
    }
    Ok((model, doc.metadata))
}

pub fn from_json(text: &str) -> Result<(FlowModel, Option<TrainMetadata>), CheckpointError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing schema_version"))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    rebuild(doc)
}

pub fn save_checkpoint(
    model: &FlowModel,
    metadata: Option<&TrainMetadata>,
    path: &Path,
) -> Result<(), CheckpointError> {
    fs::write(path, to_json(model, metadata)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowModel, Option<TrainMetadata>), CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}

/// Loads a checkpoint and checks it models `n` causes.
pub fn load_checkpoint_for(path: &Path, n: usize) -> Result<(FlowModel, Option<TrainMetadata>), CheckpointError> {
    let loaded = load_checkpoint(path)?;
    if loaded.0.n() != n {
        return Err(CheckpointError::Dimension {
            found: loaded.0.n(),
            expected: n,
        });
    }
    Ok(loaded)
}
