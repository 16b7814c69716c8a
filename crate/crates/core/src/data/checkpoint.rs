//! Line-oriented JSON checkpoints: a header line, then one line per parameter block.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::model::{Model, ModelConfig, ModelParams, PriorCount, BLOCK_NAMES};
use crate::numerics::DiffTensor;

pub const CHECKPOINT_FORMAT: &str = "sgkt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    run_config: serde_json::Value,
    model: ModelConfig,
    class_weights: Vec<f64>,
    prior_counts: Vec<PriorCount>,
    blocks: Vec<BlockShape>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockShape {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    run_config: &serde_json::Value,
) -> Result<(), DataError> {
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(run_config),
        run_config: run_config.clone(),
        model: model.config.clone(),
        class_weights: model.class_weights.clone(),
        prior_counts: model.prior_counts.clone(),
        blocks: model
            .params
            .blocks()
            .iter()
            .map(|(name, t)| BlockShape {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write_line = |v: String| writeln!(w, "{v}").map_err(|e| DataError::io(path, e));
    write_line(serde_json::to_string(&header).map_err(|e| bad(path, e.to_string()))?)?;
    for (name, t) in model.params.blocks() {
        let block = Block {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.value().to_vec(),
        };
        write_line(serde_json::to_string(&block).map_err(|e| bad(path, e.to_string()))?)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Loads a checkpoint, returning the model and the run configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| bad(path, "empty file"))?
        .map_err(|e| DataError::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| bad(path, format!("header: {e}")))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(bad(path, "not a checkpoint file"));
    }
    let found = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad(path, "header has no version"))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(DataError::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| bad(path, format!("header: {e}")))?;
    if config_hash(&header.run_config) != header.config_hash {
        return Err(bad(
            path,
            "config hash does not match the stored configuration",
        ));
    }
    header
        .model
        .validate()
        .map_err(|e| bad(path, e.to_string()))?;

    let expected = ModelParams::expected_shapes(&header.model);
    let mut tensors: Vec<Option<DiffTensor>> = vec![None; BLOCK_NAMES.len()];
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let block: Block = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: n + 2,
            message: e.to_string(),
        })?;
        let idx = BLOCK_NAMES
            .iter()
            .position(|b| *b == block.name)
            .ok_or_else(|| DataError::ShapeMismatch(format!("unknown block `{}`", block.name)))?;
        let want = &expected[idx].1;
        if &block.shape != want {
            return Err(DataError::ShapeMismatch(format!(
                "block `{}` has shape {:?}, expected {:?}",
                block.name, block.shape, want
            )));
        }
        let t = DiffTensor::new(block.shape, block.values, true)
            .map_err(|e| DataError::ShapeMismatch(format!("block `{}`: {e}", block.name)))?;
        tensors[idx] = Some(t);
    }
    let missing: Vec<&str> = BLOCK_NAMES
        .iter()
        .zip(&tensors)
        .filter(|(_, t)| t.is_none())
        .map(|(n, _)| *n)
        .collect();
    if !missing.is_empty() {
        return Err(DataError::ShapeMismatch(format!(
            "missing blocks: {}",
            missing.join(", ")
        )));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut params = ModelParams::init(&header.model, &mut rng);
    for ((_, slot), t) in params.blocks_mut().into_iter().zip(tensors) {
        *slot = t.expect("checked above");
    }
    let model = Model::new(
        header.model,
        params,
        header.class_weights,
        header.prior_counts,
    )
    .map_err(|e| bad(path, e.to_string()))?;
    Ok((model, header.run_config))
}
