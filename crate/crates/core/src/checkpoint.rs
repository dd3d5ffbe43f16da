//! JSON containers for model checkpoints and simulation truth.
//!
//! Every file is an object `{"format": TAG, "payload": ...}`. Numbers are
//! written in shortest round-trip form and parsed with exact float
//! round-tripping, so parameters survive a save/load cycle bit-for-bit.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::basis::Grid;
use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Profnet, ProfnetParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_TAG: &str = "profnet-ckpt-v1";

#[derive(Serialize)]
struct ContainerOut<'a, T> {
    format: &'a str,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
}

#[derive(Deserialize)]
struct ContainerIn<T> {
    payload: T,
}

fn json_error(path: &Path, text: &str, e: serde_json::Error) -> Error {
    // a number cut in half reports as a syntax error at the last character
    let last = text.lines().last().map_or(0, |l| l.len());
    let at_end = e.line() == text.lines().count().max(1) && e.column() >= last;
    if e.is_syntax() && at_end {
        return Error::io(
            path,
            io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated file: {e}")),
        );
    }
    match e.classify() {
        serde_json::error::Category::Eof => Error::io(
            path,
            io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated file: {e}")),
        ),
        serde_json::error::Category::Io => Error::io(path, io::Error::other(e)),
        _ => Error::Format(format!("{}: {e}", path.display())),
    }
}

pub fn write_tagged<T: Serialize>(path: &Path, tag: &str, payload: &T) -> Result<()> {
    let text = serde_json::to_string(&ContainerOut {
        format: tag,
        payload,
    })
    .map_err(|e| Error::Format(format!("serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_tagged<T: DeserializeOwned>(path: &Path, tag: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tagged(path, &text, tag)
}

fn parse_tagged<T: DeserializeOwned>(path: &Path, text: &str, tag: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(|e| json_error(path, text, e))?;
    if header.format != tag {
        return Err(Error::Format(format!(
            "{}: format tag '{}' (expected '{tag}')",
            path.display(),
            header.format
        )));
    }
    let c: ContainerIn<T> = serde_json::from_str(text).map_err(|e| json_error(path, text, e))?;
    Ok(c.payload)
}

/// Which master seed produced a model and the derived init seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub master: u64,
    pub init: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointBody {
    config: ModelConfig,
    grid: Vec<f64>,
    seed: Option<SeedLineage>,
    params: Vec<NamedTensor>,
}

pub fn save_checkpoint(model: &Profnet, seed: Option<SeedLineage>, path: &Path) -> Result<()> {
    let body = CheckpointBody {
        config: model.config().clone(),
        grid: model.grid().points().to_vec(),
        seed,
        params: model
            .store()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                tensor: t.clone(),
            })
            .collect(),
    };
    write_tagged(path, CHECKPOINT_TAG, &body)
}

pub fn load_checkpoint(path: &Path) -> Result<(Profnet, Option<SeedLineage>)> {
    let body: CheckpointBody = read_tagged(path, CHECKPOINT_TAG)?;
    let mut store = ParamStore::new();
    for p in body.params {
        if !p.tensor.is_rank2() || p.tensor.numel() != p.tensor.shape().iter().product::<usize>() {
            return Err(Error::Format(format!(
                "parameter '{}' has a malformed shape",
                p.name
            )));
        }
        store.insert(p.name, p.tensor);
    }
    let params = ProfnetParams::from_store(&body.config, store)?;
    let grid =
        Arc::new(Grid::new(body.grid).map_err(|e| Error::Format(format!("checkpoint grid: {e}")))?);
    Ok((Profnet::new(body.config, grid, params)?, body.seed))
}
