//! Model files: one JSON header line, then `dim` little-endian f32 weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LinearModel, Objective, Whitener};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "iconika-linear-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    objective: Objective,
    lambda: f64,
    bias: f64,
    seed: u64,
    epochs: usize,
    dim: usize,
    #[serde(default)]
    columns: Vec<String>,
    #[serde(default)]
    whitener: Option<Whitener>,
    #[serde(default)]
    training_log: Vec<f64>,
}

pub fn encode_model(model: &LinearModel) -> Vec<u8> {
    let header = Header {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        objective: model.objective,
        lambda: model.lambda,
        bias: model.b,
        seed: model.seed,
        epochs: model.epochs,
        dim: model.w.len(),
        columns: model.columns.clone(),
        whitener: model.whitener.clone(),
        training_log: model.training_log.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in &model.w {
        out.extend((*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], locator: &str) -> Result<LinearModel> {
    let bad = |m: &str| Error::schema(locator.to_string(), m.to_string());
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
        return Err(bad("not an iconika model file"));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.dim * 4 {
        return Err(bad(&format!(
            "expected {} weight bytes, found {}",
            header.dim * 4,
            body.len()
        )));
    }
    let w = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(LinearModel {
        w,
        b: header.bias,
        lambda: header.lambda,
        objective: header.objective,
        seed: header.seed,
        epochs: header.epochs,
        training_log: header.training_log,
        columns: header.columns,
        whitener: header.whitener,
    })
}

pub fn save_model(model: &LinearModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<LinearModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}
