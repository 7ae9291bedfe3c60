//! Model checkpoints: an 8-byte magic, a little-endian `u32` header length, a
//! JSON header describing the model and its tensor shapes, then every
//! parameter as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use glnet_core::inference::InferConfig;
use glnet_core::model::{AggregationHead, Branch, BranchConfig, GlNet, SharePlan, Stage};
use glnet_core::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::write_atomic;

pub const MAGIC: &[u8; 8] = b"GLNETCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: BranchConfig,
    plan: SharePlan,
    stage: Stage,
    lambda: f64,
    infer: InferConfig,
    global: Vec<Shape>,
    local: Vec<Shape>,
    context: Option<Vec<Shape>>,
    agg: Vec<Shape>,
}

/// A model together with the patch grid it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GlNet<f32>,
    pub infer: InferConfig,
}

fn shapes(params: &[Tensor<f32>]) -> Vec<Shape> {
    params.iter().map(|p| p.shape()).collect()
}

pub fn to_bytes(model: &GlNet<f32>, infer: &InferConfig) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        plan: model.plan,
        stage: model.stage,
        lambda: model.agg.lambda,
        infer: *infer,
        global: shapes(model.global.params()),
        local: shapes(model.local.params()),
        context: model.context.as_ref().map(|c| shapes(c.params())),
        agg: shapes(model.agg.params()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let groups = [
        Some(model.global.params()),
        Some(model.local.params()),
        model.context.as_ref().map(|c| c.params()),
        Some(model.agg.params()),
    ];
    for p in groups.into_iter().flatten().flatten() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::format(path, format!("not a checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
    let mut data = &bytes[12 + len..];
    let mut take = |shapes: &[Shape]| -> Result<Vec<Tensor<f32>>> {
        shapes
            .iter()
            .map(|&s| {
                let n = s.c * s.h * s.w * 4;
                if data.len() < n {
                    return Err(bad("truncated parameters"));
                }
                let (head, rest) = data.split_at(n);
                data = rest;
                let v = head
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                Ok(Tensor::from_vec(s, v)?)
            })
            .collect()
    };
    let global = Branch::from_params(header.config.clone(), take(&header.global)?)?;
    let local = Branch::from_params(header.config.clone(), take(&header.local)?)?;
    let context = match &header.context {
        Some(s) => Some(Branch::from_params(header.config.clone(), take(s)?)?),
        None => None,
    };
    let agg = AggregationHead::from_params(header.lambda, take(&header.agg)?)?;
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let model = GlNet {
        plan: header.plan,
        global,
        local,
        context,
        agg,
        stage: header.stage,
    };
    Ok(Checkpoint {
        model,
        infer: header.infer,
    })
}

pub fn save(path: &Path, model: &GlNet<f32>, infer: &InferConfig) -> Result<()> {
    write_atomic(path, &to_bytes(model, infer))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(path, &bytes)
}
