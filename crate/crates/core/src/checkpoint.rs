//! Model files: magic, version, a length-prefixed JSON header, then every
//! parameter matrix as little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::DenseMatrix;
use crate::error::{HgibError, Result};
use crate::graph::BehaviorSchema;
use crate::model::HgibParams;
use crate::report::atomic_write;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"HGIBMODL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub behaviors: Vec<String>,
    pub target: String,
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointHeader {
    pub fn schema(&self) -> Result<BehaviorSchema> {
        BehaviorSchema::with_target(self.behaviors.clone(), &self.target)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: HgibParams<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &HgibParams<f64>,
    schema: &BehaviorSchema,
    config: &TrainConfig,
    best_epoch: usize,
) -> Result<()> {
    let p = &params.params;
    let header = CheckpointHeader {
        behaviors: schema.names().to_vec(),
        target: schema.target_name().to_string(),
        num_users: params.num_users,
        num_items: params.num_items,
        dim: params.dim,
        config: *config,
        best_epoch,
        tensors: p
            .ids()
            .map(|id| TensorInfo { name: p.name(id).to_string(), rows: p.value(id).rows(), cols: p.value(id).cols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 20 + 8 * p.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in p.ids() {
        for x in p.value(id).as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| HgibError::io(path, e))?;
    let bad = |msg: String| HgibError::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a model file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported model version {version}")));
    }
    let len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let body = buf.get(20..).filter(|b| b.len() >= len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    let mut payload = &body[len..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| bad("tensor too large".into()))?;
        if payload.len() < 8 * n {
            return Err(bad(format!("truncated tensor {}", t.name)));
        }
        let data = payload[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        payload = &payload[8 * n..];
        tensors.push(DenseMatrix::from_vec(t.rows, t.cols, data)?);
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes".into()));
    }

    let mut iter = header.tensors.iter().zip(tensors);
    let (info, table) = iter.next().ok_or_else(|| bad("no embedding tensor".into()))?;
    if info.name != "embedding" {
        return Err(bad(format!("first tensor is {:?}, expected embedding", info.name)));
    }
    let mut params = HgibParams::from_embedding(header.num_users, header.num_items, table, header.config.learned_attention)?;
    for (info, value) in iter {
        let id = params.params.find(&info.name).ok_or_else(|| bad(format!("unexpected tensor {:?}", info.name)))?;
        if params.params.value(id).shape() != value.shape() {
            return Err(bad(format!("tensor {:?} has shape {:?}", info.name, value.shape())));
        }
        *params.params.value_mut(id) = value;
    }
    if params.params.len() != header.tensors.len() {
        return Err(bad("missing tensors".into()));
    }
    if params.dim != header.dim {
        return Err(bad(format!("embedding width {} but header says {}", params.dim, header.dim)));
    }
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = HgibParams::<f64>::init(4, 3, 5, true, &mut rng).unwrap();
        let schema = BehaviorSchema::with_target(vec!["view".into(), "buy".into()], "buy").unwrap();
        let config = TrainConfig { learned_attention: true, dim: 5, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &params, &schema, &config, 2).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.header.best_epoch, 2);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        fs::write(&path, b"not a model at all, really").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HgibError::Format(_))));
    }
}
