//! Binary checkpoint format: magic "SVCL", a u32 format version, a
//! length-prefixed JSON metadata block, and named f64 tensors. All integers
//! are little-endian u64 unless noted; saves are atomic (temp + rename).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::ExperimentConfig;
use crate::survival::TimeGrid;

use super::model::{HeadKind, SurvModel};
use super::PipelineError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything about a run that is not a parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Canonical `key = value` snapshot of the experiment config.
    pub config: String,
    /// "projection" or "hazard".
    pub head_kind: String,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Seed of the run that produced it.
    pub seed: u64,
    /// Subject ids of the training split, for the evaluation leakage guard.
    pub train_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SurvModel,
        grid: Option<&TimeGrid>,
        meta: CheckpointMeta,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            model.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(grid) = grid {
            let edges = grid.edges().to_vec();
            let tensor = Tensor::from_vec(1, edges.len(), edges).expect("grid edges are finite");
            tensors.push(("grid.edges".to_string(), tensor));
        }
        Checkpoint { meta, tensors }
    }

    /// The config the checkpoint was trained under.
    pub fn config(&self) -> Result<ExperimentConfig, PipelineError> {
        let config = ExperimentConfig::parse_str(&self.meta.config)?;
        config.validate()?;
        Ok(config)
    }

    pub fn head_kind(&self) -> Result<HeadKind, PipelineError> {
        HeadKind::parse(&self.meta.head_kind).ok_or_else(|| {
            PipelineError::BadCheckpoint(format!("unknown head kind `{}`", self.meta.head_kind))
        })
    }

    /// Rebuilds the model, validating names and shapes against the config.
    pub fn to_model(&self, config: &ExperimentConfig) -> Result<SurvModel, PipelineError> {
        let head = self.head_kind()?;
        let named: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("grid."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        SurvModel::from_named(named, head, config)
    }

    /// The time grid stored alongside a hazard head, if any.
    pub fn grid(&self) -> Result<Option<TimeGrid>, PipelineError> {
        let Some((_, tensor)) = self.tensors.iter().find(|(n, _)| n == "grid.edges") else {
            return Ok(None);
        };
        let config = self.config()?;
        let grid = TimeGrid::from_edges(tensor.data().to_vec(), config.grid)?;
        Ok(Some(grid))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&checkpoint.meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(checkpoint.tensors.len() as u64).to_le_bytes());
    for (name, tensor) in &checkpoint.tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(
            || PipelineError::BadCheckpoint(format!("truncated at byte {}", self.pos)),
        )?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, PipelineError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| PipelineError::BadCheckpoint(format!("{what} length {v} is absurd")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(PipelineError::BadCheckpoint("bad magic bytes".to_string()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::UnsupportedVersion(version));
    }
    let meta_len = cur.len("metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.len("tensor table")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.len("tensor name")?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| PipelineError::BadCheckpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u64()?;
        if rank != 2 {
            return Err(PipelineError::BadCheckpoint(format!(
                "tensor `{name}` has rank {rank}, expected 2"
            )));
        }
        let rows = cur.len("rows")?;
        let cols = cur.len("cols")?;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            PipelineError::BadCheckpoint(format!("tensor `{name}` dimensions overflow"))
        })?;
        let payload = cur.take(n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_vec(rows, cols, data).map_err(|e| {
            PipelineError::BadCheckpoint(format!("tensor `{name}` payload invalid: {e}"))
        })?;
        tensors.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(PipelineError::BadCheckpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}
