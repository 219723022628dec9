//! Binary checkpoint: a magic tag and version, a TOML metadata block, then
//! named little-endian `f64` tensors.
//!
//! ```text
//! b"DCCACKPT" | version: u32 | meta_len: u64 | meta (UTF-8 TOML)
//! n_tensors: u32 | { name_len: u32 | name | ndim: u32 | dims: u64 × ndim | data: f64 × Π dims }*
//! ```
//!
//! Matrices are stored row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::dcca::CcaModel;
use crate::error::{Error, Result};
use crate::nnet::{BatchNormConfig, Branch, LayerSpec, Optimizer, OptimizerConfig};
use crate::posefeat::TargetFrameStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCCACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
}

impl BranchMeta {
    fn of(b: &Branch) -> Self {
        BranchMeta {
            name: b.name.clone(),
            input_shape: b.input_shape.clone(),
            specs: b.specs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub fold: usize,
    pub run: usize,
    pub seed: u64,
    /// False for the untrained chance-level reference.
    pub trained: bool,
    pub loss_history: Vec<f64>,
    /// Clips whose segments were seen in training, sorted.
    pub train_ids: Vec<String>,
    pub target_clip_id: String,
    pub target: TargetFrameStats,
    pub batch_norm: BatchNormConfig,
    pub audio: BranchMeta,
    pub movement: BranchMeta,
    pub optimizer: OptimizerConfig,
    pub optimizer_steps: u64,
    pub cca_k: usize,
    pub cca_r_reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub audio: Branch,
    pub movement: Branch,
    pub optimizer: Optimizer,
    pub cca: CcaModel,
}

struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn matrix_tensor(name: &str, m: &DMatrix<f64>) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![m.nrows(), m.ncols()],
        data: m.transpose().as_slice().to_vec(),
    }
}

fn vector_tensor(name: &str, v: &[f64]) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn take(tensors: &mut TensorMap, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let (s, d) = tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(bad(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
    }
    Ok(d)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for p in self.audio.state().into_iter().chain(self.movement.state()) {
            out.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            });
        }
        let names: Vec<String> = self
            .audio
            .trainable()
            .into_iter()
            .chain(self.movement.trainable())
            .map(|p| p.name.clone())
            .collect();
        for (moment, bufs) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (name, buf) in names.iter().zip(bufs) {
                out.push(vector_tensor(&format!("optimizer.{moment}.{name}"), buf));
            }
        }
        out.push(matrix_tensor("cca.w_x", &self.cca.w_x));
        out.push(matrix_tensor("cca.w_y", &self.cca.w_y));
        out.push(vector_tensor("cca.mean_x", self.cca.mean_x.as_slice()));
        out.push(vector_tensor("cca.mean_y", self.cca.mean_y.as_slice()));
        out.push(vector_tensor("cca.corrs", &self.cca.corrs));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string(&self.meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.len()?;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let meta: CheckpointMeta = toml::from_str(meta_text).map_err(|e| bad(format!("metadata: {e}")))?;
        let n = r.u32()?;
        let mut tensors = TensorMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }

        let build = |m: &BranchMeta| {
            Branch::build(&m.name, &m.input_shape, &m.specs, meta.batch_norm, 0).map_err(|e| bad(format!("branch {}: {e}", m.name)))
        };
        let mut audio = build(&meta.audio)?;
        let mut movement = build(&meta.movement)?;
        for p in audio.state_mut().into_iter().chain(movement.state_mut()) {
            p.value = take(&mut tensors, &p.name, &p.shape)?;
        }
        let mut optimizer = Optimizer::new(meta.optimizer);
        optimizer.steps = meta.optimizer_steps;
        let params: Vec<(String, usize)> = audio
            .trainable()
            .into_iter()
            .chain(movement.trainable())
            .map(|p| (p.name.clone(), p.len()))
            .collect();
        if params.iter().any(|(name, _)| tensors.contains_key(&format!("optimizer.m.{name}"))) {
            for (name, len) in &params {
                optimizer.m.push(take(&mut tensors, &format!("optimizer.m.{name}"), &[*len])?);
                optimizer.v.push(take(&mut tensors, &format!("optimizer.v.{name}"), &[*len])?);
            }
        }
        let (d_x, d_y, k) = (audio.output_dim(), movement.output_dim(), meta.cca_k);
        let w_x = DMatrix::from_row_slice(d_x, k, &take(&mut tensors, "cca.w_x", &[d_x, k])?);
        let w_y = DMatrix::from_row_slice(d_y, k, &take(&mut tensors, "cca.w_y", &[d_y, k])?);
        let cca = CcaModel {
            w_x,
            w_y,
            mean_x: DVector::from_vec(take(&mut tensors, "cca.mean_x", &[d_x])?),
            mean_y: DVector::from_vec(take(&mut tensors, "cca.mean_y", &[d_y])?),
            corrs: take(&mut tensors, "cca.corrs", &[k])?,
            k,
            r_reg: meta.cca_r_reg,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            meta,
            audio,
            movement,
            optimizer,
            cca,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub(crate) fn meta_for(
        audio: &Branch,
        movement: &Branch,
        optimizer: &Optimizer,
        cca: &CcaModel,
        fields: CheckpointFields,
    ) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: fields.config_hash,
            fold: fields.fold,
            run: fields.run,
            seed: fields.seed,
            trained: fields.trained,
            loss_history: fields.loss_history,
            train_ids: fields.train_ids,
            target_clip_id: fields.target_clip_id,
            target: fields.target,
            batch_norm: fields.batch_norm,
            audio: BranchMeta::of(audio),
            movement: BranchMeta::of(movement),
            optimizer: optimizer.config,
            optimizer_steps: optimizer.steps,
            cca_k: cca.k,
            cca_r_reg: cca.r_reg,
        }
    }
}

/// Metadata that does not come from the model objects themselves.
pub(crate) struct CheckpointFields {
    pub config_hash: String,
    pub fold: usize,
    pub run: usize,
    pub seed: u64,
    pub trained: bool,
    pub loss_history: Vec<f64>,
    pub train_ids: Vec<String>,
    pub target_clip_id: String,
    pub target: TargetFrameStats,
    pub batch_norm: BatchNormConfig,
}
