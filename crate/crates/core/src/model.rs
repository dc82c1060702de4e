//! Named parameter storage, the model enum shared by training and the CLI,
//! and the `FNOC1` checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::container;
use crate::error::{Error, Result};
use crate::fno::{FnoConfig, FnoModel};
use crate::lstm::{LstmConfig, LstmModel};
use crate::training::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FNOC1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every tensor to `g` as a trainable leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Adds every tensor to `g` as a constant, in order.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fno,
    Lstm,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fno" => Ok(ModelKind::Fno),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::invalid(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Fno => "fno",
            ModelKind::Lstm => "lstm",
        })
    }
}

/// A forcing-to-displacement sequence model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Fno(FnoModel),
    Lstm(LstmModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Fno(_) => ModelKind::Fno,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Fno(m) => &m.params,
            Model::Lstm(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Fno(m) => &mut m.params,
            Model::Lstm(m) => &mut m.params,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Model::Fno(m) => m.config.in_channels,
            Model::Lstm(m) => m.config.input_size,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Model::Fno(m) => m.config.out_channels,
            Model::Lstm(m) => m.config.out_channels,
        }
    }

    /// `[B, in, T]` to `[B, out, T]` with parameters already bound to `g`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, train: bool, seed: u64) -> Result<Var> {
        match self {
            Model::Fno(m) => m.forward(g, params, x, train, seed),
            Model::Lstm(m) => m.forward(g, params, x, train),
        }
    }

    /// Inference without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params().bind_constant(&mut g);
        let v = g.constant(x.clone());
        let y = self.forward(&mut g, &p, v, false, 0)?;
        Ok(g.value(y).clone())
    }

    fn config_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Model::Fno(m) => serde_json::to_value(&m.config)?,
            Model::Lstm(m) => serde_json::to_value(&m.config)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f64` values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model_kind: ModelKind,
    config: serde_json::Value,
    norm_stats: Option<NormStats>,
    provenance: serde_json::Value,
    parameters: Vec<ManifestEntry>,
}

/// Model plus the statistics needed to feed it and free-form provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm_stats: Option<NormStats>,
    pub provenance: serde_json::Value,
}

impl Checkpoint {
    pub fn write<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut parameters = Vec::new();
        let mut offset = 0;
        for (name, t) in self.model.params().names().zip(self.model.params().tensors()) {
            parameters.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: self.model.kind(),
            config: self.model.config_json()?,
            norm_stats: self.norm_stats.clone(),
            provenance: self.provenance.clone(),
            parameters,
        };
        let payload = self.model.params().tensors().flat_map(|t| t.data().iter().copied());
        container::write(w, CHECKPOINT_MAGIC, &header, payload)
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let (h, payload): (CheckpointHeader, Vec<f64>) = container::read(r, CHECKPOINT_MAGIC)?;
        if h.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                h.format_version
            )));
        }
        let mut model = match h.model_kind {
            ModelKind::Fno => {
                let cfg: FnoConfig = serde_json::from_value(h.config)?;
                Model::Fno(FnoModel::zeros(cfg)?)
            }
            ModelKind::Lstm => {
                let cfg: LstmConfig = serde_json::from_value(h.config)?;
                Model::Lstm(LstmModel::zeros(cfg)?)
            }
        };
        let store = model.params_mut();
        if store.len() != h.parameters.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, configuration implies {}",
                h.parameters.len(),
                store.len()
            )));
        }
        let mut expected_offset = 0;
        for (i, e) in h.parameters.iter().enumerate() {
            let name = store.names().nth(i).unwrap_or_default().to_string();
            let t = store.tensor_mut(i);
            if e.name != name || e.shape != t.shape() || e.offset != expected_offset {
                return Err(Error::Format(format!(
                    "manifest entry {i} ({} {:?} @ {}) does not match {name} {:?} @ {expected_offset}",
                    e.name,
                    e.shape,
                    e.offset,
                    t.shape()
                )));
            }
            let end = e.offset + t.len();
            if end > payload.len() {
                return Err(Error::Format("parameter payload is truncated".into()));
            }
            t.data_mut().copy_from_slice(&payload[e.offset..end]);
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Format(format!(
                "payload holds {} values, manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            model,
            norm_stats: h.norm_stats,
            provenance: h.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
