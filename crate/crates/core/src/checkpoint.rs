//! On-disk parameter bundles and training checkpoints.
//!
//! A parameter bundle is `b"PIQW"`, a little-endian `u32` version, a `u32` header
//! length, a JSON header listing `{name, shape}` per tensor, then every tensor as
//! little-endian `f32` in header order. A checkpoint directory holds
//! `manifest.json`, `params.bin` and (optionally) `optimizer.bin`.

use crate::model::{ModelError, NetConfig, PiqaNet};
use crate::nn::{Adam, AdamState, Module};
use crate::trainer::{EpochRecord, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

pub const BUNDLE_MAGIC: &[u8; 4] = b"PIQW";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a parameter bundle ({reason})")]
    Format { path: String, reason: String },
    #[error("{path}: bad manifest: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] Box<ModelError>),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    tensors: Vec<NamedTensor>,
}

pub fn write_param_bundle(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&BundleHeader {
        tensors: tensors.to_vec(),
    })
    .expect("header serialises");
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut buf = Vec::with_capacity(12 + header.len() + 4 * total);
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "{}", t.name);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_param_bundle(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |reason: &str| CheckpointError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(bad("missing PIQW magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: BundleHeader = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| bad(&e.to_string())))?;
    let mut offset = 12 + hlen;
    let mut tensors = header.tensors;
    for t in &mut tensors {
        let n: usize = t.shape.iter().product();
        let chunk = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(&format!("truncated payload for {}", t.name)))?;
        t.data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(tensors)
}

/// Per-tensor layout entry in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    net: NetConfig,
    train: Option<TrainConfig>,
    layers: Vec<LayerEntry>,
    optimizer: Option<AdamState>,
    history: Vec<EpochRecord>,
}

/// Adam step state with its first and second moments, one vector per parameter.
pub type OptimizerSnapshot = (AdamState, Vec<Vec<f32>>, Vec<Vec<f32>>);

/// Full training state: weights, buffers, optimizer moments, config and history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub net: NetConfig,
    pub train: Option<TrainConfig>,
    pub layers: Vec<LayerEntry>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn capture(
        net: &PiqaNet<f32>,
        optimizer: Option<&Adam<f32>>,
        epoch: usize,
        train: Option<TrainConfig>,
        history: Vec<EpochRecord>,
    ) -> Self {
        let mut refs = Vec::new();
        net.params("", &mut refs);
        let layers = refs
            .iter()
            .map(|(name, p)| LayerEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
            })
            .collect();
        let params = refs
            .iter()
            .map(|(name, p)| NamedTensor {
                name: name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect();
        let optimizer = optimizer.map(|adam| {
            let (m, v) = adam.moments();
            (adam.state(), m.to_vec(), v.to_vec())
        });
        Self {
            epoch,
            net: net.config().clone(),
            train,
            layers,
            params,
            optimizer,
            history,
        }
    }

    /// Rebuilds the network and loads every tensor.
    pub fn build_net(&self) -> Result<PiqaNet<f32>, CheckpointError> {
        let mut net = PiqaNet::<f32>::new(self.net.clone()).map_err(Box::new)?;
        net.load_values_from(&self.params).map_err(Box::new)?;
        Ok(net)
    }

    pub fn build_optimizer(&self) -> Option<Adam<f32>> {
        self.optimizer
            .as_ref()
            .map(|(state, m, v)| Adam::restore(*state, m.clone(), v.clone()))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = Manifest {
            format: "piqa-checkpoint".into(),
            version: BUNDLE_VERSION,
            epoch: self.epoch,
            net: self.net.clone(),
            train: self.train.clone(),
            layers: self.layers.clone(),
            optimizer: self.optimizer.as_ref().map(|(s, _, _)| *s),
            history: self.history.clone(),
        };
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serialises"))
            .map_err(io_err(&mpath))?;
        write_param_bundle(&dir.join(PARAMS_FILE), &self.params)?;
        if let Some((_, m, v)) = &self.optimizer {
            let mut moments = Vec::with_capacity(2 * m.len());
            for (prefix, bufs) in [("m", m), ("v", v)] {
                for (layer, buf) in self.layers.iter().zip(bufs) {
                    moments.push(NamedTensor {
                        name: format!("{prefix}.{}", layer.name),
                        shape: vec![buf.len()],
                        data: buf.clone(),
                    });
                }
            }
            write_param_bundle(&dir.join(OPTIMIZER_FILE), &moments)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
                path: mpath.display().to_string(),
                source,
            })?;
        let params = read_param_bundle(&dir.join(PARAMS_FILE))?;
        let optimizer = match manifest.optimizer {
            Some(state) => {
                let opath = dir.join(OPTIMIZER_FILE);
                let moments = read_param_bundle(&opath)?;
                let half = moments.len() / 2;
                if moments.len() != 2 * manifest.layers.len() {
                    return Err(CheckpointError::Format {
                        path: opath.display().to_string(),
                        reason: "moment count does not match layers".into(),
                    });
                }
                let mut it = moments.into_iter().map(|t| t.data);
                let m: Vec<_> = it.by_ref().take(half).collect();
                let v: Vec<_> = it.collect();
                Some((state, m, v))
            }
            None => None,
        };
        Ok(Self {
            epoch: manifest.epoch,
            net: manifest.net,
            train: manifest.train,
            layers: manifest.layers,
            params,
            optimizer,
            history: manifest.history,
        })
    }
}

/// `runs/<name>/ckpt_<epoch>` under `root`.
pub fn checkpoint_dir(root: &Path, run: &str, epoch: usize) -> PathBuf {
    root.join(run).join(format!("ckpt_{epoch}"))
}
