//! Single-file checkpoints: a versioned text manifest followed by
//! little-endian f64 blocks.
//!
//! ```text
//! RELGRAPH-CKPT 1
//! <manifest byte length>
//! <JSON manifest>
//! <parameter values, then running means and variances, as LE f64>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Featurizer, Model, Network, Sizes};
use crate::params::{Param, ParamKind, ParamStore};
use crate::tensor::{NormStats, Tensor};
use crate::train::Session;

pub const MAGIC: &str = "RELGRAPH-CKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    features: Featurizer,
    params: Vec<ParamEntry>,
    /// Normalization layer names and widths, in block order.
    norms: Vec<(String, usize)>,
    epoch: usize,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
    lr: f64,
    rng_seed: Option<[u8; 32]>,
    /// Stream position as a decimal string (JSON numbers cannot hold u128).
    rng_word_pos: Option<String>,
}

/// A model plus the training-session state needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub lr: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    /// The session's best parameters together with its RNG and counters.
    pub fn from_session(s: &Session) -> Self {
        Checkpoint {
            model: s.best_model(),
            epoch: s.epoch,
            best_epoch: s.best.as_ref().map(|b| b.epoch),
            best_metric: s.best.as_ref().map(|b| b.metric),
            lr: s.lr,
            rng: Some(s.rng.clone()),
        }
    }

    pub fn from_model(model: Model) -> Self {
        let lr = model.config().lr;
        Checkpoint {
            model,
            epoch: 0,
            best_epoch: None,
            best_metric: None,
            lr,
            rng: None,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let m = &self.model;
        let norms: Vec<(String, usize)> = m.norm_stats.iter().map(|(k, s)| (k.clone(), s.mean.len())).collect();
        let manifest = Manifest {
            config: m.config().clone(),
            features: m.features.clone(),
            params: m
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            norms,
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_metric: self.best_metric,
            lr: self.lr,
            rng_seed: self.rng.as_ref().map(|r| r.get_seed()),
            rng_word_pos: self.rng.as_ref().map(|r| r.get_word_pos().to_string()),
        };
        let json = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        write!(w, "{MAGIC} {VERSION}\n{}\n{json}\n", json.len()).map_err(io)?;
        let mut buf = Vec::with_capacity(8 * m.store.num_values());
        for (_, p) in m.store.iter() {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in m.norm_stats.values() {
            for v in s.mean.iter().chain(&s.var) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
        let mut parts = line.trim_end().split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
        let len: usize = line.trim().parse().map_err(|_| bad("bad manifest length"))?;
        let mut json = vec![0u8; len + 1];
        r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
        if json.pop() != Some(b'\n') {
            return Err(bad("manifest not newline-terminated"));
        }
        let mut manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        manifest.features.vocab.rebuild_index();

        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| bad(&e.to_string()))?;
        let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>()
            + manifest.norms.iter().map(|(_, w)| 2 * w).sum::<usize>();
        if rest.len() != 8 * total {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of values, found {}",
                8 * total,
                rest.len()
            )));
        }
        let mut values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |k: usize| -> Vec<f64> { values.by_ref().take(k).collect() };
        let params = manifest
            .params
            .iter()
            .map(|e| {
                let data = take(e.shape.iter().product());
                Ok(Param {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: Tensor::new(e.shape.clone(), data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let store = ParamStore::from_params(params);
        let mut norm_stats = BTreeMap::new();
        for (name, w) in &manifest.norms {
            let mean = take(*w);
            let var = take(*w);
            norm_stats.insert(name.clone(), NormStats { mean, var });
        }
        let net = Network::resolve(&manifest.config, Sizes::of(&manifest.features), &store)?;
        if store.len() != manifest.params.len() || net.norm_layers().len() != norm_stats.len() {
            return Err(bad("checkpoint layout does not match its configuration"));
        }
        let rng = match (manifest.rng_seed, manifest.rng_word_pos) {
            (Some(seed), Some(pos)) => {
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_word_pos(pos.parse().map_err(|_| bad("bad rng position"))?);
                Some(rng)
            }
            _ => None,
        };
        Ok(Checkpoint {
            model: Model {
                net,
                store,
                features: manifest.features,
                norm_stats,
            },
            epoch: manifest.epoch,
            best_epoch: manifest.best_epoch,
            best_metric: manifest.best_metric,
            lr: manifest.lr,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}
