//! Learnable weights keyed by block path, plus the checkpoint archive.
//!
//! Checkpoint layout (all integers little-endian u32):
//!
//! ```text
//! "VCKP" | version | config_len | config JSON | n_entries |
//!   { key_len | key utf-8 | ndim | dims... | f32 values }*
//! ```
//!
//! Entries are written in key order so equal parameters give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::config::{Init, ModelConfig};

const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    /// Seeded initialization following the per-tensor scheme in the config's layout.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let mut t = ArrayD::<f64>::zeros(IxDyn(&spec.shape));
            match spec.init {
                Init::Zeros => {}
                Init::Constant(c) => t.fill(c),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("std is positive");
                    t.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                }
                Init::CenterTap => {
                    // identity 3x3 kernel for a 1->1 conv
                    let k = spec.shape[3];
                    t[[0, 0, k / 2, k / 2]] = 1.0;
                }
            }
            tensors.insert(spec.key, t);
        }
        Ok(ModelParams { tensors })
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            tensors: other
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, ArrayD<f64>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, key: &str) -> &ArrayD<f64> {
        self.tensors
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter {key}"))
    }

    pub fn get_mut(&mut self, key: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing parameter {key}"))
    }

    pub fn try_get(&self, key: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(key)
    }

    /// Accumulates `delta` into the named tensor.
    pub fn accumulate(&mut self, key: &str, delta: &ArrayD<f64>) {
        *self.get_mut(key) += delta;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.values_mut().for_each(|t| t.fill(value));
    }

    /// Zeroes every tensor whose key starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                t.fill(0.0);
            }
        }
    }

    /// Every value rounded through `f32`, as stored in a checkpoint.
    pub fn rounded_to_f32(&self) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.mapv(|v| v as f32 as f64)))
                .collect(),
        }
    }

    /// SHA-256 over the keys and the exact f64 bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fails on any missing, extra or mis-shaped tensor.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        for spec in &specs {
            match self.tensors.get(&spec.key) {
                None => return Err(Error::Checkpoint(format!("missing key {}", spec.key))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "{} has shape {:?}, config expects {:?}",
                        spec.key,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(t) if !t.iter().all(|v| v.is_finite()) => {
                    return Err(Error::Checkpoint(format!("{} holds non-finite values", spec.key)))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<_> = specs.iter().map(|s| &s.key).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k));
            return Err(Error::Checkpoint(format!(
                "unexpected key {}",
                extra.map(String::as_str).unwrap_or("?")
            )));
        }
        Ok(())
    }
}

/// Config plus weights, as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION as usize);
        let cfg = serde_json::to_vec(&self.config).expect("config serialization is infallible");
        put(&mut out, cfg.len());
        out.extend_from_slice(&cfg);
        put(&mut out, self.params.len());
        for (key, t) in self.params.iter() {
            put(&mut out, key.len());
            out.extend_from_slice(key.as_bytes());
            put(&mut out, t.ndim());
            for &d in t.shape() {
                put(&mut out, d);
            }
            for &v in t.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let klen = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|_| Error::Checkpoint("key is not utf-8".into()))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t =
                ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))?;
            if tensors.insert(key.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate key {key}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let params = ModelParams { tensors };
        params.check_against(&config)?;
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
