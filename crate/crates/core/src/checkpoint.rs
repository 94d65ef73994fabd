//! Single-file checkpoints: a magic tag, a JSON metadata block and the raw
//! little-endian parameter arrays in metadata order. Optimizer moments are
//! not stored; resuming starts Adam from zero state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Result, RpcError};
use crate::model::{ModelSpec, RpcModel};
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RPCCKPT1";

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| RpcError::Checkpoint(format!("invalid rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: RpcModel<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    /// Class names in head-output order.
    pub classes: Vec<String>,
    /// Validation metric at this epoch, if one was computed.
    pub metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    dtype: String,
    spec: ModelSpec,
    config: BTreeMap<String, String>,
    epoch: usize,
    rng: RngState,
    classes: Vec<String>,
    metric: Option<f64>,
    arrays: Vec<ArrayEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        self.model.visit("", &mut |name, t| {
            arrays.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        });
        let meta = Metadata {
            dtype: T::DTYPE.to_string(),
            spec: self.model.spec.clone(),
            config: self.config.to_map(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            classes: self.classes.clone(),
            metric: self.metric,
            arrays,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RpcError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..json_end])?;
        if meta.dtype != T::DTYPE {
            return Err(RpcError::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let mut config = TrainConfig::for_task(Default::default());
        for (k, v) in &meta.config {
            config.apply(k, v)?;
        }
        // Structure comes from the spec; values are overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RpcModel::<T>::new(meta.spec.clone(), &mut rng)?;
        let width = std::mem::size_of::<T>();
        let mut values: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut offset = json_end;
        for a in &meta.arrays {
            let n: usize = a.shape.iter().product();
            let end = offset + n * width;
            if end > bytes.len() {
                return Err(bad("truncated array data"));
            }
            let data = bytes[offset..end]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            values.insert(a.name.clone(), Tensor::from_vec(&a.shape, data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        let mut problem = None;
        model.visit_mut("", &mut |name, t| match values.remove(&name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                problem.get_or_insert(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    v.shape(),
                    t.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("array {name} missing"));
            }
        });
        if let Some(name) = values.keys().next() {
            problem.get_or_insert(format!("unexpected array {name}"));
        }
        if let Some(p) = problem {
            return Err(RpcError::Checkpoint(p));
        }
        Ok(Self {
            model,
            config,
            epoch: meta.epoch,
            rng: meta.rng,
            classes: meta.classes,
            metric: meta.metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RpcError::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
