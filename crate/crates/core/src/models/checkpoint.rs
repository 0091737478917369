//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `DHATCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then every tensor
//! listed in the header as consecutive little-endian `f32` values.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchDescriptor, Classifier};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DHATCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingStep {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub global_step: u64,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed)
            .map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub params: Vec<ArrayD<f32>>,
    pub step: TrainingStep,
    pub rng: RngState,
    pub config_hash: String,
    /// SGD momentum buffers, present for resumable training checkpoints.
    pub momentum: Option<Vec<ArrayD<f32>>>,
    /// Frozen Grad-CAM model used during training, if any.
    pub aux: Option<(ArchDescriptor, Vec<ArrayD<f32>>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchDescriptor,
    step: TrainingStep,
    rng: RngState,
    config_hash: String,
    aux_arch: Option<ArchDescriptor>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Classifier<f32>,
        step: TrainingStep,
        rng: RngState,
        config_hash: impl Into<String>,
    ) -> Self {
        Checkpoint {
            arch: *model.arch(),
            params: model.params().to_vec(),
            step,
            rng,
            config_hash: config_hash.into(),
            momentum: None,
            aux: None,
        }
    }

    pub fn model(&self) -> Result<Classifier<f32>> {
        Classifier::from_parts(self.arch, self.params.clone())
    }

    pub fn aux_model(&self) -> Result<Option<Classifier<f32>>> {
        self.aux
            .as_ref()
            .map(|(arch, params)| Classifier::from_parts(*arch, params.clone()))
            .transpose()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(&str, &ArrayD<f32>)> =
            self.params.iter().map(|p| ("model", p)).collect();
        if let Some(m) = &self.momentum {
            tensors.extend(m.iter().map(|p| ("momentum", p)));
        }
        if let Some((_, a)) = &self.aux {
            tensors.extend(a.iter().map(|p| ("aux", p)));
        }
        let header = Header {
            arch: self.arch,
            step: self.step,
            rng: self.rng.clone(),
            config_hash: self.config_hash.clone(),
            aux_arch: self.aux.as_ref().map(|(a, _)| *a),
            tensors: tensors
                .iter()
                .map(|(g, t)| TensorEntry {
                    group: g.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let n: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let (mut params, mut momentum, mut aux) = (Vec::new(), Vec::new(), Vec::new());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            match entry.group.as_str() {
                "model" => params.push(t),
                "momentum" => momentum.push(t),
                "aux" => aux.push(t),
                other => return Err(Error::Checkpoint(format!("unknown tensor group {other}"))),
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let aux = match header.aux_arch {
            Some(arch) => Some((arch, aux)),
            None if aux.is_empty() => None,
            None => return Err(bad("aux tensors without aux architecture")),
        };
        let ckpt = Checkpoint {
            arch: header.arch,
            params,
            step: header.step,
            rng: header.rng,
            config_hash: header.config_hash,
            momentum: (!momentum.is_empty()).then_some(momentum),
            aux,
        };
        // validates shapes against the architecture
        ckpt.model()?;
        ckpt.aux_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized archive.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
