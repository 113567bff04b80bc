//! Named-tensor checkpoint container.
//!
//! ```text
//! magic "FMCK" | version u32 | header_len u32 | header (JSON)
//! count u32 | count × [name_len u32 | name | rows u32 | cols u32 | rows·cols f64]
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Entries are `param:<name>`, `adam.m:<name>` and `adam.v:<name>`. A stage-2
//! checkpoint holds only the emotion partition and names the stage-1 backbone
//! it was trained on by hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::nn::{hex, ArchConfig, Denoiser, Stage, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::format(0, "malformed rng state in checkpoint header");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub stage: u8,
    pub step: usize,
    pub config_hash: String,
    /// Hash of the stage-1 partition this model runs on.
    pub backbone_hash: String,
    pub rng: RngState,
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn stage_of(header_stage: u8) -> Stage {
    if header_stage == 2 {
        Stage::Two
    } else {
        Stage::One
    }
}

impl Checkpoint {
    /// Snapshot of the parameters (and their optimizer moments) that a stage
    /// owns: everything for stage 1, the emotion partition for stage 2.
    pub fn capture(
        model: &Denoiser,
        adam: &AdamState,
        stage: u8,
        step: usize,
        config_hash: &str,
        rng: &ChaCha8Rng,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, e) in model.params.entries().iter().enumerate() {
            if stage == 2 && e.stage != Stage::Two {
                continue;
            }
            tensors.insert(format!("param:{}", e.name), e.value.clone());
            tensors.insert(format!("adam.m:{}", e.name), adam.m[i].clone());
            tensors.insert(format!("adam.v:{}", e.name), adam.v[i].clone());
        }
        Self {
            header: CheckpointHeader {
                arch: model.arch().clone(),
                arch_hash: model.arch().hash(),
                stage,
                step,
                config_hash: config_hash.to_string(),
                backbone_hash: model.backbone_hash(),
                rng: RngState::capture(rng),
                adam_steps: adam.t,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint file"));
        }
        let body_len = bytes.len() - 32;
        let (body, digest) = bytes.split_at(body_len);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format(body_len as u64, "checksum mismatch, file is corrupt"));
        }
        let mut pos = 4usize;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let s = body
                .get(*pos..*pos + 4)
                .ok_or_else(|| Error::format(*pos as u64, "truncated checkpoint"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        let version = u32_at(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32_at(&mut pos)? as usize;
        let hbytes = body
            .get(pos..pos + hlen)
            .ok_or_else(|| Error::format(pos as u64, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(hbytes).map_err(|e| Error::format(pos as u64, format!("bad header: {e}")))?;
        pos += hlen;
        let count = u32_at(&mut pos)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = pos;
            let nlen = u32_at(&mut pos)? as usize;
            let name = body
                .get(pos..pos + nlen)
                .and_then(|s| std::str::from_utf8(s).ok())
                .ok_or_else(|| Error::format(pos as u64, "bad tensor name"))?
                .to_string();
            pos += nlen;
            let rows = u32_at(&mut pos)? as usize;
            let cols = u32_at(&mut pos)? as usize;
            let n = rows * cols;
            let raw = body
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::format(pos as u64, format!("truncated tensor `{name}`")))?;
            pos += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
                return Err(Error::format(at as u64, format!("duplicate tensor `{name}`")));
            }
        }
        if pos != body.len() {
            return Err(Error::format(pos as u64, "trailing bytes in checkpoint"));
        }
        if header.arch_hash != header.arch.hash() {
            return Err(Error::format(0, "architecture hash does not match the stored architecture"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored partition into `model` and `adam`. Names and shapes
    /// must match exactly.
    pub fn restore_into(&self, model: &mut Denoiser, adam: Option<&mut AdamState>) -> Result<()> {
        if model.arch().hash() != self.header.arch_hash {
            return Err(Error::format(0, "checkpoint architecture differs from the model"));
        }
        let stage = stage_of(self.header.stage);
        let owned: Vec<usize> = model
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| self.header.stage == 1 || e.stage == stage)
            .map(|(i, _)| i)
            .collect();
        if self.tensors.len() != 3 * owned.len() {
            return Err(Error::format(
                0,
                format!("checkpoint holds {} tensors, expected {}", self.tensors.len(), 3 * owned.len()),
            ));
        }
        let fetch = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::format(0, format!("missing tensor `{key}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::format(
                    0,
                    format!("tensor `{key}` has shape {:?}, expected {:?}", t.shape(), like.shape()),
                ));
            }
            Ok(t.clone())
        };
        let ids: Vec<_> = model.params.ids().collect();
        let mut moments = Vec::new();
        for &i in &owned {
            let id = ids[i];
            let name = model.params.entry(id).name.clone();
            let value = fetch(format!("param:{name}"), model.params.get(id))?;
            let m = fetch(format!("adam.m:{name}"), model.params.get(id))?;
            let v = fetch(format!("adam.v:{name}"), model.params.get(id))?;
            *model.params.get_mut(id) = value;
            moments.push((i, m, v));
        }
        if let Some(adam) = adam {
            for (i, m, v) in moments {
                adam.m[i] = m;
                adam.v[i] = v;
            }
            adam.t = self.header.adam_steps;
        }
        Ok(())
    }
}

/// Loads a model for inference. Stage-2 checkpoints need their stage-1
/// backbone, whose hash must match the one they were trained on.
pub fn load_model(path: &Path, backbone: Option<&Path>) -> Result<(Denoiser, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    let mut model = if ck.header.stage == 2 {
        let bpath = backbone.ok_or_else(|| {
            Error::Usage("a stage-2 checkpoint needs its stage-1 backbone checkpoint".into())
        })?;
        let (base, _) = load_model(bpath, None)?;
        if base.backbone_hash() != ck.header.backbone_hash {
            return Err(Error::format(0, "backbone hash does not match the stage-2 checkpoint"));
        }
        base
    } else {
        Denoiser::init(ck.header.arch.clone(), 0)?
    };
    ck.restore_into(&mut model, None)?;
    Ok((model, ck.header))
}
