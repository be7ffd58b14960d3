//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"MVDC"
//! u32    format version
//! u8     stage (0 pretrained, 1 finetuned)
//! u32    header length, then a JSON header {config, shape}
//! u32    rng-state length, then the opaque rng-state bytes
//! u32    tensor count; per tensor: u64 element count, then f64 values
//! u32    CRC-32 of every preceding byte
//! ```
//!
//! Tensors follow [`ModelParams::tensors`] order, weight before bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{AutoencoderParams, HeadParams, Mlp, ModelParams, ModelShape};
use crate::trainer::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MVDC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl Stage {
    fn byte(self) -> u8 {
        match self {
            Stage::Pretrained => 0,
            Stage::Finetuned => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Stage::Pretrained),
            1 => Ok(Stage::Finetuned),
            _ => Err(Error::Integrity(format!("unknown stage byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub stage: Stage,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, stage: Stage) -> Self {
        let rng_state = config.seed.to_le_bytes().to_vec();
        Self {
            version: FORMAT_VERSION,
            config,
            params,
            stage,
            rng_state,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.config.model_shape(&self.params.view_dims(), self.params.k())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    shape: ModelShape,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.validate()?;
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        shape: ckpt.shape(),
    })?;
    let tensors = ckpt.params.tensors();
    let mut out = Vec::with_capacity(64 + header.len() + 8 * ckpt.params.num_params() + 8 * tensors.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.push(ckpt.stage.byte());
    put_block(&mut out, &header);
    put_block(&mut out, &ckpt.rng_state);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("file is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted)".into()));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let stage = Stage::from_byte(r.take(1)?[0])?;
    let header: Header = serde_json::from_slice(r.block()?)
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let rng_state = r.block()?.to_vec();
    let mut params = zero_params(&header.shape)?;
    let count = r.u32()? as usize;
    {
        let mut slots: Vec<&mut [f64]> = params.stacks_mut().into_iter().flat_map(Mlp::tensors_mut).collect();
        if slots.len() != count {
            return Err(Error::Integrity(format!("{count} tensors stored, model has {}", slots.len())));
        }
        for slot in slots.iter_mut() {
            let n = r.u64()? as usize;
            if n != slot.len() {
                return Err(Error::Integrity(format!("tensor of {n} values, expected {}", slot.len())));
            }
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        version,
        config: header.config,
        params,
        stage,
        rng_state,
    })
}

fn zero_params(shape: &ModelShape) -> Result<ModelParams> {
    let mut autoencoders = Vec::with_capacity(shape.view_dims.len());
    for v in 0..shape.view_dims.len() {
        autoencoders.push(AutoencoderParams {
            encoder: Mlp::zeros(&shape.encoder_spec(v)?),
            decoder: Mlp::zeros(&shape.decoder_spec(v)?),
            view_index: v,
        });
    }
    let head = shape.head_spec()?;
    Ok(ModelParams {
        autoencoders,
        heads: HeadParams {
            student: Mlp::zeros(&head),
            predictor: Mlp::zeros(&shape.predictor_spec()?),
            teacher: Mlp::zeros(&head),
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        file: path.display().to_string(),
        source: e,
    })?;
    decode_checkpoint(&bytes)
}
