//! Binary checkpoints: a versioned header `{format_version, C, vocab_hash}`,
//! the model configuration and vocabulary as JSON, then named f32 tensors.
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Vocab;
use crate::model::{Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"RFTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Body {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Header fields readable without decoding the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub format_version: u32,
    pub channels: u32,
    pub vocab_hash: u64,
}

/// A decoded checkpoint with parameters bound to freshly built handles.
pub struct Checkpoint {
    pub header: Header,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
}

impl Checkpoint {
    /// Fail unless the checkpoint matches the expected width and vocabulary.
    pub fn check_compatible(&self, channels: usize, vocab: &Vocab) -> Result<(), CheckpointError> {
        if self.header.channels as usize != channels {
            return Err(CheckpointError::Incompatible(format!(
                "checkpoint has C={}, configuration expects C={channels}",
                self.header.channels
            )));
        }
        if self.header.vocab_hash != vocab.hash() {
            return Err(CheckpointError::Incompatible(format!(
                "vocabulary hash {:016x} differs from expected {:016x}",
                self.header.vocab_hash,
                vocab.hash()
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encode a model's parameters with its configuration and vocabulary.
pub fn encode(config: &ModelConfig, vocab: &Vocab, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, config.channels as u32);
    out.extend_from_slice(&vocab.hash().to_le_bytes());
    let body = serde_json::to_vec(&Body { config: config.clone(), vocab: vocab.words().to_vec() }).expect("serializable config");
    put_u32(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    put_u32(&mut out, params.len() as u32);
    for e in params.entries() {
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.value.ndim() as u32);
        for &d in e.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(format_version));
    }
    Ok(Header { format_version, channels: r.u32()?, vocab_hash: r.u64()? })
}

/// Decode a checkpoint, rebuilding the model from the stored configuration.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let header = read_header(bytes)?;
    let mut r = Reader { buf: &bytes[8 + 4 + 4 + 8..] };
    let body_len = r.u32()? as usize;
    let body: Body =
        serde_json::from_slice(r.take(body_len)?).map_err(|e| CheckpointError::Corrupt(format!("config block: {e}")))?;
    let vocab = Vocab::from_words(body.vocab);
    if vocab.hash() != header.vocab_hash {
        return Err(CheckpointError::Corrupt("vocabulary does not match header hash".into()));
    }
    if body.config.channels != header.channels as usize {
        return Err(CheckpointError::Corrupt("config width does not match header".into()));
    }
    let (model, mut params) = Model::handles(body.config)?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(CheckpointError::Incompatible(format!("{count} tensors stored, model has {}", params.len())));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let id = params
            .find(&name)
            .ok_or_else(|| CheckpointError::Incompatible(format!("unknown parameter {name}")))?;
        if params.get(id).shape() != shape.as_slice() {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {name}: stored shape {shape:?}, model expects {:?}",
                params.get(id).shape()
            )));
        }
        params.set(id, Tensor::new(&shape, data));
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Checkpoint { header, model, params, vocab })
}

pub fn save(path: &Path, config: &ModelConfig, vocab: &Vocab, params: &ParamStore<f32>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode(config, vocab, params)).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    decode(&bytes)
}
