//! Binary checkpoint format.
//!
//! Layout: magic `MCD1`, a little-endian `u32` header length, a UTF-8
//! `key=value` header (one entry per line), then each tensor as
//! `u16` name length, name, `u8` dtype tag, `u8` rank, `u64` dims, payload.
//! Only dtype tag 1 (little-endian `f64`) is defined.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DenoiserModel, ModelConfig, Params};

pub const MAGIC: &[u8; 4] = b"MCD1";
const FORMAT: &str = "mcd-denoiser-v1";
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint does not match the expected model: {0}")]
    ConfigMismatch(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

type CResult<T> = std::result::Result<T, CheckpointError>;

fn header_text(cfg: &ModelConfig, params: &Params) -> String {
    let mut h = String::new();
    let mut put = |k: &str, v: String| {
        h.push_str(k);
        h.push('=');
        h.push_str(&v);
        h.push('\n');
    };
    put("format", FORMAT.into());
    put("vocab", cfg.vocab.to_string());
    put("seq_len", cfg.seq_len.to_string());
    put("width", cfg.width.to_string());
    put("depth", cfg.depth.to_string());
    put("heads", cfg.heads.to_string());
    put("ffn_mult", cfg.ffn_mult.to_string());
    put("init_std", format!("{:?}", cfg.init_std));
    put("arrays", params.tensors().len().to_string());
    put("param_count", params.count().to_string());
    h
}

pub fn encode(model: &DenoiserModel) -> Vec<u8> {
    let header = header_text(&model.config, &model.params);
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.params.count() + 64 * model.params.tensors().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, shape, values) in model.params.tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> CResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> CResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> CResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> CResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> CResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_header(text: &str) -> CResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::BadHeader(format!("line '{line}' has no '='")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CheckpointError::BadHeader(format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> CResult<T> {
    let raw = map.get(key).ok_or_else(|| CheckpointError::BadHeader(format!("missing key '{key}'")))?;
    raw.parse().map_err(|_| CheckpointError::BadHeader(format!("bad value '{raw}' for '{key}'")))
}

pub fn decode(bytes: &[u8]) -> CResult<DenoiserModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(hlen, "header")?).map_err(|_| CheckpointError::BadHeader("header is not UTF-8".into()))?;
    let map = parse_header(text)?;
    let format: String = field(&map, "format")?;
    if format != FORMAT {
        return Err(CheckpointError::BadHeader(format!("unknown format '{format}'")));
    }
    let cfg = ModelConfig {
        vocab: field(&map, "vocab")?,
        seq_len: field(&map, "seq_len")?,
        width: field(&map, "width")?,
        depth: field(&map, "depth")?,
        heads: field(&map, "heads")?,
        ffn_mult: field(&map, "ffn_mult")?,
        init_std: field(&map, "init_std")?,
    };
    cfg.validate().map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut params = Params::zeros(&cfg);
    let layout: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let arrays: usize = field(&map, "arrays")?;
    let count: usize = field(&map, "param_count")?;
    if arrays != layout.len() || count != params.count() {
        return Err(CheckpointError::BadHeader(format!(
            "header declares {arrays} arrays / {count} parameters, configuration implies {} / {}",
            layout.len(),
            params.count()
        )));
    }
    let mut slots = params.tensors_mut();
    for ((name, shape), slot) in layout.iter().zip(slots.iter_mut()) {
        let nlen = r.u16("array name length")? as usize;
        let got = std::str::from_utf8(r.take(nlen, "array name")?).map_err(|_| CheckpointError::BadHeader("array name is not UTF-8".into()))?;
        if got != name {
            return Err(CheckpointError::BadHeader(format!("expected array '{name}', found '{got}'")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::UnsupportedDtype(dtype));
        }
        let ndim = r.u8("rank")? as usize;
        let dims = (0..ndim).map(|_| r.u64("dims").map(|d| d as usize)).collect::<CResult<Vec<_>>>()?;
        if &dims != shape {
            return Err(CheckpointError::BadHeader(format!("array '{name}' has shape {dims:?}, expected {shape:?}")));
        }
        let payload = r.take(8 * slot.len(), "payload")?;
        for (dst, chunk) in slot.iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(CheckpointError::BadHeader(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(DenoiserModel { config: cfg, params })
}

pub fn save(model: &DenoiserModel, path: &Path) -> CResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> CResult<DenoiserModel> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and checks that its architecture equals `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> CResult<DenoiserModel> {
    let model = load(path)?;
    if model.config != *expected {
        return Err(CheckpointError::ConfigMismatch(format!("{:?} vs expected {:?}", model.config, expected)));
    }
    Ok(model)
}
