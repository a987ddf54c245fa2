//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "LXCK" | u32 version | u8 role (0 learner, 1 expert)
//! u32 n | n bytes of TOML model config
//! 32 bytes SHA-256 of the tokenizer's serialized form
//! u32 vocab size | u32 tensor count
//! per tensor: u32 name length | name | u32 rank | u32 dims... | f32 data
//! ```
//!
//! Tensors appear in `Params::names()` order.

use std::io::{Read, Write};

use super::params::Params;
use super::{ModelConfig, Role};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LXCK";
const VERSION: u32 = 2;

pub(crate) struct Decoded {
    pub cfg: ModelConfig,
    pub role: Role,
    pub tokenizer_hash: [u8; 32],
    pub params: Params<f32>,
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

pub(crate) fn encode(cfg: &ModelConfig, role: Role, tok_hash: &[u8; 32], p: &Params<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match role {
        Role::Learner => 0,
        Role::Expert => 1,
    });
    let cfg_text = toml::to_string(cfg).expect("config serializes");
    put_u32(&mut out, cfg_text.len());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(tok_hash);
    put_u32(&mut out, p.vocab());
    let names = p.names();
    put_u32(&mut out, names.len());
    for ((name, shape), data) in names.iter().zip(p.shapes()).zip(p.slices()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len());
        for d in shape {
            put_u32(&mut out, d);
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub(crate) fn decode(buf: &[u8]) -> Result<Decoded> {
    let mut r = Reader(buf);
    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let role = match r.bytes(1)?[0] {
        0 => Role::Learner,
        1 => Role::Expert,
        x => return Err(Error::Checkpoint(format!("bad role byte {x}"))),
    };
    let n = r.u32()?;
    let cfg_text = std::str::from_utf8(r.bytes(n)?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let cfg: ModelConfig =
        toml::from_str(cfg_text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let mut tokenizer_hash = [0u8; 32];
    tokenizer_hash.copy_from_slice(r.bytes(32)?);
    let vocab = r.u32()?;
    let mut params = Params::<f32>::zeros(vocab, cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
    let names = params.names();
    let shapes = params.shapes();
    let count = r.u32()?;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    for ((name, shape), dst) in names.iter().zip(&shapes).zip(params.slices_mut()) {
        let len = r.u32()?;
        let got = std::str::from_utf8(r.bytes(len)?).unwrap_or("<invalid>");
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
        }
        let raw = r.bytes(dst.len() * 4)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    if !r.0.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Decoded {
        cfg,
        role,
        tokenizer_hash,
        params,
    })
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
