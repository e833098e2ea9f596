//! Binary checkpoints: magic, version, config text, named tensors.
//!
//! ```text
//! "HNETCKPT" | u32 version | u64 len, config (TOML) | u64 count |
//! count × (u32 len, name | u32 ndim | ndim × u64 dim | f64 data...)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{build, ModelConfig, ModelParams};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"HNETCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = params.config.to_text()?;
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let named = params.named();
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let config = ModelConfig::from_text(&r.string(n)?)?;
    let mut params = build(&config, &mut Rng::new(0))?;
    let count = r.len()?;
    let mut slots = params.named_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config expects {}",
            slots.len()
        )));
    }
    for (name, t) in slots.iter_mut() {
        let n = r.u32()? as usize;
        let got = r.string(n)?;
        if got != *name {
            return Err(Error::Format(format!("expected tensor '{name}', found '{got}'")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(Error::Format(format!("tensor '{name}' has shape {shape:?}, expected {:?}", t.shape())));
        }
        for v in t.data_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}
