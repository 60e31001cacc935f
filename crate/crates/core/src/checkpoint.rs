//! Versioned, checksummed model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VSEGCKPT"
//! u32 len, format version string
//! u32 len, model config text
//! u32 len, metadata text
//! u32 array count
//!   per array: u32 len, name; u32 ndim; ndim × u64 dims; f32 data (row-major)
//! 32-byte SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, Param, UNetConfig};

pub const FORMAT_VERSION: &str = "vesselseg-ckpt/1";
const MAGIC: &[u8; 8] = b"VSEGCKPT";
const DIGEST_LEN: usize = 32;

pub type Metadata = BTreeMap<String, String>;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: Metadata,
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub fn config_text(config: &UNetConfig) -> String {
    format!(
        "depth = {}\nbase_channels = {}\ninit_seed = {}\nupsample = {}\n",
        config.depth,
        config.base_channels,
        config.init_seed,
        config.upsample.as_str()
    )
}

fn key_values(text: &str) -> Result<Metadata> {
    let mut out = Metadata::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Integrity(format!("malformed entry '{line}'")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn parse_config(text: &str) -> Result<UNetConfig> {
    let kv = key_values(text)?;
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::Incompatible(format!("model config lacks '{k}'")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Incompatible(format!("model config '{k}' is not an integer")))
    };
    Ok(UNetConfig {
        depth: num("depth")? as usize,
        base_channels: num("base_channels")? as usize,
        init_seed: num("init_seed")?,
        upsample: get("upsample")?.parse()?,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &Model, metadata: &Metadata) -> Vec<u8> {
    let mut buf = Vec::with_capacity(model.parameter_count() * 4 + 4096);
    buf.extend_from_slice(MAGIC);
    put_bytes(&mut buf, FORMAT_VERSION.as_bytes());
    put_bytes(&mut buf, config_text(model.config()).as_bytes());
    let meta: String = metadata
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.replace('\n', " "), v.replace('\n', " ")))
        .collect();
    put_bytes(&mut buf, meta.as_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        put_bytes(&mut buf, p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
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
            .ok_or_else(|| Error::Integrity("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Integrity("invalid UTF-8 text".into()))
    }
}

/// Decodes a checkpoint. The format version is checked before the checksum so
/// that files from other versions report as incompatible rather than corrupt.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.text()?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "format version '{version}', expected '{FORMAT_VERSION}'"
        )));
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(Error::Integrity("truncated checkpoint".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: r.pos };
    let config = parse_config(r.text()?)?;
    let metadata = key_values(r.text()?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.text()?.to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("array '{name}' has an absurd shape")))?;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Integrity("array too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after parameter arrays".into()));
    }
    let mut model = Model::from_params(config, params)?;
    model.set_checkpoint_id(hex(&digest[..6]));
    Ok(Checkpoint { model, metadata })
}

/// Writes atomically (temporary file then rename) and returns the checkpoint id.
pub fn save_checkpoint(model: &Model, metadata: &Metadata, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode(model, metadata);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..][..6]))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Ok(read_checkpoint(path)?.model)
}
