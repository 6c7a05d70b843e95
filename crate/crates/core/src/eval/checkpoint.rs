//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IBAT"                      magic
//! u32                         format version
//! u32 len, bytes              architecture descriptor (UTF-8)
//! u64                         seed
//! u32 len, bytes              training-config snapshot (UTF-8)
//! u32                         parameter count
//! per parameter:
//!   u32 len, bytes            name
//!   u32 rank, u32 × rank      shape
//!   f64 × product(shape)      values
//! ```
//!
//! Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier, Param};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IBAT";
pub const FORMAT_VERSION: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub classifier: Classifier,
    /// Resolved training config, as text.
    pub config: String,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(c: &Classifier, config: &str, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &c.architecture().to_string());
    out.extend_from_slice(&seed.to_le_bytes());
    put_str(&mut out, config);
    put_u32(&mut out, c.params().len() as u32);
    for p in c.params() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let arch: Architecture = r
        .string("architecture")?
        .parse()
        .map_err(|e| Error::CorruptCheckpoint(format!("architecture descriptor: {e}")))?;
    let seed = r.u64("seed")?;
    let config = r.string("config")?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::CorruptCheckpoint(format!("shape {shape:?} of `{name}` overflows")))?;
        let raw = r.take(len.checked_mul(8).unwrap_or(usize::MAX), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let classifier = Classifier::from_params(arch, params).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        classifier,
        config,
        seed,
    })
}

pub fn save_checkpoint(c: &Classifier, config: &str, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(c, config, seed)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
