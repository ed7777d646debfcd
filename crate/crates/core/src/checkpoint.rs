//! The checkpoint container.
//!
//! ```text
//! "ECNT" | u32 version | u32 block count
//! per block: u32 name length | name (UTF-8) | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! u64 FNV-1a digest of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Params, Tensor};

pub const MAGIC: &[u8; 4] = b"ECNT";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn digest(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.write(bytes);
        h.finish()
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        let shape = shape.to_vec();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "block shape");
        Block { name: name.into(), shape, data }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Block::new(name, &[1], vec![v])
    }
}

/// An ordered list of named blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn push(&mut self, b: Block) {
        self.blocks.push(b);
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Block> {
        self.get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing block `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let b = self.require(name)?;
        match b.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::CheckpointMismatch(format!("block `{name}` is not a scalar"))),
        }
    }

    /// Appends every tensor of `params` as `prefix + name`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &Params<T>) {
        for (name, t) in params.iter() {
            self.push(Block::new(
                format!("{prefix}{name}"),
                t.shape(),
                t.data().iter().map(|v| v.f64()).collect(),
            ));
        }
    }

    /// Fills `params` (whose layout defines the expected blocks) from
    /// `prefix + name` blocks.
    pub fn fill_params<T: Real>(&self, prefix: &str, params: &mut Params<T>) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let full = format!("{prefix}{name}");
            let b = self.require(&full)?;
            let t = params.by_name_mut(&name).expect("own name");
            if b.shape != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "block `{full}` has shape {:?}, expected {:?}",
                    b.shape,
                    t.shape()
                )));
            }
            *t = Tensor::from_vec(&b.shape, b.data.iter().map(|&v| T::of(v)).collect())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Fnv1a::digest(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "header")?;
        if magic != MAGIC {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: "bad magic bytes".into(),
            });
        }
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("header")? as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let len = r.u32("block name")? as usize;
            let name = String::from_utf8(r.take(len, "block name")?.to_vec()).map_err(|_| Error::Corrupt {
                path: path.into(),
                reason: "block name is not UTF-8".into(),
            })?;
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Corrupt {
                path: path.into(),
                reason: format!("block `{name}` shape overflows"),
            })?;
            let raw = r.take(n.saturating_mul(8), &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Block { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.u64("digest")?;
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let computed = Fnv1a::digest(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::DigestMismatch {
                path: path.into(),
                stored,
                computed,
            });
        }
        Ok(Container { blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename, so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Digest of the encoded container.
    pub fn digest(&self) -> u64 {
        let bytes = self.encode();
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                reason: format!("ran out of bytes in {what} at offset {}", self.pos),
            });
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
}

/// Packs bytes into `f64` values holding one 32-bit little-endian word each,
/// preceded by the byte length.
pub fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    let mut out = vec![bytes.len() as f64];
    for chunk in bytes.chunks(4) {
        let mut w = [0u8; 4];
        w[..chunk.len()].copy_from_slice(chunk);
        out.push(u32::from_le_bytes(w) as f64);
    }
    out
}

/// Inverse of [`bytes_to_f64s`].
pub fn f64s_to_bytes(words: &[f64]) -> Option<Vec<u8>> {
    let (&len, rest) = words.split_first()?;
    let len = len as usize;
    if rest.len() != len.div_ceil(4) {
        return None;
    }
    let mut out = Vec::with_capacity(rest.len() * 4);
    for &w in rest {
        if w.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&w) {
            return None;
        }
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.truncate(len);
    Some(out)
}
