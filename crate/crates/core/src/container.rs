//! Binary container for named tensors.
//!
//! One format serves both model weights and gradient shares; the two are
//! told apart by magic so a weight file can never be mistaken for a share.
//! All integers are little endian.
//!
//! ```text
//! magic      4 bytes   "GGLW" for weights, "GGLG" for gradients
//! version    u32       currently 1
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32       byte length of the UTF-8 name
//!   name     ...       name bytes
//!   ndim     u32
//!   dims     ndim*u32
//!   data     product(dims) * f64, row major
//! checksum   u64       FNV-1a 64 over every preceding byte
//! ```
//!
//! Decoding is structural first (magic, version, bounded reads) and verifies
//! the trailing checksum last, so a flipped payload byte in an otherwise
//! well-formed file reports `container checksum mismatch` while a file cut
//! short reports `unexpected end of container`. Declared sizes are checked
//! against the remaining byte count before any allocation, which keeps a
//! corrupt header from requesting absurd buffers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::{fnv1a64, Fnv1a64};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Weights,
    Gradients,
}

impl ContainerKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            ContainerKind::Weights => b"GGLW",
            ContainerKind::Gradients => b"GGLG",
        }
    }

    fn wrong_magic_error(self) -> Error {
        match self {
            ContainerKind::Weights => Error::NotAWeightContainer,
            ContainerKind::Gradients => Error::NotAGradientContainer,
        }
    }
}

/// A tensor plus the name it is stored under. Order in the container is
/// meaningful and preserved by both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

/// Serializes tensors into container bytes, checksum included.
pub fn encode(kind: ContainerKind, tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut hasher = Fnv1a64::new();
    let put = |out: &mut Vec<u8>, hasher: &mut Fnv1a64, bytes: &[u8]| {
        out.extend_from_slice(bytes);
        hasher.update(bytes);
    };

    put(&mut out, &mut hasher, kind.magic());
    put(&mut out, &mut hasher, &FORMAT_VERSION.to_le_bytes());
    put(&mut out, &mut hasher, &(tensors.len() as u32).to_le_bytes());
    for nt in tensors {
        let name = nt.name.as_bytes();
        put(&mut out, &mut hasher, &(name.len() as u32).to_le_bytes());
        put(&mut out, &mut hasher, name);
        let shape = nt.tensor.shape();
        put(&mut out, &mut hasher, &(shape.len() as u32).to_le_bytes());
        for &d in shape {
            put(&mut out, &mut hasher, &(d as u32).to_le_bytes());
        }
        for &v in nt.tensor.data() {
            put(&mut out, &mut hasher, &v.to_le_bytes());
        }
    }
    out.extend_from_slice(&hasher.finish().to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::UnexpectedEnd);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses container bytes, verifying magic, version, structure and the
/// trailing checksum.
pub fn decode(kind: ContainerKind, bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != kind.magic() {
        return Err(kind.wrong_magic_error());
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32()? as usize;

    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_bytes = cur.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::InvalidArgument("container tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(64));
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::UnexpectedEnd)?;
        let byte_len = numel.checked_mul(8).ok_or(Error::UnexpectedEnd)?;
        // The declared payload must fit in what is actually left (minus the
        // trailing checksum), otherwise the file was cut short or the
        // header is garbage.
        if cur.remaining() < byte_len + 8 {
            return Err(Error::UnexpectedEnd);
        }
        let raw = cur.take(byte_len)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        tensors.push(NamedTensor::new(name, Tensor::new(shape, data)?));
    }

    if cur.remaining() != 8 {
        return Err(if cur.remaining() < 8 {
            Error::UnexpectedEnd
        } else {
            Error::InvalidArgument("container has bytes after the checksum".into())
        });
    }
    let body = &bytes[..cur.pos];
    let trailer = cur.take(8)?;
    let declared = u64::from_le_bytes([
        trailer[0], trailer[1], trailer[2], trailer[3], trailer[4], trailer[5], trailer[6],
        trailer[7],
    ]);
    if fnv1a64(body) != declared {
        return Err(Error::ChecksumMismatch);
    }
    Ok(tensors)
}

/// Writes a container to disk atomically: the bytes go to a sibling
/// temporary file which is then renamed over the target, so readers never
/// observe a half-written file.
pub fn write_file(path: &Path, kind: ContainerKind, tensors: &[NamedTensor]) -> Result<()> {
    write_bytes_atomic(path, &encode(kind, tensors))
}

pub fn read_file(path: &Path, kind: ContainerKind) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    decode(kind, &bytes)
}

/// Atomic byte-level file write shared by every artifact producer in the
/// crate (containers, images, reports).
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.tmp"),
        None => "tmp".to_string(),
    });
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
