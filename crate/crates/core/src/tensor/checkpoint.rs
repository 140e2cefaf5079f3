//! `LABC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LABC" | version: u32 = 1 | count: u32
//! per tensor:
//!   name_len: u16 | name: UTF-8 | dtype: u8 (0 = f32, 1 = bit-packed)
//!   rank: u8 = 4 | dims: 4 × u32 | payload
//! ```
//!
//! Real payloads are IEEE-754 `f32`; bit payloads are the packed `u64` words
//! (LSB-first within each word).

use std::io::{Read, Write};

use super::{BitTensor, Real, RealTensor, Shape4};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LABC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Real(RealTensor),
    Bits(BitTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> Shape4 {
        match self {
            StoredTensor::Real(t) => t.shape(),
            StoredTensor::Bits(b) => b.shape(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_real(&mut self, name: impl Into<String>, t: RealTensor) {
        self.tensors.push((name.into(), StoredTensor::Real(t)));
    }

    pub fn push_bits(&mut self, name: impl Into<String>, b: BitTensor) {
        self.tensors.push((name.into(), StoredTensor::Bits(b)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn real(&self, name: &str) -> Result<&RealTensor> {
        match self.get(name) {
            Some(StoredTensor::Real(t)) => Ok(t),
            Some(StoredTensor::Bits(_)) => Err(Error::Checkpoint(format!("`{name}` is bit-packed"))),
            None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let (code, shape) = match t {
                StoredTensor::Real(r) => (0u8, r.shape()),
                StoredTensor::Bits(b) => (1u8, b.shape()),
            };
            w.write_all(&[code, 4])?;
            for d in shape.dims() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            match t {
                StoredTensor::Real(r) => {
                    let mut buf = Vec::with_capacity(r.len() * 4);
                    for &v in r.data() {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
                StoredTensor::Bits(b) => {
                    let mut buf = Vec::with_capacity(b.words().len() * 8);
                    for &word in b.words() {
                        buf.extend_from_slice(&word.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            read_exact(&mut r, &mut head, "dtype/rank")?;
            if head[1] != 4 {
                return Err(Error::Checkpoint(format!("`{name}`: rank {} (expected 4)", head[1])));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut r, "dims")? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])
                .map_err(|_| Error::Checkpoint(format!("`{name}`: invalid dims {dims:?}")))?;
            let tensor = match head[0] {
                0 => {
                    let mut buf = vec![0u8; shape.len() * 4];
                    read_exact(&mut r, &mut buf, "real payload")?;
                    let data: Vec<Real> = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                        .collect();
                    StoredTensor::Real(
                        RealTensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?,
                    )
                }
                1 => {
                    let words = shape.n * shape.c * shape.h * shape.w.div_ceil(64);
                    let mut buf = vec![0u8; words * 8];
                    read_exact(&mut r, &mut buf, "bit payload")?;
                    let words = buf
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::Bits(
                        BitTensor::from_words(shape, words)
                            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: padding bits set")))?,
                    )
                }
                code => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {code}"))),
            };
            tensors.push((name, tensor));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
