//! `OWSS` checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "OWSS"  u32 version
//! u32 classes  u32 input_channels  u32 base_width  u32 depth  u64 seed
//! u64 epoch
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes, u8 dtype code, u32 rank, u64 extents..., raw data
//! ClassStats (semantic), ClassStats (contrastive), each:
//!     u32 classes  u32 dim  u64 epoch  u8 has_tag [u64 tag]
//!     per class: u8 present [f64 mean x dim, f64 var x dim, u64 count, u64 epoch]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig, Param};
use crate::stats::{ClassMoments, ClassStats};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"OWSS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub sem_stats: ClassStats,
    pub cont_stats: ClassStats,
    pub epoch: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn stats(&mut self, s: &ClassStats) {
        self.u32(s.classes());
        self.u32(s.dim());
        self.u64(s.epoch() as u64);
        match s.snapshot_tag() {
            Some(t) => {
                self.u8(1);
                self.u64(t as u64);
            }
            None => self.u8(0),
        }
        for m in s.snapshots() {
            match m {
                Some(m) => {
                    self.u8(1);
                    self.f64s(&m.mean);
                    self.f64s(&m.var);
                    self.u64(m.count);
                    self.u64(m.epoch as u64);
                }
                None => self.u8(0),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn stats(&mut self) -> Result<ClassStats> {
        let classes = self.u32()?;
        let dim = self.u32()?;
        let epoch = self.u64()? as usize;
        let tag = match self.u8()? {
            0 => None,
            _ => Some(self.u64()? as usize),
        };
        let mut snapshot = Vec::with_capacity(classes);
        for _ in 0..classes {
            snapshot.push(match self.u8()? {
                0 => None,
                _ => Some(ClassMoments {
                    mean: self.f64s(dim)?,
                    var: self.f64s(dim)?,
                    count: self.u64()?,
                    epoch: self.u64()? as usize,
                }),
            });
        }
        ClassStats::from_snapshot(dim, epoch, tag, snapshot)
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION as usize);
        let c = &self.model.config;
        w.u32(c.classes);
        w.u32(c.input_channels);
        w.u32(c.base_width);
        w.u32(c.depth);
        w.u64(c.seed);
        w.u64(self.epoch as u64);
        w.u32(self.model.params.len());
        for p in &self.model.params {
            w.u32(p.name.len());
            w.0.extend_from_slice(p.name.as_bytes());
            w.u8(T::DTYPE.code());
            w.u32(p.value.rank());
            for &e in p.value.shape() {
                w.u64(e as u64);
            }
            for &v in p.value.data() {
                v.write_le(&mut w.0);
            }
        }
        w.stats(&self.sem_stats);
        w.stats(&self.cont_stats);
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not an OWSS checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(
                path,
                format!("checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let config = ModelConfig {
            classes: r.u32()?,
            input_channels: r.u32()?,
            base_width: r.u32()?,
            depth: r.u32()?,
            seed: r.u64()?,
        };
        let epoch = r.u64()? as usize;
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(Error::format(
                    path,
                    format!("tensor {name} is {dtype:?}, expected {:?}", T::DTYPE),
                ));
            }
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let width = std::mem::size_of::<T>();
            let raw = r.take(count * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            params.push(Param {
                name,
                value: Tensor::new(&shape, data)?,
            });
        }
        let model =
            Model::from_params(config, params).map_err(|e| Error::format(path, e.to_string()))?;
        let sem_stats = r.stats()?;
        let cont_stats = r.stats()?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            model,
            sem_stats,
            cont_stats,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Element type of the first tensor in an encoded checkpoint, if any.
pub fn peek_dtype(bytes: &[u8], path: &Path) -> Result<Option<DType>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an OWSS checkpoint"));
    }
    r.take(4 + 16 + 8 + 8)?;
    if r.u32()? == 0 {
        return Ok(None);
    }
    let len = r.u32()?;
    r.take(len)?;
    let code = r.u8()?;
    DType::from_code(code)
        .map(Some)
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
