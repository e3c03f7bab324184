//! `ADSM` named-tensor archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADSM" | version: u32 = 1 | count: u32
//! count × { name_len: u16 | name: UTF-8 | rank: u8 | dims: rank × u32 | data: numel × f32 }
//! config echo: UTF-8 text up to end of file
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"ADSM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`, in registration order.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config: String) -> Self {
        let tensors = store
            .iter()
            .map(|p| {
                let t = p.tensor();
                NamedTensor {
                    name: p.name().to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.f64() as f32).collect(),
                }
            })
            .collect();
        Checkpoint { tensors, config }
    }

    /// Copies every archived tensor into the parameter of the same name.
    /// Every parameter of `store` must be present.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            store.set_by_name(&t.name, t.data.iter().map(|&v| T::of(v as f64)).collect(), &t.shape)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor {}: shape and data length disagree", t.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::data("not an ADSM archive (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported ADSM version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let config = std::str::from_utf8(&bytes[r.pos..])
            .map_err(|_| Error::data("config echo is not UTF-8"))?
            .to_string();
        Ok(Checkpoint { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data("truncated ADSM archive"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
