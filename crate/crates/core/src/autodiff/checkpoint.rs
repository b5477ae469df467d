//! Versioned binary container for named parameter arrays and optimizer state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "PDSCKPT\0"
//! version      u32      = 1
//! n_params     u32
//!   name_len   u32, name utf-8 bytes
//!   ndim       u32, dims u64 * ndim
//!   values     f64 * prod(dims), row-major
//! n_adam       u32
//!   name_len   u32, name utf-8 bytes   (matches a parameter name)
//!   step_count u64
//!   lr beta1 beta2 eps   f64 * 4
//!   first_moment  f64 * len(param)
//!   second_moment f64 * len(param)
//! n_blobs      u32
//!   name_len   u32, name utf-8 bytes
//!   byte_len   u64, raw bytes
//! ```

use std::io::{Read, Write};

use indexmap::IndexMap;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: IndexMap<String, Tensor>,
    pub adam: IndexMap<String, AdamState>,
    pub blobs: IndexMap<String, Vec<u8>>,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.0.write_all(&buf)?)
    }
    fn name(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

pub(crate) struct Reader<R: Read>(pub R);

impl<R: Read> Reader<R> {
    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
        Ok(buf)
    }
    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    Writer(w).f64s(vs)
}

impl Checkpoint {
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = Writer(w);
        w.0.write_all(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.u32(self.params.len() as u32)?;
        for (name, t) in &self.params {
            w.name(name)?;
            w.u32(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.u64(d as u64)?;
            }
            w.f64s(t.data())?;
        }
        w.u32(self.adam.len() as u32)?;
        for (name, s) in &self.adam {
            w.name(name)?;
            w.u64(s.step_count)?;
            w.f64s(&[s.lr, s.beta1, s.beta2, s.eps])?;
            w.f64s(s.first_moment.data())?;
            w.f64s(s.second_moment.data())?;
        }
        w.u32(self.blobs.len() as u32)?;
        for (name, b) in &self.blobs {
            w.name(name)?;
            w.u64(b.len() as u64)?;
            w.0.write_all(b)?;
        }
        w.0.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader(r);
        if r.bytes(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            ck.params.insert(name, Tensor::new(&shape, r.f64s(n)?));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let shape = ck
                .params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {name}")))?
                .shape()
                .to_vec();
            let n: usize = shape.iter().product();
            let step_count = r.u64()?;
            let h = r.f64s(4)?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            ck.adam.insert(
                name,
                AdamState {
                    first_moment: Tensor::new(&shape, m),
                    second_moment: Tensor::new(&shape, v),
                    step_count,
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                },
            );
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let n = r.u64()? as usize;
            ck.blobs.insert(name, r.bytes(n)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut ck = Checkpoint::default();
        ck.params.insert("w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]));
        let mut st = AdamState::new(&[2, 2], 1e-3);
        st.step_count = 7;
        st.first_moment.data_mut()[1] = 0.25;
        ck.adam.insert("w".into(), st);
        ck.blobs.insert("config".into(), b"{}".to_vec());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::read_from(&b"NOTACKPT"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        let mut ck = Checkpoint::default();
        ck.params.insert("a".into(), Tensor::scalar(1.0));
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
