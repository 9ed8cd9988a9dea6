//! `RVT1` checkpoint files.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic      4 bytes  "RVT1"
//! version    u32      1
//! config     u32 length + UTF-8 TOML of the full run configuration
//! step       u64      steps completed
//! rng        u64 seed, u64 counter
//! params     u32 count, then tensors
//! optimizer  u32 count, then tensors
//! tensor     u32 name length, UTF-8 name, u8 dtype (1 = f32, 2 = f64),
//!            u32 rank, u64 per dimension, payload in row-major order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RVT1";
pub const VERSION: u32 = 1;

/// Counter-keyed generator state: every stream derives from `(seed, counter)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Vec<(String, Tensor<T>)>,
}

fn same<T: Scalar>(a: &[(String, Tensor<T>)], b: &[(String, Tensor<T>)]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

impl<T: Scalar> PartialEq for Checkpoint<T> {
    /// Bit-level comparison of every field.
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.step == o.step
            && self.rng == o.rng
            && same(&self.params, &o.params)
            && same(&self.optimizer, &o.optimizer)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensors<T: Scalar>(out: &mut Vec<u8>, list: &[(String, Tensor<T>)]) -> Result<()> {
    put_u32(out, list.len())?;
    for (name, t) in list {
        put_str(out, name)?;
        out.push(T::DTYPE.code());
        put_u32(out, t.ndim())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn tensors<T: Scalar>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let code = self.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "{name} is {dtype:?}, expected {:?}",
                    T::DTYPE
                )));
            }
            let rank = self.u32()?;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let width = dtype.size_bytes();
            let bytes = self.take(
                numel
                    .checked_mul(width)
                    .ok_or_else(|| Error::Checkpoint("payload overflows".into()))?,
            )?;
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config)?;
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.counter.to_le_bytes());
        put_tensors(&mut out, &self.params)?;
        put_tensors(&mut out, &self.optimizer)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an RVT1 file".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let config = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            counter: r.u64()?,
        };
        let params = r.tensors()?;
        let optimizer = r.tensors()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Dtype stored in a checkpoint file, read from its first tensor.
pub fn peek_dtype(path: &Path) -> Result<Option<DType>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an RVT1 file".into()));
    }
    r.u32()?;
    let n = r.u32()?;
    r.take(n)?;
    r.take(24)?;
    if r.u32()? == 0 {
        return Ok(None);
    }
    r.string()?;
    let code = r.u8()?;
    Ok(DType::from_code(code))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        Checkpoint {
            config: "seed = 1\n".into(),
            step: 42,
            rng: RngState {
                seed: 7,
                counter: 42,
            },
            params: vec![
                (
                    "a.weight".into(),
                    Tensor::from_f64(&[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                (
                    "a.bias".into(),
                    Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap(),
                ),
            ],
            optimizer: vec![(
                "m.a.bias".into(),
                Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap(),
            )],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RVT1");
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        // negative zero survives
        assert_eq!(back.params[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn file_round_trip_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rvt");
        sample().save(&p).unwrap();
        assert_eq!(peek_dtype(&p).unwrap(), Some(DType::F64));
        assert_eq!(Checkpoint::<f64>::load(&p).unwrap(), sample());
    }
}
