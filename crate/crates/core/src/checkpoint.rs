//! Binary checkpoint format shared by every trained component.
//!
//! ```text
//! "X3DC" | version u32 | count u32 | count × entry
//! entry = name_len u16 | name (UTF-8) | rank u8 | rank × extent u32 | f32 data
//! ```
//!
//! All integers and floats are little-endian. Decoding is strict: any
//! truncation, trailing bytes, zero extent or non-finite value is reported as
//! corruption, since the format carries no separate checksum.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{ParamSet, Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"X3DC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub fn encode(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.tensor.rank() as u8);
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet<f32>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        if params.id(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        if rank == 0 || shape.contains(&0) {
            return Err(CheckpointError::Corrupt(format!("{name} has empty shape {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name} shape {shape:?} exceeds file size")))?;
        let raw = r.take(n * 4, "data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Corrupt(format!("{name} holds non-finite values")));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.push(Parameter::new(name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet<f32>) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    fs::write(path, encode(params)).map_err(|source| io_err(path, source))
}

pub fn load(path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    decode(&bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    Ok(bytes_hash(&bytes))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Overwrites the values of `target` with same-named entries from `source`.
pub fn restore_into(target: &mut ParamSet<f32>, source: &ParamSet<f32>) -> Result<(), CheckpointError> {
    let names: Vec<String> = target.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let src = source.by_name(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let id = target.id(&name).expect("name from target");
        let dst = target.get_mut(id);
        if dst.tensor.shape() != src.tensor.shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: dst.tensor.shape().to_vec(),
                actual: src.tensor.shape().to_vec(),
            });
        }
        dst.tensor.data_mut().copy_from_slice(src.tensor.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet<f32> {
        let mut s = ParamSet::new();
        s.push(Parameter::new("stream.rgb.block1.conv", Tensor::new(vec![2, 1, 1, 1, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-30]).unwrap()));
        s.push(Parameter::new("fusion.b", Tensor::full(&[3], 0.25)));
        s
    }

    #[test]
    fn layout_is_exact() {
        let mut s = ParamSet::new();
        s.push(Parameter::new("ab", Tensor::new(vec![1], vec![1.0f32]).unwrap()));
        let bytes = encode(&s);
        let mut expected = b"X3DC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Corrupt(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Corrupt(_))));
        let mut magic = bytes.clone();
        magic[0] = b'Y';
        assert!(matches!(decode(&magic), Err(CheckpointError::Corrupt(_))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode(&version), Err(CheckpointError::Version(9))));
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(CheckpointError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::vec(
                ("[a-z.]{1,24}", prop::collection::vec(1usize..4, 1..5)),
                1..5,
            ),
            seed in any::<u32>(),
        ) {
            let mut set = ParamSet::new();
            let mut x = seed;
            for (name, shape) in entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| {
                    x = x.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                    f32::from_bits((x >> 9) | 0x3f80_0000) - 1.5
                }).collect();
                set.push(Parameter::new(name, Tensor::new(shape, data).unwrap()));
            }
            let bytes = encode(&set);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            for (a, b) in set.iter().zip(back.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
            }
        }
    }
}
