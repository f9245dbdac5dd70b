//! MFT tensor files.
//!
//! ```text
//! "MFT1", u8 dtype code, u8 rank, u64 extents, payload
//! ```
//! Payload is row-major little endian and must be exactly
//! `product(extents) · dtype size` bytes.

use std::path::Path;

use crate::binio::{payload_len, read_shape, write_shape, ByteReader};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{DType, Float, Tensor};

pub const MFT_MAGIC: &[u8; 4] = b"MFT1";

/// Decoded payload in its stored element type.
#[derive(Clone, Debug, PartialEq)]
pub enum MftData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MftFile {
    pub shape: Vec<usize>,
    pub data: MftData,
}

impl MftFile {
    pub fn dtype(&self) -> DType {
        match self.data {
            MftData::F32(_) => DType::F32,
            MftData::F64(_) => DType::F64,
            MftData::U8(_) => DType::U8,
        }
    }

    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Self {
        let bytes = T::to_le_bytes_vec(&t.data());
        let data = match T::DTYPE {
            DType::F32 => MftData::F32(f32::from_le_slice(&bytes)),
            DType::F64 => MftData::F64(f64::from_le_slice(&bytes)),
            DType::U8 => unreachable!("no float type has the u8 code"),
        };
        MftFile {
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to `T` only when the stored dtype matches exactly.
    pub fn into_tensor<T: Float>(self) -> Result<Tensor<T>> {
        let bytes = match (&self.data, T::DTYPE) {
            (MftData::F32(v), DType::F32) => f32::to_le_bytes_vec(v),
            (MftData::F64(v), DType::F64) => f64::to_le_bytes_vec(v),
            _ => {
                return Err(Error::Data(format!(
                    "MFT holds {:?}, requested {:?}",
                    self.dtype(),
                    T::DTYPE
                )))
            }
        };
        Tensor::from_vec(&self.shape, T::from_le_slice(&bytes))
    }

    pub fn from_labels(l: &LabelMap) -> Self {
        MftFile {
            shape: vec![l.height, l.width],
            data: MftData::U8(l.data.clone()),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match (self.shape.as_slice(), self.data) {
            (&[h, w], MftData::U8(v)) => LabelMap::new(h, w, v),
            (s, d) => Err(Error::Data(format!(
                "label MFT must be rank-2 u8, got {s:?} {:?}",
                match d {
                    MftData::F32(_) => DType::F32,
                    MftData::F64(_) => DType::F64,
                    MftData::U8(_) => DType::U8,
                }
            ))),
        }
    }
}

pub fn encode_mft(f: &MftFile) -> Vec<u8> {
    let mut out = MFT_MAGIC.to_vec();
    out.push(f.dtype().code());
    write_shape(&mut out, &f.shape);
    match &f.data {
        MftData::F32(v) => out.extend_from_slice(&f32::to_le_bytes_vec(v)),
        MftData::F64(v) => out.extend_from_slice(&f64::to_le_bytes_vec(v)),
        MftData::U8(v) => out.extend_from_slice(v),
    }
    out
}

pub fn decode_mft(bytes: &[u8]) -> Result<MftFile> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MFT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected MFT1".into(),
        });
    }
    let at = r.offset();
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or(Error::Format {
        offset: at,
        detail: format!("unknown dtype code {code}"),
    })?;
    let shape = read_shape(&mut r)?;
    let n = payload_len(&r, &shape, dtype.size())?;
    let payload = r.take(n, "payload")?;
    if r.remaining() != 0 {
        return Err(r.error(format!(
            "payload is {} bytes, expected {n}",
            n + r.remaining()
        )));
    }
    let data = match dtype {
        DType::F32 => MftData::F32(f32::from_le_slice(payload)),
        DType::F64 => MftData::F64(f64::from_le_slice(payload)),
        DType::U8 => MftData::U8(payload.to_vec()),
    };
    Ok(MftFile { shape, data })
}

pub fn write_mft(path: &Path, f: &MftFile) -> Result<()> {
    std::fs::write(path, encode_mft(f)).map_err(|e| Error::io(path, e))
}

pub fn read_mft(path: &Path) -> Result<MftFile> {
    decode_mft(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_tensor<T: Float>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_mft(path, &MftFile::from_tensor(t))
}

pub fn read_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    read_mft(path)?.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_are_bit_exact() {
        let v = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 3.5e30, 1.0, 2.0];
        let t = Tensor::from_vec(&[1, 2, 3], v.clone()).unwrap();
        let back = decode_mft(&encode_mft(&MftFile::from_tensor(&t))).unwrap().into_tensor::<f32>().unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        assert!(back.to_vec().iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        let l = LabelMap::new(2, 2, vec![0, 3, 1, 255]).unwrap();
        assert_eq!(decode_mft(&encode_mft(&MftFile::from_labels(&l))).unwrap().into_labels().unwrap(), l);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = encode_mft(&MftFile::from_tensor(&t));
        assert_eq!(&b[..4], b"MFT1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(u64::from_le_bytes(b[6..14].try_into().unwrap()), 2);
        assert_eq!(b.len(), 14 + 16);
    }

    #[test]
    fn truncation_and_garbage_are_reported() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode_mft(&MftFile::from_tensor(&t));
        let err = decode_mft(&b[..b.len() - 1]).unwrap_err();
        match err {
            Error::Format { offset, detail } => {
                assert_eq!(offset, 14);
                assert!(detail.contains("expected 12") && detail.contains("found 11"), "{detail}");
            }
            e => panic!("{e}"),
        }
        let mut long = b.clone();
        long.push(0);
        assert!(decode_mft(&long).is_err());
        assert!(matches!(decode_mft(b"MFT2"), Err(Error::Format { offset: 0, .. })));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(decode_mft(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(decode_mft(&b).unwrap().into_tensor::<f64>().is_err());
    }
}
