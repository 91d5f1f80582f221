//! `.ften` tensor files.
//!
//! Layout: magic `FINCTEN\0` (8 bytes), dtype code (1 = f32, 2 = f64),
//! four reserved zero bytes, dims `N, C, H, W` as little-endian `u32`, then
//! the elements little-endian in `(N, C, H, W)` order.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub(crate) const MAGIC: &[u8; 8] = b"FINCTEN\0";
const HEADER_LEN: usize = 8 + 1 + 4 + 16;

/// A tensor read from disk whose dtype is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    /// Convert to `T`, widening or narrowing as needed.
    pub fn into_typed<T: Scalar>(self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

pub(crate) fn encode_dims(dims: [usize; 4], out: &mut Vec<u8>) {
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Dims followed by elements; the part of a `.ften` file after the dtype.
pub(crate) fn encode_body<T: Scalar>(x: &Tensor<T>, out: &mut Vec<u8>) {
    encode_dims(x.dims(), out);
    out.reserve(x.len() * T::DTYPE.size());
    for &v in x.data() {
        v.write_le(out);
    }
}

pub(crate) fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(Error::TruncatedFile {
            expected: end,
            found: bytes.len(),
        });
    }
    let v = u32::from_le_bytes(bytes[*pos..end].try_into().expect("4 bytes"));
    *pos = end;
    Ok(v)
}

pub(crate) fn decode_body<T: Scalar>(bytes: &[u8], pos: &mut usize) -> Result<Tensor<T>> {
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(bytes, pos)? as usize;
    }
    if dims.contains(&0) {
        return Err(Error::BadFormat(format!("zero dim in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::BadFormat(format!("dims {dims:?} overflow")))?;
    let size = T::DTYPE.size();
    let end = *pos + count * size;
    if end > bytes.len() {
        return Err(Error::TruncatedFile {
            expected: end,
            found: bytes.len(),
        });
    }
    let data = bytes[*pos..end].chunks_exact(size).map(T::read_le).collect();
    *pos = end;
    Tensor::from_vec(dims, data)
}

pub fn encode_tensor<T: Scalar>(x: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + x.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&[0; 4]);
    encode_body(x, &mut out);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic("tensor"));
    }
    let dtype = DType::from_code(bytes[8]).ok_or(Error::UnsupportedDtype(bytes[8]))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut pos = 13;
    Ok(match dtype {
        DType::F32 => DynTensor::F32(decode_body(bytes, &mut pos)?),
        DType::F64 => DynTensor::F64(decode_body(bytes, &mut pos)?),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, x: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(x))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DynTensor> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let x = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![1.0, -0.0]).unwrap();
        let b = encode_tensor(&x);
        assert_eq!(&b[..8], b"FINCTEN\0");
        assert_eq!(b[8], 1);
        assert_eq!(&b[9..13], &[0, 0, 0, 0]);
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(b.len(), 29 + 8);
        assert_eq!(&b[33..37], &(-0.0f32).to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_tensor(&Tensor::<f64>::zeros([1, 1, 2, 2]));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::BadMagic(_))));
    }

    #[test]
    fn unsupported_dtype() {
        let mut b = encode_tensor(&Tensor::<f64>::zeros([1, 1, 2, 2]));
        b[8] = 7;
        assert!(matches!(decode_tensor(&b), Err(Error::UnsupportedDtype(7))));
    }

    #[test]
    fn truncated_body() {
        let x = Tensor::<f32>::zeros([1, 1, 10, 10]);
        let b = encode_tensor(&x);
        let cut = &b[..29 + 50 * 4];
        assert!(matches!(
            decode_tensor(cut),
            Err(Error::TruncatedFile { expected, found }) if expected == 29 + 400 && found == 229
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ften");
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![-0.0, f64::MIN_POSITIVE / 4.0, 1.5, -2.0])
            .unwrap();
        write_tensor(&p, &x).unwrap();
        match read_tensor(&p).unwrap() {
            DynTensor::F64(y) => assert!(y.bit_eq(&x)),
            other => panic!("wrong dtype {:?}", other.dtype()),
        }
    }

    fn dims() -> impl Strategy<Value = [usize; 4]> {
        (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_map(|(n, c, h, w)| [n, c, h, w])
    }

    proptest! {
        #[test]
        fn round_trip_f32_bits(d in dims(), bits in prop::collection::vec(any::<u32>(), 64)) {
            let len: usize = d.iter().product();
            let data: Vec<f32> = bits.iter().cycle().take(len).map(|&b| f32::from_bits(b)).collect();
            let x = Tensor::from_vec(d, data).unwrap();
            let DynTensor::F32(y) = decode_tensor(&encode_tensor(&x)).unwrap() else { panic!() };
            prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn round_trip_f64_bits(d in dims(), bits in prop::collection::vec(any::<u64>(), 64)) {
            let len: usize = d.iter().product();
            let data: Vec<f64> = bits.iter().cycle().take(len).map(|&b| f64::from_bits(b)).collect();
            let x = Tensor::from_vec(d, data).unwrap();
            let DynTensor::F64(y) = decode_tensor(&encode_tensor(&x)).unwrap() else { panic!() };
            prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
