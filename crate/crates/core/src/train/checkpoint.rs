//! Binary checkpoints: model configuration, every parameter by name,
//! actnorm initialization flags, and optionally the Adam state and
//! training counters.
//!
//! Layout (little endian): magic `FINCCKPT`, u32 version, seven u32 config
//! fields (levels, steps, channels, height, width, kernel, hidden), u8
//! dtype, u64 step, u64 epoch, u32 parameter count, then per parameter a
//! u32 name length, the name, and a tensor body (four u32 dims and the
//! elements). Then u32 flag count with one byte per flag, and a u8 that
//! is 1 when an optimizer block follows: u64 Adam step, then first and
//! second moments as tensor bodies in parameter order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Adam;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Init, ModelConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::io::{decode_body, encode_body, read_u32};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FINCCKPT";
pub const VERSION: u32 = 1;

/// Header fields of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dtype: DType,
    pub step: u64,
    pub epoch: u64,
}

/// A fully decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub header: Checkpoint,
    pub model: FlowModel<T>,
    pub optimizer: Option<Adam<T>>,
}

pub fn encode_checkpoint<T: Scalar>(
    model: &mut FlowModel<T>,
    optimizer: Option<&Adam<T>>,
    step: u64,
    epoch: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = *model.config();
    for v in [c.levels, c.steps, c.channels, c.height, c.width, c.kernel_size, c.hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    let mut params = Vec::new();
    model.visit_params(&mut |name, v, _| params.push((name.to_string(), v.clone())));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, v) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_body(v, &mut out);
    }
    let flags = model.actnorm_flags();
    out.extend_from_slice(&(flags.len() as u32).to_le_bytes());
    out.extend(flags.iter().map(|&f| f as u8));
    match optimizer {
        Some(opt) if !opt.m.is_empty() => {
            out.push(1);
            out.extend_from_slice(&opt.t.to_le_bytes());
            for t in opt.m.iter().chain(&opt.v) {
                encode_body(t, &mut out);
            }
        }
        _ => out.push(0),
    }
    out
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let lo = read_u32(bytes, pos)? as u64;
    let hi = read_u32(bytes, pos)? as u64;
    Ok(lo | hi << 32)
}

fn read_u8(bytes: &[u8], pos: &mut usize) -> Result<u8> {
    let b = *bytes.get(*pos).ok_or(Error::TruncatedFile {
        expected: *pos + 1,
        found: bytes.len(),
    })?;
    *pos += 1;
    Ok(b)
}

fn decode_header(bytes: &[u8], pos: &mut usize) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadFormat("not a checkpoint file (bad magic)".into()));
    }
    *pos = 8;
    let version = read_u32(bytes, pos)?;
    if version != VERSION {
        return Err(Error::BadFormat(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = read_u32(bytes, pos)? as usize;
    }
    let code = read_u8(bytes, pos)?;
    let dtype = DType::from_code(code).ok_or(Error::UnsupportedDtype(code))?;
    let step = read_u64(bytes, pos)?;
    let epoch = read_u64(bytes, pos)?;
    let config = ModelConfig {
        levels: f[0],
        steps: f[1],
        channels: f[2],
        height: f[3],
        width: f[4],
        kernel_size: f[5],
        hidden: f[6],
    };
    config.validate()?;
    Ok(Checkpoint {
        config,
        dtype,
        step,
        epoch,
    })
}

/// Read only the header, e.g. to pick the element type before loading.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_header(&fs::read(path)?, &mut 0)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Loaded<T>> {
    let mut pos = 0;
    let header = decode_header(bytes, &mut pos)?;
    if header.dtype != T::DTYPE {
        return Err(Error::BadFormat(format!(
            "checkpoint holds {} parameters, requested {}",
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let mut model = FlowModel::<T>::new(header.config, Init::Identity, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = read_u32(bytes, &mut pos)? as usize;
    let mut stored = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(bytes, &mut pos)? as usize;
        let end = pos + len;
        if end > bytes.len() {
            return Err(Error::TruncatedFile {
                expected: end,
                found: bytes.len(),
            });
        }
        let name = String::from_utf8(bytes[pos..end].to_vec())
            .map_err(|_| Error::BadFormat("parameter name is not utf-8".into()))?;
        pos = end;
        stored.push((name, decode_body::<T>(bytes, &mut pos)?));
    }
    let mut expected = Vec::new();
    model.visit_params(&mut |name, v, _| expected.push((name.to_string(), v.dims())));
    if expected.len() != stored.len() {
        return Err(Error::DimsMismatch(format!(
            "checkpoint has {} parameters, model expects {}",
            stored.len(),
            expected.len()
        )));
    }
    for ((en, ed), (sn, sv)) in expected.iter().zip(&stored) {
        if en != sn || *ed != sv.dims() {
            return Err(Error::DimsMismatch(format!(
                "parameter {sn} {:?} does not match {en} {ed:?}",
                sv.dims()
            )));
        }
    }
    let mut it = stored.into_iter();
    model.visit_params(&mut |_, v, _| *v = it.next().expect("counted").1);
    let nflags = read_u32(bytes, &mut pos)? as usize;
    let mut flags = Vec::with_capacity(nflags.min(1 << 16));
    for _ in 0..nflags {
        flags.push(read_u8(bytes, &mut pos)? != 0);
    }
    model.set_actnorm_flags(&flags)?;
    let optimizer = match read_u8(bytes, &mut pos)? {
        0 => None,
        1 => {
            let t = read_u64(bytes, &mut pos)?;
            let mut moments = Vec::with_capacity(2 * expected.len());
            for i in 0..2 * expected.len() {
                let m: Tensor<T> = decode_body(bytes, &mut pos)?;
                let want = expected[i % expected.len()].1;
                if m.dims() != want {
                    return Err(Error::DimsMismatch(format!("optimizer moment {:?} vs {want:?}", m.dims())));
                }
                moments.push(m);
            }
            let v = moments.split_off(expected.len());
            Some(Adam {
                names: expected.iter().map(|(n, _)| n.clone()).collect(),
                m: moments,
                v,
                t,
            })
        }
        b => return Err(Error::BadFormat(format!("optimizer marker {b}"))),
    };
    if pos != bytes.len() {
        return Err(Error::BadFormat(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Loaded {
        header,
        model,
        optimizer,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &mut FlowModel<T>,
    optimizer: Option<&Adam<T>>,
    step: u64,
    epoch: u64,
) -> Result<()> {
    fs::write(path, encode_checkpoint(model, optimizer, step, epoch))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Loaded<T>> {
    decode_checkpoint(&fs::read(path)?)
}
