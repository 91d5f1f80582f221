use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::{self, Image};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, DynTensor, Tensor};

/// 8-bit images of one shared `(C, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    dims: [usize; 3],
    images: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn new(dims: [usize; 3], images: Vec<Vec<u8>>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if images.is_empty() {
            return Err(Error::BadFormat("empty dataset".into()));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != len) {
            return Err(Error::DimsMismatch(format!("image of {} bytes in a {dims:?} dataset", bad.len())));
        }
        Ok(Dataset { dims, images })
    }

    /// Directory of `.pgm`/`.ppm` files (sorted by name), a single image, or
    /// a `.ften` archive of integer values in `[0, 255]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            let mut files: Vec<_> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
                .collect();
            files.sort();
            let images = files.iter().map(pnm::read).collect::<Result<Vec<_>>>()?;
            let dims = images
                .first()
                .map(Image::dims)
                .ok_or_else(|| Error::BadFormat(format!("no PGM/PPM files in {}", path.display())))?;
            if let Some(bad) = images.iter().find(|im| im.dims() != dims) {
                return Err(Error::DimsMismatch(format!("{:?} image among {dims:?} images", bad.dims())));
            }
            return Dataset::new(dims, images.into_iter().map(|im| im.pixels).collect());
        }
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm" | "ppm") => {
                let im = pnm::read(path)?;
                Dataset::new(im.dims(), vec![im.pixels])
            }
            _ => Self::from_tensor(&read_tensor(path)?),
        }
    }

    fn from_tensor(t: &DynTensor) -> Result<Self> {
        let x: Tensor<f64> = t.clone().into_typed();
        let [_, c, h, w] = x.dims();
        let mut bytes = Vec::with_capacity(x.len());
        for &v in x.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::BadFormat(format!("archive value {v} is not a pixel in [0, 255]")));
            }
            bytes.push(v as u8);
        }
        let per = c * h * w;
        Dataset::new([c, h, w], bytes.chunks_exact(per).map(<[u8]>::to_vec).collect())
    }

    /// Two-component mixture of smoothed Gaussian blobs, `4 x 8 x 8` by
    /// default. Each image picks a component, jitters its center, and scales
    /// the blob by a per-channel amplitude.
    pub fn synthetic_blobs(count: usize, dims: [usize; 3], seed: u64) -> Self {
        let [c, h, w] = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [(0.3, 0.3), (0.7, 0.65)];
        let sigma = 0.18 * h.min(w) as f64;
        let images = (0..count)
            .map(|_| {
                let comp = rng.random_range(0..2usize);
                let (cy, cx) = centers[comp];
                let cy = cy * h as f64 + rng.random_range(-0.5..0.5);
                let cx = cx * w as f64 + rng.random_range(-0.5..0.5);
                let mut px = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let phase = (ch + 3 * comp) as f64;
                    let amp = 0.55 + 0.4 * (phase * 1.3).sin().abs();
                    for i in 0..h {
                        for j in 0..w {
                            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                            let v = 16.0 + 220.0 * amp * (-d2 / (2.0 * sigma * sigma)).exp();
                            px.push(v.round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
                px
            })
            .collect();
        Dataset { dims, images }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> Image {
        let [channels, height, width] = self.dims;
        Image {
            channels,
            height,
            width,
            pixels: self.images[i].clone(),
        }
    }

    /// Batches of indices for one epoch, shuffled by `seed` and `epoch`.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<&[u8]> {
        indices.iter().map(|&i| self.images[i].as_slice()).collect()
    }
}

/// Map 8-bit pixels to `(x + u) / 256` with `u ~ U[0, 1)`, as an
/// `(N, C, H, W)` tensor.
pub fn dequantize<T: Scalar, R: Rng + ?Sized>(images: &[&[u8]], dims: [usize; 3], rng: &mut R) -> Tensor<T> {
    let [c, h, w] = dims;
    let data = images
        .iter()
        .flat_map(|im| im.iter())
        .map(|&v| {
            let u: f64 = rng.random();
            // values just under 1 can round up in f32
            let x = T::of((v as f64 + u) / 256.0);
            if x >= T::one() { T::one() - T::epsilon() } else { x }
        })
        .collect();
    Tensor::from_vec([images.len(), c, h, w], data).expect("image sizes checked by Dataset")
}

/// Inverse of dequantization: `floor(256 x)` clamped to `[0, 255]`.
pub fn quantize<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<u8>> {
    let per = x.c() * x.h() * x.w();
    x.data()
        .chunks_exact(per)
        .map(|s| {
            s.iter()
                .map(|v| {
                    let p = (v.as_f64() * 256.0).floor();
                    if p.is_nan() { 0 } else { p.clamp(0.0, 255.0) as u8 }
                })
                .collect()
        })
        .collect()
}
