//! Rank-4 `(N, C, H, W)` tensors and the layout operations shared by every
//! other module: corner padding, flips, and channel slicing.

pub(crate) mod io;

pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, DynTensor};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which two sides of an image receive zero padding.
///
/// `TL` is canonical; the other three reduce to it by flipping the axes
/// reported by [`Orientation::flip_axes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    TL,
    TR,
    BL,
    BR,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::TL,
        Orientation::TR,
        Orientation::BL,
        Orientation::BR,
    ];

    pub fn pads_top(self) -> bool {
        matches!(self, Orientation::TL | Orientation::TR)
    }

    pub fn pads_left(self) -> bool {
        matches!(self, Orientation::TL | Orientation::BL)
    }

    /// Axes to flip to turn this orientation into `TL` (and back).
    pub fn flip_axes(self) -> FlipAxes {
        FlipAxes {
            height: !self.pads_top(),
            width: !self.pads_left(),
        }
    }

    /// Row and column offset of the original image inside the padded one.
    pub fn offsets(self, k: usize) -> (usize, usize) {
        let r = if self.pads_top() { k - 1 } else { 0 };
        let c = if self.pads_left() { k - 1 } else { 0 };
        (r, c)
    }

    /// Kernel tap that multiplies the output pixel's own input value.
    pub fn anchor(self, k: usize) -> (usize, usize) {
        self.offsets(k)
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Orientation::TL => "TL",
            Orientation::TR => "TR",
            Orientation::BL => "BL",
            Orientation::BR => "BR",
        };
        f.write_str(s)
    }
}

/// Subset of the two spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FlipAxes {
    pub height: bool,
    pub width: bool,
}

impl FlipAxes {
    pub const NONE: FlipAxes = FlipAxes { height: false, width: false };
    pub const HEIGHT: FlipAxes = FlipAxes { height: true, width: false };
    pub const WIDTH: FlipAxes = FlipAxes { height: false, width: true };
    pub const BOTH: FlipAxes = FlipAxes { height: true, width: true };

    pub fn is_none(self) -> bool {
        !self.height && !self.width
    }
}

/// Dense row-major `(N, C, H, W)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "tensor dims must be >= 1: {dims:?}");
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dim in {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for dims {dims:?} (need {len})",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f([ni, ci, hi, wi]));
                    }
                }
            }
        }
        Self::from_vec(dims, data).expect("dims are valid")
    }

    /// Single `(1, 1, H, W)` image from rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec([1, 1, h, w], rows.concat())
    }
}

impl<T: Copy> Tensor<T> {
    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let o = self.offset(n, c, h, w);
        &mut self.data[o]
    }

    /// Reinterpret with new dims of the same volume.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor { dims, data: self.data })
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Zero-pad by `k - 1` on the two sides named by `orientation`.
    pub fn pad_oriented(&self, orientation: Orientation, k: usize) -> Self {
        assert!(k >= 1, "kernel size must be >= 1");
        let [n, c, h, w] = self.dims;
        let (ro, co) = orientation.offsets(k);
        let mut out = Tensor::zeros([n, c, h + k - 1, w + k - 1]);
        let pw = w + k - 1;
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst_base = plane * (h + k - 1) * pw;
            for i in 0..h {
                let d = dst_base + (i + ro) * pw + co;
                out.data[d..d + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        out
    }

    pub fn flip(&self, axes: FlipAxes) -> Self {
        if axes.is_none() {
            return self.clone();
        }
        let [n, c, h, w] = self.dims;
        let mut out = Vec::with_capacity(self.data.len());
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            for i in 0..h {
                let si = if axes.height { h - 1 - i } else { i };
                let row = &src[si * w..(si + 1) * w];
                if axes.width {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
        Tensor { dims: self.dims, data: out }
    }

    /// Channel slices `[start, end)` of every sample.
    pub fn channel_range(&self, start: usize, end: usize) -> Self {
        let [n, c, h, w] = self.dims;
        assert!(start < end && end <= c, "bad channel range {start}..{end} of {c}");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for ni in 0..n {
            let base = ni * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor {
            dims: [n, end - start, h, w],
            data,
        }
    }

    pub fn channel_split(&self, parts: usize) -> Result<Vec<Self>> {
        let c = self.c();
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::IndivisibleChannels { channels: c, parts });
        }
        let step = c / parts;
        Ok((0..parts)
            .map(|p| self.channel_range(p * step, (p + 1) * step))
            .collect())
    }

    pub fn channel_concat(xs: &[Self]) -> Result<Self> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.dims;
        for x in xs {
            if x.n() != n || x.h() != h || x.w() != w {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concat {:?} with {:?}",
                    first.dims, x.dims
                )));
            }
        }
        let c: usize = xs.iter().map(|x| x.c()).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for ni in 0..n {
            for x in xs {
                let cp = x.c() * plane;
                data.extend_from_slice(&x.data[ni * cp..(ni + 1) * cp]);
            }
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }

    /// The `i`-th sample as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        let [n, c, h, w] = self.dims;
        assert!(i < n);
        let s = c * h * w;
        Tensor {
            dims: [1, c, h, w],
            data: self.data[i * s..(i + 1) * s].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(xs: &[Self]) -> Result<Self> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        if xs.iter().any(|x| x.dims[1..] != first.dims[1..]) {
            return Err(Error::ShapeMismatch("stack needs equal (C, H, W)".into()));
        }
        let n = xs.iter().map(|x| x.n()).sum();
        let data = xs.iter().flat_map(|x| x.data.iter().copied()).collect();
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn counting(dims: [usize; 4]) -> Tensor<f64> {
        let mut v = 0.0;
        Tensor::from_fn(dims, |_| {
            v += 1.0;
            v
        })
    }

    #[test]
    fn offset_layout() {
        let x = counting([2, 3, 4, 5]);
        assert_eq!(x.offset(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(x.at(1, 2, 3, 4), x.data()[x.len() - 1]);
    }

    #[test]
    fn tl_pad_of_3x3_image() {
        let x = counting([1, 1, 3, 3]);
        let p = x.pad_oriented(Orientation::TL, 2);
        assert_eq!(p.dims(), [1, 1, 4, 4]);
        for j in 0..4 {
            assert_eq!(p.at(0, 0, 0, j).to_bits(), 0.0f64.to_bits());
            assert_eq!(p.at(0, 0, j, 0).to_bits(), 0.0f64.to_bits());
        }
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.at(0, 0, i + 1, j + 1), x.at(0, 0, i, j));
            }
        }
    }

    #[test]
    fn br_pad_example() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = x.pad_oriented(Orientation::BR, 2);
        assert_eq!(p, t2(&[&[1.0, 2.0, 0.0], &[3.0, 4.0, 0.0], &[0.0, 0.0, 0.0]]));
    }

    #[test]
    fn k1_pad_is_identity() {
        let x = counting([2, 3, 4, 5]);
        for o in Orientation::ALL {
            assert_eq!(x.pad_oriented(o, 1), x);
        }
    }

    #[test]
    fn flip_width_example() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(x.flip(FlipAxes::WIDTH), t2(&[&[2.0, 1.0], &[4.0, 3.0]]));
        assert_eq!(x.flip(FlipAxes::NONE), x);
        assert!(x.flip(FlipAxes::BOTH).flip(FlipAxes::BOTH).bit_eq(&x));
    }

    #[test]
    fn anchor_corners_match_masked_kernel_pairing() {
        // padding corner TL/TR/BR/BL pairs with masked kernel corner BR/BL/TL/TR
        assert_eq!(Orientation::TL.anchor(3), (2, 2));
        assert_eq!(Orientation::TR.anchor(3), (2, 0));
        assert_eq!(Orientation::BR.anchor(3), (0, 0));
        assert_eq!(Orientation::BL.anchor(3), (0, 2));
    }

    #[test]
    fn split_and_concat() {
        let x = counting([2, 8, 3, 3]);
        let parts = x.channel_split(4).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.dims() == [2, 2, 3, 3]));
        assert!(Tensor::channel_concat(&parts).unwrap().bit_eq(&x));
        assert_eq!(x.channel_split(1).unwrap(), vec![x.clone()]);

        let y = counting([1, 6, 2, 2]);
        assert!(matches!(
            y.channel_split(4),
            Err(Error::IndivisibleChannels { channels: 6, parts: 4 })
        ));
    }

    #[test]
    fn concat_shapes() {
        let a = counting([1, 1, 2, 2]);
        let b = counting([1, 1, 2, 2]);
        assert_eq!(Tensor::channel_concat(&[a.clone(), b]).unwrap().dims(), [1, 2, 2, 2]);
        let c = counting([1, 1, 3, 2]);
        assert!(matches!(
            Tensor::channel_concat(&[a, c]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stack_and_sample() {
        let x = counting([3, 2, 2, 2]);
        let parts: Vec<_> = (0..3).map(|i| x.sample(i)).collect();
        assert_eq!(Tensor::stack(&parts).unwrap(), x);
    }
}
