//! Masked invertible convolutions.
//!
//! A [`PaddedConvBlock`] pads its input on two adjacent sides and convolves
//! with a [`MaskedKernel`] whose anchor tap is pinned to the channel
//! identity. Every output pixel then depends on its own input value with
//! weight one and otherwise only on pixels that come earlier in the block's
//! raster order, so the convolution matrix is unit triangular and the
//! inverse is a triangular solve. Pixels on one anti-diagonal do not depend
//! on each other, which is what [`wavefront`] exploits.
//!
//! [`FincFlowUnit`] runs four blocks, one per padding corner, on the four
//! channel quarters of its input.

pub mod dense;
mod reference;
pub mod wavefront;

pub use dense::{ConvMatrix, DENSE_CAP};
pub use wavefront::InversionStats;

use rand::Rng;

use crate::conv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FlipAxes, Orientation, Tensor};

/// Convolution weights `(C, C, k, k)` whose anchor tap is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedKernel<T> {
    weights: Tensor<T>,
    orientation: Orientation,
}

impl<T: Scalar> MaskedKernel<T> {
    pub fn identity(channels: usize, k: usize, orientation: Orientation) -> Self {
        let mut kernel = MaskedKernel {
            weights: Tensor::zeros([channels, channels, k, k]),
            orientation,
        };
        kernel.apply_anchor_mask();
        kernel
    }

    /// Off-anchor taps drawn from `U(-0.5, 0.5) / k^2`.
    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        k: usize,
        orientation: Orientation,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (k * k) as f64;
        let weights = Tensor::from_fn([channels, channels, k, k], |_| {
            T::of((rng.random::<f64>() - 0.5) * scale)
        });
        Self::from_weights(weights, orientation)
    }

    /// Wrap `weights` and apply the anchor mask.
    pub fn from_weights(weights: Tensor<T>, orientation: Orientation) -> Self {
        let [co, ci, k, k2] = weights.dims();
        assert!(co == ci && k == k2, "masked kernel must be (C, C, k, k), got {:?}", weights.dims());
        let mut kernel = MaskedKernel { weights, orientation };
        kernel.apply_anchor_mask();
        kernel
    }

    /// Wrap `weights` without masking. Only meant for fault injection in
    /// checks; the inverse algorithms assume the anchor is the identity.
    pub fn from_weights_unmasked(weights: Tensor<T>, orientation: Orientation) -> Self {
        MaskedKernel { weights, orientation }
    }

    pub fn channels(&self) -> usize {
        self.weights.c()
    }

    pub fn k(&self) -> usize {
        self.weights.h()
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// Raw weight access. Callers must re-apply the mask after editing.
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn anchor(&self) -> (usize, usize) {
        self.orientation.anchor(self.k())
    }

    pub fn apply_anchor_mask(&mut self) {
        let (p, q) = self.anchor();
        for o in 0..self.channels() {
            for i in 0..self.channels() {
                *self.weights.at_mut(o, i, p, q) = if o == i { T::one() } else { T::zero() };
            }
        }
    }

    pub fn masked(mut self) -> Self {
        self.apply_anchor_mask();
        self
    }

    /// Zero a weight-shaped gradient at the anchor tap.
    pub fn mask_gradient(&self, grad: &mut Tensor<T>) {
        assert_eq!(grad.dims(), self.weights.dims());
        let (p, q) = self.anchor();
        for o in 0..self.channels() {
            for i in 0..self.channels() {
                *grad.at_mut(o, i, p, q) = T::zero();
            }
        }
    }

    /// True when the anchor block is exactly the identity.
    pub fn anchor_is_identity(&self) -> bool {
        let (p, q) = self.anchor();
        (0..self.channels()).all(|o| {
            (0..self.channels()).all(|i| {
                let v = self.weights.at(o, i, p, q);
                if o == i { v == T::one() } else { v == T::zero() }
            })
        })
    }

    /// Spatially flip the kernel; the orientation flips with it.
    pub fn flipped(&self, axes: FlipAxes) -> Self {
        let o = self.orientation;
        let top = o.pads_top() != axes.height;
        let left = o.pads_left() != axes.width;
        let orientation = match (top, left) {
            (true, true) => Orientation::TL,
            (true, false) => Orientation::TR,
            (false, true) => Orientation::BL,
            (false, false) => Orientation::BR,
        };
        MaskedKernel {
            weights: self.weights.flip(axes),
            orientation,
        }
    }

    /// The equivalent `TL` kernel acting on flipped inputs.
    pub fn to_tl(&self) -> Self {
        self.flipped(self.orientation.flip_axes())
    }
}

/// A corner-padded convolution with its masked kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedConvBlock<T> {
    kernel: MaskedKernel<T>,
}

impl<T: Scalar> PaddedConvBlock<T> {
    pub fn new(kernel: MaskedKernel<T>) -> Self {
        PaddedConvBlock { kernel }
    }

    pub fn kernel(&self) -> &MaskedKernel<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut MaskedKernel<T> {
        &mut self.kernel
    }

    pub fn orientation(&self) -> Orientation {
        self.kernel.orientation
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.kernel.channels() {
            return Err(Error::ShapeMismatch(format!(
                "block has {} channels, input has {}",
                self.kernel.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    /// Cross-correlation over the padded input. The log-determinant of this
    /// map is zero.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let o = self.orientation();
        let offs = o.offsets(self.kernel.k());
        Ok(conv::forward_ordered(x, &self.kernel.weights, None, offs, o.flip_axes()))
    }

    /// Sequential back-substitution in raster order. Slow but simple; the
    /// oracle for [`invert_wavefront`](Self::invert_wavefront).
    pub fn invert_reference(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        Ok(reference::invert(y, &self.kernel))
    }

    pub fn invert_wavefront(&self, y: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
        self.invert_wavefront_instrumented(y, workers).map(|(x, _)| x)
    }

    /// Anti-diagonal inversion on `workers` threads, with operation counts.
    pub fn invert_wavefront_instrumented(
        &self,
        y: &Tensor<T>,
        workers: usize,
    ) -> Result<(Tensor<T>, InversionStats)> {
        self.check(y)?;
        let axes = self.orientation().flip_axes();
        let tl = self.kernel.to_tl();
        let mut x = y.flip(axes);
        let stats = wavefront::solve_tl(&mut x, &[tl.weights()], workers);
        Ok((x.flip(axes), stats))
    }

    /// Dense matrix of this block for `h x w` images.
    pub fn conv_matrix(&self, h: usize, w: usize) -> Result<ConvMatrix<T>> {
        ConvMatrix::build(&self.kernel, h, w)
    }
}

/// Four padded blocks over the channel quarters, in the order
/// top-left, top-right, bottom-right, bottom-left.
#[derive(Clone, Debug, PartialEq)]
pub struct FincFlowUnit<T> {
    blocks: [PaddedConvBlock<T>; 4],
}

impl<T: Scalar> FincFlowUnit<T> {
    pub const ORIENTATIONS: [Orientation; 4] = [
        Orientation::TL,
        Orientation::TR,
        Orientation::BR,
        Orientation::BL,
    ];

    fn quarter(channels: usize) -> Result<usize> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::IndivisibleChannels { channels, parts: 4 });
        }
        Ok(channels / 4)
    }

    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let q = Self::quarter(channels)?;
        Ok(FincFlowUnit {
            blocks: Self::ORIENTATIONS.map(|o| PaddedConvBlock::new(MaskedKernel::identity(q, k, o))),
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        let q = Self::quarter(channels)?;
        Ok(FincFlowUnit {
            blocks: Self::ORIENTATIONS.map(|o| PaddedConvBlock::new(MaskedKernel::random(q, k, o, rng))),
        })
    }

    /// Blocks must follow [`Self::ORIENTATIONS`] and share `k` and channels.
    pub fn from_blocks(blocks: [PaddedConvBlock<T>; 4]) -> Result<Self> {
        let k = blocks[0].kernel.k();
        let c = blocks[0].kernel.channels();
        for (b, o) in blocks.iter().zip(Self::ORIENTATIONS) {
            if b.orientation() != o || b.kernel.k() != k || b.kernel.channels() != c {
                return Err(Error::ShapeMismatch(
                    "unit blocks must be TL, TR, BR, BL with equal k and channels".into(),
                ));
            }
        }
        Ok(FincFlowUnit { blocks })
    }

    pub fn blocks(&self) -> &[PaddedConvBlock<T>; 4] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [PaddedConvBlock<T>; 4] {
        &mut self.blocks
    }

    pub fn channels(&self) -> usize {
        4 * self.blocks[0].kernel.channels()
    }

    pub fn k(&self) -> usize {
        self.blocks[0].kernel.k()
    }

    fn split(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Self::quarter(x.c())?;
        if x.c() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "unit has {} channels, input has {}",
                self.channels(),
                x.c()
            )));
        }
        x.channel_split(4)
    }

    /// Returns the output and its log-determinant, which is always zero.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        let parts = self.split(x)?;
        let ys = parts
            .iter()
            .zip(&self.blocks)
            .map(|(p, b)| b.forward(p))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::channel_concat(&ys)?, T::zero()))
    }

    pub fn invert(&self, y: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
        self.invert_instrumented(y, workers).map(|(x, _)| x)
    }

    /// Flip every quarter into top-left form, solve all four as one batched
    /// problem sharing the barriers, then flip back.
    pub fn invert_instrumented(
        &self,
        y: &Tensor<T>,
        workers: usize,
    ) -> Result<(Tensor<T>, InversionStats)> {
        let parts = self.split(y)?;
        let axes: Vec<FlipAxes> = self.blocks.iter().map(|b| b.orientation().flip_axes()).collect();
        let flipped: Vec<Tensor<T>> = parts.iter().zip(&axes).map(|(p, &a)| p.flip(a)).collect();
        let kernels: Vec<MaskedKernel<T>> = self.blocks.iter().map(|b| b.kernel.to_tl()).collect();
        let mut x = Tensor::channel_concat(&flipped)?;
        let weights: Vec<&Tensor<T>> = kernels.iter().map(|k| k.weights()).collect();
        let stats = wavefront::solve_tl(&mut x, &weights, workers);
        let xs = x.channel_split(4)?;
        let unflipped: Vec<Tensor<T>> = xs.iter().zip(&axes).map(|(p, &a)| p.flip(a)).collect();
        Ok((Tensor::channel_concat(&unflipped)?, stats))
    }

    /// Each block inverted on its own by back-substitution.
    pub fn invert_reference(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let parts = self.split(y)?;
        let xs = parts
            .iter()
            .zip(&self.blocks)
            .map(|(p, b)| b.invert_reference(p))
            .collect::<Result<Vec<_>>>()?;
        Tensor::channel_concat(&xs)
    }

    /// Input gradient and per-block kernel gradients (anchor taps zeroed).
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, [Tensor<T>; 4])> {
        let xs = self.split(x)?;
        let dys = self.split(dy)?;
        let mut dxs = Vec::with_capacity(4);
        let mut dks = Vec::with_capacity(4);
        for ((b, xq), dyq) in self.blocks.iter().zip(&xs).zip(&dys) {
            let offs = b.orientation().offsets(b.kernel.k());
            dxs.push(conv::backward_input(dyq, b.kernel.weights(), offs));
            let mut dk = conv::backward_weights(dyq, xq, b.kernel.k(), offs);
            b.kernel.mask_gradient(&mut dk);
            dks.push(dk);
        }
        let dks: [Tensor<T>; 4] = dks.try_into().map_err(|_| Error::MissingCache)?;
        Ok((Tensor::channel_concat(&dxs)?, dks))
    }
}
