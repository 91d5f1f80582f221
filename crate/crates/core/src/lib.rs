//! Invertible `k x k` convolutions with a wavefront-parallel inverse, and
//! a multi-scale normalizing flow built around them.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: `(N, C, H, W)` tensors, corner padding, flips, channel
//!   slicing, and the `.ften` file format.
//! - [`invconv`]: masked padded convolution blocks, their dense matrix,
//!   sequential and anti-diagonal inverses, and the four-block unit.
//! - [`flow`]: actnorm, invertible 1x1 convolution, affine coupling,
//!   squeeze, split, and the multi-scale model with exact log-determinants
//!   and hand-written backward passes.
//! - [`train`]: dequantization, NLL and bits per dimension, Adam with
//!   anchor-masked gradients, datasets, and checkpoints.
//! - [`bench`]: the timing harness and its CSV report.
//! - [`diagnostics`]: finite-difference checks of gradients and
//!   log-determinants.
//!
//! ```
//! use fincflow::invconv::{MaskedKernel, PaddedConvBlock};
//! use fincflow::{Orientation, Tensor};
//!
//! let w = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 1.0]).unwrap();
//! let block = PaddedConvBlock::new(MaskedKernel::from_weights(w, Orientation::TL));
//! let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
//! let y = block.forward(&x).unwrap();
//! assert_eq!(y.data(), &[1.0, 5.0, 5.0, 18.0]);
//! assert_eq!(block.invert_wavefront(&y, 2).unwrap(), x);
//! ```

pub mod bench;
pub mod conv;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod invconv;
pub mod linalg;
mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{FlipAxes, Orientation, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/padding.md")]
    mod padding {}
    #[doc = include_str!("../../../book/src/inversion.md")]
    mod inversion {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/benchmarking.md")]
    mod benchmarking {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
