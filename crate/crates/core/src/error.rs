use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel count {channels} is not divisible into {parts} parts")]
    IndivisibleChannels { channels: usize, parts: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad magic bytes in {0} file")]
    BadMagic(&'static str),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("dense convolution matrix of side {side} exceeds the cap of {cap}")]
    TooLargeForDense { side: usize, cap: usize },
    #[error("actnorm scale has a zero entry at channel {0}")]
    ZeroScale(usize),
    #[error("1x1 convolution weight is singular (|det| = {0:e})")]
    SingularWeight(f64),
    #[error("layer needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("squeeze needs even spatial dims, got {h}x{w}")]
    OddSpatialDims { h: usize, w: usize },
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("bad format: {0}")]
    BadFormat(String),
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
