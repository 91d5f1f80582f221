//! Invertible flow layers and the multi-scale model.
//!
//! Every layer maps a tensor to a tensor of the same volume and reports the
//! per-sample log-determinant of its Jacobian. Layers with parameters also
//! have a hand-written backward pass that accumulates gradients into
//! per-parameter buffers, visited through [`ParamVisitor`].

mod actnorm;
mod conv_layer;
mod coupling;
mod inv1x1;
mod model;
mod split;
mod squeeze;

pub use actnorm::ActNorm;
pub use conv_layer::ConvLayer;
pub use coupling::{Coupling, CouplingCache};
pub use inv1x1::Inv1x1;
pub use model::{FlowModel, FlowStep, ForwardOutput, Init, LatentStack, LayerTerm, ModelConfig, Tape, TopPrior};
pub use split::{gaussian_logp, Split};
pub use squeeze::{squeeze, unsqueeze};

use crate::tensor::Tensor;

/// Callback over `(name, value, grad)` for every learnable parameter.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Tensor<T>, &mut Tensor<T>) + 'a;
