use rand::Rng;

use crate::conv;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Same-padded convolution with bias, the building block of the coupling
/// and split networks.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub(crate) weight: Tensor<T>,
    pub(crate) bias: Tensor<T>,
    pub(crate) weight_grad: Tensor<T>,
    pub(crate) bias_grad: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        ConvLayer {
            weight: Tensor::zeros([cout, cin, k, k]),
            bias: Tensor::zeros([1, cout, 1, 1]),
            weight_grad: Tensor::zeros([cout, cin, k, k]),
            bias_grad: Tensor::zeros([1, cout, 1, 1]),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(cin, cout, k);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        for v in layer.weight.data_mut() {
            *v = T::of(rng.random_range(-bound..bound));
        }
        layer
    }

    fn pad(&self) -> (usize, usize) {
        let p = (self.weight.h() - 1) / 2;
        (p, p)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv::forward(x, &self.weight, Some(self.bias.data()), self.pad())
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let k = self.weight.h();
        let dw = conv::backward_weights(dy, x, k, self.pad());
        for (g, d) in self.weight_grad.data_mut().iter_mut().zip(dw.data()) {
            *g += *d;
        }
        for (g, d) in self.bias_grad.data_mut().iter_mut().zip(conv::backward_bias(dy)) {
            *g += d;
        }
        conv::backward_input(dy, &self.weight, self.pad())
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut super::ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight, &mut self.weight_grad);
        f(&format!("{prefix}.bias"), &mut self.bias, &mut self.bias_grad);
    }
}
