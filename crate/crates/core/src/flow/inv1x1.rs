use rand::Rng;

use crate::conv;
use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SINGULAR_EPS: f64 = 1e-12;

/// Invertible 1x1 convolution: a dense `C x C` channel mix at every pixel.
#[derive(Clone, Debug)]
pub struct Inv1x1<T> {
    pub(crate) weight: Tensor<T>,
    pub(crate) weight_grad: Tensor<T>,
}

impl<T: Scalar> Inv1x1<T> {
    pub fn identity(channels: usize) -> Self {
        Self::from_matrix(linalg::identity(channels), channels).expect("square")
    }

    pub fn random_orthogonal<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self::from_matrix(linalg::random_orthogonal(channels, rng), channels).expect("square")
    }

    /// Row-major `C x C` matrix.
    pub fn from_matrix(m: Vec<T>, channels: usize) -> Result<Self> {
        let weight = Tensor::from_vec([channels, channels, 1, 1], m)?;
        Ok(Inv1x1 {
            weight_grad: Tensor::zeros(weight.dims()),
            weight,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.n()
    }

    pub fn matrix(&self) -> &[T] {
        self.weight.data()
    }

    fn lu(&self) -> Result<Lu<T>> {
        let lu = Lu::new(self.weight.data(), self.channels());
        let det = lu.det().as_f64();
        if !(det.abs() >= SINGULAR_EPS) {
            return Err(Error::SingularWeight(det.abs()));
        }
        Ok(lu)
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "1x1 conv has {} channels, input has {}",
                self.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    /// Returns `y` and the per-sample log-determinant `H * W * log|det W|`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        self.check(x)?;
        let lu = self.lu()?;
        let y = conv::forward(x, &self.weight, None, (0, 0));
        Ok((y, T::of((x.h() * x.w()) as f64) * lu.log_abs_det()))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let c = self.channels();
        let inv = Tensor::from_vec([c, c, 1, 1], self.lu()?.inverse())?;
        Ok(conv::forward(y, &inv, None, (0, 0)))
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, ld_weight: T) -> Result<Tensor<T>> {
        let c = self.channels();
        let dw = conv::backward_weights(dy, x, 1, (0, 0));
        // d log|det W| / dW = W^{-T}
        let inv_t = linalg::transpose(&self.lu()?.inverse(), c);
        let ld = ld_weight * T::of((x.n() * x.h() * x.w()) as f64);
        for ((g, d), it) in self.weight_grad.data_mut().iter_mut().zip(dw.data()).zip(inv_t) {
            *g += *d + ld * it;
        }
        Ok(conv::backward_input(dy, &self.weight, (0, 0)))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_x(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f32> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Inv1x1::<f32>::identity(4);
        let x = rand_x(&mut rng, [2, 4, 3, 3]);
        let (y, ld) = l.forward(&x).unwrap();
        assert!(y.bit_eq(&x));
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn rotation_has_zero_logdet_and_transpose_inverse() {
        let (s, c) = (0.6f64.sin(), 0.6f64.cos());
        let l = Inv1x1::<f64>::from_matrix(vec![c, -s, s, c], 2).unwrap();
        let x = Tensor::from_fn([1, 2, 2, 2], |[_, ch, h, w]| (ch * 4 + h * 2 + w) as f64);
        let (y, ld) = l.forward(&x).unwrap();
        assert!(ld.abs() < 1e-15);
        let lt = Inv1x1::<f64>::from_matrix(vec![c, s, -s, c], 2).unwrap();
        assert!(lt.forward(&y).unwrap().0.max_abs_diff(&x) < 1e-12);
        assert!(l.inverse(&y).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn orthogonal_round_trip_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Inv1x1::<f32>::random_orthogonal(8, &mut rng);
        let x = rand_x(&mut rng, [2, 8, 4, 4]);
        let (y, _) = l.forward(&x).unwrap();
        assert!(l.inverse(&y).unwrap().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn singular_rejected() {
        let l = Inv1x1::<f64>::from_matrix(vec![1.0, 2.0, 2.0, 4.0], 2).unwrap();
        let x = Tensor::zeros([1, 2, 2, 2]);
        assert!(matches!(l.forward(&x), Err(Error::SingularWeight(_))));
        assert!(matches!(l.inverse(&x), Err(Error::SingularWeight(_))));
    }
}
