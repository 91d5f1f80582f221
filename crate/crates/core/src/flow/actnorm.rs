use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel affine map `y = scale * x + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm<T> {
    pub(crate) scale: Tensor<T>,
    pub(crate) bias: Tensor<T>,
    pub(crate) scale_grad: Tensor<T>,
    pub(crate) bias_grad: Tensor<T>,
    initialized: bool,
}

impl<T: Scalar> ActNorm<T> {
    /// Identity map, not yet data-initialized.
    pub fn new(channels: usize) -> Self {
        let dims = [1, channels, 1, 1];
        ActNorm {
            scale: Tensor::filled(dims, T::one()),
            bias: Tensor::zeros(dims),
            scale_grad: Tensor::zeros(dims),
            bias_grad: Tensor::zeros(dims),
            initialized: false,
        }
    }

    pub fn with_params(scale: Vec<T>, bias: Vec<T>) -> Result<Self> {
        let c = scale.len();
        if bias.len() != c {
            return Err(Error::ShapeMismatch("actnorm scale/bias lengths differ".into()));
        }
        let mut a = ActNorm::new(c);
        a.scale = Tensor::from_vec([1, c, 1, 1], scale)?;
        a.bias = Tensor::from_vec([1, c, 1, 1], bias)?;
        a.initialized = true;
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.scale.c()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn set_initialized(&mut self, v: bool) {
        self.initialized = v;
    }

    pub fn scale(&self) -> &[T] {
        self.scale.data()
    }

    pub fn bias(&self) -> &[T] {
        self.bias.data()
    }

    /// Set scale and bias so `x` maps to zero mean, unit variance per channel.
    pub fn data_init(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        let count = T::of((n * h * w) as f64);
        let plane = h * w;
        for ci in 0..c {
            let vals = (0..n).flat_map(|ni| {
                let base = (ni * c + ci) * plane;
                x.data()[base..base + plane].iter().copied()
            });
            let mean = vals.clone().sum::<T>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
            let s = T::one() / (var.sqrt() + T::of(1e-6));
            self.scale.data_mut()[ci] = s;
            self.bias.data_mut()[ci] = -mean * s;
        }
        self.initialized = true;
        Ok(())
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "actnorm has {} channels, input has {}",
                self.channels(),
                x.c()
            )));
        }
        if let Some(c) = self.scale.data().iter().position(|s| *s == T::zero()) {
            return Err(Error::ZeroScale(c));
        }
        Ok(())
    }

    /// Per-sample log-determinant `H * W * sum_c log|scale_c|`.
    pub fn logdet(&self, h: usize, w: usize) -> T {
        T::of((h * w) as f64) * self.scale.data().iter().map(|s| s.abs().ln()).sum::<T>()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        self.check(x)?;
        let [_, c, h, w] = x.dims();
        let plane = h * w;
        let mut y = x.clone();
        for (idx, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
            let ci = idx % c;
            let (s, b) = (self.scale.data()[ci], self.bias.data()[ci]);
            chunk.iter_mut().for_each(|v| *v = s * *v + b);
        }
        Ok((y, self.logdet(h, w)))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let [_, c, h, w] = y.dims();
        let plane = h * w;
        let mut x = y.clone();
        for (idx, chunk) in x.data_mut().chunks_exact_mut(plane).enumerate() {
            let ci = idx % c;
            let (s, b) = (self.scale.data()[ci], self.bias.data()[ci]);
            chunk.iter_mut().for_each(|v| *v = (*v - b) / s);
        }
        Ok(x)
    }

    /// Accumulate parameter gradients and return the input gradient.
    /// `ld_weight` is the loss derivative with respect to each sample's
    /// log-determinant.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, ld_weight: T) -> Tensor<T> {
        let [n, c, h, w] = x.dims();
        let plane = h * w;
        let mut dx = dy.clone();
        for (idx, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
            let ci = idx % c;
            let s = self.scale.data()[ci];
            let xs = &x.data()[idx * plane..(idx + 1) * plane];
            let dys = &dy.data()[idx * plane..(idx + 1) * plane];
            self.scale_grad.data_mut()[ci] += dys.iter().zip(xs).map(|(&g, &v)| g * v).sum::<T>();
            self.bias_grad.data_mut()[ci] += dys.iter().copied().sum::<T>();
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let ld = ld_weight * T::of((n * plane) as f64);
        for ci in 0..c {
            let s = self.scale.data()[ci];
            self.scale_grad.data_mut()[ci] += ld / s;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_is_identity() {
        let a = ActNorm::<f32>::new(3);
        let x = Tensor::from_fn([2, 3, 2, 2], |[n, c, h, w]| (n + c + h + w) as f32);
        let (y, ld) = a.forward(&x).unwrap();
        assert!(y.bit_eq(&x));
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn logdet_for_scale_two() {
        let a = ActNorm::<f64>::with_params(vec![2.0], vec![0.0]).unwrap();
        let (_, ld) = a.forward(&Tensor::zeros([1, 1, 4, 4])).unwrap();
        assert!((ld - 16.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ActNorm::<f32>::with_params(vec![0.5, -1.5, 3.0], vec![0.1, -0.2, 0.7]).unwrap();
        let x = Tensor::from_fn([2, 3, 4, 4], |_| rng.random_range(-2.0..2.0));
        let (y, _) = a.forward(&x).unwrap();
        assert!(a.inverse(&y).unwrap().max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn zero_scale_rejected() {
        let a = ActNorm::<f64>::with_params(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(a.forward(&Tensor::zeros([1, 2, 2, 2])), Err(Error::ZeroScale(1))));
        assert!(matches!(a.inverse(&Tensor::zeros([1, 2, 2, 2])), Err(Error::ZeroScale(1))));
    }

    #[test]
    fn data_init_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn([4, 2, 4, 4], |[_, c, _, _]| rng.random_range(0.0..1.0) * (c + 1) as f64 + c as f64);
        let mut a = ActNorm::new(2);
        a.data_init(&x).unwrap();
        let (y, _) = a.forward(&x).unwrap();
        for ch in y.channel_split(2).unwrap() {
            let m = ch.sum() / ch.len() as f64;
            let v = ch.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ch.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn logdet_gradient_wrt_scale() {
        let mut a = ActNorm::<f64>::with_params(vec![2.0, 0.5], vec![0.0, 0.0]).unwrap();
        let x = Tensor::zeros([1, 2, 3, 4]);
        a.backward(&x, &Tensor::zeros([1, 2, 3, 4]), 1.0);
        assert_eq!(a.scale_grad.data(), &[12.0 / 2.0, 12.0 / 0.5]);
    }
}
