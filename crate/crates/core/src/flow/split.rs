use rand::Rng;
use rand_distr::StandardNormal;

use super::conv_layer::ConvLayer;
use super::ParamVisitor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-sample Gaussian log-density of `z` under `mean` and `log_scale`.
pub fn gaussian_logp<T: Scalar>(z: &Tensor<T>, mean: &Tensor<T>, log_scale: &Tensor<T>) -> Vec<T> {
    let n = z.n();
    let per = z.len() / n;
    let c = T::of(HALF_LN_2PI);
    let half = T::of(0.5);
    let mut out = vec![T::zero(); n];
    for (idx, ((&zv, &m), &ls)) in z.data().iter().zip(mean.data()).zip(log_scale.data()).enumerate() {
        let e = (zv - m) * (-ls).exp();
        out[idx / per] += -c - ls - half * e * e;
    }
    out
}

/// Gradients of `weight * logp` with respect to `z`, `mean`, `log_scale`.
pub(crate) fn gaussian_logp_grads<T: Scalar>(
    z: &Tensor<T>,
    mean: &Tensor<T>,
    log_scale: &Tensor<T>,
    weight: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut dz = z.clone();
    let mut dm = z.clone();
    let mut dls = z.clone();
    for idx in 0..z.len() {
        let inv_var = (-T::of(2.0) * log_scale.data()[idx]).exp();
        let diff = z.data()[idx] - mean.data()[idx];
        dz.data_mut()[idx] = -weight * diff * inv_var;
        dm.data_mut()[idx] = weight * diff * inv_var;
        dls.data_mut()[idx] = weight * (diff * diff * inv_var - T::one());
    }
    (dz, dm, dls)
}

/// Draw `mean + temperature * exp(log_scale) * eps`.
pub(crate) fn gaussian_sample<T: Scalar, R: Rng + ?Sized>(
    mean: &Tensor<T>,
    log_scale: &Tensor<T>,
    temperature: f64,
    rng: &mut R,
) -> Tensor<T> {
    let mut z = mean.clone();
    for (v, &ls) in z.data_mut().iter_mut().zip(log_scale.data()) {
        let eps: f64 = rng.sample(StandardNormal);
        *v += T::of(temperature * eps) * ls.exp();
    }
    z
}

/// Removes half the channels as a latent, modeled as Gaussian with mean
/// and log-scale predicted from the retained half.
#[derive(Clone, Debug)]
pub struct Split<T> {
    pub(crate) prior: ConvLayer<T>,
}

impl<T: Scalar> Split<T> {
    /// `channels` is the count before splitting.
    pub fn new(channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::OddChannels(channels));
        }
        Ok(Split {
            prior: ConvLayer::zeros(channels / 2, channels, 3),
        })
    }

    /// Mean and log-scale for the removed half given the retained half.
    pub fn prior_params(&self, retained: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let out = self.prior.forward(retained);
        let c = out.c();
        (out.channel_range(0, c / 2), out.channel_range(c / 2, c))
    }

    /// Returns `(retained, z, per-sample log p(z))`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let c = x.c();
        if !c.is_multiple_of(2) {
            return Err(Error::OddChannels(c));
        }
        let retained = x.channel_range(0, c / 2);
        let z = x.channel_range(c / 2, c);
        let (mean, ls) = self.prior_params(&retained);
        let logp = gaussian_logp(&z, &mean, &ls);
        Ok((retained, z, logp))
    }

    pub fn inverse(&self, retained: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        if retained.dims() != z.dims() {
            return Err(Error::ShapeMismatch(format!(
                "split halves differ: {:?} vs {:?}",
                retained.dims(),
                z.dims()
            )));
        }
        Tensor::channel_concat(&[retained.clone(), z.clone()])
    }

    pub fn sample<R: Rng + ?Sized>(&self, retained: &Tensor<T>, temperature: f64, rng: &mut R) -> Tensor<T> {
        let (mean, ls) = self.prior_params(retained);
        gaussian_sample(&mean, &ls, temperature, rng)
    }

    /// Gradient of the input given the upstream gradient of the retained
    /// half; `lp_weight` is the loss derivative per unit of log p(z).
    pub fn backward(&mut self, retained: &Tensor<T>, z: &Tensor<T>, d_retained: &Tensor<T>, lp_weight: T) -> Result<Tensor<T>> {
        let (mean, ls) = self.prior_params(retained);
        let (dz, dm, dls) = gaussian_logp_grads(z, &mean, &ls, lp_weight);
        let dout = Tensor::channel_concat(&[dm, dls])?;
        let mut dr = self.prior.backward(retained, &dout);
        for (a, b) in dr.data_mut().iter_mut().zip(d_retained.data()) {
            *a += *b;
        }
        Tensor::channel_concat(&[dr, dz])
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.prior.visit(&format!("{prefix}.prior"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_init_prior_is_standard_normal() {
        let s = Split::<f64>::new(4).unwrap();
        let x = Tensor::from_fn([1, 4, 2, 2], |[_, c, h, w]| (c + h + w) as f64 * 0.25);
        let (_, z, logp) = s.forward(&x).unwrap();
        let expect: f64 = z.data().iter().map(|v| -HALF_LN_2PI - 0.5 * v * v).sum();
        assert!((logp[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_latent_logp() {
        let s = Split::<f64>::new(4).unwrap();
        let x = Tensor::from_fn([1, 4, 2, 2], |[_, c, _, _]| if c < 2 { 1.0 } else { 0.0 });
        let (_, z, logp) = s.forward(&x).unwrap();
        assert_eq!(z.len(), 8);
        assert!((logp[0] - 8.0 * -(2.0 * std::f64::consts::PI).ln() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Split::<f32>::new(6).unwrap();
        let x = Tensor::from_fn([2, 6, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (r, z, _) = s.forward(&x).unwrap();
        assert!(s.inverse(&r, &z).unwrap().bit_eq(&x));
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(matches!(Split::<f64>::new(3), Err(Error::OddChannels(3))));
        let s = Split::<f64>::new(4).unwrap();
        assert!(matches!(s.forward(&Tensor::zeros([1, 5, 2, 2])), Err(Error::OddChannels(5))));
    }

    #[test]
    fn zero_temperature_sample_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Split::<f64>::new(4).unwrap();
        let r = Tensor::filled([1, 2, 2, 2], 0.3);
        assert!(s.sample(&r, 0.0, &mut rng).bit_eq(&Tensor::zeros([1, 2, 2, 2])));
    }
}
