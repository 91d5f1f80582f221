use rand::Rng;

use super::conv_layer::ConvLayer;
use super::ParamVisitor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine coupling: the first half of the channels passes through and
/// parameterizes a shift and a bounded positive scale for the second half.
///
/// The network is 3x3 conv, ReLU, 1x1 conv, ReLU, zero-initialized 3x3
/// conv. Its output channels are `[shift | raw]` and the scale is
/// `2 * sigmoid(raw)`, which lies in `(0, 2)` and is exactly one when the
/// last layer is zero.
#[derive(Clone, Debug)]
pub struct Coupling<T> {
    pub(crate) conv1: ConvLayer<T>,
    pub(crate) conv2: ConvLayer<T>,
    pub(crate) conv3: ConvLayer<T>,
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct CouplingCache<T> {
    x1: Tensor<T>,
    x2: Tensor<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    pre2: Tensor<T>,
    act2: Tensor<T>,
    raw: Tensor<T>,
}

impl<T: Scalar> CouplingCache<T> {
    /// Smallest |pre-activation| fed to a ReLU; finite differences are only
    /// trustworthy when this is not tiny.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre1
            .data()
            .iter()
            .chain(self.pre2.data())
            .map(|v| v.as_f64().abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Which ReLU inputs are positive, in a fixed order.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre1.data().iter().chain(self.pre2.data()).map(|v| *v > T::zero())
    }
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(pre.dims(), data).expect("same dims")
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Coupling<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::OddChannels(channels));
        }
        let half = channels / 2;
        Ok(Coupling {
            conv1: ConvLayer::random(half, hidden, 3, rng),
            conv2: ConvLayer::random(hidden, hidden, 1, rng),
            conv3: ConvLayer::zeros(hidden, channels, 3),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv3.weight.n()
    }

    fn halves(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = x.c();
        if !c.is_multiple_of(2) {
            return Err(Error::OddChannels(c));
        }
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "coupling has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok((x.channel_range(0, c / 2), x.channel_range(c / 2, c)))
    }

    fn net(&self, x1: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let pre1 = self.conv1.forward(x1);
        let act1 = relu(&pre1);
        let pre2 = self.conv2.forward(&act1);
        let act2 = relu(&pre2);
        let out = self.conv3.forward(&act2);
        (pre1, act1, pre2, act2, out)
    }

    fn shift_scale(out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let c = out.c();
        (out.channel_range(0, c / 2), out.channel_range(c / 2, c))
    }

    /// Output, per-sample log-determinant, and the cache for `backward`.
    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, CouplingCache<T>)> {
        let (x1, x2) = self.halves(x)?;
        let (pre1, act1, pre2, act2, out) = self.net(&x1);
        let (shift, raw) = Self::shift_scale(&out);
        let two = T::of(2.0);
        let [n, half, h, w] = x2.dims();
        let per = half * h * w;
        let mut y2 = x2.clone();
        let mut logdet = vec![T::zero(); n];
        for (idx, v) in y2.data_mut().iter_mut().enumerate() {
            let s = two * sigmoid(raw.data()[idx]);
            *v = *v * s + shift.data()[idx];
            logdet[idx / per] += s.ln();
        }
        let y = Tensor::channel_concat(&[x1.clone(), y2])?;
        let cache = CouplingCache {
            x1,
            x2,
            pre1,
            act1,
            pre2,
            act2,
            raw,
        };
        Ok((y, logdet, cache))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        self.forward_cached(x).map(|(y, ld, _)| (y, ld))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (y1, y2) = self.halves(y)?;
        let (_, _, _, _, out) = self.net(&y1);
        let (shift, raw) = Self::shift_scale(&out);
        let two = T::of(2.0);
        let mut x2 = y2;
        for (idx, v) in x2.data_mut().iter_mut().enumerate() {
            let s = two * sigmoid(raw.data()[idx]);
            *v = (*v - shift.data()[idx]) / s;
        }
        Tensor::channel_concat(&[y1, x2])
    }

    pub fn backward(&mut self, cache: &CouplingCache<T>, dy: &Tensor<T>, ld_weight: T) -> Result<Tensor<T>> {
        let c = dy.c();
        let dy1 = dy.channel_range(0, c / 2);
        let dy2 = dy.channel_range(c / 2, c);
        let two = T::of(2.0);
        let mut dx2 = dy2.clone();
        let mut draw = dy2.clone();
        for idx in 0..dy2.len() {
            let sig = sigmoid(cache.raw.data()[idx]);
            let s = two * sig;
            let g = dy2.data()[idx];
            dx2.data_mut()[idx] = g * s;
            // d/ds of (x2 * s) and of log s, then ds/draw = 2 sig (1 - sig)
            let ds = g * cache.x2.data()[idx] + ld_weight / s;
            draw.data_mut()[idx] = ds * two * sig * (T::one() - sig);
        }
        let dout = Tensor::channel_concat(&[dy2, draw])?;
        let dact2 = self.conv3.backward(&cache.act2, &dout);
        let dpre2 = relu_backward(&cache.pre2, &dact2);
        let dact1 = self.conv2.backward(&cache.act1, &dpre2);
        let dpre1 = relu_backward(&cache.pre1, &dact1);
        let mut dx1 = self.conv1.backward(&cache.x1, &dpre1);
        for (a, b) in dx1.data_mut().iter_mut().zip(dy1.data()) {
            *a += *b;
        }
        Tensor::channel_concat(&[dx1, dx2])
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randomize(c: &mut Coupling<f64>, rng: &mut ChaCha8Rng) {
        c.visit("c", &mut |_, v, _| {
            for x in v.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        });
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Coupling::<f32>::new(4, 8, &mut rng).unwrap();
        let x = Tensor::from_fn([2, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (y, ld) = c.forward(&x).unwrap();
        assert!(y.bit_eq(&x));
        assert!(ld.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_random_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Coupling::<f64>::new(4, 8, &mut rng).unwrap();
        randomize(&mut c, &mut rng);
        let x = Tensor::from_fn([2, 4, 5, 5], |_| rng.random_range(-1.0..1.0));
        let (y, _) = c.forward(&x).unwrap();
        assert!(c.inverse(&y).unwrap().max_abs_diff(&x) < 1e-12);

        let cf = Coupling::<f32> {
            conv1: cast_layer(&c.conv1),
            conv2: cast_layer(&c.conv2),
            conv3: cast_layer(&c.conv3),
        };
        let xf: Tensor<f32> = x.cast();
        let (yf, _) = cf.forward(&xf).unwrap();
        assert!(cf.inverse(&yf).unwrap().max_abs_diff(&xf) < 1e-5);
    }

    fn cast_layer(l: &ConvLayer<f64>) -> ConvLayer<f32> {
        ConvLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            weight_grad: l.weight_grad.cast(),
            bias_grad: l.bias_grad.cast(),
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(Coupling::<f64>::new(3, 4, &mut rng), Err(Error::OddChannels(3))));
        let c = Coupling::<f64>::new(4, 4, &mut rng).unwrap();
        assert!(matches!(c.forward(&Tensor::zeros([1, 3, 2, 2])), Err(Error::OddChannels(3))));
    }

    #[test]
    fn scale_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = Coupling::<f64>::new(2, 4, &mut rng).unwrap();
        c.conv3.bias.data_mut()[1] = 50.0;
        let x = Tensor::filled([1, 2, 2, 2], 1.0);
        let (_, ld) = c.forward(&x).unwrap();
        // scale saturates at 2 but stays finite
        assert!(ld[0].is_finite() && ld[0] <= 4.0 * 2f64.ln() + 1e-9);
    }
}
