//! Direct cross-correlation over an implicitly zero-padded input, with the
//! two backward passes needed for training.
//!
//! The padding is described by an offset pair `(ro, co)`: output pixel
//! `(i, j)` under kernel tap `(p, q)` reads input pixel
//! `(i + p - ro, j + q - co)`, and taps that fall outside the image read
//! zero. Output spatial dims always equal input dims. Same padding for an
//! odd kernel is `ro = co = (k - 1) / 2`; the corner paddings of a
//! [`PaddedConvBlock`](crate::invconv::PaddedConvBlock) use `0` or `k - 1`.

use crate::scalar::Scalar;
use crate::tensor::{FlipAxes, Tensor};

/// Half-open output range along one axis for which `i + tap - off` lands in
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, tap: usize, off: usize) -> (usize, usize) {
    let lo = off.saturating_sub(tap);
    let hi = (len + off).saturating_sub(tap).min(len);
    (lo, hi.max(lo))
}

/// `weights` has dims `(C_out, C_in, k, k)`.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    offsets: (usize, usize),
) -> Tensor<T> {
    forward_ordered(x, weights, bias, offsets, FlipAxes::NONE)
}

/// [`forward`] with the tap loops walked backwards along the axes in
/// `reverse`. Each output accumulates its taps in loop order, so a block and
/// its flipped top-left equivalent give bit-identical results when the
/// flipped one is walked in reverse.
pub fn forward_ordered<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    (ro, co): (usize, usize),
    reverse: FlipAxes,
) -> Tensor<T> {
    let [n, cin, h, w] = x.dims();
    let [cout, wcin, k, k2] = weights.dims();
    assert_eq!(cin, wcin, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    let mut y = Tensor::zeros([n, cout, h, w]);
    let xd = x.data();
    let wd = weights.data();
    let plane = h * w;
    let yd = y.data_mut();
    for ni in 0..n {
        for o in 0..cout {
            let ybase = (ni * cout + o) * plane;
            if let Some(b) = bias {
                yd[ybase..ybase + plane].fill(b[o]);
            }
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane;
                for pi in 0..k {
                    let p = if reverse.height { k - 1 - pi } else { pi };
                    let (ilo, ihi) = valid_range(h, p, ro);
                    for qi in 0..k {
                        let q = if reverse.width { k - 1 - qi } else { qi };
                        let wv = wd[((o * cin + ci) * k + p) * k + q];
                        let (jlo, jhi) = valid_range(w, q, co);
                        if wv == T::zero() || jlo == jhi {
                            continue;
                        }
                        for i in ilo..ihi {
                            let xi = i + p - ro;
                            let yrow = &mut yd[ybase + i * w + jlo..ybase + i * w + jhi];
                            let xs = xbase + xi * w + jlo + q - co;
                            let xrow = &xd[xs..xs + (jhi - jlo)];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient with respect to the input.
pub fn backward_input<T: Scalar>(
    dy: &Tensor<T>,
    weights: &Tensor<T>,
    (ro, co): (usize, usize),
) -> Tensor<T> {
    let [n, cout, h, w] = dy.dims();
    let [wcout, cin, k, _] = weights.dims();
    assert_eq!(cout, wcout, "conv output channels");
    let mut dx = Tensor::zeros([n, cin, h, w]);
    let dyd = dy.data();
    let wd = weights.data();
    let plane = h * w;
    let dxd = dx.data_mut();
    for ni in 0..n {
        for o in 0..cout {
            let ybase = (ni * cout + o) * plane;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane;
                for p in 0..k {
                    let (ilo, ihi) = valid_range(h, p, ro);
                    for q in 0..k {
                        let wv = wd[((o * cin + ci) * k + p) * k + q];
                        let (jlo, jhi) = valid_range(w, q, co);
                        if wv == T::zero() || jlo == jhi {
                            continue;
                        }
                        for i in ilo..ihi {
                            let xi = i + p - ro;
                            let yrow = &dyd[ybase + i * w + jlo..ybase + i * w + jhi];
                            let xs = xbase + xi * w + jlo + q - co;
                            let xrow = &mut dxd[xs..xs + (jhi - jlo)];
                            for (xv, &gv) in xrow.iter_mut().zip(yrow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient with respect to the weights, dims `(C_out, C_in, k, k)`.
pub fn backward_weights<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    k: usize,
    (ro, co): (usize, usize),
) -> Tensor<T> {
    let [n, cout, h, w] = dy.dims();
    let cin = x.c();
    assert_eq!(x.dims(), [n, cin, h, w], "conv backward shapes");
    let mut dw = Tensor::zeros([cout, cin, k, k]);
    let dyd = dy.data();
    let xd = x.data();
    let plane = h * w;
    for o in 0..cout {
        for ci in 0..cin {
            for p in 0..k {
                let (ilo, ihi) = valid_range(h, p, ro);
                for q in 0..k {
                    let (jlo, jhi) = valid_range(w, q, co);
                    let mut acc = T::zero();
                    if jlo == jhi {
                        continue;
                    }
                    for ni in 0..n {
                        let ybase = (ni * cout + o) * plane;
                        let xbase = (ni * cin + ci) * plane;
                        for i in ilo..ihi {
                            let xi = i + p - ro;
                            let yrow = &dyd[ybase + i * w + jlo..ybase + i * w + jhi];
                            let xs = xbase + xi * w + jlo + q - co;
                            let xrow = &xd[xs..xs + (jhi - jlo)];
                            acc += yrow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    *dw.at_mut(o, ci, p, q) = acc;
                }
            }
        }
    }
    dw
}

/// Per-channel sum of `dy` over batch and space.
pub fn backward_bias<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = dy.dims();
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (ni * c + ci) * plane;
            *o += dy.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn naive(x: &Tensor<f64>, wt: &Tensor<f64>, off: (usize, usize)) -> Tensor<f64> {
        let [n, cin, h, w] = x.dims();
        let [cout, _, k, _] = wt.dims();
        Tensor::from_fn([n, cout, h, w], |[ni, o, i, j]| {
            let mut s = 0.0;
            for ci in 0..cin {
                for p in 0..k {
                    for q in 0..k {
                        let xi = i as isize + p as isize - off.0 as isize;
                        let xj = j as isize + q as isize - off.1 as isize;
                        if xi >= 0 && xj >= 0 && (xi as usize) < h && (xj as usize) < w {
                            s += x.at(ni, ci, xi as usize, xj as usize) * wt.at(o, ci, p, q);
                        }
                    }
                }
            }
            s
        })
    }

    fn rand_t(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_for_all_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 2, 3, 5] {
            let x = rand_t(&mut rng, [2, 3, 4, 6]);
            let wt = rand_t(&mut rng, [2, 3, k, k]);
            for off in [(0, 0), (k - 1, k - 1), (k - 1, 0), (0, k - 1), ((k - 1) / 2, (k - 1) / 2)] {
                let y = forward(&x, &wt, None, off);
                assert!(y.max_abs_diff(&naive(&x, &wt, off)) < 1e-12);
            }
        }
    }

    #[test]
    fn backward_passes_are_adjoint() {
        // <conv(x), g> == <x, conv_input_grad(g)> == <w, conv_weight_grad(g, x)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for off in [(0, 0), (2, 2), (1, 1), (2, 0)] {
            let x = rand_t(&mut rng, [2, 3, 5, 4]);
            let wt = rand_t(&mut rng, [4, 3, 3, 3]);
            let g = rand_t(&mut rng, [2, 4, 5, 4]);
            let y = forward(&x, &wt, None, off);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = backward_input(&g, &wt, off);
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let dw = backward_weights(&g, &x, 3, off);
            let rhs2: f64 = wt.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            assert!((lhs - rhs2).abs() < 1e-10);
        }
    }

    #[test]
    fn bias_broadcast() {
        let x = Tensor::<f64>::zeros([2, 1, 3, 3]);
        let wt = Tensor::<f64>::zeros([2, 1, 3, 3]);
        let y = forward(&x, &wt, Some(&[1.5, -2.0]), (1, 1));
        assert!(y.channel_range(0, 1).data().iter().all(|&v| v == 1.5));
        assert_eq!(backward_bias(&y), vec![1.5 * 18.0, -2.0 * 18.0]);
    }
}
