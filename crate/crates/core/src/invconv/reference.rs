use super::MaskedKernel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Back-substitution pixel by pixel in the kernel's raster order (rows away
/// from the padded top or bottom, columns away from the padded side),
/// channels `0..C` innermost.
pub(super) fn invert<T: Scalar>(y: &Tensor<T>, kernel: &MaskedKernel<T>) -> Tensor<T> {
    let [n, c, h, w] = y.dims();
    let k = kernel.k();
    let o = kernel.orientation();
    let (ro, co) = o.offsets(k);
    let anchor = o.anchor(k);
    let wt = kernel.weights();
    let mut x = y.clone();
    let rows: Vec<usize> = if o.pads_top() { (0..h).collect() } else { (0..h).rev().collect() };
    let cols: Vec<usize> = if o.pads_left() { (0..w).collect() } else { (0..w).rev().collect() };
    for ni in 0..n {
        for &i in &rows {
            for &j in &cols {
                for ch in 0..c {
                    let mut acc = y.at(ni, ch, i, j);
                    for p in 0..k {
                        let Some(xi) = (i + p).checked_sub(ro).filter(|&v| v < h) else {
                            continue;
                        };
                        for q in 0..k {
                            if (p, q) == anchor {
                                continue;
                            }
                            let Some(xj) = (j + q).checked_sub(co).filter(|&v| v < w) else {
                                continue;
                            };
                            for ci in 0..c {
                                acc -= wt.at(ch, ci, p, q) * x.at(ni, ci, xi, xj);
                            }
                        }
                    }
                    *x.at_mut(ni, ch, i, j) = acc;
                }
            }
        }
    }
    x
}
