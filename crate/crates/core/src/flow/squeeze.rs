use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(N, C, H, W) -> (N, 4C, H/2, W/2)`; output channel `4c + 2di + dj`
/// holds input pixels `(2i + di, 2j + dj)` of channel `c`.
pub fn squeeze<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDims { h, w });
    }
    Ok(Tensor::from_fn([n, 4 * c, h / 2, w / 2], |[ni, co, i, j]| {
        let (ci, di, dj) = (co / 4, (co / 2) % 2, co % 2);
        x.at(ni, ci, 2 * i + di, 2 * j + dj)
    }))
}

pub fn unsqueeze<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c4, h, w] = y.dims();
    if c4 % 4 != 0 {
        return Err(Error::IndivisibleChannels { channels: c4, parts: 4 });
    }
    Ok(Tensor::from_fn([n, c4 / 4, 2 * h, 2 * w], |[ni, ci, i, j]| {
        y.at(ni, 4 * ci + 2 * (i % 2) + (j % 2), i / 2, j / 2)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_round_trip() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 6], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f64);
        let y = squeeze(&x).unwrap();
        assert_eq!(y.dims(), [2, 12, 2, 3]);
        assert!(unsqueeze(&y).unwrap().bit_eq(&x));
        assert_eq!(squeeze(&Tensor::<f64>::zeros([1, 1, 4, 4])).unwrap().dims(), [1, 4, 2, 2]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(matches!(
            squeeze(&Tensor::<f64>::zeros([1, 3, 5, 4])),
            Err(Error::OddSpatialDims { h: 5, w: 4 })
        ));
    }
}
