//! Small dense square matrices (row-major `Vec`), enough for the 1x1
//! convolution: LU with partial pivoting, determinant, inverse, and random
//! orthogonal initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// `P A = L U` packed in one matrix, with the row permutation and its sign.
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: &[T], n: usize) -> Self {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r, &s| lu[r * n + col].abs().partial_cmp(&lu[s * n + col].abs()).unwrap_or(std::cmp::Ordering::Equal))
                .expect("non-empty");
            if pivot != col {
                for j in 0..n {
                    lu.swap(pivot * n + j, col * n + j);
                }
                perm.swap(pivot, col);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == T::zero() {
                continue;
            }
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                for j in col + 1..n {
                    let v = lu[col * n + j];
                    lu[r * n + j] -= f * v;
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> T {
        (0..self.n).map(|i| self.lu[i * self.n + i]).fold(self.sign, |a, b| a * b)
    }

    /// `log |det|`, summed from the pivots to avoid overflow.
    pub fn log_abs_det(&self) -> T {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let v = x[j];
                x[i] -= self.lu[i * n + j] * v;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let v = x[j];
                x[i] -= self.lu[i * n + j] * v;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for col in 0..n {
            e.fill(T::zero());
            e[col] = T::one();
            for (r, v) in self.solve(&e).into_iter().enumerate() {
                inv[r * n + col] = v;
            }
        }
        inv
    }
}

pub fn identity<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::one();
    }
    m
}

pub fn transpose<T: Scalar>(a: &[T], n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Orthogonal matrix from Gram-Schmidt QR of a Gaussian matrix, with the
/// column signs fixed so `det = +1`.
pub fn random_orthogonal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut q = vec![0.0f64; n * n];
        let mut ok = true;
        for col in 0..n {
            let mut v: Vec<f64> = (0..n).map(|r| g[r * n + col]).collect();
            for prev in 0..col {
                let dot: f64 = (0..n).map(|r| q[r * n + prev] * v[r]).sum();
                for (r, vr) in v.iter_mut().enumerate() {
                    *vr -= dot * q[r * n + prev];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for (r, vr) in v.iter().enumerate() {
                q[r * n + col] = vr / norm;
            }
        }
        if !ok {
            continue;
        }
        if Lu::new(&q, n).det() < 0.0 {
            for r in 0..n {
                q[r * n] = -q[r * n];
            }
        }
        return q.into_iter().map(T::of).collect();
    }
}
