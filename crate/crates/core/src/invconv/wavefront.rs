//! Anti-diagonal inversion of top-left padded blocks.
//!
//! For a `TL` block, output pixel `(i, j)` is its own input plus a weighted
//! sum of inputs at `(i - dh, j - dw)` with `dh, dw >= 0`, not both zero.
//! Every such input lies on an earlier anti-diagonal `i + j`, so once
//! diagonals `0..d` are solved every pixel of diagonal `d` can be solved at
//! the same time. The solver walks `d = 0 ..= H + W - 2`, splits the
//! `(n, c, i)` index set of each diagonal into contiguous chunks, one per
//! worker, and waits on a barrier before moving on.
//!
//! Each element is updated with a fixed tap order (`dh` outer, `dw` middle,
//! source channel inner), so the result does not depend on the worker count.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Barrier;
use std::thread;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operation counts recorded during one inversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InversionStats {
    /// Barrier-separated phases, one per anti-diagonal.
    pub phases: usize,
    /// Multiply-adds over all elements.
    pub madds: u64,
    /// Largest multiply-add count of any single element.
    pub max_madds_per_element: usize,
    /// Elements solved.
    pub elements: u64,
}

/// Pointer to the solution buffer shared by the workers.
///
/// Within a phase each worker writes only its own chunk of the current
/// diagonal and reads only earlier diagonals; the barrier orders the phases.
#[derive(Clone, Copy)]
struct SharedBuf<T> {
    ptr: *mut T,
    len: usize,
}

unsafe impl<T: Send> Send for SharedBuf<T> {}
unsafe impl<T: Send> Sync for SharedBuf<T> {}

impl<T: Copy> SharedBuf<T> {
    #[inline]
    unsafe fn read(&self, i: usize) -> T {
        debug_assert!(i < self.len);
        *self.ptr.add(i)
    }

    #[inline]
    unsafe fn write(&self, i: usize, v: T) {
        debug_assert!(i < self.len);
        *self.ptr.add(i) = v;
    }
}

struct Problem<'a, T> {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    group_channels: usize,
    kernels: &'a [&'a Tensor<T>],
}

impl<T: Scalar> Problem<'_, T> {
    fn diagonal(&self, d: usize) -> (usize, usize) {
        let lo = d.saturating_sub(self.w - 1);
        let hi = d.min(self.h - 1);
        (lo, hi - lo + 1)
    }

    /// Solve items `[start, end)` of diagonal `d`; returns (madds, max per element).
    ///
    /// # Safety
    /// Diagonals before `d` must be final and no other thread may touch the
    /// same items concurrently.
    unsafe fn solve_chunk(&self, buf: SharedBuf<T>, d: usize, start: usize, end: usize) -> (u64, usize) {
        let (ilo, len) = self.diagonal(d);
        let (h, w, k, cg) = (self.h, self.w, self.k, self.group_channels);
        let plane = h * w;
        let mut madds = 0u64;
        let mut max_el = 0usize;
        for t in start..end {
            let ni = t / (self.c * len);
            let ch = (t / len) % self.c;
            let i = ilo + t % len;
            let j = d - i;
            let g = ch / cg;
            let lc = ch % cg;
            let kw = self.kernels[g].data();
            let sample_base = ni * self.c * plane;
            let group_base = sample_base + g * cg * plane;
            let idx = sample_base + ch * plane + i * w + j;
            let mut acc = buf.read(idx);
            let mut count = 0usize;
            for dh in 0..k.min(i + 1) {
                for dw in 0..k.min(j + 1) {
                    if dh == 0 && dw == 0 {
                        continue;
                    }
                    let src = group_base + (i - dh) * w + (j - dw);
                    let wrow = (lc * cg * k + (k - 1 - dh)) * k + (k - 1 - dw);
                    for kc in 0..cg {
                        acc -= buf.read(src + kc * plane) * kw[wrow + kc * k * k];
                    }
                    count += cg;
                }
            }
            buf.write(idx, acc);
            madds += count as u64;
            max_el = max_el.max(count);
        }
        (madds, max_el)
    }
}

/// Invert a batched top-left block in place.
///
/// `x` holds `y` on entry and the solution on return. Its channels are cut
/// into `kernels.len()` equal groups; group `g` is solved with
/// `kernels[g]`, a `(C_g, C_g, k, k)` top-left kernel whose anchor block is
/// taken to be the identity.
pub fn solve_tl<T: Scalar>(x: &mut Tensor<T>, kernels: &[&Tensor<T>], workers: usize) -> InversionStats {
    let [n, c, h, w] = x.dims();
    assert!(!kernels.is_empty() && c % kernels.len() == 0, "channel groups");
    let cg = c / kernels.len();
    let k = kernels[0].h();
    for kt in kernels {
        assert_eq!(kt.dims(), [cg, cg, k, k], "group kernel dims");
    }
    let prob = Problem {
        c,
        h,
        w,
        k,
        group_channels: cg,
        kernels,
    };
    let diagonals = h + w - 1;
    let data = x.data_mut();
    let buf = SharedBuf {
        ptr: data.as_mut_ptr(),
        len: data.len(),
    };
    let workers = workers.max(1);

    if workers == 1 {
        let mut stats = InversionStats::default();
        for d in 0..diagonals {
            let (_, len) = prob.diagonal(d);
            let total = n * c * len;
            // SAFETY: single thread, diagonals processed in order.
            let (m, e) = unsafe { prob.solve_chunk(buf, d, 0, total) };
            stats.madds += m;
            stats.max_madds_per_element = stats.max_madds_per_element.max(e);
            stats.elements += total as u64;
            stats.phases += 1;
        }
        return stats;
    }

    let barrier = Barrier::new(workers);
    let phases = AtomicUsize::new(0);
    let madds = AtomicU64::new(0);
    let max_el = AtomicUsize::new(0);
    let prob = &prob;
    thread::scope(|s| {
        for wid in 0..workers {
            let (barrier, phases, madds, max_el) = (&barrier, &phases, &madds, &max_el);
            s.spawn(move || {
                let mut local_madds = 0u64;
                let mut local_max = 0usize;
                for d in 0..diagonals {
                    let (_, len) = prob.diagonal(d);
                    let total = n * c * len;
                    let start = wid * total / workers;
                    let end = (wid + 1) * total / workers;
                    // SAFETY: chunks of one diagonal are disjoint across
                    // workers and the barrier below finalizes diagonal d
                    // before anyone starts d + 1.
                    let (m, e) = unsafe { prob.solve_chunk(buf, d, start, end) };
                    local_madds += m;
                    local_max = local_max.max(e);
                    if barrier.wait().is_leader() {
                        phases.fetch_add(1, Ordering::Relaxed);
                    }
                }
                madds.fetch_add(local_madds, Ordering::Relaxed);
                max_el.fetch_max(local_max, Ordering::Relaxed);
            });
        }
    });
    InversionStats {
        phases: phases.into_inner(),
        madds: madds.into_inner(),
        max_madds_per_element: max_el.into_inner(),
        elements: (n * c * h * w) as u64,
    }
}

/// Multiply-adds a top-left inversion performs: in-bounds non-anchor taps
/// summed over every pixel, times the group channel count, times `n * c`.
pub fn expected_madds(n: usize, c: usize, group_channels: usize, h: usize, w: usize, k: usize) -> u64 {
    let taps: usize = (0..h)
        .flat_map(|i| (0..w).map(move |j| k.min(i + 1) * k.min(j + 1) - 1))
        .sum();
    (taps * group_channels * n * c) as u64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::invconv::{MaskedKernel, PaddedConvBlock};
    use crate::tensor::Orientation;

    #[test]
    fn phase_count_for_32x32_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kernel = MaskedKernel::<f64>::random(2, 3, Orientation::TL, &mut rng);
        let mut x = Tensor::filled([1, 2, 32, 32], 0.5);
        let stats = solve_tl(&mut x, &[kernel.weights()], 4);
        assert_eq!(stats.phases, 63);
        assert!(stats.max_madds_per_element <= 9 * 2);
        assert_eq!(stats.madds, expected_madds(1, 2, 2, 32, 32, 3));
        assert_eq!(stats.elements, 2 * 32 * 32);
    }

    #[test]
    fn worker_counts_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kernel = MaskedKernel::<f64>::random(3, 3, Orientation::BL, &mut rng);
        let b = PaddedConvBlock::new(kernel);
        let y = Tensor::from_fn([2, 3, 7, 9], |[n, c, h, w]| ((n + 2 * c + 3 * h + 5 * w) % 7) as f64 - 3.0);
        let one = b.invert_wavefront(&y, 1).unwrap();
        for workers in [2, 3, 8, 64] {
            assert!(b.invert_wavefront(&y, workers).unwrap().bit_eq(&one));
        }
    }

    #[test]
    fn single_pixel_and_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dims in [[1, 1, 1, 1], [1, 2, 1, 6], [1, 2, 5, 1]] {
            let kernel = MaskedKernel::<f64>::random(dims[1], 3, Orientation::TL, &mut rng);
            let b = PaddedConvBlock::new(kernel);
            let x = Tensor::from_fn(dims, |[_, c, h, w]| (c + h + w) as f64);
            let y = b.forward(&x).unwrap();
            let (xr, stats) = b.invert_wavefront_instrumented(&y, 2).unwrap();
            assert!(xr.max_abs_diff(&x) < 1e-12);
            assert_eq!(stats.phases, dims[2] + dims[3] - 1);
        }
    }
}
