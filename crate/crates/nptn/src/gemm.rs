//! Register-blocked matrix product on explicit SIMD vectors.
//!
//! Multiplies and adds are separate instructions (never fused), and every
//! output element sums its products from zero in ascending `t`. The result
//! is therefore bit-identical to the naive triple loop.

use std::ops::{Add, Mul};

use wide::{f32x8, f64x4};

use crate::tensor::Scalar;

/// Rows per packed panel of `a`.
const MR: usize = 8;

pub trait Lanes: Copy + 'static {
    type V: Copy + Add<Output = Self::V> + Mul<Output = Self::V>;
    const N: usize;
    fn zero_v() -> Self::V;
    fn splat(v: Self) -> Self::V;
    fn load(s: &[Self]) -> Self::V;
    fn store(v: Self::V, out: &mut [Self]);
}

impl Lanes for f32 {
    type V = f32x8;
    const N: usize = 8;
    fn zero_v() -> f32x8 {
        f32x8::ZERO
    }
    fn splat(v: f32) -> f32x8 {
        f32x8::splat(v)
    }
    fn load(s: &[f32]) -> f32x8 {
        f32x8::new(s.try_into().unwrap())
    }
    fn store(v: f32x8, out: &mut [f32]) {
        out.copy_from_slice(&v.to_array());
    }
}

impl Lanes for f64 {
    type V = f64x4;
    const N: usize = 4;
    fn zero_v() -> f64x4 {
        f64x4::ZERO
    }
    fn splat(v: f64) -> f64x4 {
        f64x4::splat(v)
    }
    fn load(s: &[f64]) -> f64x4 {
        f64x4::new(s.try_into().unwrap())
    }
    fn store(v: f64x4, out: &mut [f64]) {
        out.copy_from_slice(&v.to_array());
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` on raw row-major slices, overwriting `c`.
///
/// Each output element is accumulated from zero in ascending `t`, so the
/// result is bit-identical to the naive triple loop regardless of how the
/// loops are blocked or vectorized.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let l = T::N;
    let n4 = n - n % (4 * l);
    let n2 = n4 + (n - n4) / (2 * l) * (2 * l);
    let n1 = n2 + (n - n2) / l * l;
    let tail = n - n1;
    // leftover columns, zero-padded to one vector
    let mut b_tail = Vec::new();
    if tail > 0 {
        b_tail = vec![T::zero(); k * l];
        for t in 0..k {
            b_tail[t * l..t * l + tail].copy_from_slice(&b[t * n + n1..(t + 1) * n]);
        }
    }

    let mut packed = vec![T::zero(); k * MR];
    for i0 in (0..m).step_by(MR) {
        let rows = MR.min(m - i0);
        if rows < MR {
            packed.fill(T::zero());
        }
        for r in 0..rows {
            for (t, &v) in a[(i0 + r) * k..(i0 + r + 1) * k].iter().enumerate() {
                packed[t * MR + r] = v;
            }
        }
        let panel = Panel {
            k,
            packed: &packed,
            i0,
            rows,
            n,
        };
        for j0 in (0..n4).step_by(4 * l) {
            panel.run::<4>(b, n, j0, c, j0, 4 * l);
        }
        if n2 > n4 {
            panel.run::<2>(b, n, n4, c, n4, 2 * l);
        }
        if n1 > n2 {
            panel.run::<1>(b, n, n2, c, n2, l);
        }
        if tail > 0 {
            panel.run::<1>(&b_tail, l, 0, c, n1, tail);
        }
    }
}

/// Up to `MR` rows of `a`, packed `t`-major and zero-padded.
struct Panel<'a, T> {
    k: usize,
    packed: &'a [T],
    i0: usize,
    rows: usize,
    n: usize,
}

impl<T: Scalar> Panel<'_, T> {
    /// Multiply by the `V` vectors of columns starting at `b_col` of `b`
    /// (row stride `ldb`) and store the first `cols` at column `c_col` of `c`.
    #[inline(never)]
    fn run<const V: usize>(
        &self,
        b: &[T],
        ldb: usize,
        b_col: usize,
        c: &mut [T],
        c_col: usize,
        cols: usize,
    ) {
        let l = T::N;
        let mut acc = [[T::zero_v(); V]; MR];
        for t in 0..self.k {
            let row = &b[t * ldb + b_col..t * ldb + b_col + V * l];
            let mut bv = [T::zero_v(); V];
            for (v, chunk) in bv.iter_mut().zip(row.chunks_exact(l)) {
                *v = T::load(chunk);
            }
            let arow = &self.packed[t * MR..(t + 1) * MR];
            for (acc_row, &av) in acc.iter_mut().zip(arow) {
                let a = T::splat(av);
                for (cv, &bv) in acc_row.iter_mut().zip(&bv) {
                    *cv = *cv + a * bv;
                }
            }
        }
        let mut buf = [T::zero(); 4 * 8];
        for (r, acc_row) in acc.iter().enumerate().take(self.rows) {
            for (v, chunk) in acc_row.iter().zip(buf.chunks_exact_mut(l)) {
                T::store(*v, chunk);
            }
            let start = (self.i0 + r) * self.n + c_col;
            c[start..start + cols].copy_from_slice(&buf[..cols]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::NDTensor;
    use proptest::prelude::*;

    fn naive<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
        let mut c = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for t in 0..k {
                    s = s + a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn check<T: Scalar>(m: usize, k: usize, n: usize, seed: u64) -> bool {
        let mut rng = Rng::new(seed);
        let a = NDTensor::<T>::uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = NDTensor::<T>::uniform(&[k, n], -1.0, 1.0, &mut rng);
        let mut c = vec![T::nan(); m * n];
        gemm(m, k, n, a.data(), b.data(), &mut c);
        let want = naive(m, k, n, a.data(), b.data());
        c.iter()
            .zip(&want)
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
    }

    proptest! {
        #[test]
        fn bit_identical_to_naive_loop(m in 1usize..20, k in 1usize..30, n in 1usize..75, seed in any::<u64>()) {
            prop_assert!(check::<f32>(m, k, n, seed));
            prop_assert!(check::<f64>(m, k, n, seed));
        }
    }
}
