//! Dense row-major matrix kernels shared by matmul, linear and convolution.
//!
//! Every kernel accumulates each output element over the inner dimension in
//! ascending index order, so results do not depend on how rows are split
//! across threads. [`Exec::Parallel`] hands disjoint output row blocks to
//! rayon; [`Exec::Sequential`] runs the same per-block code in a loop.

use crate::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

// Below this many multiply-adds the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// Rows of the output processed together so each loaded row of `b` is
/// reused across several accumulators.
const ROW_TILE: usize = 4;
/// Column block width; keeps the active slice of `b` cache resident.
const COL_BLOCK: usize = 256;

/// Runs `f(block_index, rows)` over consecutive blocks of `rows_per_block`
/// rows of the row-major `out` buffer with row length `row_len`.
pub fn for_each_row_block<T, F>(
    exec: Exec,
    out: &mut [T],
    row_len: usize,
    rows_per_block: usize,
    work: usize,
    f: F,
) where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = (row_len * rows_per_block).max(1);
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if work >= PAR_THRESHOLD => {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => {
            let _ = work;
            out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

/// `(0..n).map(f)` collected in index order; items run on rayon under
/// [`Exec::Parallel`].
pub fn map_indexed<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// `c[m×n] += A·b[k×n]` where `A[i, kk] = a[i*row_stride + kk*col_stride]`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    exec: Exec,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    row_stride: usize,
    col_stride: usize,
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for_each_row_block(exec, c, n, ROW_TILE, m * n * k, |blk, rows| {
        let i0 = blk * ROW_TILE;
        let nrows = rows.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            if nrows == ROW_TILE {
                let (r0, rest) = rows.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (r0, r1, r2, r3) = (
                    &mut r0[j0..j1],
                    &mut r1[j0..j1],
                    &mut r2[j0..j1],
                    &mut r3[j0..j1],
                );
                for kk in 0..k {
                    let brow = &b[kk * n + j0..kk * n + j1];
                    let base = kk * col_stride;
                    let a0 = a[i0 * row_stride + base];
                    let a1 = a[(i0 + 1) * row_stride + base];
                    let a2 = a[(i0 + 2) * row_stride + base];
                    let a3 = a[(i0 + 3) * row_stride + base];
                    for (j, &bv) in brow.iter().enumerate() {
                        r0[j] = r0[j] + a0 * bv;
                        r1[j] = r1[j] + a1 * bv;
                        r2[j] = r2[j] + a2 * bv;
                        r3[j] = r3[j] + a3 * bv;
                    }
                }
            } else {
                for r in 0..nrows {
                    let crow = &mut rows[r * n + j0..r * n + j1];
                    let arow = (i0 + r) * row_stride;
                    for kk in 0..k {
                        let av = a[arow + kk * col_stride];
                        let brow = &b[kk * n + j0..kk * n + j1];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
            j0 = j1;
        }
    });
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    gemm_strided(exec, m, k, n, a, k, 1, b, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    gemm_strided(exec, m, k, n, a, 1, m, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, computed as row dot products.
pub fn gemm_nt<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for_each_row_block(exec, c, n, 1, m * n * k, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = *cv + dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// Dot product with eight independent partial sums (vectorizes cleanly).
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Reference triple loop, `c = a·b`. Used by benches and tests.
pub fn gemm_naive<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for kk in 0..k {
                acc = acc + a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_nn_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (9, 13, 300), (4, 2, 517)] {
            let a = random(m * k, &mut rng);
            let b = random(k * n, &mut rng);
            let mut c = vec![0.0; m * n];
            gemm_nn(Exec::default(), m, k, n, &a, &b, &mut c);
            assert_eq!(c, gemm_naive(m, k, n, &a, &b));
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k, n) = (6, 11, 9);
        let a = random(m * k, &mut rng);
        let b = random(k * n, &mut rng);
        let want = gemm_naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_tn(Exec::default(), m, k, n, &transpose(&a, m, k), &b, &mut c);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_nt(Exec::default(), m, k, n, &a, &transpose(&b, k, n), &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (37, 64, 120);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq = vec![0.0f32; m * n];
        let mut par = vec![0.0f32; m * n];
        gemm_nn(Exec::Sequential, m, k, n, &a, &b, &mut seq);
        gemm_nn(Exec::Parallel, m, k, n, &a, &b, &mut par);
        assert_eq!(seq, par);
        let bt: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq = vec![0.0f32; m * n];
        let mut par = vec![0.0f32; m * n];
        gemm_nt(Exec::Sequential, m, k, n, &a, &bt, &mut seq);
        gemm_nt(Exec::Parallel, m, k, n, &a, &bt, &mut par);
        assert_eq!(seq, par);
    }
}
