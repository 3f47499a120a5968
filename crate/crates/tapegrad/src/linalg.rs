//! Deterministic parallel matrix multiply.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, ArrayView2, Axis};

/// Row-block size for the parallel GEMM. Fixed so the work split (and with
/// it the floating-point summation order) never depends on thread count.
const ROW_BLOCK: usize = 64;

/// `A (m,k) · B (k,n)` with results independent of the rayon pool size.
///
/// Each output row block is produced by a single sequential GEMM call, so
/// two runs of the same program yield bit-identical outputs.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    if m <= ROW_BLOCK {
        out.assign(&a.dot(&b));
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), ROW_BLOCK)
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut chunk)| {
            let lo = i * ROW_BLOCK;
            let hi = (lo + chunk.nrows()).min(m);
            chunk.assign(&a.slice(s![lo..hi, ..]).dot(&b));
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_ndarray_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (200, 33, 17), (129, 64, 129)] {
            let a = Array::from_shape_fn((m, k), |_| rng.gen_range(-1.0..1.0));
            let b = Array::from_shape_fn((k, n), |_| rng.gen_range(-1.0..1.0));
            let c = matmul(a.view(), b.view());
            let d = a.dot(&b);
            for (x, y) in c.iter().zip(d.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array::from_shape_fn((300, 47), |_| rng.gen_range(-1.0..1.0));
        let b = Array::from_shape_fn((47, 31), |_| rng.gen_range(-1.0..1.0));
        let c1 = matmul(a.view(), b.view());
        let c2 = matmul(a.view(), b.view());
        assert_eq!(c1, c2);
    }
}
