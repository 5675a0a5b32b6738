//! Matrix products split over output rows.
//!
//! Each output row is produced by the same packed kernel regardless of how
//! rows are partitioned, so results do not depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_WORK: usize = 1 << 22;

/// `a · b`
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.ncols();
    debug_assert_eq!(k, b.nrows());
    let mut out = Array2::zeros((m, n));
    let threads = rayon::current_num_threads();
    if threads <= 1 || m * k * n < PARALLEL_WORK || m < 2 * threads {
        general_mat_mul(1.0, &a, &b, 0.0, &mut out);
        return out;
    }
    let chunk = m.div_ceil(threads).max(8);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut block)| {
            let start = i * chunk;
            let rows = block.nrows();
            let a_block = a.slice(s![start..start + rows, ..]);
            general_mat_mul(1.0, &a_block, &b, 0.0, &mut block);
        });
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    matmul(a, b.t())
}

/// `aᵀ · b`
pub fn matmul_tn(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    matmul(a.t(), b)
}
