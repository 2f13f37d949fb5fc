//! Inner compute kernels for the tape operations.
//!
//! All kernels are accumulate-into (`c += ...`) and deterministic: parallel
//! variants partition the *output* rows, and each row is produced by the
//! same sequential loop regardless of thread count, so results are bitwise
//! identical in single- and multi-threaded runs.

use rayon::prelude::*;

use super::Element;

/// Below this many multiply-accumulates the rayon dispatch overhead wins.
const PAR_MACS: usize = 32_768;

/// Dot product over eight independent accumulator lanes. A plain
/// sequential reduction cannot vectorize under strict float semantics;
/// the fixed lane order keeps results deterministic while letting the
/// lanes map onto SIMD registers.
#[inline]
pub fn dot8<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::zero(); 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = E::zero();
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        acc += x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    acc + ((pairs[0] + pairs[2]) + (pairs[1] + pairs[3]))
}


/// Runs `row(chunk, batch_index, row_index)` over every `width`-sized row
/// of `c`, splitting the rows into a handful of large contiguous blocks
/// when parallelism pays off. Each row's computation is identical either
/// way, so results are bitwise independent of the partitioning.
#[inline]
fn for_each_row<E: Element>(
    c: &mut [E],
    width: usize,
    rows_per_batch: usize,
    macs: usize,
    row: impl Fn(&mut [E], usize, usize) + Sync,
) {
    let total_rows = c.len() / width.max(1);
    if macs >= PAR_MACS && total_rows > 1 {
        let tasks = (rayon::current_num_threads() * 4).clamp(1, total_rows);
        let rows_per_task = total_rows.div_ceil(tasks);
        c.par_chunks_mut(rows_per_task * width)
            .enumerate()
            .for_each(|(t, block)| {
                let first = t * rows_per_task;
                for (j, chunk) in block.chunks_mut(width).enumerate() {
                    let r = first + j;
                    row(chunk, r / rows_per_batch, r % rows_per_batch);
                }
            });
    } else {
        for (r, chunk) in c.chunks_mut(width).enumerate() {
            row(chunk, r / rows_per_batch, r % rows_per_batch);
        }
    }
}

/// c[b,m,n] += a[b,m,k] * b[b,k,n], with either operand optionally
/// broadcast across the batch (its own batch extent being 1).
pub fn bmm_nn<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    c: &mut [E],
) {
    debug_assert_eq!(c.len(), batch * m * n);
    let row = |c_chunk: &mut [E], bi: usize, i: usize| {
        let a_base = if a_batched { bi * m * k } else { 0 };
        let b_base = if b_batched { bi * k * n } else { 0 };
        if n == 1 {
            // single output column: a row dot the (contiguous) b column
            let arow = &a[a_base + i * k..a_base + i * k + k];
            c_chunk[0] += dot8(arow, &b[b_base..b_base + k]);
            return;
        }
        for p in 0..k {
            let av = a[a_base + i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[b_base + p * n..b_base + p * n + n];
            for (cv, &bv) in c_chunk.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    for_each_row(c, n, m, batch * m * k * n, row);
}

/// c[b,m,q] += a[b,m,p] * b[b,q,p]^T  (dot products of rows).
pub fn bmm_nt<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    a_batched: bool,
    b_batched: bool,
    c: &mut [E],
) {
    debug_assert_eq!(c.len(), batch * m * q);
    let row = |c_chunk: &mut [E], bi: usize, i: usize| {
        let a_base = if a_batched { bi * m * p } else { 0 };
        let b_base = if b_batched { bi * q * p } else { 0 };
        let arow = &a[a_base + i * p..a_base + i * p + p];
        for (j, cv) in c_chunk.iter_mut().enumerate() {
            let brow = &b[b_base + j * p..b_base + j * p + p];
            *cv += dot8(arow, brow);
        }
    };
    for_each_row(c, q, m, batch * m * p * q, row);
}

/// c[b,q,n] += a[b,p,q]^T * b[b,p,n].
///
/// Accumulation runs over `p`; parallelism partitions the `q` output rows
/// so each row of `c` is owned by exactly one task.
pub fn bmm_tn<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    p: usize,
    q: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    c: &mut [E],
) {
    debug_assert_eq!(c.len(), batch * q * n);
    let row = |c_chunk: &mut [E], bi: usize, j: usize| {
        let a_base = if a_batched { bi * p * q } else { 0 };
        let b_base = if b_batched { bi * p * n } else { 0 };
        for i in 0..p {
            let av = a[a_base + i * q + j];
            if av == E::zero() {
                continue;
            }
            let brow = &b[b_base + i * n..b_base + i * n + n];
            for (cv, &bv) in c_chunk.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    for_each_row(c, n, q, batch * p * q * n, row);
}

/// Elementwise map into a fresh buffer, parallel in large blocks.
pub fn map_new<E: Element>(x: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    if x.len() >= PAR_MACS {
        let mut out = vec![E::zero(); x.len()];
        let block = x.len().div_ceil(rayon::current_num_threads() * 4).max(1);
        out.par_chunks_mut(block)
            .zip(x.par_chunks(block))
            .for_each(|(dst, src)| {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = f(s);
                }
            });
        out
    } else {
        x.iter().map(|&v| f(v)).collect()
    }
}

/// Elementwise zip into a fresh buffer, parallel in large blocks.
pub fn zip_new<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_MACS {
        let mut out = vec![E::zero(); a.len()];
        let block = a.len().div_ceil(rayon::current_num_threads() * 4).max(1);
        out.par_chunks_mut(block)
            .zip(a.par_chunks(block).zip(b.par_chunks(block)))
            .for_each(|(dst, (sa, sb))| {
                for ((d, &x), &y) in dst.iter_mut().zip(sa).zip(sb) {
                    *d = f(x, y);
                }
            });
        out
    } else {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        bmm_nn(&a, &b, 1, 2, 2, 2, true, true, &mut c);
        assert_eq!(c, b);
    }

    #[test]
    fn nt_matches_nn_with_transposed_operand() {
        // a[2,3] * b[3,2] via nn, and a * (b^T stored row-major [2,3]) via nt.
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        bmm_nn(&a, &b, 1, 2, 3, 2, true, true, &mut c1);
        bmm_nt(&a, &bt, 1, 2, 3, 2, true, true, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn tn_matches_nn_with_transposed_operand() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [3,2] -> a^T [2,3]
        let at = vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0];
        let b = vec![1.0, -1.0, 0.5, 2.0, -0.5, 1.5];
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        bmm_tn(&a, &b, 1, 3, 2, 2, true, true, &mut c1);
        bmm_nn(&at, &b, 1, 2, 3, 2, true, true, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn broadcast_right_operand() {
        // batch 2 of a[1,2], shared b[2,1]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![10.0, 100.0];
        let mut c = vec![0.0; 2];
        bmm_nn(&a, &b, 2, 1, 2, 1, true, false, &mut c);
        assert_eq!(c, vec![210.0, 430.0]);
    }
}
