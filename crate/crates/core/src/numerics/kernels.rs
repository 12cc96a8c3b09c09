//! Matrix kernels shared by the tape ops.
//!
//! `gemm` accumulates every output element over the inner dimension in
//! ascending order. Rows are independent, so splitting rows across threads
//! never changes a result bit.

use crate::exec::{self, Execution};

/// Below this many multiply-adds the row split is not worth scheduling.
const PARALLEL_MIN_WORK: usize = 1 << 18;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm_with(Execution::Parallel, a, b, m, k, n)
}

pub fn gemm_with(exec: Execution, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let exec = if m * k * n >= PARALLEL_MIN_WORK { exec } else { Execution::Serial };
    let rows_per_block = if exec.is_parallel() { 16 } else { m.max(1) };
    exec::for_each_row_block(exec, &mut c, n, rows_per_block, |row0, c_block| {
        let rows = c_block.len() / n;
        gemm_rows(&a[row0 * k..(row0 + rows) * k], b, c_block, k, n);
    });
    c
}

fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    let mut a_quads = a.chunks_exact(4 * k);
    let mut c_quads = c.chunks_exact_mut(4 * n);
    for (a4, c4) in (&mut a_quads).zip(&mut c_quads) {
        let (c0, rest) = c4.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for t in 0..k {
            let b_row = &b[t * n..(t + 1) * n];
            let (x0, x1, x2, x3) = (a4[t], a4[k + t], a4[2 * k + t], a4[3 * k + t]);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (a_row, c_row) in a_quads
        .remainder()
        .chunks_exact(k)
        .zip(c_quads.into_remainder().chunks_exact_mut(n))
    {
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, &transpose(b, n, k), m, k, n)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn gemm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm(&transpose(a, k, m), b, m, k, n)
}

/// Reference triple loop, used by tests as an independent oracle.
pub fn gemm_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
