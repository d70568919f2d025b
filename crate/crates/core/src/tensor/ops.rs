//! Raw kernels over contiguous buffers. No taping here; the graph layer
//! decides what to record. Accumulation orders are fixed so results are
//! bit-reproducible.

use crate::scalar::Scalar;

/// C[bat, m, n] = A[bat, m, k] * B[bat or 1, k, n]
pub fn matmul_nn<S: Scalar>(
    a: &[S],
    b: &[S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_b: bool,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * m * n];
    for bat in 0..batch {
        let a_off = bat * m * k;
        let b_off = if broadcast_b { 0 } else { bat * k * n };
        let c_off = bat * m * n;
        for i in 0..m {
            let c_row = &mut out[c_off + i * n..c_off + (i + 1) * n];
            for l in 0..k {
                let aval = a[a_off + i * k + l];
                if aval == S::zero() {
                    continue;
                }
                let b_row = &b[b_off + l * n..b_off + (l + 1) * n];
                for (c, bv) in c_row.iter_mut().zip(b_row) {
                    *c += aval * *bv;
                }
            }
        }
    }
    out
}

/// C[bat, m, k] = A[bat, m, n] * B[bat or 1, k, n]^T  (rows of B as columns)
pub fn matmul_nt<S: Scalar>(
    a: &[S],
    b: &[S],
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    broadcast_b: bool,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * m * k];
    for bat in 0..batch {
        let a_off = bat * m * n;
        let b_off = if broadcast_b { 0 } else { bat * k * n };
        let c_off = bat * m * k;
        for i in 0..m {
            let a_row = &a[a_off + i * n..a_off + (i + 1) * n];
            for l in 0..k {
                let b_row = &b[b_off + l * n..b_off + (l + 1) * n];
                let mut acc = S::zero();
                for (av, bv) in a_row.iter().zip(b_row) {
                    acc += *av * *bv;
                }
                out[c_off + i * k + l] = acc;
            }
        }
    }
    out
}

/// C[k, n] (+)= A[bat, m, k]^T * B[bat, m, n], optionally summed over batch.
/// When `sum_batches` is false the output is per-batch: C[bat, k, n].
pub fn matmul_tn<S: Scalar>(
    a: &[S],
    b: &[S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    sum_batches: bool,
) -> Vec<S> {
    let out_batch = if sum_batches { 1 } else { batch };
    let mut out = vec![S::zero(); out_batch * k * n];
    for bat in 0..batch {
        let a_off = bat * m * k;
        let b_off = bat * m * n;
        let c_off = if sum_batches { 0 } else { bat * k * n };
        for i in 0..m {
            for l in 0..k {
                let aval = a[a_off + i * k + l];
                if aval == S::zero() {
                    continue;
                }
                let b_row = &b[b_off + i * n..b_off + (i + 1) * n];
                let c_row = &mut out[c_off + l * n..c_off + (l + 1) * n];
                for (c, bv) in c_row.iter_mut().zip(b_row) {
                    *c += aval * *bv;
                }
            }
        }
    }
    out
}

/// out[i] = a[i] + b[i mod b.len()], with b a suffix-shaped broadcast.
pub fn add_suffix_broadcast<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    debug_assert_eq!(a.len() % b.len(), 0);
    let mut out = Vec::with_capacity(a.len());
    for (i, av) in a.iter().enumerate() {
        out.push(*av + b[i % b.len()]);
    }
    out
}

/// Sum `a` (len = reps * suffix_len) down to suffix_len by summing the
/// leading repetitions. Used by the backward of a broadcast add.
pub fn sum_to_suffix<S: Scalar>(a: &[S], suffix_len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); suffix_len];
    for (i, av) in a.iter().enumerate() {
        out[i % suffix_len] += *av;
    }
    out
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialized axis permutation.
pub fn permute<S: Scalar>(a: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![S::zero(); a.len()];
    for (flat_in, value) in a.iter().enumerate() {
        let mut rem = flat_in;
        let mut flat_out = 0;
        for (out_axis, &in_axis) in axes.iter().enumerate() {
            let coord = (rem / in_strides[in_axis]) % shape[in_axis];
            flat_out += coord * out_strides[out_axis];
            let _ = &mut rem;
        }
        out[flat_out] = *value;
    }
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

/// Softmax over the last axis with optional key masking. Masked keys get
/// exactly zero weight. Returns an error row index when a (batch) row has
/// no valid keys.
pub fn softmax_rows<S: Scalar>(
    x: &[S],
    row_len: usize,
    mask: Option<(&[bool], usize)>, // (keep flags (mask_batch * row_len), rows per mask batch)
) -> Result<Vec<S>, usize> {
    let rows = x.len() / row_len;
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * row_len..(r + 1) * row_len];
        let keep_row = mask.map(|(keep, rows_per_batch)| {
            let b = r / rows_per_batch;
            &keep[b * row_len..(b + 1) * row_len]
        });
        let mut max = S::neg_infinity();
        let mut any = false;
        for (i, v) in row.iter().enumerate() {
            if keep_row.is_none_or(|k| k[i]) {
                any = true;
                if *v > max {
                    max = *v;
                }
            }
        }
        if !any {
            let rows_per_batch = mask.map(|(_, rpb)| rpb).unwrap_or(rows);
            return Err(r / rows_per_batch);
        }
        let out_row = &mut out[r * row_len..(r + 1) * row_len];
        let mut denom = S::zero();
        for (i, v) in row.iter().enumerate() {
            if keep_row.is_none_or(|k| k[i]) {
                let e = (*v - max).exp();
                out_row[i] = e;
                denom += e;
            }
        }
        for o in out_row.iter_mut() {
            *o /= denom;
        }
    }
    Ok(out)
}

pub const GELU_COEFF: f64 = 0.044715;

pub fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64_lossy(GELU_COEFF);
    let half = S::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64_lossy(GELU_COEFF);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
