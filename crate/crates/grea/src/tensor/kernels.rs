//! Raw f64 slice kernels behind the tape operations.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! a rayon variant is compiled as well and the unsuffixed entry point
//! dispatches to it. The parallel variants split work so that each output
//! element is produced by exactly one task with the same inner summation
//! order as the sequential code, so both paths return bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row count below which the rayon kernels skip splitting.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 64;

// ── Dense matmul ─────────────────────────────────────────────────────

fn matmul_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, n: usize) {
    out_row.fill(0.0);
    for (p, &a_val) in a_row.iter().enumerate().take(k) {
        if a_val == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &b_val) in out_row.iter_mut().zip(b_row) {
            *o += a_val * b_val;
        }
    }
}

/// C[m,n] = A[m,k] · B[k,n], row-major.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_row(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, k, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .with_min_len(PAR_MIN_ROWS)
        .enumerate()
        .for_each(|(i, out_row)| matmul_row(out_row, &a[i * k..(i + 1) * k], b, k, n));
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        matmul_par(a, b, m, k, n)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(a, b, m, k, n)
    }
}

/// C[k,n] = Aᵀ[k,m] · B[m,n] without materializing the transpose.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_val = a[i * k + p];
            if a_val == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o += a_val * b_val;
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] · Bᵀ[n,k] where B is given row-major as [k,n].
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + j] = s;
        }
    }
    out
}

// ── Symmetric sparse matmul (CSR) ────────────────────────────────────

/// Symmetric sparse matrix in CSR form. Used for message-passing
/// aggregation; the backward pass reuses the same matrix, so symmetry
/// is an invariant the builder must guarantee.
#[derive(Debug, Clone)]
pub struct SparseSym {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseSym {
    /// Build from (row, col, weight) triples. Each off-diagonal triple is
    /// mirrored so the result is symmetric: pass every undirected edge
    /// once. Duplicate entries are summed and columns sorted per row.
    pub fn from_triples(n: usize, triples: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, w) in triples {
            rows[r].push((c, w));
            if r != c {
                rows[c].push((r, w));
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, w) in row.iter() {
                if last == Some(c) {
                    *weights.last_mut().unwrap() += w;
                } else {
                    cols.push(c);
                    weights.push(w);
                    last = Some(c);
                }
            }
            indptr.push(cols.len());
        }
        SparseSym { n, indptr, cols, weights }
    }

    /// Materialize as a dense row-major n×n matrix (test oracle helper).
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                out[r * self.n + self.cols[idx]] += self.weights[idx];
            }
        }
        out
    }
}

fn spmm_row(adj: &SparseSym, x: &[f64], d: usize, r: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for idx in adj.indptr[r]..adj.indptr[r + 1] {
        let w = adj.weights[idx];
        let x_row = &x[adj.cols[idx] * d..(adj.cols[idx] + 1) * d];
        for (o, &v) in out_row.iter_mut().zip(x_row) {
            *o += w * v;
        }
    }
}

/// Y[n,d] = S · X[n,d] for symmetric CSR S.
pub fn spmm_seq(adj: &SparseSym, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; adj.n * d];
    for r in 0..adj.n {
        spmm_row(adj, x, d, r, &mut out[r * d..(r + 1) * d]);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn spmm_par(adj: &SparseSym, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; adj.n * d];
    out.par_chunks_mut(d)
        .with_min_len(PAR_MIN_ROWS)
        .enumerate()
        .for_each(|(r, out_row)| spmm_row(adj, x, d, r, out_row));
    out
}

pub fn spmm(adj: &SparseSym, x: &[f64], d: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        spmm_par(adj, x, d)
    }
    #[cfg(not(feature = "parallel"))]
    {
        spmm_seq(adj, x, d)
    }
}

// ── Segment reductions ───────────────────────────────────────────────

#[cfg(feature = "parallel")]
fn segments_sorted(segments: &[usize]) -> bool {
    segments.windows(2).all(|w| w[0] <= w[1])
}

/// Per-segment row sums. Rows whose ids never occur yield zero rows.
pub fn segment_sum_seq(x: &[f64], d: usize, segments: &[usize], num_segments: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_segments * d];
    for (i, &s) in segments.iter().enumerate() {
        let row = &x[i * d..(i + 1) * d];
        let acc = &mut out[s * d..(s + 1) * d];
        for (o, &v) in acc.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn segment_sum_par(x: &[f64], d: usize, segments: &[usize], num_segments: usize) -> Vec<f64> {
    // Contiguous segment ranges split cleanly across threads; unsorted ids
    // fall back to the scatter loop.
    if !segments_sorted(segments) || num_segments < PAR_MIN_ROWS {
        return segment_sum_seq(x, d, segments, num_segments);
    }
    let mut out = vec![0.0; num_segments * d];
    out.par_chunks_mut(d)
        .with_min_len(8)
        .enumerate()
        .for_each(|(s, acc)| {
            let start = segments.partition_point(|&id| id < s);
            let end = segments.partition_point(|&id| id <= s);
            for i in start..end {
                let row = &x[i * d..(i + 1) * d];
                for (o, &v) in acc.iter_mut().zip(row) {
                    *o += v;
                }
            }
        });
    out
}

pub fn segment_sum(x: &[f64], d: usize, segments: &[usize], num_segments: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        segment_sum_par(x, d, segments, num_segments)
    }
    #[cfg(not(feature = "parallel"))]
    {
        segment_sum_seq(x, d, segments, num_segments)
    }
}

/// Backward of segment_sum: each input row receives its segment's adjoint.
pub fn segment_broadcast(g: &[f64], d: usize, segments: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; segments.len() * d];
    for (i, &s) in segments.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&g[s * d..(s + 1) * d]);
    }
    out
}

/// Per-segment, per-column max with argmax rows recorded for the backward
/// pass. Returns (values, argmax) where argmax[s*d+c] is the winning row.
/// Empty segments are reported via Err with the offending segment id.
pub fn segment_max(
    x: &[f64],
    d: usize,
    segments: &[usize],
    num_segments: usize,
) -> Result<(Vec<f64>, Vec<usize>), usize> {
    let mut out = vec![f64::NEG_INFINITY; num_segments * d];
    let mut arg = vec![usize::MAX; num_segments * d];
    for (i, &s) in segments.iter().enumerate() {
        for c in 0..d {
            let v = x[i * d + c];
            if v > out[s * d + c] {
                out[s * d + c] = v;
                arg[s * d + c] = i;
            }
        }
    }
    if let Some(pos) = arg.iter().position(|&a| a == usize::MAX) {
        return Err(pos / d);
    }
    Ok((out, arg))
}

// ── Elementwise helpers ──────────────────────────────────────────────

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable binary cross-entropy from a logit: max(z,0) − z·y + ln(1+e^{−|z|}).
pub fn bce_logit_scalar(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
