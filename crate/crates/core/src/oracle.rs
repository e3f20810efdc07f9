//! Sequential reference implementations. Nothing here shares code with the
//! blocked kernels; these are the ground truth the rest is tested against.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, FactorMatrices, SparseTensorCoo};

/// Cap on `Π_{m≠n} I_m` for [`mttkrp_explicit`].
pub const EXPLICIT_SIZE_GUARD: u64 = 1_000_000;

fn check_shapes(coo: &SparseTensorCoo, factors: &FactorMatrices, mode: usize) -> Result<()> {
    if mode >= coo.order() {
        return Err(Error::Shape(format!(
            "mode {mode} out of range for an order-{} tensor",
            coo.order()
        )));
    }
    factors.check_conforms(coo.dims())
}

/// Element-wise MTTKRP: for every non-zero, the Hadamard product of the
/// non-target factor rows scaled by the value is added to `M[i_n]`.
pub fn mttkrp_coo(coo: &SparseTensorCoo, factors: &FactorMatrices, mode: usize) -> Result<DenseMatrix> {
    check_shapes(coo, factors, mode)?;
    let rank = factors.rank();
    let mut m = DenseMatrix::zeros(coo.dims()[mode] as usize, rank);
    let mut row = vec![0.0; rank];
    for e in 0..coo.nnz() {
        row.iter_mut().for_each(|v| *v = coo.values()[e]);
        for other in (0..coo.order()).filter(|&o| o != mode) {
            let f = factors.get(other).row(coo.indices(other)[e] as usize);
            for (r, v) in row.iter_mut().enumerate() {
                *v *= f[r];
            }
        }
        let out = m.row_mut(coo.indices(mode)[e] as usize);
        for (o, v) in out.iter_mut().zip(&row) {
            *o += v;
        }
    }
    Ok(m)
}

/// `M = X_(n) · (A^(N) ⊙ ⋯ ⊙ A^(1))` with the target mode skipped, by
/// materializing both operands. The column index of the unfolding enumerates
/// the non-target coordinates with the lowest mode fastest.
pub fn mttkrp_explicit(
    coo: &SparseTensorCoo,
    factors: &FactorMatrices,
    mode: usize,
) -> Result<DenseMatrix> {
    check_shapes(coo, factors, mode)?;
    let dims = coo.dims();
    let others: Vec<usize> = (0..coo.order()).filter(|&o| o != mode).collect();
    let cols: u64 = others.iter().map(|&o| dims[o]).product();
    if cols > EXPLICIT_SIZE_GUARD {
        return Err(Error::Shape(format!(
            "unfolding has {cols} columns, explicit oracle is limited to {EXPLICIT_SIZE_GUARD}"
        )));
    }
    let cols = cols as usize;
    let rows = dims[mode] as usize;

    let mut unfolded = DenseMatrix::zeros(rows, cols);
    for e in 0..coo.nnz() {
        let mut col = 0usize;
        let mut stride = 1usize;
        for &o in &others {
            col += coo.indices(o)[e] as usize * stride;
            stride *= dims[o] as usize;
        }
        unfolded[(coo.indices(mode)[e] as usize, col)] += coo.values()[e];
    }

    // Khatri-Rao product, highest mode on the left so the lowest mode varies
    // fastest down the rows.
    let mut krp: Option<DenseMatrix> = None;
    for &o in others.iter().rev() {
        let f = factors.get(o);
        krp = Some(match krp {
            None => f.clone(),
            Some(left) => khatri_rao(&left, f),
        });
    }
    let krp = krp.unwrap_or_else(|| DenseMatrix::filled(1, factors.rank(), 1.0));
    unfolded.matmul(&krp)
}

/// Column-wise Kronecker product: row `i·rows(b) + j` is `a[i] ∘ b[j]`.
pub fn khatri_rao(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.cols(), "khatri_rao column mismatch");
    let r = a.cols();
    let mut out = DenseMatrix::zeros(a.rows() * b.rows(), r);
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let dst = out.row_mut(i * b.rows() + j);
            for c in 0..r {
                dst[c] = a[(i, c)] * b[(j, c)];
            }
        }
    }
    out
}

/// Stable counting sort of `(row, payload)` pairs by row.
pub fn stable_counting_sort<T: Clone>(rows: &[u64], payloads: &[T]) -> (Vec<u64>, Vec<T>) {
    assert_eq!(rows.len(), payloads.len());
    let mut keys: Vec<u64> = rows.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let mut counts = vec![0usize; keys.len()];
    let bucket = |r: u64| keys.binary_search(&r).expect("key present");
    for &r in rows {
        counts[bucket(r)] += 1;
    }
    let mut starts = vec![0usize; keys.len()];
    for k in 1..keys.len() {
        starts[k] = starts[k - 1] + counts[k - 1];
    }
    let mut out_rows = vec![0u64; rows.len()];
    let mut out_payloads: Vec<Option<T>> = vec![None; rows.len()];
    for (r, p) in rows.iter().zip(payloads) {
        let b = bucket(*r);
        out_rows[starts[b]] = *r;
        out_payloads[starts[b]] = Some(p.clone());
        starts[b] += 1;
    }
    (out_rows, out_payloads.into_iter().map(|p| p.expect("filled")).collect())
}

pub fn exclusive_scan(counts: &[u32]) -> Vec<u32> {
    let mut acc = 0u32;
    counts
        .iter()
        .map(|&c| {
            let v = acc;
            acc += c;
            v
        })
        .collect()
}

/// `true` where a run of equal rows starts.
pub fn segment_flags(rows: &[u64]) -> Vec<bool> {
    (0..rows.len())
        .map(|i| i == 0 || rows[i] != rows[i - 1])
        .collect()
}
