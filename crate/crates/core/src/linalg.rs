//! Dense linear-algebra helpers shared by every module.
//!
//! All rank decisions use one relative threshold: a singular value counts as
//! nonzero when it exceeds [`RANK_TOL`] times the largest singular value.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold used for every numerical rank decision.
pub const RANK_TOL: f64 = 1e-8;

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().singular_values_unordered().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn count_above(sv: &[f64]) -> usize {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > RANK_TOL * max).count(),
        _ => 0,
    }
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    count_above(&singular_values(m))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Spectral norm of the Moore-Penrose pseudoinverse, i.e. the reciprocal of
/// the smallest singular value above the rank threshold. Zero for a zero matrix.
pub fn pinv_norm(m: &DMatrix<f64>) -> f64 {
    pinv_norm_from_singular_values(&singular_values(m))
}

pub fn pinv_norm_from_singular_values(sv: &[f64]) -> f64 {
    let r = count_above(sv);
    if r == 0 {
        0.0
    } else {
        1.0 / sv[r - 1]
    }
}

/// Orthonormal basis of the column space of `m`.
pub fn range_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let max = svd.singular_values[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| max > 0.0 && svd.singular_values[k] > RANK_TOL * max)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.is_empty() {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    if max <= 0.0 {
        return DVector::zeros(a.ncols());
    }
    svd.solve(b, RANK_TOL * max)
        .expect("both singular vector sets were computed")
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Block-diagonal `I_count ⊗ block`.
pub fn repeat_diagonal(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// Block-diagonal matrix from a list of blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}
