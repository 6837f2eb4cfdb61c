//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Ridge added to a Gram matrix whose Cholesky factorization fails.
pub const RIDGE_JITTER: f64 = 1e-8;

/// `diag(a) · m`.
pub fn scale_rows(m: &DMatrix<f64>, a: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, &ai) in a.iter().enumerate() {
        out.row_mut(i).scale_mut(ai);
    }
    out
}

/// Solves `(gram + jitter·I) x = rhs` for a symmetric positive
/// (semi)definite `gram`. Jitter is only added if the plain factorization
/// fails; the flag reports whether that happened.
pub fn solve_spd(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = gram.clone().cholesky() {
        return (chol.solve(rhs), false);
    }
    let k = gram.nrows();
    let mut jittered = gram.clone();
    let mut ridge = RIDGE_JITTER;
    loop {
        for i in 0..k {
            jittered[(i, i)] = gram[(i, i)] + ridge;
        }
        if let Some(chol) = jittered.clone().cholesky() {
            return (chol.solve(rhs), true);
        }
        ridge *= 10.0;
    }
}

/// Solves `(gram + ridge·I) x = rhs` with the ridge always applied.
pub fn solve_ridge(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let mut m = gram.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    solve_spd(&m, rhs).0
}

/// Thin singular value decomposition with singular values sorted in
/// decreasing order and each pair's sign fixed so the largest-magnitude entry
/// of the left vector is positive.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// Right singular vectors as columns.
    pub v: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    let raw = m.clone().svd(true, true);
    let u = raw.u.expect("requested U");
    let vt = raw.v_t.expect("requested V^T");
    let k = raw.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        raw.singular_values[b]
            .partial_cmp(&raw.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out_u = DMatrix::zeros(u.nrows(), k);
    let mut out_v = DMatrix::zeros(vt.ncols(), k);
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let mut pivot = 0;
        for i in 0..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        out_u.set_column(dst, &(col * sign));
        out_v.set_column(dst, &(vt.row(src).transpose() * sign));
        s[dst] = raw.singular_values[src];
    }
    Svd {
        u: out_u,
        singular_values: s,
        v: out_v,
    }
}

/// Orthogonal Procrustes: the `q×r` column-orthonormal `V` maximizing
/// `tr(V M)` for an `r×q` matrix `M` with `r ≤ q`. Returns `None` when `M`
/// is identically zero.
pub fn procrustes_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().all(|&v| v == 0.0) {
        return None;
    }
    // M = U D Sᵀ  =>  V = S Uᵀ
    let dec = svd(m);
    Some(&dec.v * dec.u.transpose())
}

/// The leading `r` right singular vectors of `m` as a `ncols×r` matrix.
pub fn top_right_singular_vectors(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let dec = svd(m);
    let available = dec.v.ncols();
    if r <= available {
        return dec.v.columns(0, r).into_owned();
    }
    // Wide request on a short matrix: complete the basis.
    complete_orthonormal(&dec.v, r)
}

/// Extends orthonormal columns `basis` (q×k) to q×r with r ≤ q using
/// Gram-Schmidt against the standard basis.
pub fn complete_orthonormal(basis: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let q = basis.nrows();
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut e = 0;
    while cols.len() < r && e < q {
        let mut cand = DVector::zeros(q);
        cand[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&cand);
                cand -= c * proj;
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            cols.push(cand / norm);
        }
        e += 1;
    }
    DMatrix::from_columns(&cols)
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn relative_frobenius_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let denom = truth.norm();
    let diff = (estimate - truth).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}
