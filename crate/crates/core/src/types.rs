//! Shared data model: the validated dataset, the factored coefficient model
//! and the fit configuration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum tolerated entry of `VᵀV - I` for a factor matrix to count as
/// column-orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// How raw treatment labels map onto the internal `{-1, +1}` coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreatmentCoding {
    /// Labels are already `-1` (control) and `+1` (treated).
    #[default]
    PlusMinusOne,
    /// `1` is treated, `0` is control.
    ZeroOne,
    /// Arbitrary integer labels for the treated and control arms.
    Map { treated: i64, control: i64 },
}

impl TreatmentCoding {
    pub fn apply(&self, raw: i64) -> Option<i8> {
        let (treated, control) = match *self {
            TreatmentCoding::PlusMinusOne => (1, -1),
            TreatmentCoding::ZeroOne => (1, 0),
            TreatmentCoding::Map { treated, control } => (treated, control),
        };
        if raw == treated {
            Some(1)
        } else if raw == control {
            Some(-1)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Prepend a column of ones to the covariates.
    pub add_intercept: bool,
    pub coding: TreatmentCoding,
}

/// Covariates (intercept in column 0), outcomes, treatment signs and
/// optional known propensities for `n` subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    t: Vec<i8>,
    propensity: Option<DVector<f64>>,
}

impl Dataset {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn t(&self) -> &[i8] {
        &self.t
    }

    pub fn propensity(&self) -> Option<&DVector<f64>> {
        self.propensity.as_ref()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of covariate columns including the intercept (`p + 1`).
    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    /// Largest admissible rank, `min(p + 1, q)`.
    pub fn max_rank(&self) -> usize {
        self.n_cols().min(self.q())
    }

    /// Sub-dataset over the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let x = self.x.select_rows(rows);
        let y = self.y.select_rows(rows);
        let t = rows.iter().map(|&i| self.t[i]).collect::<Vec<_>>();
        let propensity = self
            .propensity
            .as_ref()
            .map(|p| DVector::from_iterator(rows.len(), rows.iter().map(|&i| p[i])));
        Dataset::from_parts(x, y, t, propensity)
    }

    /// Builds a dataset from already-coded parts, enforcing every invariant.
    pub fn from_parts(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        t: Vec<i8>,
        propensity: Option<DVector<f64>>,
    ) -> Result<Dataset> {
        let n = x.nrows();
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("X has no columns".into()));
        }
        if y.ncols() == 0 {
            return Err(Error::DimensionMismatch("Y has no columns".into()));
        }
        if y.nrows() != n || t.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows, Y has {}, T has {}",
                n,
                y.nrows(),
                t.len()
            )));
        }
        check_finite("X", &x)?;
        check_finite("Y", &y)?;
        for (row, &ti) in t.iter().enumerate() {
            if ti != 1 && ti != -1 {
                return Err(Error::InvalidTreatment {
                    row,
                    value: ti.to_string(),
                });
            }
        }
        if !t.contains(&1) || !t.contains(&-1) {
            return Err(Error::SingleArm);
        }
        if let Some(p) = &propensity {
            if p.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "propensity has {} entries for {} subjects",
                    p.len(),
                    n
                )));
            }
            for (row, &v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        matrix: "propensity",
                        row,
                        col: 0,
                    });
                }
                if v <= 0.0 || v >= 1.0 {
                    return Err(Error::Positivity { row, value: v });
                }
            }
        }
        Ok(Dataset { x, y, t, propensity })
    }
}

fn check_finite(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite {
                    matrix: name,
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

/// Validates raw inputs, optionally prepending the intercept column and
/// recoding treatment labels.
pub fn validate_dataset(
    raw_x: &DMatrix<f64>,
    raw_y: &DMatrix<f64>,
    raw_t: &[i64],
    propensity: Option<&DVector<f64>>,
    opts: ValidateOptions,
) -> Result<Dataset> {
    let mut t = Vec::with_capacity(raw_t.len());
    for (row, &raw) in raw_t.iter().enumerate() {
        match opts.coding.apply(raw) {
            Some(v) => t.push(v),
            None => {
                return Err(Error::InvalidTreatment {
                    row,
                    value: raw.to_string(),
                })
            }
        }
    }
    let x = if opts.add_intercept {
        raw_x.clone().insert_column(0, 1.0)
    } else {
        raw_x.clone()
    };
    Dataset::from_parts(x, raw_y.clone(), t, propensity.cloned())
}

/// `Z = T X / 2`: each covariate row scaled by half its treatment sign.
pub fn assemble_design(d: &Dataset) -> DMatrix<f64> {
    let mut z = d.x.clone();
    for (i, &ti) in d.t.iter().enumerate() {
        let s = f64::from(ti) * 0.5;
        z.row_mut(i).scale_mut(s);
    }
    z
}

/// Low-rank factorization `Γ = W Vᵀ` plus the per-subject outlier offsets `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl FactorModel {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>, c: DMatrix<f64>) -> Result<FactorModel> {
        if w.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "W has {} columns, V has {}",
                w.ncols(),
                v.ncols()
            )));
        }
        if w.ncols() == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        if c.ncols() != v.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "C has {} columns, V has {} rows",
                c.ncols(),
                v.nrows()
            )));
        }
        let deviation = orthonormality_deviation(&v);
        if deviation > ORTHONORMAL_TOL {
            return Err(Error::NonOrthonormal { deviation });
        }
        Ok(FactorModel { w, v, c })
    }

    pub(crate) fn from_parts_unchecked(
        w: DMatrix<f64>,
        v: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> FactorModel {
        FactorModel { w, v, c }
    }

    /// Zero loadings, zero offsets and `V = (I_r; 0)`.
    pub fn zeros(n: usize, n_cols: usize, q: usize, rank: usize) -> FactorModel {
        FactorModel {
            w: DMatrix::zeros(n_cols, rank),
            v: DMatrix::identity(q, rank),
            c: DMatrix::zeros(n, q),
        }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn gamma(&self) -> DMatrix<f64> {
        &self.w * self.v.transpose()
    }

    /// Indices of subjects whose outlier offset row is nonzero.
    pub fn outlier_rows(&self) -> Vec<usize> {
        (0..self.c.nrows())
            .filter(|&i| self.c.row(i).iter().any(|&v| v != 0.0))
            .collect()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.w, self.v, self.c)
    }
}

/// `max |VᵀV - I|`.
pub fn orthonormality_deviation(v: &DMatrix<f64>) -> f64 {
    let gram = v.transpose() * v;
    let r = gram.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Solver settings. `phi_c = f64::INFINITY` freezes the outlier block at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub rank: usize,
    pub lambda_w: f64,
    pub phi_c: f64,
    /// Outer stopping threshold on the objective decrease, relative to the
    /// initial objective.
    pub outer_tol: f64,
    /// Inner stopping threshold on the largest row change in a sweep.
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub seed: u64,
    /// Extra randomly initialized runs; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rank: 1,
            lambda_w: 0.0,
            phi_c: f64::INFINITY,
            outer_tol: 1e-6,
            inner_tol: 1e-8,
            max_outer: 500,
            max_inner: 100,
            seed: 0,
            restarts: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        if !(self.lambda_w >= 0.0) || self.lambda_w.is_infinite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda_w
            )));
        }
        if !(self.phi_c >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "phi must be nonnegative, got {}",
                self.phi_c
            )));
        }
        if !(self.outer_tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }

    /// Whether the outlier block takes part in the fit at all.
    pub fn outliers_enabled(&self) -> bool {
        self.phi_c.is_finite()
    }
}

/// Per-subject, per-outcome effect estimates and their row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CateEstimate {
    pub values: DMatrix<f64>,
    pub score: DVector<f64>,
}

impl CateEstimate {
    pub fn from_values(values: DMatrix<f64>) -> CateEstimate {
        let score = DVector::from_iterator(
            values.nrows(),
            (0..values.nrows()).map(|i| values.row(i).iter().sum::<f64>()),
        );
        CateEstimate { values, score }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Dataset {
        validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[1, -1],
            None,
            ValidateOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_two_arm_dataset() {
        let d = minimal();
        assert_eq!(d.n(), 2);
        assert_eq!(d.q(), 1);
        assert_eq!(d.t(), &[1, -1]);
    }

    #[test]
    fn single_arm_is_rejected() {
        let err = validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[1, 1],
            None,
            ValidateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingleArm));
        assert!(err.to_string().contains("single-arm data"));
    }

    #[test]
    fn zero_one_coding_is_mapped() {
        let d = validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[0, 1],
            None,
            ValidateOptions {
                coding: TreatmentCoding::ZeroOne,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(d.t(), &[-1, 1]);
    }

    #[test]
    fn label_outside_coding_set() {
        let err = validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[0, 2],
            None,
            ValidateOptions {
                coding: TreatmentCoding::ZeroOne,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidTreatment { row: 1, .. }));
    }

    #[test]
    fn dimension_mismatch() {
        let err = validate_dataset(
            &DMatrix::from_element(3, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[1, -1],
            None,
            ValidateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn non_finite_reports_position() {
        let mut y = DMatrix::zeros(2, 2);
        y[(1, 0)] = f64::NAN;
        let err = validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &y,
            &[1, -1],
            None,
            ValidateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                matrix: "Y",
                row: 1,
                col: 0
            }
        ));
    }

    #[test]
    fn propensity_on_boundary_is_rejected() {
        let p = DVector::from_vec(vec![0.5, 1.0]);
        let err = validate_dataset(
            &DMatrix::from_element(2, 1, 1.0),
            &DMatrix::zeros(2, 1),
            &[1, -1],
            Some(&p),
            ValidateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Positivity { row: 1, .. }));
    }

    #[test]
    fn intercept_is_prepended() {
        let x = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
        let d = validate_dataset(
            &x,
            &DMatrix::zeros(2, 1),
            &[1, -1],
            None,
            ValidateOptions {
                add_intercept: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(d.x(), &DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, 4.0]));
    }

    #[test]
    fn validation_is_idempotent() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 1.0, -2.0, 1.0, 5.0]);
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = DVector::from_vec(vec![0.2, 0.4, 0.9]);
        let d = validate_dataset(&x, &y, &[1, -1, 1], Some(&p), ValidateOptions::default())
            .unwrap();
        let t: Vec<i64> = d.t().iter().map(|&v| i64::from(v)).collect();
        let again = validate_dataset(
            d.x(),
            d.y(),
            &t,
            d.propensity(),
            ValidateOptions::default(),
        )
        .unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn design_rows_are_half_signed() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let d = Dataset::from_parts(x, DMatrix::zeros(2, 1), vec![1, -1], None).unwrap();
        let z = assemble_design(&d);
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 1.0]);
        assert_eq!(z.row(1).iter().copied().collect::<Vec<_>>(), vec![-0.5, -1.0]);

        let d = Dataset::from_parts(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), vec![1, -1], None)
            .unwrap();
        assert_eq!(
            assemble_design(&d),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.5])
        );
    }

    #[test]
    fn design_recovers_covariates() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, -7.25, 1.0, 3.0]);
        let d = Dataset::from_parts(x.clone(), DMatrix::zeros(3, 1), vec![-1, 1, -1], None)
            .unwrap();
        let mut z = assemble_design(&d);
        for (i, &t) in d.t().iter().enumerate() {
            z.row_mut(i).scale_mut(2.0 * f64::from(t));
        }
        assert_eq!(z, x);
    }

    #[test]
    fn factor_model_rejects_non_orthonormal_v() {
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let err = FactorModel::new(DMatrix::zeros(2, 1), v, DMatrix::zeros(3, 2)).unwrap_err();
        assert!(matches!(err, Error::NonOrthonormal { .. }));
    }

    #[test]
    fn cate_score_is_row_sum() {
        let e = CateEstimate::from_values(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]));
        assert_eq!(e.score.as_slice(), &[3.0, -2.5]);
    }
}
