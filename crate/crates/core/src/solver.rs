//! Weighted robust sparse reduced-rank regression (WMCMR4).
//!
//! Minimizes
//!
//! ```text
//! Σᵢ aᵢ² ‖yᵢ − Tᵢ V Wᵀ xᵢ / 2 − cᵢ‖² + φ Σᵢ ‖cᵢ‖ + λ Σₖ ‖wₖ‖   s.t. VᵀV = I
//! ```
//!
//! by alternating exact block updates: outlier rows of `C` in closed form,
//! loading rows of `W` by cyclic group soft-thresholding, and `V` by an
//! orthogonal Procrustes step. Each block update is a conditional
//! minimizer, so the objective never increases across outer iterations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{procrustes_factor, scale_rows, solve_ridge, top_right_singular_vectors};
use crate::types::{
    assemble_design, orthonormality_deviation, CateEstimate, Dataset, FactorModel, FitConfig,
};
use crate::weights::WeightVector;

/// Ridge used for the weighted least-squares starting point.
pub const INIT_RIDGE: f64 = 1e-8;

/// Looser orthonormality check applied to caller-supplied `V` in
/// [`objective`]; fitted factors meet [`crate::types::ORTHONORMAL_TOL`].
const OBJECTIVE_ORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    /// Objective at the starting point followed by one value per accepted
    /// outer iteration.
    pub objective_per_outer: Vec<f64>,
    /// Sweeps used by the outlier-row loop in each outer iteration.
    pub outlier_inner_iters: Vec<usize>,
    /// Sweeps used by the loading-row loop in each outer iteration.
    pub loading_inner_iters: Vec<usize>,
    pub converged: bool,
    pub outer_iters: usize,
}

impl FitTrace {
    pub fn final_objective(&self) -> f64 {
        *self.objective_per_outer.last().unwrap_or(&f64::NAN)
    }
}

/// `(1 − t/‖v‖)₊`, with the factor defined as 0 for a zero vector.
#[inline]
pub(crate) fn shrink_factor(norm: f64, t: f64) -> f64 {
    if norm <= t || norm == 0.0 {
        0.0
    } else {
        1.0 - t / norm
    }
}

/// Proximal operator of `t‖·‖₂`: `(1 − t/‖v‖)₊ v`.
pub fn group_soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v * shrink_factor(v.norm(), t)
}

/// Quantities shared by every block update for one `(dataset, weights)` pair.
pub(crate) struct Problem<'a> {
    pub d: &'a Dataset,
    pub a: &'a DVector<f64>,
    pub a2: Vec<f64>,
    pub z: DMatrix<f64>,
    /// `G = A Z`.
    pub g: DMatrix<f64>,
    /// `Gᵀ G`.
    pub gram: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(d: &'a Dataset, a: &'a WeightVector) -> Result<Problem<'a>> {
        if a.len() != d.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} subjects",
                a.len(),
                d.n()
            )));
        }
        let z = assemble_design(d);
        let g = scale_rows(&z, &a.a);
        let gram = g.transpose() * &g;
        Ok(Problem {
            d,
            a: &a.a,
            a2: a.a.iter().map(|v| v * v).collect(),
            z,
            g,
            gram,
        })
    }

    /// `Y − Z W Vᵀ`.
    fn residual(&self, w: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.d.y() - (&self.z * w) * v.transpose()
    }

    /// `F = A (Y − C)`.
    fn weighted_target(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        scale_rows(&(self.d.y() - c), self.a)
    }

    /// Weighted data-fidelity term only.
    pub fn fidelity(&self, w: &DMatrix<f64>, v: &DMatrix<f64>, c: Option<&DMatrix<f64>>) -> f64 {
        let mut r = self.residual(w, v);
        if let Some(c) = c {
            r -= c;
        }
        (0..r.nrows())
            .map(|i| self.a2[i] * r.row(i).norm_squared())
            .sum()
    }

    pub fn objective(
        &self,
        w: &DMatrix<f64>,
        v: &DMatrix<f64>,
        c: &DMatrix<f64>,
        lambda_w: f64,
        phi_c: f64,
    ) -> f64 {
        let fit = self.fidelity(w, v, Some(c));
        let c_pen = if phi_c.is_finite() {
            phi_c * row_norm_sum(c)
        } else if c.iter().all(|&x| x == 0.0) {
            0.0
        } else {
            f64::INFINITY
        };
        fit + c_pen + lambda_w * row_norm_sum(w)
    }

    /// Cyclic closed-form updates of the outlier rows. Returns the new `C`
    /// and the number of sweeps.
    pub fn update_c(
        &self,
        c: &DMatrix<f64>,
        w: &DMatrix<f64>,
        v: &DMatrix<f64>,
        phi_c: f64,
        inner_tol: f64,
        max_inner: usize,
    ) -> (DMatrix<f64>, usize) {
        if !phi_c.is_finite() {
            return (DMatrix::zeros(c.nrows(), c.ncols()), 0);
        }
        let resid = self.residual(w, v);
        let mut c = c.clone();
        let mut sweeps = 0;
        while sweeps < max_inner {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for i in 0..c.nrows() {
                let ri = resid.row(i);
                let factor = shrink_factor(ri.norm(), phi_c / (2.0 * self.a2[i]));
                for j in 0..c.ncols() {
                    let new = factor * ri[j];
                    max_change = max_change.max((new - c[(i, j)]).abs());
                    c[(i, j)] = new;
                }
            }
            if max_change < inner_tol {
                break;
            }
        }
        (c, sweeps)
    }

    /// Cyclic group soft-thresholding over the rows of `W`, driven by the
    /// Gram matrix `GᵀG` and `Gᵀ F V`.
    pub fn update_w(
        &self,
        w: &DMatrix<f64>,
        c: &DMatrix<f64>,
        v: &DMatrix<f64>,
        lambda_w: f64,
        inner_tol: f64,
        max_inner: usize,
    ) -> (DMatrix<f64>, usize) {
        let f = self.weighted_target(c);
        let h = self.g.transpose() * (f * v);
        group_cd(&self.gram, &h, w, lambda_w, inner_tol, max_inner)
    }

    /// Procrustes update; keeps `v_prev` when `WᵀGᵀF` vanishes.
    pub fn update_v(&self, w: &DMatrix<f64>, c: &DMatrix<f64>, v_prev: &DMatrix<f64>) -> DMatrix<f64> {
        let f = self.weighted_target(c);
        let m = (&self.g * w).transpose() * f;
        procrustes_factor(&m).unwrap_or_else(|| v_prev.clone())
    }

    /// Ridge-regularized weighted least squares `(ZᵀA²Z + εI)⁻¹ ZᵀA²Y`.
    pub fn weighted_least_squares(&self, ridge: f64) -> DMatrix<f64> {
        let rhs = self.g.transpose() * scale_rows(self.d.y(), self.a);
        solve_ridge(&self.gram, &rhs, ridge)
    }
}

/// Row-wise block coordinate descent for
/// `min_B ‖F − G B‖² + λ Σₖ ‖bₖ‖` given `gram = GᵀG` and `h = GᵀF`.
pub(crate) fn group_cd(
    gram: &DMatrix<f64>,
    h: &DMatrix<f64>,
    start: &DMatrix<f64>,
    lambda: f64,
    inner_tol: f64,
    max_inner: usize,
) -> (DMatrix<f64>, usize) {
    let (k_rows, r) = start.shape();
    let mut b = start.clone();
    let mut s = vec![0.0; r];
    let mut sweeps = 0;
    while sweeps < max_inner {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for k in 0..k_rows {
            let gkk = gram[(k, k)];
            if gkk <= 0.0 {
                for j in 0..r {
                    max_change = max_change.max(b[(k, j)].abs());
                    b[(k, j)] = 0.0;
                }
                continue;
            }
            // s = gₖᵀ (F − G₋ₖ B₋ₖ)
            for (j, sj) in s.iter_mut().enumerate() {
                let mut acc = h[(k, j)];
                for l in 0..k_rows {
                    if l != k {
                        acc -= gram[(k, l)] * b[(l, j)];
                    }
                }
                *sj = acc;
            }
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let factor = shrink_factor(norm, lambda / 2.0) / gkk;
            for (j, sj) in s.iter().enumerate() {
                let new = factor * sj;
                max_change = max_change.max((new - b[(k, j)]).abs());
                b[(k, j)] = new;
            }
        }
        if max_change < inner_tol {
            break;
        }
    }
    (b, sweeps)
}

pub(crate) fn row_norm_sum(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).norm()).sum()
}

fn check_shapes(model: &FactorModel, d: &Dataset, a: &WeightVector) -> Result<()> {
    if model.w().nrows() != d.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "W has {} rows, X has {} columns",
            model.w().nrows(),
            d.n_cols()
        )));
    }
    if model.v().nrows() != d.q() {
        return Err(Error::DimensionMismatch(format!(
            "V has {} rows, Y has {} columns",
            model.v().nrows(),
            d.q()
        )));
    }
    if model.c().shape() != (d.n(), d.q()) {
        return Err(Error::DimensionMismatch(format!(
            "C is {:?}, expected ({}, {})",
            model.c().shape(),
            d.n(),
            d.q()
        )));
    }
    if a.len() != d.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} subjects",
            a.len(),
            d.n()
        )));
    }
    Ok(())
}

/// Full penalized objective at `model`.
pub fn objective(model: &FactorModel, d: &Dataset, a: &WeightVector, cfg: &FitConfig) -> Result<f64> {
    check_shapes(model, d, a)?;
    let deviation = orthonormality_deviation(model.v());
    if deviation > OBJECTIVE_ORTHO_TOL {
        return Err(Error::NonOrthonormal { deviation });
    }
    let prob = Problem::new(d, a)?;
    Ok(prob.objective(model.w(), model.v(), model.c(), cfg.lambda_w, cfg.phi_c))
}

/// Outlier-row block update with `W`, `V` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn update_outlier_rows(
    c: &DMatrix<f64>,
    d: &Dataset,
    a: &WeightVector,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    phi_c: f64,
    inner_tol: f64,
    max_inner: usize,
) -> Result<DMatrix<f64>> {
    let prob = Problem::new(d, a)?;
    Ok(prob.update_c(c, w, v, phi_c, inner_tol, max_inner).0)
}

/// Loading-row block update with `C`, `V` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn update_loading_rows(
    w: &DMatrix<f64>,
    d: &Dataset,
    a: &WeightVector,
    c: &DMatrix<f64>,
    v: &DMatrix<f64>,
    lambda_w: f64,
    inner_tol: f64,
    max_inner: usize,
) -> Result<DMatrix<f64>> {
    let prob = Problem::new(d, a)?;
    Ok(prob.update_w(w, c, v, lambda_w, inner_tol, max_inner).0)
}

/// Orthogonal-factor update with `W`, `C` held fixed. `v_prev` is returned
/// unchanged when the Procrustes cross-product is identically zero.
pub fn update_orthogonal_factor(
    w: &DMatrix<f64>,
    d: &Dataset,
    a: &WeightVector,
    c: &DMatrix<f64>,
    v_prev: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let prob = Problem::new(d, a)?;
    Ok(prob.update_v(w, c, v_prev))
}

/// Deterministic starting point: ridge weighted least squares, its top-`r`
/// right singular directions of the weighted fitted values, and `C = 0`.
pub fn initial_model(d: &Dataset, a: &WeightVector, rank: usize) -> Result<FactorModel> {
    let prob = Problem::new(d, a)?;
    Ok(prob_initial(&prob, rank))
}

fn prob_initial(prob: &Problem<'_>, rank: usize) -> FactorModel {
    let gamma0 = prob.weighted_least_squares(INIT_RIDGE);
    let fitted = &prob.g * &gamma0;
    let v0 = top_right_singular_vectors(&fitted, rank);
    let w0 = &gamma0 * &v0;
    FactorModel::from_parts_unchecked(w0, v0, DMatrix::zeros(prob.d.n(), prob.d.q()))
}

fn random_model(d: &Dataset, rank: usize, seed: u64) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    };
    let w = draw(d.n_cols(), rank);
    let raw_v: DMatrix<f64> = draw(d.q(), rank);
    let v = raw_v.qr().q().columns(0, rank).into_owned();
    FactorModel::from_parts_unchecked(w, v, DMatrix::zeros(d.n(), d.q()))
}

fn validate_rank(d: &Dataset, cfg: &FitConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.rank > d.max_rank() {
        return Err(Error::RankTooLarge {
            rank: cfg.rank,
            max: d.max_rank(),
        });
    }
    Ok(())
}

/// Fits the model by alternating block updates from the deterministic
/// least-squares start, plus `cfg.restarts` seeded random starts.
pub fn fit(d: &Dataset, a: &WeightVector, cfg: &FitConfig) -> Result<(FactorModel, FitTrace)> {
    validate_rank(d, cfg)?;
    let prob = Problem::new(d, a)?;
    let mut best = run(&prob, cfg, prob_initial(&prob, cfg.rank))?;
    for k in 0..cfg.restarts {
        let seed = crate::simulation::mix_seed(cfg.seed, k as u64);
        let candidate = run(&prob, cfg, random_model(d, cfg.rank, seed))?;
        if candidate.1.final_objective() < best.1.final_objective() {
            best = candidate;
        }
    }
    Ok(best)
}

/// Fits from a caller-supplied starting model.
pub fn fit_with_init(
    d: &Dataset,
    a: &WeightVector,
    cfg: &FitConfig,
    init: FactorModel,
) -> Result<(FactorModel, FitTrace)> {
    validate_rank(d, cfg)?;
    if init.rank() != cfg.rank {
        return Err(Error::DimensionMismatch(format!(
            "initial model has rank {}, config asks for {}",
            init.rank(),
            cfg.rank
        )));
    }
    check_shapes(&init, d, a)?;
    let prob = Problem::new(d, a)?;
    run(&prob, cfg, init)
}

fn run(prob: &Problem<'_>, cfg: &FitConfig, init: FactorModel) -> Result<(FactorModel, FitTrace)> {
    let (mut w, mut v, mut c) = init.into_parts();
    if !cfg.outliers_enabled() {
        c.fill(0.0);
    }
    let lambda = cfg.lambda_w;
    let phi = cfg.phi_c;
    let mut current = prob.objective(&w, &v, &c, lambda, phi);
    if !current.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let scale = current.abs().max(f64::MIN_POSITIVE);
    let mut trace = FitTrace {
        objective_per_outer: vec![current],
        ..Default::default()
    };
    for iteration in 1..=cfg.max_outer {
        let (c_new, c_sweeps) = prob.update_c(&c, &w, &v, phi, cfg.inner_tol, cfg.max_inner);
        let (w_new, w_sweeps) =
            prob.update_w(&w, &c_new, &v, lambda, cfg.inner_tol, cfg.max_inner);
        let v_new = prob.update_v(&w_new, &c_new, &v);
        let value = prob.objective(&w_new, &v_new, &c_new, lambda, phi);
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective { iteration });
        }
        if value > current {
            // Rounding-level increase: the previous iterate is the fixed point.
            trace.converged = true;
            break;
        }
        trace.outer_iters = iteration;
        trace.outlier_inner_iters.push(c_sweeps);
        trace.loading_inner_iters.push(w_sweeps);
        trace.objective_per_outer.push(value);
        let decrease = current - value;
        c = c_new;
        w = w_new;
        v = v_new;
        current = value;
        if decrease <= cfg.outer_tol * scale {
            trace.converged = true;
            break;
        }
    }
    let model = FactorModel::from_parts_unchecked(w, v, c);
    let deviation = orthonormality_deviation(model.v());
    if deviation > crate::types::ORTHONORMAL_TOL {
        return Err(Error::NonOrthonormal { deviation });
    }
    Ok((model, trace))
}

/// `X_new · W Vᵀ` with per-row sums.
pub fn predict_cate(model: &FactorModel, x_new: &DMatrix<f64>) -> Result<CateEstimate> {
    predict_with_gamma(&model.gamma(), x_new)
}

pub fn predict_with_gamma(gamma: &DMatrix<f64>, x_new: &DMatrix<f64>) -> Result<CateEstimate> {
    if x_new.ncols() != gamma.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} columns, model expects {}",
            x_new.ncols(),
            gamma.nrows()
        )));
    }
    Ok(CateEstimate::from_values(x_new * gamma))
}

/// Smallest `λ` for which every loading row is zero, over all orthonormal `V`
/// with `C = 0`: `2 maxₖ ‖gₖᵀ A Y‖`.
pub fn lambda_max(d: &Dataset, a: &WeightVector) -> Result<f64> {
    let prob = Problem::new(d, a)?;
    let h = prob.g.transpose() * scale_rows(d.y(), prob.a);
    Ok(2.0 * (0..h.nrows()).map(|k| h.row(k).norm()).fold(0.0, f64::max))
}

/// Smallest `φ` for which every outlier row is zero at `W = 0`:
/// `2 maxᵢ aᵢ² ‖yᵢ‖`.
pub fn phi_max(d: &Dataset, a: &WeightVector) -> f64 {
    (0..d.n())
        .map(|i| 2.0 * a.a[i] * a.a[i] * d.y().row(i).norm())
        .fold(0.0, f64::max)
}
