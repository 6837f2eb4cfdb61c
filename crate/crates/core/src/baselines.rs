//! Comparison estimators sharing one fit interface with the proposed method:
//! reduced-rank without outlier terms, least absolute deviations with a
//! group penalty, group-penalized least squares, and a variant that also
//! estimates linear main effects.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{scale_rows, solve_ridge, solve_spd};
use crate::solver::{self, group_cd, row_norm_sum, shrink_factor, Problem, INIT_RIDGE};
use crate::types::{Dataset, FactorModel, FitConfig};
use crate::weights::WeightVector;

/// Huber smoothing width of the least-absolute-deviation loss, applied to
/// unweighted residuals.
pub const HUBER_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Robust sparse reduced-rank regression with outlier rows.
    Wmcmr4,
    Wmcmrrr,
    WmcmL1,
    Wmcm,
    Wfull,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wmcmr4,
        Method::Wmcmrrr,
        Method::WmcmL1,
        Method::Wmcm,
        Method::Wfull,
    ];

    /// Canonical identifier.
    pub fn id(self) -> &'static str {
        match self {
            Method::Wmcmr4 => "wmcmr4",
            Method::Wmcmrrr => "wmcmrrr",
            Method::WmcmL1 => "wmcm_l1",
            Method::Wmcm => "wmcm",
            Method::Wfull => "wfull",
        }
    }

    /// Display label; randomized designs drop the weighting prefix of the
    /// comparison methods.
    pub fn label(self, randomized: bool) -> &'static str {
        match (self, randomized) {
            (Method::Wmcmr4, _) => "WMCMR4",
            (Method::Wmcmrrr, false) => "WMCMRRR",
            (Method::Wmcmrrr, true) => "MCMRRR",
            (Method::WmcmL1, false) => "WMCMl1",
            (Method::WmcmL1, true) => "MCMl1",
            (Method::Wmcm, false) => "WMCM",
            (Method::Wmcm, true) => "MCM",
            (Method::Wfull, false) => "WFull",
            (Method::Wfull, true) => "Full",
        }
    }

    pub fn uses_rank(self) -> bool {
        matches!(self, Method::Wmcmr4 | Method::Wmcmrrr)
    }

    pub fn uses_phi(self) -> bool {
        matches!(self, Method::Wmcmr4)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "wmcmr4" | "proposed" => Ok(Method::Wmcmr4),
            "wmcmrrr" | "mcmrrr" => Ok(Method::Wmcmrrr),
            "wmcm_l1" | "wmcml1" | "mcm_l1" | "mcml1" => Ok(Method::WmcmL1),
            "wmcm" | "mcm" => Ok(Method::Wmcm),
            "wfull" | "full" => Ok(Method::Wfull),
            _ => Err(Error::InvalidConfig(format!("unknown method '{s}'"))),
        }
    }
}

/// Tuning parameters for one fit; each method reads the ones it uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lambda: f64,
    pub phi: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub method: Method,
    pub gamma: DMatrix<f64>,
    /// Main-effect coefficients, only for [`Method::Wfull`].
    pub main_effects: Option<DMatrix<f64>>,
    /// Factorization, for the reduced-rank methods.
    pub factor: Option<FactorModel>,
    /// Objective per iteration (the smoothed surrogate for [`Method::WmcmL1`]).
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl BaselineModel {
    /// Unpenalized data-fidelity of the method on (held-out) data, without
    /// outlier offsets.
    pub fn heldout_loss(&self, d: &Dataset, a: &WeightVector) -> Result<f64> {
        if d.n_cols() != self.gamma.nrows() || d.q() != self.gamma.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "model is {:?}, data has {} columns and {} outcomes",
                self.gamma.shape(),
                d.n_cols(),
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
        let z = crate::types::assemble_design(d);
        let mut resid = d.y() - z * &self.gamma;
        if let Some(b) = &self.main_effects {
            resid -= d.x() * b;
        }
        let loss = match self.method {
            Method::WmcmL1 => (0..d.n())
                .map(|i| a.a[i] * resid.row(i).iter().map(|v| v.abs()).sum::<f64>())
                .sum(),
            _ => (0..d.n())
                .map(|i| a.a[i] * a.a[i] * resid.row(i).norm_squared())
                .sum(),
        };
        Ok(loss)
    }
}

/// Dispatches to the estimator for `method`.
pub fn fit_method(
    method: Method,
    d: &Dataset,
    a: &WeightVector,
    hyper: Hyper,
    cfg: &FitConfig,
) -> Result<BaselineModel> {
    match method {
        Method::Wmcmr4 => {
            let cfg = FitConfig {
                rank: hyper.rank,
                lambda_w: hyper.lambda,
                phi_c: hyper.phi,
                ..cfg.clone()
            };
            from_factor(Method::Wmcmr4, solver::fit(d, a, &cfg)?)
        }
        Method::Wmcmrrr => fit_wmcmrrr(d, a, hyper.rank, hyper.lambda, cfg),
        Method::WmcmL1 => fit_wmcm_l1(d, a, hyper.lambda, cfg),
        Method::Wmcm => fit_wmcm(d, a, hyper.lambda, cfg),
        Method::Wfull => fit_wfull(d, a, hyper.lambda, cfg),
    }
}

fn from_factor(method: Method, fitted: (FactorModel, solver::FitTrace)) -> Result<BaselineModel> {
    let (model, trace) = fitted;
    Ok(BaselineModel {
        method,
        gamma: model.gamma(),
        main_effects: None,
        factor: Some(model),
        converged: trace.converged,
        trace: trace.objective_per_outer,
        warnings: Vec::new(),
    })
}

/// Reduced-rank regression with a row penalty on `W` and no outlier block.
pub fn fit_wmcmrrr(
    d: &Dataset,
    a: &WeightVector,
    rank: usize,
    lambda_w: f64,
    cfg: &FitConfig,
) -> Result<BaselineModel> {
    let cfg = FitConfig {
        rank,
        lambda_w,
        phi_c: f64::INFINITY,
        ..cfg.clone()
    };
    from_factor(Method::Wmcmrrr, solver::fit(d, a, &cfg)?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda must be a finite nonnegative number, got {lambda}"
        )));
    }
    Ok(())
}

/// Group-penalized weighted least squares on `Z = TX/2`, by cyclic row-wise
/// group soft-thresholding; one trace entry per sweep.
pub fn fit_wmcm(d: &Dataset, a: &WeightVector, lambda: f64, cfg: &FitConfig) -> Result<BaselineModel> {
    check_lambda(lambda)?;
    let prob = Problem::new(d, a)?;
    let ay = scale_rows(d.y(), &a.a);
    let h = prob.g.transpose() * &ay;
    let objective = |gamma: &DMatrix<f64>| {
        (&ay - &prob.g * gamma).norm_squared() + lambda * row_norm_sum(gamma)
    };
    let mut gamma = DMatrix::zeros(d.n_cols(), d.q());
    let mut trace = vec![objective(&gamma)];
    let cap = cfg.max_outer * cfg.max_inner;
    let mut converged = false;
    for _ in 0..cap {
        let before = gamma.clone();
        let (next, _) = group_cd(&prob.gram, &h, &gamma, lambda, 0.0, 1);
        let value = objective(&next);
        gamma = next;
        trace.push(value);
        if max_abs_diff(&gamma, &before) < cfg.inner_tol {
            converged = true;
            break;
        }
    }
    Ok(BaselineModel {
        method: Method::Wmcm,
        gamma,
        main_effects: None,
        factor: None,
        trace,
        converged,
        warnings: Vec::new(),
    })
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Group-penalized weighted least squares with unpenalized linear main
/// effects `X B`. `B` is profiled out: `Γ` solves the group problem on the
/// part of `A Z` and `A Y` orthogonal to `A X`, then `B` is the exact least
/// squares fit of what remains.
pub fn fit_wfull(d: &Dataset, a: &WeightVector, lambda: f64, cfg: &FitConfig) -> Result<BaselineModel> {
    check_lambda(lambda)?;
    let prob = Problem::new(d, a)?;
    let ax = scale_rows(d.x(), &a.a);
    let ay = scale_rows(d.y(), &a.a);
    let xtx = ax.transpose() * &ax;
    let mut warnings = Vec::new();
    if xtx.clone().cholesky().is_none() {
        warnings.push("singular weighted covariate Gram matrix; ridge jitter applied".to_string());
    }
    let residualize = |m: &DMatrix<f64>| m - &ax * solve_spd(&xtx, &(ax.transpose() * m)).0;
    let g_perp = residualize(&prob.g);
    let y_perp = residualize(&ay);
    let gram = g_perp.transpose() * &g_perp;
    let h = g_perp.transpose() * &y_perp;
    let objective = |gamma: &DMatrix<f64>| {
        (&y_perp - &g_perp * gamma).norm_squared() + lambda * row_norm_sum(gamma)
    };

    let mut gamma = DMatrix::zeros(d.n_cols(), d.q());
    let mut trace = vec![objective(&gamma)];
    let mut converged = false;
    for _ in 0..cfg.max_outer * cfg.max_inner {
        let (next, _) = group_cd(&gram, &h, &gamma, lambda, 0.0, 1);
        let value = objective(&next);
        let change = max_abs_diff(&next, &gamma);
        gamma = next;
        trace.push(value);
        if change < cfg.inner_tol {
            converged = true;
            break;
        }
    }
    let b = solve_spd(&xtx, &(ax.transpose() * (&ay - &prob.g * &gamma))).0;
    Ok(BaselineModel {
        method: Method::Wfull,
        gamma,
        main_effects: Some(b),
        factor: None,
        trace,
        converged,
        warnings,
    })
}

/// Huber function and its derivative.
#[inline]
fn huber(u: f64, delta: f64) -> (f64, f64) {
    let au = u.abs();
    if au <= delta {
        (u * u / (2.0 * delta), u / delta)
    } else {
        (au - delta / 2.0, u.signum())
    }
}

/// Weighted least absolute deviations `Σᵢⱼ aᵢ |yᵢⱼ − zᵢᵀγⱼ| + λ Σₖ ‖γₖ‖`,
/// with each `|r|` replaced by its Huber smoothing at width [`HUBER_DELTA`] and
/// minimized by accelerated proximal gradient with backtracking and restarts.
pub fn fit_wmcm_l1(d: &Dataset, a: &WeightVector, lambda: f64, cfg: &FitConfig) -> Result<BaselineModel> {
    check_lambda(lambda)?;
    // The loss is linear in the weights, so dividing weights and λ by the
    // largest weight leaves the minimizer alone and makes the iterates
    // independent of the overall weight scale.
    let s = a.a.iter().copied().fold(0.0, f64::max);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidConfig("weights must be positive and finite".into()));
    }
    let unit = WeightVector {
        a: a.a.map(|v| v / s),
        pi: a.pi.clone(),
        source: a.source,
    };
    let mut model = fit_l1_normalized(d, &unit, lambda / s, cfg).map_err(|e| match e {
        Error::NotConverged { solver, iterations, last } => Error::NotConverged {
            solver,
            iterations,
            last: last * s,
        },
        other => other,
    })?;
    model.trace.iter_mut().for_each(|v| *v *= s);
    Ok(model)
}

fn fit_l1_normalized(d: &Dataset, a: &WeightVector, lambda: f64, cfg: &FitConfig) -> Result<BaselineModel> {
    let prob = Problem::new(d, a)?;
    let z = &prob.z;
    let (n, q) = (d.n(), d.q());
    let y = d.y();
    let delta = HUBER_DELTA;

    // smoothed loss and gradient w.r.t. Γ
    let loss_grad = |gamma: &DMatrix<f64>, want_grad: bool| -> (f64, Option<DMatrix<f64>>) {
        let resid = y - z * gamma;
        let mut value = 0.0;
        let mut psi = DMatrix::zeros(n, q);
        for i in 0..n {
            for j in 0..q {
                let (h, dh) = huber(resid[(i, j)], delta);
                value += a.a[i] * h;
                psi[(i, j)] = a.a[i] * dh;
            }
        }
        let grad = want_grad.then(|| -(z.transpose() * psi));
        (value, grad)
    };
    let penalty = |gamma: &DMatrix<f64>| lambda * row_norm_sum(gamma);

    let start = {
        let rhs = prob.g.transpose() * scale_rows(y, &a.a);
        solve_ridge(&prob.gram, &rhs, INIT_RIDGE)
    };
    let mut gamma = start;
    let (f0, _) = loss_grad(&gamma, false);
    let mut trace = vec![f0 + penalty(&gamma)];

    // Monotone accelerated proximal gradient with backtracking; the step
    // starts well above 1/L for a valid bound L and only shrinks, never
    // below 1/L, where sufficient decrease holds and a failed test can only
    // be rounding.
    let max_a = a.a.iter().copied().fold(0.0, f64::max);
    let lipschitz = max_a * z.norm_squared() / delta;
    let min_step = 1.0 / lipschitz.max(f64::MIN_POSITIVE);
    let mut step = 1024.0 * min_step;
    let cap = cfg.max_outer * cfg.max_inner;
    let prox = |m: &DMatrix<f64>, t: f64| {
        let mut out = m.clone();
        for k in 0..out.nrows() {
            let factor = shrink_factor(out.row(k).norm(), t * lambda);
            out.row_mut(k).scale_mut(factor);
        }
        out
    };

    let mut value = *trace.last().unwrap();
    let mut probe = gamma.clone();
    let mut momentum = 1.0f64;
    let fista_tol = cfg.inner_tol.max(FISTA_TOL_FLOOR);
    let mut fista_done = false;
    for _ in 0..cap {
        let (f_probe, grad) = loss_grad(&probe, true);
        let grad = grad.expect("gradient requested");
        let (cand, f_cand) = loop {
            let cand = prox(&(&probe - &grad * step), step);
            let diff = &cand - &probe;
            let (f_cand, _) = loss_grad(&cand, false);
            let bound = f_probe + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if f_cand <= bound || diff.norm_squared() == 0.0 || step <= min_step {
                break (cand, f_cand);
            }
            step = (step / 2.0).max(min_step);
        };
        let mapping_change = max_abs_diff(&cand, &probe);
        let cand_value = f_cand + penalty(&cand);
        if cand_value <= value {
            let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            probe = &cand + (&cand - &gamma) * ((momentum - 1.0) / next_momentum);
            gamma = cand;
            value = cand_value;
            momentum = next_momentum;
        } else {
            // restart the momentum from the best point
            probe = gamma.clone();
            momentum = 1.0;
        }
        trace.push(value);
        if mapping_change < fista_tol {
            fista_done = true;
            break;
        }
    }

    // Semismooth Newton on the rows left nonzero; the smoothed loss is
    // piecewise quadratic, so once the pattern settles a few steps reach
    // rounding level.
    let polished = newton_polish(z, y, &a.a, lambda, &gamma, cfg.inner_tol, NEWTON_STEPS);
    let polished_value = polished.as_ref().map(|g| loss_grad(g, false).0 + penalty(g));
    match (polished, polished_value) {
        (Some(g), Some(v)) if v <= value + 1e-12 * value.abs() => {
            trace.push(v.min(value));
            Ok(l1_model(g, trace, true))
        }
        _ if fista_done => Ok(l1_model(gamma, trace, true)),
        _ => Err(Error::NotConverged {
            solver: "least-absolute-deviation proximal gradient",
            iterations: cap,
            last: value,
        }),
    }
}

/// First-order phase stops here at the latest; the Newton polish takes the
/// iterate the rest of the way.
const FISTA_TOL_FLOOR: f64 = 1e-7;
const NEWTON_STEPS: usize = 100;

/// Newton iterations on the Huber-smoothed objective over the nonzero rows
/// of `start`, with a backtracking line search. `None` when a row would
/// vanish, the step stalls above `tol`, or the iterations run out.
fn newton_polish(
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    a: &nalgebra::DVector<f64>,
    lambda: f64,
    start: &DMatrix<f64>,
    tol: f64,
    max_steps: usize,
) -> Option<DMatrix<f64>> {
    let delta = HUBER_DELTA;
    let (n, q) = (y.nrows(), y.ncols());
    let rows: Vec<usize> = (0..start.nrows()).filter(|&k| start.row(k).norm() > 0.0).collect();
    if rows.is_empty() {
        return Some(start.clone());
    }
    let kk = rows.len();
    let zr = DMatrix::from_fn(n, kk, |i, c| z[(i, rows[c])]);
    let objective = |g: &DMatrix<f64>| {
        let resid = y - &zr * g;
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..q {
                v += a[i] * huber(resid[(i, j)], delta).0;
            }
        }
        v + lambda * (0..kk).map(|c| g.row(c).norm()).sum::<f64>()
    };
    let mut g = DMatrix::from_fn(kk, q, |c, j| start[(rows[c], j)]);
    let mut value = objective(&g);
    let dim = kk * q;
    let idx = |c: usize, j: usize| j * kk + c;
    for _ in 0..max_steps {
        let resid = y - &zr * &g;
        let mut grad = nalgebra::DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for j in 0..q {
            for i in 0..n {
                let (_, dh) = huber(resid[(i, j)], delta);
                let curv = if resid[(i, j)].abs() <= delta { a[i] / delta } else { 0.0 };
                for c in 0..kk {
                    grad[idx(c, j)] -= a[i] * dh * zr[(i, c)];
                    if curv > 0.0 {
                        for c2 in 0..kk {
                            hess[(idx(c, j), idx(c2, j))] += curv * zr[(i, c)] * zr[(i, c2)];
                        }
                    }
                }
            }
        }
        for c in 0..kk {
            let norm = g.row(c).norm();
            if norm == 0.0 {
                return None;
            }
            for j in 0..q {
                grad[idx(c, j)] += lambda * g[(c, j)] / norm;
                for j2 in 0..q {
                    let eye = if j == j2 { 1.0 } else { 0.0 };
                    hess[(idx(c, j), idx(c, j2))] +=
                        lambda * (eye / norm - g[(c, j)] * g[(c, j2)] / norm.powi(3));
                }
            }
        }
        let dir = -solve_spd(&hess, &DMatrix::from_column_slice(dim, 1, grad.as_slice())).0;
        let dir = DMatrix::from_fn(kk, q, |c, j| dir[(idx(c, j), 0)]);
        let slope: f64 = (0..kk).flat_map(|c| (0..q).map(move |j| (c, j))).map(|(c, j)| grad[idx(c, j)] * dir[(c, j)]).sum();
        if dir.amax() < tol {
            g += &dir;
            return Some(expand(&g, &rows, start.nrows()));
        }
        if !(slope < 0.0) {
            return None;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &g + &dir * t;
            let v = objective(&cand);
            if v <= value + 1e-4 * t * slope {
                g = cand;
                value = v;
                accepted = true;
                break;
            }
            if t * dir.amax() < tol {
                break;
            }
            t /= 2.0;
        }
        // a step below tolerance, taken or not, leaves nothing to gain
        if t * dir.amax() < tol {
            return Some(expand(&g, &rows, start.nrows()));
        }
        if !accepted {
            return None;
        }
    }
    None
}

fn expand(g: &DMatrix<f64>, rows: &[usize], total: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(total, g.ncols());
    for (c, &k) in rows.iter().enumerate() {
        out.row_mut(k).copy_from(&g.row(c));
    }
    out
}

fn l1_model(gamma: DMatrix<f64>, trace: Vec<f64>, converged: bool) -> BaselineModel {
    BaselineModel {
        method: Method::WmcmL1,
        gamma,
        main_effects: None,
        factor: None,
        trace,
        converged,
        warnings: Vec::new(),
    }
}

/// Weighted least squares of `Y` on `Z` (the unpenalized full-rank oracle).
pub fn weighted_ols(d: &Dataset, a: &WeightVector) -> Result<DMatrix<f64>> {
    let prob = Problem::new(d, a)?;
    let rhs = prob.g.transpose() * scale_rows(d.y(), &a.a);
    Ok(solve_spd(&prob.gram, &rhs).0)
}
