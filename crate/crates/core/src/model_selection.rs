//! K-fold cross-validation over `(λ, φ, rank)`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{fit_method, BaselineModel, Hyper, Method};
use crate::error::{Error, Result};
use crate::linalg::{scale_rows, solve_spd};
use crate::simulation::mix_seed;
use crate::solver;
use crate::types::{assemble_design, Dataset, FactorModel, FitConfig};
use crate::weights::{split_weights, weights_for, PropensitySource, WeightVector};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_GRID_POINTS: usize = 8;
pub const DEFAULT_MAX_RANK: usize = 5;
/// Relative spread of the default penalty grids: `[1e-3, 1e1] × scale`.
const GRID_LOW: f64 = 1e-3;
const GRID_HIGH: f64 = 1e1;
/// Mean losses within this fraction of the null-model loss (`Γ = 0`) of the
/// minimum count as tied.
const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub lambdas: Vec<f64>,
    pub phis: Vec<f64>,
    pub ranks: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

/// `count` values log-spaced over `[low, high] × scale`.
pub fn log_grid(scale: f64, low: f64, high: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![scale * high];
    }
    let (l0, l1) = (low.ln(), high.ln());
    (0..count)
        .map(|i| scale * (l0 + (l1 - l0) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Smallest `λ` at which the method's estimate is identically zero.
pub fn lambda_scale(method: Method, d: &Dataset, a: &WeightVector) -> Result<f64> {
    let z = assemble_design(d);
    let gz = scale_rows(&z, &a.a);
    let scale = match method {
        Method::WmcmL1 => {
            // subgradient of Σ aᵢ|yᵢⱼ − zᵢᵀγⱼ| at Γ = 0
            let signs = d.y().map(f64::signum);
            let grad = z.transpose() * scale_rows(&signs, &a.a);
            max_row_norm(&grad)
        }
        Method::Wfull => {
            let ax = scale_rows(d.x(), &a.a);
            let ay = scale_rows(d.y(), &a.a);
            let b = solve_spd(&(ax.transpose() * &ax), &(ax.transpose() * &ay)).0;
            2.0 * max_row_norm(&(gz.transpose() * (ay - ax * b)))
        }
        _ => solver::lambda_max(d, a)?,
    };
    Ok(scale)
}

fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

impl CvGrid {
    /// Default grid: penalties log-spaced over `[1e-3, 1e1]` times the
    /// data-dependent zeroing value, ranks `1..=min(p+1, q, 5)`. Axes the
    /// method does not use collapse to a single value.
    pub fn default_for(method: Method, d: &Dataset, a: &WeightVector, seed: u64) -> Result<CvGrid> {
        CvGrid::sized(method, d, a, DEFAULT_GRID_POINTS, DEFAULT_MAX_RANK, DEFAULT_FOLDS, seed)
    }

    pub fn sized(
        method: Method,
        d: &Dataset,
        a: &WeightVector,
        points: usize,
        max_rank: usize,
        folds: usize,
        seed: u64,
    ) -> Result<CvGrid> {
        if points == 0 || max_rank == 0 {
            return Err(Error::InvalidConfig("grid needs at least one point and rank".into()));
        }
        let lambdas = log_grid(lambda_scale(method, d, a)?, GRID_LOW, GRID_HIGH, points);
        let phis = if method.uses_phi() {
            log_grid(solver::phi_max(d, a), GRID_LOW, GRID_HIGH, points)
        } else {
            vec![f64::INFINITY]
        };
        let top = d.max_rank().min(max_rank);
        let ranks = if method.uses_rank() { (1..=top).collect() } else { vec![1] };
        Ok(CvGrid { lambdas, phis, ranks, folds, seed })
    }

    /// Drops axes the method ignores.
    pub fn collapsed_for(&self, method: Method) -> CvGrid {
        let mut g = self.clone();
        if !method.uses_phi() {
            g.phis = vec![f64::INFINITY];
        }
        if !method.uses_rank() {
            g.ranks = vec![1];
        }
        g
    }

    pub fn validate(&self, d: &Dataset) -> Result<()> {
        if self.lambdas.is_empty() || self.phis.is_empty() || self.ranks.is_empty() {
            return Err(Error::InvalidConfig("every grid axis needs at least one value".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("grid lambda {l} is not a finite nonnegative number")));
        }
        if let Some(p) = self.phis.iter().find(|p| !(**p > 0.0)) {
            return Err(Error::InvalidConfig(format!("grid phi {p} is not positive")));
        }
        let max = d.max_rank();
        if let Some(&r) = self.ranks.iter().find(|&&r| r == 0 || r > max) {
            return Err(Error::RankTooLarge { rank: r, max });
        }
        if self.folds < 2 || self.folds > d.n() / 2 {
            return Err(Error::InvalidConfig(format!(
                "folds must lie in [2, n/2] = [2, {}], got {}",
                d.n() / 2,
                self.folds
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambdas.len() * self.phis.len() * self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in `(λ, φ, rank)` row-major order.
    pub fn points(&self) -> Vec<Hyper> {
        let mut out = Vec::with_capacity(self.len());
        for &lambda in &self.lambdas {
            for &phi in &self.phis {
                for &rank in &self.ranks {
                    out.push(Hyper { lambda, phi, rank });
                }
            }
        }
        out
    }
}

/// Seeded fold labels, stratified by arm: each arm is shuffled and dealt
/// round-robin, continuing the deal across arms so fold sizes differ by at
/// most one overall and within each arm.
pub fn kfold_split(t: &[i8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = t.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!(
            "need 2 ≤ folds ≤ n, got folds = {folds} with n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; n];
    let mut next = 0;
    for arm in [1i8, -1] {
        let mut rows: Vec<usize> = (0..n).filter(|&i| t[i] == arm).collect();
        if rows.len() < folds {
            return Err(Error::InvalidConfig(format!(
                "arm {arm:+} has {} subjects, fewer than {folds} folds",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for i in rows {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

/// Held-out weighted fidelity `Σᵢ aᵢ² ‖yᵢ − Tᵢ V Wᵀ xᵢ / 2‖²`, without
/// penalties and without outlier offsets.
pub fn cv_loss(model: &FactorModel, heldout: &Dataset, a_heldout: &WeightVector) -> Result<f64> {
    if model.w().nrows() != heldout.n_cols() || model.v().nrows() != heldout.q() {
        return Err(Error::DimensionMismatch(format!(
            "model W is {:?} and V is {:?}, held-out data has {} columns and {} outcomes",
            model.w().shape(),
            model.v().shape(),
            heldout.n_cols(),
            heldout.q()
        )));
    }
    if a_heldout.len() != heldout.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} held-out subjects",
            a_heldout.len(),
            heldout.n()
        )));
    }
    let fitted = assemble_design(heldout) * model.gamma();
    let resid = heldout.y() - fitted;
    Ok((0..heldout.n())
        .map(|i| a_heldout.a[i] * a_heldout.a[i] * resid.row(i).norm_squared())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub method: Method,
    pub lambdas: Vec<f64>,
    pub phis: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Mean held-out loss per grid point, in [`CvGrid::points`] order.
    pub mean_loss: Vec<f64>,
    /// Held-out loss per grid point and fold.
    pub per_fold_loss: Vec<Vec<f64>>,
    pub best: Hyper,
    pub fold_assignment: Vec<usize>,
}

impl CvResult {
    fn index(&self, li: usize, pi: usize, ri: usize) -> usize {
        (li * self.phis.len() + pi) * self.ranks.len() + ri
    }

    pub fn mean_at(&self, li: usize, pi: usize, ri: usize) -> f64 {
        self.mean_loss[self.index(li, pi, ri)]
    }

    pub fn points(&self) -> Vec<Hyper> {
        CvGrid {
            lambdas: self.lambdas.clone(),
            phis: self.phis.clone(),
            ranks: self.ranks.clone(),
            folds: 0,
            seed: 0,
        }
        .points()
    }

    /// `(λ, φ, rank, fold, loss)` rows of the full surface.
    pub fn surface(&self) -> Vec<(f64, f64, usize, usize, f64)> {
        let mut rows = Vec::new();
        for (p, h) in self.points().into_iter().enumerate() {
            for (f, &loss) in self.per_fold_loss[p].iter().enumerate() {
                rows.push((h.lambda, h.phi, h.rank, f, loss));
            }
        }
        rows
    }
}

/// Picks the minimum mean loss; near-ties go to the smaller rank, then the
/// larger λ, then the larger φ.
fn select_best(points: &[Hyper], mean_loss: &[f64], null_loss: f64) -> Hyper {
    let min = mean_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_TOL * null_loss.max(min).max(f64::MIN_POSITIVE);
    let mut best: Option<Hyper> = None;
    for (h, &loss) in points.iter().zip(mean_loss) {
        if loss > min + tol {
            continue;
        }
        best = Some(match best {
            None => *h,
            Some(b) => {
                let better = (h.rank, -h.lambda, -h.phi)
                    .partial_cmp(&(b.rank, -b.lambda, -b.phi))
                    .is_some_and(|o| o.is_lt());
                if better {
                    *h
                } else {
                    b
                }
            }
        });
    }
    best.unwrap_or(points[0])
}

/// Fits every grid point on each set of training folds and scores it on the
/// held-out fold. Weights come from `source`; estimated propensities are
/// re-fitted on each training set.
pub fn cross_validate(
    d: &Dataset,
    source: PropensitySource,
    grid: &CvGrid,
    method: Method,
    cfg: &FitConfig,
) -> Result<CvResult> {
    let grid = grid.collapsed_for(method);
    grid.validate(d)?;
    let assignment = kfold_split(d.t(), grid.folds, grid.seed)?;

    let mut splits = Vec::with_capacity(grid.folds);
    for fold in 0..grid.folds {
        let train_rows: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] != fold).collect();
        let test_rows: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] == fold).collect();
        let train = d.subset(&train_rows)?;
        let test = d.subset(&test_rows)?;
        let (a_train, a_test) = split_weights(source, &train, &test)?;
        splits.push((train, a_train, test, a_test));
    }

    let points = grid.points();
    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..grid.folds).map(move |f| (p, f)))
        .collect();
    let losses: Vec<Result<f64>> = tasks
        .par_iter()
        .enumerate()
        .map(|(task, &(p, f))| {
            let (train, a_train, test, a_test) = &splits[f];
            let h = points[p];
            let task_cfg = FitConfig {
                seed: mix_seed(cfg.seed, task as u64),
                ..cfg.clone()
            };
            let annotate = |e: Error| Error::CrossValidation {
                lambda: h.lambda,
                phi: h.phi,
                rank: h.rank,
                fold: f,
                source: Box::new(e),
            };
            let model = fit_method(method, train, a_train, h, &task_cfg).map_err(annotate)?;
            model.heldout_loss(test, a_test).map_err(annotate)
        })
        .collect();

    let mut per_fold_loss = vec![Vec::with_capacity(grid.folds); points.len()];
    for (&(p, _), loss) in tasks.iter().zip(losses) {
        per_fold_loss[p].push(loss?);
    }
    let mean_loss: Vec<f64> = per_fold_loss
        .iter()
        .map(|l| l.iter().sum::<f64>() / l.len() as f64)
        .collect();
    let null_loss = splits
        .iter()
        .map(|(_, _, test, a_test)| {
            (0..test.n())
                .map(|i| a_test.a[i] * a_test.a[i] * test.y().row(i).norm_squared())
                .sum::<f64>()
        })
        .sum::<f64>()
        / grid.folds as f64;
    let best = select_best(&points, &mean_loss, null_loss);
    Ok(CvResult {
        method,
        lambdas: grid.lambdas,
        phis: grid.phis,
        ranks: grid.ranks,
        mean_loss,
        per_fold_loss,
        best,
        fold_assignment: assignment,
    })
}

/// Cross-validates, then refits the selected point on all rows.
pub fn cross_validate_and_fit(
    d: &Dataset,
    source: PropensitySource,
    grid: &CvGrid,
    method: Method,
    cfg: &FitConfig,
) -> Result<(CvResult, BaselineModel)> {
    let cv = cross_validate(d, source, grid, method, cfg)?;
    let a = weights_for(source, d)?;
    let model = fit_method(method, d, &a, cv.best, cfg)?;
    Ok((cv, model))
}
