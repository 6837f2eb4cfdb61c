//! Synthetic data in the style of the multi-outcome HTE simulation study,
//! and seeded replication sweeps over the estimators.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_method, BaselineModel, Hyper, Method};
use crate::error::{Error, Result};
use crate::linalg::symmetric_sqrt;
use crate::metrics::MetricsReport;
use crate::model_selection::{cross_validate_and_fit, CvGrid, DEFAULT_FOLDS, DEFAULT_GRID_POINTS, DEFAULT_MAX_RANK};
use crate::types::{Dataset, FitConfig};
use crate::weights::{weights_for, PropensitySource};

/// Environment variable capping the worker threads of a sweep.
pub const THREADS_ENV: &str = "RRHTE_THREADS";

const OUTLIER_LOW: f64 = 15.0;
const OUTLIER_HIGH: f64 = 20.0;
const ERROR_VARIANCE: f64 = 2.0;
/// Main-effect rows of `B` (covariate indices, 1-based among non-intercept columns).
const MAIN_EFFECT_ROWS: std::ops::RangeInclusive<usize> = 3..=10;

/// Derives an independent 64-bit seed from a master seed and an index.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Rct,
    Observational,
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Rct => "rct",
            Design::Observational => "observational",
        })
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Design> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rct" => Ok(Design::Rct),
            "observational" | "obs" => Ok(Design::Observational),
            _ => Err(Error::Scenario(format!("unknown design '{s}'"))),
        }
    }
}

fn default_n() -> usize {
    300
}
fn default_n_test() -> usize {
    1000
}
fn default_q() -> usize {
    10
}
fn default_replications() -> usize {
    100
}
fn default_uniform_high() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub p: usize,
    pub g: f64,
    pub tau_pct: f64,
    pub b: f64,
    pub gamma_scenario: u8,
    pub z: f64,
    pub design: Design,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Bounds of the uniform factor entries in scenarios 1 and 2.
    #[serde(default)]
    pub uniform_low: f64,
    #[serde(default = "default_uniform_high")]
    pub uniform_high: f64,
    /// Allows values outside the study's settings.
    #[serde(default)]
    pub off_grid: bool,
}

impl ScenarioSpec {
    /// Default sizes for the given knobs.
    pub fn new(p: usize, g: f64, tau_pct: f64, b: f64, gamma_scenario: u8, z: f64, design: Design) -> ScenarioSpec {
        ScenarioSpec {
            p,
            g,
            tau_pct,
            b,
            gamma_scenario,
            z,
            design,
            n: default_n(),
            n_test: default_n_test(),
            q: default_q(),
            replications: default_replications(),
            seed: 0,
            uniform_low: 0.0,
            uniform_high: default_uniform_high(),
            off_grid: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<ScenarioSpec> {
        let spec: ScenarioSpec =
            toml::from_str(text).map_err(|e| Error::Scenario(e.message().replace('\n', " ")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Stable identifier used in replication tables.
    pub fn id(&self) -> String {
        format!(
            "s{}-p{}-g{:.3}-tau{}-b{:.3}-z{:.3}-{}",
            self.gamma_scenario, self.p, self.g, self.tau_pct, self.b, self.z, self.design
        )
    }

    pub fn true_rank(&self) -> usize {
        match self.gamma_scenario {
            2 | 4 => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scenario(msg));
        if !(1..=4).contains(&self.gamma_scenario) {
            return bad(format!("gamma_scenario must be 1..4, got {}", self.gamma_scenario));
        }
        if self.p == 0 || self.q == 0 {
            return bad("p and q must be positive".into());
        }
        if self.n < 4 || self.n_test < 2 || self.replications == 0 {
            return bad("need n ≥ 4, n_test ≥ 2 and at least one replication".into());
        }
        if !(0.0..1.0).contains(&self.g) {
            return bad(format!("g must lie in [0, 1), got {}", self.g));
        }
        if !(0.0..=100.0).contains(&self.tau_pct) {
            return bad(format!("tau_pct must lie in [0, 100], got {}", self.tau_pct));
        }
        if !self.b.is_finite() {
            return bad("b must be finite".into());
        }
        // Σ_e = 2 on the diagonal, z off it: eigenvalues 2 − z and 2 + (q − 1) z
        if !(self.z < ERROR_VARIANCE && ERROR_VARIANCE + (self.q as f64 - 1.0) * self.z > 0.0) {
            return bad(format!("error covariance is not positive definite for z = {}", self.z));
        }
        if !(self.uniform_low < self.uniform_high) || !self.uniform_high.is_finite() {
            return bad("uniform bounds need low < high".into());
        }
        if self.design == Design::Observational && self.p < 5 {
            return bad("the observational design needs p ≥ 5".into());
        }
        check_sparse_sizes(self.gamma_scenario, self.p, self.q)?;
        if !self.off_grid {
            let near = |v: f64, set: &[f64]| set.iter().any(|s| (v - s).abs() < 1e-9);
            let on_grid = [10usize, 50].contains(&self.p)
                && near(self.g, &[0.0, 1.0 / 3.0])
                && near(self.tau_pct, &[0.0, 5.0, 10.0])
                && near(self.b, &[6f64.powf(-0.5), 3f64.powf(-0.5)])
                && near(self.z, &[0.0, 1.0 / 3.0])
                && self.uniform_low == 0.0
                && self.uniform_high == 1.0;
            if !on_grid {
                return bad("settings outside the study grid; set off_grid = true to allow them".into());
            }
        }
        Ok(())
    }

    /// The 192 settings of the study for one design.
    pub fn study_grid(design: Design) -> Vec<ScenarioSpec> {
        let mut out = Vec::with_capacity(192);
        for p in [10, 50] {
            for g in [0.0, 1.0 / 3.0] {
                for tau in [0.0, 5.0, 10.0] {
                    for b in [6f64.powf(-0.5), 3f64.powf(-0.5)] {
                        for sc in 1..=4 {
                            for z in [0.0, 1.0 / 3.0] {
                                out.push(ScenarioSpec::new(p, g, tau, b, sc, z, design));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn check_sparse_sizes(scenario: u8, p: usize, q: usize) -> Result<()> {
    let need = match scenario {
        3 => 4,
        4 => 6,
        _ => 1,
    };
    if p < need || q < need {
        return Err(Error::Scenario(format!(
            "scenario {scenario} needs p ≥ {need} and q ≥ {need}, got p = {p}, q = {q}"
        )));
    }
    Ok(())
}

/// `n × (p+1)` design: an intercept column followed by equicorrelated
/// standard normal covariates.
pub fn generate_covariates<R: Rng + ?Sized>(n: usize, p: usize, g: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { g });
    let chol = sigma.cholesky().ok_or_else(|| {
        Error::Scenario(format!("equicorrelation {g} does not give a positive definite covariance"))
    })?;
    let l = chol.l();
    let mut x = DMatrix::from_element(n, p + 1, 1.0);
    let mut e = DVector::zeros(p);
    for i in 0..n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let row = &l * &e;
        for j in 0..p {
            x[(i, j + 1)] = row[j];
        }
    }
    Ok(x)
}

/// `(p+1) × q` effect matrix with a zero intercept row.
pub fn generate_gamma<R: Rng + ?Sized>(
    scenario: u8,
    p: usize,
    q: usize,
    uniform: (f64, f64),
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    check_sparse_sizes(scenario, p, q)?;
    let mut gamma = DMatrix::zeros(p + 1, q);
    let mut add_outer = |u: &DVector<f64>, v: &DVector<f64>| {
        for i in 0..p {
            for j in 0..q {
                gamma[(i + 1, j)] += u[i] * v[j];
            }
        }
    };
    let block = |len: usize, on: std::ops::Range<usize>| {
        DVector::from_fn(len, |i, _| if on.contains(&i) { 1.0 } else { 0.0 })
    };
    match scenario {
        1 | 2 => {
            let dist = Uniform::new(uniform.0, uniform.1)
                .map_err(|e| Error::Scenario(format!("uniform bounds: {e}")))?;
            for _ in 0..scenario {
                let u = DVector::from_fn(p, |_, _| dist.sample(rng));
                let v = DVector::from_fn(q, |_, _| dist.sample(rng));
                add_outer(&u, &v);
            }
        }
        3 | 4 => {
            add_outer(&block(p, 0..4), &block(q, 0..4));
            if scenario == 4 {
                add_outer(&block(p, 2..6), &block(q, 2..6));
            }
        }
        _ => return Err(Error::Scenario(format!("unknown gamma scenario {scenario}"))),
    }
    Ok(gamma)
}

/// Main-effect matrix: value `b` in covariate rows 3..=10 (as far as `p`
/// reaches), zero elsewhere including the intercept row.
pub fn main_effect_matrix(p: usize, q: usize, b: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p + 1, q);
    for k in MAIN_EFFECT_ROWS.filter(|&k| k <= p) {
        m.row_mut(k).fill(b);
    }
    m
}

/// Error covariance with `2` on the diagonal and `z` elsewhere.
pub fn error_covariance(q: usize, z: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |i, j| if i == j { ERROR_VARIANCE } else { z })
}

/// `yᵢ = (Bᵀxᵢ)∘(Bᵀxᵢ) + Tᵢ Γᵀxᵢ / 2 + εᵢ`, `εᵢ ~ N(0, Σ_e)`.
pub fn generate_outcomes<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: &[i8],
    z: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = gamma.ncols();
    if x.ncols() != gamma.nrows() || b.shape() != gamma.shape() || t.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X {:?}, Γ {:?}, B {:?}, T {}",
            x.shape(),
            gamma.shape(),
            b.shape(),
            t.len()
        )));
    }
    let root = symmetric_sqrt(&error_covariance(q, z));
    generate_outcomes_with_noise_root(x, gamma, b, t, &root, rng)
}

fn generate_outcomes_with_noise_root<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: &[i8],
    root: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = gamma.ncols();
    let main = x * b;
    let effect = x * gamma;
    let mut y = main.component_mul(&main);
    let mut e = DVector::zeros(q);
    for i in 0..x.nrows() {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let noise = root * &e;
        let sign = f64::from(t[i]);
        for j in 0..q {
            y[(i, j)] += sign * effect[(i, j)] / 2.0 + noise[j];
        }
    }
    Ok(y)
}

/// Replaces `round(n τ / 100)` uniformly chosen rows with `U(15, 20)` draws.
pub fn inject_outliers<R: Rng + ?Sized>(y: &mut DMatrix<f64>, tau_pct: f64, rng: &mut R) -> Result<BTreeSet<usize>> {
    if !(0.0..=100.0).contains(&tau_pct) {
        return Err(Error::Scenario(format!("tau_pct must lie in [0, 100], got {tau_pct}")));
    }
    let n = y.nrows();
    let count = (n as f64 * tau_pct / 100.0).round() as usize;
    let rows: BTreeSet<usize> = sample(rng, n, count.min(n)).into_iter().collect();
    let dist = Uniform::new_inclusive(OUTLIER_LOW, OUTLIER_HIGH).expect("static bounds");
    for &i in &rows {
        for j in 0..y.ncols() {
            y[(i, j)] = dist.sample(rng);
        }
    }
    Ok(rows)
}

/// Probability of `T = +1` in the observational design.
pub fn observational_propensity(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() < 6 {
        return Err(Error::Scenario("the observational design needs p ≥ 5".into()));
    }
    Ok(DVector::from_fn(x.nrows(), |i, _| {
        let s: f64 = (1..=5).map(|j| x[(i, j)]).sum();
        1.0 / (1.0 + s.exp())
    }))
}

/// Treatment labels in `{−1, +1}`.
pub fn assign_treatment<R: Rng + ?Sized>(x: &DMatrix<f64>, design: Design, rng: &mut R) -> Result<Vec<i8>> {
    let probs = match design {
        Design::Rct => DVector::from_element(x.nrows(), 0.5),
        Design::Observational => observational_propensity(x)?,
    };
    Ok(probs
        .iter()
        .map(|&p| if rng.random::<f64>() < p { 1 } else { -1 })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SimulatedTruth {
    pub gamma_true: DMatrix<f64>,
    pub b_true: DMatrix<f64>,
    pub outlier_rows: BTreeSet<usize>,
    pub dataset: Dataset,
    pub test_x: DMatrix<f64>,
    pub true_cate_test: DMatrix<f64>,
}

/// Draws one replication's data from `seed`.
pub fn simulate_truth(spec: &ScenarioSpec, seed: u64) -> Result<SimulatedTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma_true = generate_gamma(
        spec.gamma_scenario,
        spec.p,
        spec.q,
        (spec.uniform_low, spec.uniform_high),
        &mut rng,
    )?;
    let b_true = main_effect_matrix(spec.p, spec.q, spec.b);
    let x = generate_covariates(spec.n, spec.p, spec.g, &mut rng)?;
    let test_x = generate_covariates(spec.n_test, spec.p, spec.g, &mut rng)?;
    // redraw in the rare event that one arm is empty
    let t = loop {
        let t = assign_treatment(&x, spec.design, &mut rng)?;
        let treated = t.iter().filter(|&&v| v == 1).count();
        if treated > 0 && treated < t.len() {
            break t;
        }
    };
    let mut y = generate_outcomes(&x, &gamma_true, &b_true, &t, spec.z, &mut rng)?;
    let outlier_rows = inject_outliers(&mut y, spec.tau_pct, &mut rng)?;
    let true_cate_test = &test_x * &gamma_true;
    let dataset = Dataset::from_parts(x, y, t, None)?;
    Ok(SimulatedTruth {
        gamma_true,
        b_true,
        outlier_rows,
        dataset,
        test_x,
        true_cate_test,
    })
}

/// How each method's tuning parameters are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuning {
    /// The same parameters for every replication; a missing rank means the
    /// scenario's true rank.
    Fixed { lambda: f64, phi: f64, rank: Option<usize> },
    /// Cross-validation over the default data-dependent grid.
    Cv { folds: usize, points: usize, max_rank: usize },
}

impl Default for Tuning {
    fn default() -> Tuning {
        Tuning::Cv {
            folds: DEFAULT_FOLDS,
            points: DEFAULT_GRID_POINTS,
            max_rank: DEFAULT_MAX_RANK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub methods: Vec<Method>,
    pub tuning: Tuning,
    pub fit: FitConfig,
}

impl SimulationPlan {
    pub fn new(methods: Vec<Method>) -> SimulationPlan {
        SimulationPlan {
            methods,
            tuning: Tuning::default(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub scenario_id: String,
    pub replication: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Metric name recorded for a failed fit.
pub const ERROR_METRIC: &str = "error";

fn fit_one(
    spec: &ScenarioSpec,
    truth: &SimulatedTruth,
    method: Method,
    plan: &SimulationPlan,
    seed: u64,
) -> Result<BaselineModel> {
    let source = match spec.design {
        Design::Rct => PropensitySource::RctHalf,
        Design::Observational => PropensitySource::LogisticFit,
    };
    let d = &truth.dataset;
    let cfg = FitConfig { seed, ..plan.fit.clone() };
    match &plan.tuning {
        Tuning::Fixed { lambda, phi, rank } => {
            let a = weights_for(source, d)?;
            let hyper = Hyper {
                lambda: *lambda,
                phi: *phi,
                rank: rank.unwrap_or(spec.true_rank()),
            };
            fit_method(method, d, &a, hyper, &cfg)
        }
        Tuning::Cv { folds, points, max_rank } => {
            let a = weights_for(source, d)?;
            let grid = CvGrid::sized(method, d, &a, *points, *max_rank, *folds, seed)?;
            Ok(cross_validate_and_fit(d, source, &grid, method, &cfg)?.1)
        }
    }
}

/// Rows for one replication: four metrics per method, or one error row.
pub fn run_replication(spec: &ScenarioSpec, plan: &SimulationPlan, replication: usize) -> Vec<ReplicationRow> {
    let seed = mix_seed(spec.seed, replication as u64);
    let id = spec.id();
    let randomized = spec.design == Design::Rct;
    let row = |method: &str, metric: &str, value: f64| ReplicationRow {
        scenario_id: id.clone(),
        replication,
        method: method.to_string(),
        metric: metric.to_string(),
        value,
    };
    let truth = match simulate_truth(spec, seed) {
        Ok(t) => t,
        Err(_) => {
            return plan
                .methods
                .iter()
                .map(|m| row(m.label(randomized), ERROR_METRIC, f64::NAN))
                .collect()
        }
    };
    let mut rows = Vec::new();
    for (k, &method) in plan.methods.iter().enumerate() {
        let label = method.label(randomized);
        let report = fit_one(spec, &truth, method, plan, mix_seed(seed, k as u64))
            .and_then(|m| MetricsReport::evaluate(&truth.test_x, &m.gamma, &truth.gamma_true));
        match report {
            Ok(rep) => rows.extend(rep.named_values().iter().map(|(name, v)| row(label, name, *v))),
            Err(_) => rows.push(row(label, ERROR_METRIC, f64::NAN)),
        }
    }
    rows
}

/// Runs every replication (in parallel, capped by [`THREADS_ENV`]) and
/// returns rows ordered by replication, then method, then metric.
pub fn run_scenario(spec: &ScenarioSpec, plan: &SimulationPlan) -> Result<Vec<ReplicationRow>> {
    spec.validate()?;
    if plan.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    plan.fit.validate()?;
    let work = || -> Vec<ReplicationRow> {
        let mut per_rep: Vec<(usize, Vec<ReplicationRow>)> = (0..spec.replications)
            .into_par_iter()
            .map(|r| (r, run_replication(spec, plan, r)))
            .collect();
        per_rep.sort_by_key(|(r, _)| *r);
        per_rep.into_iter().flat_map(|(_, rows)| rows).collect()
    };
    match thread_cap()? {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))),
            Ok(n) => Ok(Some(n)),
        },
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(0, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }

    #[test]
    fn scenario_three_block() {
        let g = generate_gamma(3, 10, 10, (0.0, 1.0), &mut rng(1)).unwrap();
        for i in 0..11 {
            for j in 0..10 {
                let expect = if (1..=4).contains(&i) && j < 4 { 1.0 } else { 0.0 };
                assert_eq!(g[(i, j)], expect);
            }
        }
        let sv = g.singular_values();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10).count(), 1);
    }

    #[test]
    fn scenario_four_is_rank_two_and_sums_blocks() {
        let g = generate_gamma(4, 10, 10, (0.0, 1.0), &mut rng(1)).unwrap();
        assert_eq!(g[(3, 2)], 2.0);
        assert_eq!(g[(1, 0)], 1.0);
        assert_eq!(g[(6, 5)], 1.0);
        let sv = g.singular_values();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10).count(), 2);
        assert!(generate_gamma(4, 5, 10, (0.0, 1.0), &mut rng(1)).is_err());
    }

    #[test]
    fn intercept_row_is_zero_everywhere() {
        for sc in 1..=4 {
            let g = generate_gamma(sc, 10, 10, (0.0, 1.0), &mut rng(sc as u64)).unwrap();
            assert!(g.row(0).iter().all(|&v| v == 0.0));
        }
        let g1 = generate_gamma(1, 10, 10, (0.0, 1.0), &mut rng(4)).unwrap();
        assert!(g1.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn covariates_have_intercept() {
        let x = generate_covariates(20, 3, 0.3, &mut rng(2)).unwrap();
        assert!(x.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(x.shape(), (20, 4));
    }

    #[test]
    fn one_row_hadamard_square() {
        // x = (1, 1, 2, 3), B rows 3.. hold b: Bᵀx = b·x₃ = 3b in every column
        let p = 3;
        let b = 6f64.powf(-0.5);
        let bm = main_effect_matrix(p, 2, b);
        let x = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 2.0, 3.0]);
        let root = DMatrix::zeros(2, 2);
        let y = generate_outcomes_with_noise_root(&x, &DMatrix::zeros(4, 2), &bm, &[1], &root, &mut rng(0))
            .unwrap();
        let expect = (3.0 * b) * (3.0 * b);
        assert!((y[(0, 0)] - expect).abs() < 1e-15);
        assert!((y[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn outlier_count_and_range() {
        let mut y = DMatrix::zeros(300, 4);
        let rows = inject_outliers(&mut y, 10.0, &mut rng(5)).unwrap();
        assert_eq!(rows.len(), 30);
        for i in 0..300 {
            let inside = rows.contains(&i);
            assert!(y.row(i).iter().all(|&v| if inside { (15.0..=20.0).contains(&v) } else { v == 0.0 }));
        }
        let mut y2 = DMatrix::zeros(300, 4);
        assert_eq!(inject_outliers(&mut y2, 10.0, &mut rng(5)).unwrap(), rows);
        let mut y3 = DMatrix::zeros(10, 2);
        assert!(inject_outliers(&mut y3, 0.0, &mut rng(5)).unwrap().is_empty());
        assert!(y3.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observational_needs_five_covariates() {
        let x = generate_covariates(10, 4, 0.0, &mut rng(3)).unwrap();
        assert!(assign_treatment(&x, Design::Observational, &mut rng(3)).is_err());
        let mut x = DMatrix::from_element(1, 6, 1.0);
        x.fill(10.0);
        x[(0, 0)] = 1.0;
        let p = observational_propensity(&x).unwrap();
        assert!(p[0] < 1e-20);
    }

    #[test]
    fn study_grid_has_192_valid_settings() {
        let grid = ScenarioSpec::study_grid(Design::Rct);
        assert_eq!(grid.len(), 192);
        assert!(grid.iter().all(|s| s.validate().is_ok()));
        let ids: BTreeSet<String> = grid.iter().map(|s| s.id()).collect();
        assert_eq!(ids.len(), 192);
    }

    #[test]
    fn off_grid_requires_flag() {
        let mut s = ScenarioSpec::new(7, 0.0, 0.0, 0.5, 3, 0.0, Design::Rct);
        assert!(s.validate().is_err());
        s.off_grid = true;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let text = "p = 10\ng = 0.0\ntau_pct = 5.0\nb = 0.408248290463863\ngamma_scenario = 1\nz = 0.0\ndesign = \"rct\"\nreplications = 3\nseed = 9\n";
        let s = ScenarioSpec::from_toml(text).unwrap();
        assert_eq!(s.n, 300);
        assert_eq!(s.replications, 3);
        assert!(ScenarioSpec::from_toml("p = 10\nbogus = 1\n").is_err());
    }
}
