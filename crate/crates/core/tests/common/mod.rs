#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rrhte::{Dataset, PropensitySource, WeightVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Intercept plus `p` standard normal covariates.
pub fn design(r: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let mut x = normal_matrix(r, n, p + 1);
    x.column_mut(0).fill(1.0);
    x
}

/// Treatment labels with both arms present, drawn with the given propensities.
pub fn treatments(r: &mut ChaCha8Rng, pi: &DVector<f64>) -> Vec<i8> {
    loop {
        let t: Vec<i8> = pi.iter().map(|&p| if r.random::<f64>() < p { 1 } else { -1 }).collect();
        let treated = t.iter().filter(|&&v| v == 1).count();
        if treated >= 5 && treated + 5 <= t.len() {
            return t;
        }
    }
}

pub struct Instance {
    pub d: Dataset,
    pub a: WeightVector,
}

/// Random observational-style instance with known propensities in
/// `[0.2, 0.8]` and Gaussian outcomes.
pub fn random_instance(seed: u64, n: usize, p: usize, q: usize) -> Instance {
    let mut r = rng(seed);
    let x = design(&mut r, n, p);
    let pi = DVector::from_fn(n, |_, _| r.random_range(0.2..0.8));
    let t = treatments(&mut r, &pi);
    let y = normal_matrix(&mut r, n, q) * 2.0 + DMatrix::from_fn(n, q, |i, j| x[(i, (j % p) + 1)]);
    let d = Dataset::from_parts(x, y, t, Some(pi.clone())).unwrap();
    let a = rrhte::weights::known_weights(d.t(), &pi).unwrap();
    Instance { d, a }
}

/// `Z = T X / 2` built entry by entry.
pub fn signed_design(d: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(d.n(), d.n_cols(), |i, k| f64::from(d.t()[i]) * d.x()[(i, k)] / 2.0)
}

/// Weighted least squares `(Zᵀ A² Z)⁻¹ Zᵀ A² Y` by explicit sums and LU.
pub fn weighted_ols_oracle(d: &Dataset, a: &DVector<f64>) -> DMatrix<f64> {
    let z = signed_design(d);
    let (n, k, q) = (d.n(), d.n_cols(), d.q());
    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DMatrix::zeros(k, q);
    for i in 0..n {
        let w = a[i] * a[i];
        for u in 0..k {
            for v in 0..k {
                lhs[(u, v)] += w * z[(i, u)] * z[(i, v)];
            }
            for j in 0..q {
                rhs[(u, j)] += w * z[(i, u)] * d.y()[(i, j)];
            }
        }
    }
    lhs.lu().solve(&rhs).expect("nonsingular normal equations")
}

/// `Σᵢ aᵢ² ‖yᵢ − zᵢᵀΓ‖²` by explicit loops.
pub fn weighted_rss(d: &Dataset, a: &DVector<f64>, gamma: &DMatrix<f64>) -> f64 {
    let z = signed_design(d);
    let mut total = 0.0;
    for i in 0..d.n() {
        for j in 0..d.q() {
            let mut fit = 0.0;
            for k in 0..d.n_cols() {
                fit += z[(i, k)] * gamma[(k, j)];
            }
            let r = d.y()[(i, j)] - fit;
            total += a[i] * a[i] * r * r;
        }
    }
    total
}

pub fn rel_err(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / truth.norm()
}

pub fn unit_weights(n: usize) -> WeightVector {
    WeightVector {
        a: DVector::from_element(n, 1.0),
        pi: DVector::from_element(n, 0.5),
        source: PropensitySource::RctHalf,
    }
}

pub fn is_non_increasing(trace: &[f64], tol: f64) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + tol)
}
