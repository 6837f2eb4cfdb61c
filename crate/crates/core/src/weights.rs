//! Per-subject weights `a_i = 1 / sqrt(T_i π_i + (1 - T_i)/2)` and the
//! propensity scores they are built from.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::RIDGE_JITTER;
use crate::types::Dataset;

/// Fitted propensities are clipped into `[PROPENSITY_CLIP, 1 - PROPENSITY_CLIP]`.
pub const PROPENSITY_CLIP: f64 = 1e-6;

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensitySource {
    Known,
    RctHalf,
    LogisticFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub a: DVector<f64>,
    pub pi: DVector<f64>,
    pub source: PropensitySource,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Same propensities, every weight multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> WeightVector {
        WeightVector {
            a: &self.a * factor,
            pi: self.pi.clone(),
            source: self.source,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> WeightVector {
        WeightVector {
            a: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.a[i])),
            pi: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.pi[i])),
            source: self.source,
        }
    }
}

/// Weight of one subject: `1/sqrt(π)` when treated, `1/sqrt(1-π)` otherwise.
pub fn weight(t: i8, pi: f64) -> f64 {
    if t == 1 {
        (1.0 / pi).sqrt()
    } else {
        (1.0 / (1.0 - pi)).sqrt()
    }
}

pub fn compute_weights(t: &[i8], pi: &DVector<f64>) -> Result<WeightVector> {
    weights_from(t, pi, PropensitySource::Known)
}

fn weights_from(t: &[i8], pi: &DVector<f64>, source: PropensitySource) -> Result<WeightVector> {
    if t.len() != pi.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} treatment entries but {} propensities",
            t.len(),
            pi.len()
        )));
    }
    let mut a = DVector::zeros(t.len());
    for (i, (&ti, &p)) in t.iter().zip(pi.iter()).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Positivity { row: i, value: p });
        }
        if ti != 1 && ti != -1 {
            return Err(Error::InvalidTreatment {
                row: i,
                value: ti.to_string(),
            });
        }
        a[i] = weight(ti, p);
    }
    Ok(WeightVector {
        a,
        pi: pi.clone(),
        source,
    })
}

/// Randomized design with assignment probability one half: `a = √2` everywhere.
///
/// Any constant weight vector yields the same minimizers once the penalties
/// are scaled along with the squared weights, so this is interchangeable
/// with `A = I`.
pub fn rct_weights(n: usize) -> WeightVector {
    WeightVector {
        a: DVector::from_element(n, std::f64::consts::SQRT_2),
        pi: DVector::from_element(n, 0.5),
        source: PropensitySource::RctHalf,
    }
}

/// Logistic model for `P(T = +1 | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub coef: DVector<f64>,
    pub deviance: f64,
    pub iterations: usize,
}

impl LogisticModel {
    /// Maximum likelihood fit by iteratively reweighted least squares.
    /// `x` is used as given, so it should already carry an intercept column.
    pub fn fit(x: &DMatrix<f64>, t: &[i8]) -> Result<LogisticModel> {
        let (n, k) = x.shape();
        if t.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {n} rows, T has {}",
                t.len()
            )));
        }
        let target: Vec<f64> = t.iter().map(|&ti| if ti == 1 { 1.0 } else { 0.0 }).collect();
        let mut beta = DVector::zeros(k);
        let mut deviance = deviance_of(x, &beta, &target);
        for iter in 1..=LOGISTIC_MAX_ITER {
            let eta = x * &beta;
            let mut xtwx = DMatrix::zeros(k, k);
            let mut xtwz = DVector::zeros(k);
            for i in 0..n {
                let mu = sigmoid(eta[i]);
                let w = (mu * (1.0 - mu)).max(1e-12);
                let z = eta[i] + (target[i] - mu) / w;
                let row = x.row(i);
                for a in 0..k {
                    let wa = w * row[a];
                    xtwz[a] += wa * z;
                    for b in a..k {
                        xtwx[(a, b)] += wa * row[b];
                    }
                }
            }
            for a in 0..k {
                xtwx[(a, a)] += RIDGE_JITTER;
                for b in 0..a {
                    xtwx[(a, b)] = xtwx[(b, a)];
                }
            }
            let next = match xtwx.cholesky() {
                Some(chol) => chol.solve(&xtwz),
                None => {
                    return Err(Error::NotConverged {
                        solver: "logistic IRLS",
                        iterations: iter,
                        last: deviance,
                    })
                }
            };
            let new_dev = deviance_of(x, &next, &target);
            if !new_dev.is_finite() || next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NotConverged {
                    solver: "logistic IRLS",
                    iterations: iter,
                    last: deviance,
                });
            }
            beta = next;
            let change = (new_dev - deviance).abs() / (new_dev.abs() + 0.1);
            deviance = new_dev;
            if change < LOGISTIC_TOL {
                return Ok(LogisticModel {
                    coef: beta,
                    deviance,
                    iterations: iter,
                });
            }
        }
        Err(Error::NotConverged {
            solver: "logistic IRLS",
            iterations: LOGISTIC_MAX_ITER,
            last: deviance,
        })
    }

    /// Clipped probabilities of treatment.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * &self.coef).map(|e| sigmoid(e).clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP))
    }
}

fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let ex = e.exp();
        ex / (1.0 + ex)
    }
}

/// `-2 log L`, computed stably from the linear predictor.
fn deviance_of(x: &DMatrix<f64>, beta: &DVector<f64>, target: &[f64]) -> f64 {
    let eta = x * beta;
    let mut dev = 0.0;
    for (i, &y) in target.iter().enumerate() {
        // log(1 + exp(e)) - y e
        let e = eta[i];
        let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        dev += 2.0 * (softplus - y * e);
    }
    dev
}

pub fn fit_propensity_logistic(x: &DMatrix<f64>, t: &[i8]) -> Result<DVector<f64>> {
    Ok(LogisticModel::fit(x, t)?.predict(x))
}

/// Weights from logistic-fitted propensities.
pub fn logistic_weights(x: &DMatrix<f64>, t: &[i8]) -> Result<WeightVector> {
    let pi = fit_propensity_logistic(x, t)?;
    weights_from(t, &pi, PropensitySource::LogisticFit)
}

/// Weights from a propensity vector supplied with the data.
pub fn known_weights(t: &[i8], pi: &DVector<f64>) -> Result<WeightVector> {
    weights_from(t, pi, PropensitySource::Known)
}

/// Weights for held-out rows from a propensity model fitted elsewhere.
pub(crate) fn weights_from_model(
    model: &LogisticModel,
    x: &DMatrix<f64>,
    t: &[i8],
) -> Result<WeightVector> {
    weights_from(t, &model.predict(x), PropensitySource::LogisticFit)
}

/// Weights for a whole dataset under the given propensity source.
pub fn weights_for(source: PropensitySource, d: &Dataset) -> Result<WeightVector> {
    match source {
        PropensitySource::RctHalf => Ok(rct_weights(d.n())),
        PropensitySource::Known => known_weights(d.t(), known_propensity(d)?),
        PropensitySource::LogisticFit => logistic_weights(d.x(), d.t()),
    }
}

/// Weights for a training set and a held-out set. Estimated propensities are
/// fitted on the training rows only and then applied to both.
pub fn split_weights(
    source: PropensitySource,
    train: &Dataset,
    test: &Dataset,
) -> Result<(WeightVector, WeightVector)> {
    match source {
        PropensitySource::LogisticFit => {
            let model = LogisticModel::fit(train.x(), train.t())?;
            Ok((
                weights_from_model(&model, train.x(), train.t())?,
                weights_from_model(&model, test.x(), test.t())?,
            ))
        }
        _ => Ok((weights_for(source, train)?, weights_for(source, test)?)),
    }
}

fn known_propensity(d: &Dataset) -> Result<&DVector<f64>> {
    d.propensity().ok_or_else(|| {
        Error::InvalidConfig("known propensities requested but the dataset carries none".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rct_half_gives_sqrt_two_for_both_arms() {
        let w = compute_weights(&[1, -1], &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(w.a[0], std::f64::consts::SQRT_2);
        assert_eq!(w.a[1], std::f64::consts::SQRT_2);
    }

    #[test]
    fn quarter_propensity_hand_values() {
        let w = compute_weights(&[1, -1], &DVector::from_vec(vec![0.25, 0.25])).unwrap();
        assert!((w.a[0] - 2.0).abs() < 1e-15);
        assert!((w.a[1] - 2.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weight_matches_general_formula() {
        for &(t, p) in &[(1i8, 0.3), (-1, 0.3), (1, 0.9), (-1, 0.01)] {
            let tf = f64::from(t);
            let general = 1.0 / (tf * p + (1.0 - tf) / 2.0).sqrt();
            assert!((weight(t, p) - general).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_propensity_is_positivity_error() {
        for p in [0.0, 1.0, -0.2, 1.5] {
            let err = compute_weights(&[1], &DVector::from_vec(vec![p])).unwrap_err();
            assert!(matches!(err, Error::Positivity { .. }));
        }
    }

    #[test]
    fn rct_weights_are_constant() {
        let w = rct_weights(3);
        assert!(w.a.iter().all(|&a| a == std::f64::consts::SQRT_2));
        assert_eq!(rct_weights(1).a.len(), 1);
        assert_eq!(w.source, PropensitySource::RctHalf);
    }

    #[test]
    fn intercept_only_fit_recovers_treated_share() {
        // Treated share is identical within each covariate level.
        let n = 40;
        let mut x = DMatrix::from_element(n, 2, 1.0);
        let mut t = Vec::new();
        for i in 0..n {
            x[(i, 1)] = if i % 4 < 2 { 1.0 } else { -1.0 };
            t.push(if i % 2 == 0 { 1 } else { -1 });
        }
        let share = t.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
        let pi = fit_propensity_logistic(&x, &t).unwrap();
        assert!(pi.iter().all(|&p| (p - share).abs() < 1e-6));
    }

    #[test]
    fn separable_data_is_clipped() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        let t = [-1, -1, 1, 1];
        let pi = fit_propensity_logistic(&x, &t).unwrap();
        assert!(pi.iter().all(|&p| (PROPENSITY_CLIP..=1.0 - PROPENSITY_CLIP).contains(&p)));
        let w = known_weights(&t, &pi).unwrap();
        assert!(w.a.iter().all(|a| a.is_finite() && *a > 0.0));
    }

    #[test]
    fn logistic_fit_tracks_generator() {
        let n = 5000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = DMatrix::from_element(n, 6, 1.0);
        let mut truth = DVector::zeros(n);
        let mut t = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 1..6 {
                let v: f64 = StandardNormal.sample(&mut rng);
                x[(i, j)] = v;
                s += v;
            }
            let p = 1.0 / (1.0 + s.exp());
            truth[i] = p;
            let u: f64 = rand::Rng::random(&mut rng);
            t.push(if u < p { 1 } else { -1 });
        }
        let pi = fit_propensity_logistic(&x, &t).unwrap();
        let mean_abs = (&pi - &truth).abs().sum() / n as f64;
        assert!(mean_abs < 0.05, "mean abs error {mean_abs}");
    }
}
