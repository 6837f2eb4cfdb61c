//! Accuracy of an estimated effect matrix against a known truth on a test
//! design: MSE, bias, Spearman rank correlation of the summed scores, and
//! the AUC of the estimated score for the sign of the true score.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub bias: f64,
    pub spearman: f64,
    /// `None` when the true scores fall in a single class.
    pub auc: Option<f64>,
    pub n_test: usize,
    pub q: usize,
}

impl MetricsReport {
    pub fn evaluate(
        x_test: &DMatrix<f64>,
        gamma_hat: &DMatrix<f64>,
        gamma_true: &DMatrix<f64>,
    ) -> Result<MetricsReport> {
        check(x_test, gamma_hat, gamma_true)?;
        let est = x_test * gamma_hat;
        let truth = x_test * gamma_true;
        let score_hat = row_sums(&est);
        let score_true = row_sums(&truth);
        let spearman = if gamma_hat.iter().all(|&v| v == 0.0) {
            0.0
        } else {
            spearman(&score_hat, &score_true)?
        };
        Ok(MetricsReport {
            mse: mse(x_test, gamma_hat, gamma_true)?,
            bias: bias(x_test, gamma_hat, gamma_true)?,
            spearman,
            auc: auc(&score_hat, &score_true)?,
            n_test: x_test.nrows(),
            q: gamma_true.ncols(),
        })
    }

    /// `(name, value)` pairs in a fixed order; a missing AUC is NaN.
    pub fn named_values(&self) -> [(&'static str, f64); 4] {
        [
            ("mse", self.mse),
            ("bias", self.bias),
            ("spearman", self.spearman),
            ("auc", self.auc.unwrap_or(f64::NAN)),
        ]
    }
}

fn check(x: &DMatrix<f64>, gamma_hat: &DMatrix<f64>, gamma_true: &DMatrix<f64>) -> Result<()> {
    if gamma_hat.shape() != gamma_true.shape() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            gamma_hat.shape(),
            gamma_true.shape()
        )));
    }
    if x.ncols() != gamma_true.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "test design has {} columns, coefficients have {} rows",
            x.ncols(),
            gamma_true.nrows()
        )));
    }
    Ok(())
}

pub fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.iter().sum::<f64>()))
}

/// `‖X Γ̂ − X Γ‖²_F / (n* q)`.
pub fn mse(x_test: &DMatrix<f64>, gamma_hat: &DMatrix<f64>, gamma_true: &DMatrix<f64>) -> Result<f64> {
    check(x_test, gamma_hat, gamma_true)?;
    let diff = x_test * (gamma_hat - gamma_true);
    Ok(diff.norm_squared() / diff.len() as f64)
}

/// `|Σᵢⱼ (xᵢᵀγ̂ⱼ − xᵢᵀγⱼ)| / (n* q)`.
pub fn bias(x_test: &DMatrix<f64>, gamma_hat: &DMatrix<f64>, gamma_true: &DMatrix<f64>) -> Result<f64> {
    check(x_test, gamma_hat, gamma_true)?;
    let diff = x_test * (gamma_hat - gamma_true);
    Ok(diff.sum().abs() / diff.len() as f64)
}

/// Ranks in descending order (largest value gets rank 1), ties averaged.
pub fn descending_ranks(values: &DVector<f64>) -> Vec<f64> {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; m];
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// `1 − 6 Σ (d̂ᵢ − dᵢ)² / (m (m² − 1))`. An all-zero estimate scores 0.
pub fn spearman(score_hat: &DVector<f64>, score_true: &DVector<f64>) -> Result<f64> {
    let m = score_hat.len();
    if m != score_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "score lengths {} and {}",
            m,
            score_true.len()
        )));
    }
    if m < 2 {
        return Err(Error::InvalidConfig(
            "spearman needs at least two scores".into(),
        ));
    }
    if score_hat.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let rh = descending_ranks(score_hat);
    let rt = descending_ranks(score_true);
    let ss: f64 = rh.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    let mf = m as f64;
    Ok(1.0 - 6.0 * ss / (mf * (mf * mf - 1.0)))
}

/// ROC AUC of `score_hat` for the label `score_true > 0`, via the
/// Mann–Whitney statistic with half credit for ties.
pub fn auc(score_hat: &DVector<f64>, score_true: &DVector<f64>) -> Result<Option<f64>> {
    if score_hat.len() != score_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "score lengths {} and {}",
            score_hat.len(),
            score_true.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = score_hat
        .iter()
        .zip(score_true.iter())
        .map(|(&s, &t)| (s, t > 0.0))
        .collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of ascending mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 == pairs[start].0 {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos = pairs[start..end].iter().filter(|p| p.1).count();
        rank_sum += mid * pos as f64;
        start = end;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(Some(u / (np * n_neg as f64)))
}
