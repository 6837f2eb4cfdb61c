//! File formats: CSV datasets, JSON model artifacts, DOT path diagrams,
//! replication tables and their summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineModel, Method};
use crate::error::{Error, Result};
use crate::simulation::{ReplicationRow, ERROR_METRIC};
use crate::types::{validate_dataset, Dataset, FactorModel, FitConfig, TreatmentCoding, ValidateOptions};
use crate::weights::PropensitySource;

pub const SCHEMA_VERSION: u32 = 1;
pub const INTERCEPT_NAME: &str = "(Intercept)";

/// A dataset together with its column names (covariate names include the
/// intercept when one was added).
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub covariate_names: Vec<String>,
    pub outcome_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub treatment_column: String,
    pub coding: TreatmentCoding,
    pub add_intercept: bool,
    /// Column of known propensities in the covariate file, excluded from `X`.
    pub propensity_column: Option<String>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "missing header row".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(Table { header, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            let msg = e.to_string();
            match e.into_kind() {
                csv::ErrorKind::Io(source) => Error::io(path, source),
                _ => Error::Format { path: path.to_path_buf(), message: msg },
            }
        }
        _ => Error::Format {
            path: path.to_path_buf(),
            message: e.to_string().replace('\n', " "),
        },
    }
}

fn parse_cell(path: &Path, line: usize, column: &str, text: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row: line,
        column: column.to_string(),
        message: format!("cannot parse '{text}' as a number"),
    })
}

fn find_column(table: &Table, path: &Path, name: &str) -> Result<usize> {
    table.header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
        path: path.to_path_buf(),
        column: name.to_string(),
    })
}

/// Reads covariates (including the treatment column and optionally a
/// propensity column) and outcomes from two headed CSV files with matching
/// row order.
pub fn load_csv_dataset(covariates: &Path, outcomes: &Path, opts: &CsvOptions) -> Result<LoadedData> {
    let cov = read_table(covariates)?;
    let out = read_table(outcomes)?;
    if cov.rows.len() != out.rows.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} rows, {} has {}",
            covariates.display(),
            cov.rows.len(),
            outcomes.display(),
            out.rows.len()
        )));
    }
    let t_col = find_column(&cov, covariates, &opts.treatment_column)?;
    let p_col = match &opts.propensity_column {
        Some(name) => Some(find_column(&cov, covariates, name)?),
        None => None,
    };
    let x_cols: Vec<usize> = (0..cov.header.len())
        .filter(|&j| j != t_col && Some(j) != p_col)
        .collect();
    let n = cov.rows.len();
    let mut x = DMatrix::zeros(n, x_cols.len());
    let mut t = Vec::with_capacity(n);
    let mut pi = p_col.map(|_| DVector::zeros(n));
    for (i, rec) in cov.rows.iter().enumerate() {
        // header is line 1
        let line = i + 2;
        for (k, &j) in x_cols.iter().enumerate() {
            x[(i, k)] = parse_cell(covariates, line, &cov.header[j], &rec[j])?;
        }
        let raw = parse_cell(covariates, line, &opts.treatment_column, &rec[t_col])?;
        let coded = (raw.fract() == 0.0)
            .then(|| opts.coding.apply(raw as i64))
            .flatten()
            .ok_or_else(|| Error::Parse {
                path: covariates.to_path_buf(),
                row: line,
                column: opts.treatment_column.clone(),
                message: format!("treatment value '{}' is outside the coding set", &rec[t_col]),
            })?;
        t.push(i64::from(coded));
        if let (Some(pc), Some(pv)) = (p_col, pi.as_mut()) {
            pv[i] = parse_cell(covariates, line, &cov.header[pc], &rec[pc])?;
        }
    }
    let mut y = DMatrix::zeros(n, out.header.len());
    for (i, rec) in out.rows.iter().enumerate() {
        for j in 0..out.header.len() {
            y[(i, j)] = parse_cell(outcomes, i + 2, &out.header[j], &rec[j])?;
        }
    }
    let dataset = validate_dataset(
        &x,
        &y,
        &t,
        pi.as_ref(),
        ValidateOptions {
            add_intercept: opts.add_intercept,
            coding: TreatmentCoding::PlusMinusOne,
        },
    )?;
    let mut covariate_names: Vec<String> = Vec::new();
    if opts.add_intercept {
        covariate_names.push(INTERCEPT_NAME.to_string());
    }
    covariate_names.extend(x_cols.iter().map(|&j| cov.header[j].clone()));
    Ok(LoadedData {
        dataset,
        covariate_names,
        outcome_names: out.header,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub rank: usize,
    pub lambda: f64,
    /// `None` when the outlier block is disabled.
    pub phi: Option<f64>,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub covariate_names: Vec<String>,
    pub outcome_names: Vec<String>,
    pub n: usize,
    pub w: Option<Vec<Vec<f64>>>,
    pub v: Option<Vec<Vec<f64>>>,
    /// Nonzero rows of the outlier matrix.
    pub c: Vec<SparseRow>,
    pub gamma: Vec<Vec<f64>>,
    pub main_effects: Option<Vec<Vec<f64>>>,
    pub propensity_source: String,
    pub objective_trace: Vec<f64>,
    pub seed: u64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("ragged rows in {what}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn source_name(source: PropensitySource) -> &'static str {
    match source {
        PropensitySource::Known => "known",
        PropensitySource::RctHalf => "rct",
        PropensitySource::LogisticFit => "logistic",
    }
}

impl ModelArtifact {
    pub fn new(
        model: &BaselineModel,
        cfg: &FitConfig,
        phi: f64,
        lambda: f64,
        rank: usize,
        names: (&[String], &[String]),
        source: PropensitySource,
    ) -> ModelArtifact {
        let (w, v, c, n) = match &model.factor {
            Some(f) => {
                let c: Vec<SparseRow> = f
                    .outlier_rows()
                    .into_iter()
                    .map(|i| SparseRow {
                        index: i,
                        values: f.c().row(i).iter().copied().collect(),
                    })
                    .collect();
                (Some(rows_of(f.w())), Some(rows_of(f.v())), c, f.c().nrows())
            }
            None => (None, None, Vec::new(), 0),
        };
        ModelArtifact {
            schema_version: SCHEMA_VERSION,
            config: ConfigEcho {
                method: model.method.id().to_string(),
                rank,
                lambda,
                phi: phi.is_finite().then_some(phi),
                outer_tol: cfg.outer_tol,
                inner_tol: cfg.inner_tol,
                max_outer: cfg.max_outer,
                max_inner: cfg.max_inner,
                restarts: cfg.restarts,
            },
            covariate_names: names.0.to_vec(),
            outcome_names: names.1.to_vec(),
            n,
            w,
            v,
            c,
            gamma: rows_of(&model.gamma),
            main_effects: model.main_effects.as_ref().map(rows_of),
            propensity_source: source_name(source).to_string(),
            objective_trace: model.trace.clone(),
            seed: cfg.seed,
        }
    }

    pub fn method(&self) -> Result<Method> {
        self.config.method.parse()
    }

    pub fn gamma(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.gamma, "gamma")
    }

    /// Rebuilds the factorization, checking its invariants.
    pub fn factor_model(&self) -> Result<Option<FactorModel>> {
        let (Some(w), Some(v)) = (&self.w, &self.v) else {
            return Ok(None);
        };
        let w = matrix_from_rows(w, "W")?;
        let v = matrix_from_rows(v, "V")?;
        let mut c = DMatrix::zeros(self.n, v.nrows());
        for row in &self.c {
            if row.index >= self.n || row.values.len() != v.nrows() {
                return Err(Error::InvalidConfig(format!("outlier row {} does not fit", row.index)));
            }
            for (j, &val) in row.values.iter().enumerate() {
                c[(row.index, j)] = val;
            }
        }
        FactorModel::new(w, v, c).map(Some)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize model: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<ModelArtifact> {
        let art: ModelArtifact = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if art.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported schema version {}", art.schema_version),
            });
        }
        Ok(art)
    }
}

pub fn save_model(art: &ModelArtifact, path: &Path) -> Result<()> {
    fs::write(path, art.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelArtifact::from_json(&text, path)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz description of the fitted paths: covariates with nonzero `W`
/// rows feed the factors they load on, and active factors feed every
/// outcome they touch. Negative edges are dashed.
pub fn path_diagram_dot(model: &FactorModel, covariate_names: &[String], outcome_names: &[String]) -> Result<String> {
    let (w, v) = (model.w(), model.v());
    if covariate_names.len() != w.nrows() || outcome_names.len() != v.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariate names for {} rows of W, {} outcome names for {} rows of V",
            covariate_names.len(),
            w.nrows(),
            outcome_names.len(),
            v.nrows()
        )));
    }
    let active_factors: Vec<usize> = (0..w.ncols()).filter(|&k| w.column(k).iter().any(|&x| x != 0.0)).collect();
    let active_covariates: Vec<usize> = (0..w.nrows()).filter(|&j| w.row(j).iter().any(|&x| x != 0.0)).collect();

    let mut s = String::from("digraph paths {\n  rankdir=LR;\n");
    let edge = |s: &mut String, from: &str, to: &str, weight: f64| {
        let style = if weight < 0.0 { ", style=dashed" } else { "" };
        let _ = writeln!(s, "  \"{from}\" -> \"{to}\" [label=\"{weight:.3}\"{style}];");
    };
    let factor_name = |k: usize| format!("factor{}", k + 1);

    s.push_str("  subgraph covariates {\n    rank=same;\n");
    for &j in &active_covariates {
        let _ = writeln!(s, "    \"{}\" [shape=box];", dot_escape(&covariate_names[j]));
    }
    s.push_str("  }\n  subgraph factors {\n    rank=same;\n");
    for &k in &active_factors {
        let _ = writeln!(s, "    \"{}\" [shape=ellipse];", factor_name(k));
    }
    s.push_str("  }\n  subgraph outcomes {\n    rank=same;\n");
    for name in outcome_names {
        let _ = writeln!(s, "    \"{}\" [shape=box];", dot_escape(name));
    }
    s.push_str("  }\n");
    for &j in &active_covariates {
        for &k in &active_factors {
            if w[(j, k)] != 0.0 {
                edge(&mut s, &dot_escape(&covariate_names[j]), &factor_name(k), w[(j, k)]);
            }
        }
    }
    for &k in &active_factors {
        for (l, name) in outcome_names.iter().enumerate() {
            if v[(l, k)] != 0.0 {
                edge(&mut s, &factor_name(k), &dot_escape(name), v[(l, k)]);
            }
        }
    }
    s.push_str("}\n");
    Ok(s)
}

pub fn export_path_diagram(
    model: &FactorModel,
    covariate_names: &[String],
    outcome_names: &[String],
    path: &Path,
) -> Result<()> {
    let dot = path_diagram_dot(model, covariate_names, outcome_names)?;
    fs::write(path, dot).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        v.to_string()
    }
}

pub fn write_cv_surface(rows: &[(f64, f64, usize, usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let map = |e: csv::Error| csv_error(path, e);
    w.write_record(["lambda", "phi", "rank", "fold", "loss"]).map_err(map)?;
    for &(lambda, phi, rank, fold, loss) in rows {
        w.write_record([fmt_f64(lambda), fmt_f64(phi), rank.to_string(), fold.to_string(), fmt_f64(loss)])
            .map_err(map)?;
    }
    finish(w, path)
}

pub const REPLICATION_HEADER: [&str; 5] = ["scenario_id", "replication", "method", "metric", "value"];

pub fn write_replications(rows: &[ReplicationRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let map = |e: csv::Error| csv_error(path, e);
    w.write_record(REPLICATION_HEADER).map_err(map)?;
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.replication.to_string(),
            r.method.clone(),
            r.metric.clone(),
            fmt_f64(r.value),
        ])
        .map_err(map)?;
    }
    finish(w, path)
}

pub fn read_replications(path: &Path) -> Result<Vec<ReplicationRow>> {
    let table = read_table(path)?;
    let cols: Vec<usize> = REPLICATION_HEADER
        .iter()
        .map(|c| find_column(&table, path, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let line = i + 2;
        let replication = rec[cols[1]].parse::<usize>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            column: "replication".into(),
            message: format!("'{}' is not a replication index", &rec[cols[1]]),
        })?;
        out.push(ReplicationRow {
            scenario_id: rec[cols[0]].to_string(),
            replication,
            method: rec[cols[2]].to_string(),
            metric: rec[cols[3]].to_string(),
            value: parse_cell(path, line, "value", &rec[cols[4]])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub method: String,
    pub metric: String,
    /// Finite values summarized.
    pub count: usize,
    pub failures: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and quartiles per (scenario, method, metric); failed fits are
/// counted per (scenario, method) and reported on every metric row.
pub fn summarize(rows: &[ReplicationRow]) -> Vec<SummaryRow> {
    let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut failures: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in rows {
        if r.metric == ERROR_METRIC {
            *failures.entry((r.scenario_id.clone(), r.method.clone())).or_default() += 1;
            continue;
        }
        let entry = values
            .entry((r.scenario_id.clone(), r.method.clone(), r.metric.clone()))
            .or_default();
        if r.value.is_finite() {
            entry.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|((scenario_id, method, metric), mut v)| {
            v.sort_by(f64::total_cmp);
            let q1 = quantile(&v, 0.25);
            let q3 = quantile(&v, 0.75);
            let failures = failures.get(&(scenario_id.clone(), method.clone())).copied().unwrap_or(0);
            SummaryRow {
                count: v.len(),
                failures,
                median: quantile(&v, 0.5),
                q1,
                q3,
                iqr: q3 - q1,
                scenario_id,
                method,
                metric,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "scenario_id",
    "method",
    "metric",
    "count",
    "failures",
    "median",
    "q1",
    "q3",
    "iqr",
];

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let map = |e: csv::Error| csv_error(path, e);
    w.write_record(SUMMARY_HEADER).map_err(map)?;
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.method.clone(),
            r.metric.clone(),
            r.count.to_string(),
            r.failures.to_string(),
            fmt_f64(r.median),
            fmt_f64(r.q1),
            fmt_f64(r.q3),
            fmt_f64(r.iqr),
        ])
        .map_err(map)?;
    }
    finish(w, path)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.75), 3.25);
        assert_eq!(quantile(&[5.0], 0.25), 5.0);
        assert!(quantile(&[], 0.5).is_nan());
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn zero_loadings_leave_only_outcomes() {
        let model = FactorModel::zeros(3, 3, 2, 1);
        let dot = path_diagram_dot(&model, &names("x", 3), &names("y", 2)).unwrap();
        assert_eq!(dot.matches("->").count(), 0);
        assert_eq!(dot.matches("shape=box").count(), 2);
        assert_eq!(dot.matches("shape=ellipse").count(), 0);
    }

    #[test]
    fn rank_one_counts_and_dashes() {
        let w = DMatrix::from_column_slice(3, 1, &[0.5, 0.0, -1.25]);
        let v = DMatrix::from_column_slice(2, 1, &[0.6, -0.8]);
        let model = FactorModel::new(w, v, DMatrix::zeros(4, 2)).unwrap();
        let dot = path_diagram_dot(&model, &names("x", 3), &names("y", 2)).unwrap();
        assert_eq!(dot.matches("shape=box").count(), 4);
        assert_eq!(dot.matches("shape=ellipse").count(), 1);
        assert_eq!(dot.matches("->").count(), 4);
        assert_eq!(dot.matches("style=dashed").count(), 2);
        assert!(dot.contains("label=\"-0.800\""));
        assert!(path_diagram_dot(&model, &names("x", 2), &names("y", 2)).is_err());
    }
}
