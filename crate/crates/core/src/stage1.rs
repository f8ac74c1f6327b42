//! First-stage price regressions for the control function.
//!
//! Each endogenous alternative gets its own least-squares regression of the
//! price on instruments and exogenous covariates. The residuals are attached
//! to the dataset as an alternative attribute and enter the second-stage
//! utility through `control` terms.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest signal rank deficiency.
pub const RANK_TOL: f64 = 1e-10;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageSpec {
    /// Alternative attribute holding the endogenous price.
    pub endogenous: String,
    /// Alternatives whose price is treated as endogenous.
    pub alternatives: Vec<String>,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Name of the residual column attached to the dataset.
    #[serde(default)]
    pub residual: Option<String>,
}

impl FirstStageSpec {
    pub fn residual_column(&self) -> String {
        self.residual
            .clone()
            .unwrap_or_else(|| format!("xi_{}", self.endogenous))
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() {
            return Err(Error::Spec("first stage needs at least one instrument".into()));
        }
        if self.alternatives.is_empty() {
            return Err(Error::Spec("first stage names no endogenous alternative".into()));
        }
        if let Some(c) = self.covariates.iter().find(|c| self.instruments.contains(c)) {
            return Err(Error::Spec(format!(
                "`{c}` listed both as instrument and as exogenous covariate"
            )));
        }
        Ok(())
    }
}

/// Least-squares fit with the summaries reported for a first stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub intercept: bool,
    pub sse: f64,
    pub sst: f64,
    pub r_squared: f64,
    /// `SSE / (N − p)`.
    pub residual_variance: f64,
    pub n: usize,
}

impl OlsFit {
    /// Fits `y = X b` through a Householder QR factorisation. Rank is checked on
    /// the singular values of `R`. When `intercept` is set the first column of
    /// `x` must be the constant.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, names: Vec<String>, intercept: bool) -> Result<Self> {
        let (n, p) = x.shape();
        if names.len() != p {
            return Err(Error::Spec("regressor names do not match design columns".into()));
        }
        if y.len() != n {
            return Err(Error::Spec("response length does not match design rows".into()));
        }
        if n <= p {
            return Err(Error::Numerical(format!(
                "insufficient rows: {n} observations for {p} regressors"
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in regression data".into()));
        }
        let qr = x.clone().qr();
        let r = qr.r();
        let svd = r.clone().svd(false, true);
        let sv = &svd.singular_values;
        let max = sv.max();
        let (imin, min) = sv.argmin();
        if !(max > 0.0) || min < RANK_TOL * max {
            let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
            let row = v_t.row(imin);
            let peak = row.amax();
            let culprits: Vec<&str> = (0..p)
                .filter(|&c| row[c].abs() > 1e-3 * peak)
                .map(|c| names[c].as_str())
                .collect();
            return Err(Error::Numerical(format!(
                "rank-deficient design: collinear columns {}",
                culprits.join(", ")
            )));
        }
        let q = qr.q();
        let qty = q.transpose() * y;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
        let fitted = x * &beta;
        let residuals = y - &fitted;
        let sse = residuals.norm_squared();
        let sst = if intercept {
            let mean = y.mean();
            y.iter().map(|v| (v - mean).powi(2)).sum()
        } else {
            y.norm_squared()
        };
        let df = (n - p) as f64;
        let residual_variance = sse / df;
        let r_inv = r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
        let std_errors: Vec<f64> = (0..p)
            .map(|i| (residual_variance * r_inv.row(i).norm_squared()).sqrt())
            .collect();
        let coefficients: Vec<f64> = beta.iter().copied().collect();
        let t_stats = coefficients
            .iter()
            .zip(&std_errors)
            .map(|(b, s)| if *s > 0.0 { b / s } else { f64::NAN })
            .collect();
        let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
        Ok(Self {
            names,
            coefficients,
            std_errors,
            t_stats,
            fitted: fitted.iter().copied().collect(),
            residuals: residuals.iter().copied().collect(),
            intercept,
            sse,
            sst,
            r_squared,
            residual_variance,
            n,
        })
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    /// Degrees of freedom `(k, N − p)` of the overall F test, `k` the number
    /// of slopes.
    pub fn f_degrees_of_freedom(&self) -> (usize, usize) {
        let p = self.n_params();
        let k = if self.intercept { p - 1 } else { p };
        (k, self.n - p)
    }

    /// Two-sided p-values of the coefficient t statistics.
    pub fn p_values(&self) -> Vec<f64> {
        let df = (self.n - self.n_params()) as f64;
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        self.t_stats
            .iter()
            .map(|t| {
                if t.is_finite() {
                    2.0 * dist.sf(t.abs())
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

/// Overall F statistic (all slopes zero) and its upper-tail p-value.
pub fn f_statistic(fit: &OlsFit) -> Result<(f64, f64)> {
    let (k, df2) = fit.f_degrees_of_freedom();
    if k == 0 {
        return Err(Error::Numerical("F undefined without slope regressors".into()));
    }
    if !(fit.sse > 0.0) || fit.sse <= 1e-24 * fit.sst.max(1.0) {
        return Err(Error::Numerical("F undefined under perfect fit".into()));
    }
    let ssr = fit.sst - fit.sse;
    let f = (ssr / k as f64) / (fit.sse / df2 as f64);
    let dist =
        FisherSnedecor::new(k as f64, df2 as f64).map_err(|e| Error::Numerical(format!("F distribution: {e}")))?;
    Ok((f, dist.sf(f.max(0.0))))
}

/// First-stage regression for one endogenous alternative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageRegression {
    pub alternative: String,
    pub fit: OlsFit,
    /// Dataset row of each regression observation.
    pub rows: Vec<usize>,
    pub f_stat: f64,
    pub f_p_value: f64,
}

impl FirstStageRegression {
    /// Instrument coefficients γ̂ and covariate coefficients δ̂ by name.
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.fit
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| self.fit.coefficients[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageResult {
    pub spec: FirstStageSpec,
    pub regressions: Vec<FirstStageRegression>,
    /// Dataset size the regressions were run on.
    pub n_obs: usize,
}

impl FirstStageResult {
    /// Structured text report: coefficients with z-statistics, then F, p and R².
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "First stage: {} on instruments and covariates",
            self.spec.endogenous
        );
        for reg in &self.regressions {
            let _ = writeln!(out, "\n[{}]  N = {}", reg.alternative, reg.fit.n);
            let _ = writeln!(
                out,
                "{:<28} {:>14} {:>12} {:>10}",
                "regressor", "estimate", "std. err.", "z-stat."
            );
            for i in 0..reg.fit.n_params() {
                let _ = writeln!(
                    out,
                    "{:<28} {:>14.6} {:>12.6} {:>10.3}",
                    reg.fit.names[i], reg.fit.coefficients[i], reg.fit.std_errors[i], reg.fit.t_stats[i]
                );
            }
            let (d1, d2) = reg.fit.f_degrees_of_freedom();
            let _ = writeln!(
                out,
                "F-stat. {:.6} (df {d1}, {d2})  p-val. {:.6e}  R-squared {:.6}",
                reg.f_stat, reg.f_p_value, reg.fit.r_squared
            );
        }
        out
    }
}

enum Regressor {
    Alt(usize),
    Trip(usize),
}

fn resolve(dataset: &ChoiceDataset, name: &str) -> Result<Regressor> {
    if let Some(a) = dataset.schema().alt_index(name) {
        Ok(Regressor::Alt(a))
    } else if let Some(b) = dataset.schema().trip_index(name) {
        Ok(Regressor::Trip(b))
    } else {
        Err(Error::Spec(format!("first-stage column `{name}` not in dataset")))
    }
}

/// One least-squares regression per endogenous alternative over the
/// observations where that alternative is available.
pub fn ols_fit(spec: &FirstStageSpec, dataset: &ChoiceDataset) -> Result<FirstStageResult> {
    spec.validate()?;
    let price = dataset.alt_attr_index(&spec.endogenous)?;
    let columns: Vec<&String> = spec.instruments.iter().chain(&spec.covariates).collect();
    let regressors = columns
        .iter()
        .map(|c| resolve(dataset, c))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = Vec::new();
    if spec.intercept {
        names.push("intercept".into());
    }
    names.extend(columns.iter().map(|c| c.to_string()));

    let mut regressions = Vec::new();
    for label in &spec.alternatives {
        let j = dataset.alt_index(label)?;
        let rows: Vec<usize> = (0..dataset.len())
            .filter(|&n| dataset.observations()[n].available[j])
            .collect();
        let p = names.len();
        let mut x = DMatrix::zeros(rows.len(), p);
        let mut y = DVector::zeros(rows.len());
        for (i, &n) in rows.iter().enumerate() {
            let obs = &dataset.observations()[n];
            y[i] = obs.alt_attrs[j][price];
            let mut c = 0;
            if spec.intercept {
                x[(i, 0)] = 1.0;
                c = 1;
            }
            for (r, reg) in regressors.iter().enumerate() {
                let v = match reg {
                    Regressor::Alt(a) => obs.alt_attrs[j][*a],
                    Regressor::Trip(b) => obs.trip_attrs[*b],
                };
                if !v.is_finite() {
                    return Err(Error::Spec(format!(
                        "first-stage column `{}` missing for `{label}` in observation {}",
                        columns[r], obs.obs_id
                    )));
                }
                x[(i, c + r)] = v;
            }
            if !y[i].is_finite() {
                return Err(Error::Spec(format!(
                    "price `{}` missing for `{label}` in observation {}",
                    spec.endogenous, obs.obs_id
                )));
            }
        }
        let fit = OlsFit::fit(&x, &y, names.clone(), spec.intercept)
            .map_err(|e| Error::Numerical(format!("first stage for `{label}`: {e}")))?;
        let (f_stat, f_p_value) = f_statistic(&fit).unwrap_or((f64::NAN, f64::NAN));
        regressions.push(FirstStageRegression {
            alternative: label.clone(),
            fit,
            rows,
            f_stat,
            f_p_value,
        });
    }
    Ok(FirstStageResult {
        spec: spec.clone(),
        regressions,
        n_obs: dataset.len(),
    })
}

/// Adds the residual column `ξ̂` to the dataset. Alternatives without a
/// first stage get `NaN` in that column.
pub fn attach_control_terms(dataset: &ChoiceDataset, result: &FirstStageResult) -> Result<ChoiceDataset> {
    if result.n_obs != dataset.len() {
        return Err(Error::Spec(format!(
            "first stage was run on {} observations, dataset has {}",
            result.n_obs,
            dataset.len()
        )));
    }
    let j_count = dataset.n_alternatives();
    let mut column = vec![vec![f64::NAN; j_count]; dataset.len()];
    for reg in &result.regressions {
        let j = dataset.alt_index(&reg.alternative)?;
        for (&n, &e) in reg.rows.iter().zip(&reg.fit.residuals) {
            column[n][j] = e;
        }
        for (n, obs) in dataset.observations().iter().enumerate() {
            if obs.available[j] && column[n][j].is_nan() {
                return Err(Error::Spec(format!(
                    "missing residual for available alternative `{}` in observation {}",
                    reg.alternative, obs.obs_id
                )));
            }
        }
    }
    dataset.with_alt_column(&result.spec.residual_column(), &column)
}
