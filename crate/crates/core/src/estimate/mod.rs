//! Maximum-likelihood estimation of the sampling-corrected MEV model, the
//! two-stage control-function procedure, bootstrap standard errors and
//! likelihood-ratio tests.

pub mod optimizer;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};
use crate::mev::{MevStructure, Model, ParameterVector, Term, UtilitySpec};
use crate::sampling::AlphaWeights;
use crate::stage1::{attach_control_terms, ols_fit, FirstStageResult, FirstStageSpec};
use nalgebra::DMatrix;
use optimizer::{minimize_bfgs_with, newton_polish, numerical_hessian, Bounds};

/// Share of bootstrap replicates allowed to fail before the run is rejected.
pub const MAX_DROPPED_SHARE: f64 = 0.2;

const POLISH_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Max-norm of the projected log-likelihood gradient at convergence.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Starting values overriding those of the utility specification.
    pub start_values: BTreeMap<String, f64>,
    /// Bootstrap resamples for two-stage fits; 0 disables.
    pub bootstrap: usize,
    pub seed: u64,
    /// Compute asymptotic standard errors from the numerical Hessian.
    pub asymptotic_std_errors: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            start_values: BTreeMap::new(),
            bootstrap: 100,
            seed: 0,
            asymptotic_std_errors: true,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.bootstrap == 1 {
            return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdErrorSource {
    Asymptotic,
    Bootstrap,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub z: Option<f64>,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Aligned with the parameter order of the fitted model; fixed
    /// parameters get 0.
    pub std_errors: Vec<f64>,
    pub requested: usize,
    pub used: usize,
    pub dropped: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub structure: MevStructure,
    pub spec: UtilitySpec,
    pub parameters: Vec<ParameterEstimate>,
    pub std_error_source: StdErrorSource,
    /// Hessian-based standard errors, kept even when bootstrap ones are reported.
    pub asymptotic_std_errors: Vec<Option<f64>>,
    pub bootstrap: Option<BootstrapSummary>,
    /// Why asymptotic standard errors are missing, if they are.
    pub hessian_note: Option<String>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_obs: usize,
    pub sampling_corrected: bool,
    pub first_stage: Option<FirstStageResult>,
}

impl EstimationResult {
    pub fn names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.estimate).collect()
    }

    pub fn parameter_vector(&self) -> ParameterVector {
        ParameterVector {
            names: self.names(),
            values: self.theta(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParameterEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.get(name).map(|p| p.estimate)
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|p| p.std_error)
    }

    fn set_std_errors(&mut self, se: &[Option<f64>], source: StdErrorSource) {
        for (p, s) in self.parameters.iter_mut().zip(se) {
            p.std_error = *s;
            p.z = s.filter(|s| *s > 0.0).map(|s| p.estimate / s);
        }
        self.std_error_source = source;
    }

    /// Human-readable estimates table followed by fit summaries.
    pub fn table(&self) -> String {
        let width = self.parameters.iter().map(|p| p.name.len()).max().unwrap_or(9).max(14);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} {:>14} {:>14} {:>10}",
            "Parameter", "Est.", "Std. err.", "z-stat."
        );
        for p in &self.parameters {
            let se = match (p.fixed, p.std_error) {
                (true, _) => "fixed".to_string(),
                (false, Some(s)) => format_sig(s),
                (false, None) => "n/a".to_string(),
            };
            let z = p.z.map_or("".to_string(), |z| format!("{z:.2}"));
            let _ = writeln!(
                out,
                "{:<width$} {:>14} {:>14} {:>10}",
                p.name,
                format_sig(p.estimate),
                se,
                z
            );
        }
        let _ = writeln!(
            out,
            "Std. errors: {}",
            match self.std_error_source {
                StdErrorSource::Asymptotic => "asymptotic".to_string(),
                StdErrorSource::Bootstrap => {
                    let b = self.bootstrap.as_ref();
                    format!(
                        "bootstrap ({} resamples, {} dropped)",
                        b.map_or(0, |b| b.used),
                        b.map_or(0, |b| b.dropped)
                    )
                }
                StdErrorSource::Unavailable => "unavailable".to_string(),
            }
        );
        if let Some(note) = &self.hessian_note {
            let _ = writeln!(out, "Hessian: {note}");
        }
        let _ = writeln!(out, "Null log-lik. {}", format_sig(self.null_log_likelihood));
        let _ = writeln!(out, "Log-lik.      {}", format_sig(self.log_likelihood));
        let _ = writeln!(out, "Observations  {}", self.n_obs);
        let _ = writeln!(
            out,
            "Converged     {} ({} iterations, gradient norm {:.3e})",
            self.converged, self.iterations, self.gradient_norm
        );
        out
    }
}

/// Formats with at least six significant digits.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000000".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(2) as usize;
    format!("{x:.decimals$}")
}

/// Log-likelihood at θ = 0: `Σ_n w_n ln(α_{n,y_n} / Σ_j α_nj)` over available alternatives.
pub fn null_log_likelihood(dataset: &ChoiceDataset, alpha: &AlphaWeights) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    alpha.check(dataset)?;
    let mut total = 0.0;
    for (n, obs) in dataset.observations().iter().enumerate() {
        let denom: f64 = (0..dataset.n_alternatives())
            .filter(|&j| obs.available[j])
            .map(|j| alpha.get(n, j))
            .sum();
        total += obs.weight * (alpha.get(n, obs.chosen) / denom).ln();
    }
    Ok(total)
}

/// Objective of the optimiser over free parameters: `(-ℓ, -∇ℓ)`.
struct NegLogLik<'a> {
    model: &'a Model,
    alpha: &'a AlphaWeights,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl NegLogLik<'_> {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (a, &k) in self.free.iter().enumerate() {
            theta[k] = x[a];
        }
        theta
    }
}

impl optimizer::Objective for NegLogLik<'_> {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, grad) = self
            .model
            .log_likelihood_and_gradient(&self.full(x), Some(self.alpha))?;
        Ok((-ll, self.free.iter().map(|&k| -grad[k]).collect()))
    }
}

/// Maximises the corrected log-likelihood. A run that exhausts its
/// iterations is returned with `converged = false`.
pub fn maximize_likelihood(
    structure: &MevStructure,
    spec: &UtilitySpec,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
    config: &EstimationConfig,
) -> Result<EstimationResult> {
    Ok(fit_likelihood(structure, spec, dataset, alpha, config, None)?.0)
}

/// Free-parameter inverse Hessian of `-ℓ` at the estimate.
type Curvature = DMatrix<f64>;

/// The likelihood fit, optionally seeding BFGS with `curvature`. Also
/// returns the inverse Hessian when asymptotic standard errors were computed.
fn fit_likelihood(
    structure: &MevStructure,
    spec: &UtilitySpec,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
    config: &EstimationConfig,
    curvature: Option<&Curvature>,
) -> Result<(EstimationResult, Option<Curvature>)> {
    config.validate()?;
    dataset.check_estimable()?;
    alpha.check(dataset)?;
    let model = Model::new(structure, spec, dataset)?;
    let mut base = model.start_values();
    for (name, value) in &config.start_values {
        if let Some(k) = model.param_index(name) {
            base[k] = *value;
        }
    }
    let free = model.free_indices();
    let params = model.params();
    let bounds = Bounds {
        lower: free.iter().map(|&k| params[k].lower).collect(),
        upper: free.iter().map(|&k| params[k].upper).collect(),
    };
    let x0: Vec<f64> = free
        .iter()
        .map(|&k| base[k].clamp(params[k].lower, params[k].upper))
        .collect();
    let obj = NegLogLik {
        model: &model,
        alpha,
        base,
        free: free.clone(),
    };
    let mut out = minimize_bfgs_with(&obj, &x0, &bounds, config.tolerance, config.max_iterations, curvature)?;
    if !out.converged {
        out = newton_polish(&obj, out, &bounds, config.tolerance, POLISH_STEPS)?;
    }
    let theta = obj.full(&out.x);
    let log_likelihood = model.log_likelihood(&theta, Some(alpha))?;
    if !log_likelihood.is_finite() {
        return Err(Error::Numerical("log-likelihood not finite at the estimate".into()));
    }

    let mut asymptotic = vec![None; theta.len()];
    let mut hessian_note = None;
    let mut inverse_hessian = None;
    if config.asymptotic_std_errors && !free.is_empty() {
        match asymptotic_std_errors(&obj, &out.x, &model, &free) {
            Ok((se, inv)) => {
                for (a, &k) in free.iter().enumerate() {
                    asymptotic[k] = Some(se[a]);
                }
                inverse_hessian = Some(inv);
            }
            Err(note) => hessian_note = Some(note),
        }
    }
    let mut result = EstimationResult {
        structure: structure.clone(),
        spec: spec.clone(),
        parameters: params
            .iter()
            .zip(&theta)
            .map(|(p, &v)| ParameterEstimate {
                name: p.name.clone(),
                estimate: v,
                std_error: None,
                z: None,
                fixed: p.fixed,
            })
            .collect(),
        std_error_source: StdErrorSource::Unavailable,
        asymptotic_std_errors: asymptotic.clone(),
        bootstrap: None,
        hessian_note,
        log_likelihood,
        null_log_likelihood: null_log_likelihood(dataset, alpha)?,
        converged: out.converged,
        iterations: out.iterations,
        gradient_norm: bounds.projected_gradient_norm(&out.x, &out.g),
        n_obs: dataset.len(),
        sampling_corrected: !matches!(alpha, AlphaWeights::Uniform { .. }),
        first_stage: None,
    };
    if config.asymptotic_std_errors && result.hessian_note.is_none() {
        result.set_std_errors(&asymptotic, StdErrorSource::Asymptotic);
    }
    Ok((result, inverse_hessian))
}

/// Standard errors from the inverse of the negative log-likelihood Hessian
/// over free parameters, or a note explaining why they are unavailable.
fn asymptotic_std_errors(
    obj: &NegLogLik,
    x: &[f64],
    model: &Model,
    free: &[usize],
) -> std::result::Result<(Vec<f64>, Curvature), String> {
    let hess = numerical_hessian(obj, x).map_err(|e| format!("evaluation failed: {e}"))?;
    let scale = hess.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let flat: Vec<String> = (0..free.len())
        .filter(|&a| hess[(a, a)].abs() <= 1e-10 * scale.max(1e-300))
        .map(|a| model.params()[free[a]].name.clone())
        .collect();
    if !flat.is_empty() {
        return Err(format!("singular; not identified: {}", flat.join(", ")));
    }
    let Some(chol) = hess.clone().cholesky() else {
        return Err("not positive definite".into());
    };
    let inv = chol.inverse();
    let se: Vec<f64> = (0..free.len()).map(|a| inv[(a, a)].sqrt()).collect();
    if se.iter().any(|s| !s.is_finite()) {
        return Err("singular".into());
    }
    Ok((se, inv))
}

/// Model and stages re-run on every bootstrap resample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub structure: MevStructure,
    pub spec: UtilitySpec,
    pub first_stage: Option<FirstStageSpec>,
}

impl Pipeline {
    /// One pass of every stage without bootstrap.
    pub fn fit(
        &self,
        dataset: &ChoiceDataset,
        alpha: &AlphaWeights,
        config: &EstimationConfig,
    ) -> Result<EstimationResult> {
        Ok(self.fit_seeded(dataset, alpha, config, None)?.0)
    }

    fn fit_seeded(
        &self,
        dataset: &ChoiceDataset,
        alpha: &AlphaWeights,
        config: &EstimationConfig,
        curvature: Option<&Curvature>,
    ) -> Result<(EstimationResult, Option<Curvature>)> {
        match &self.first_stage {
            None => fit_likelihood(&self.structure, &self.spec, dataset, alpha, config, curvature),
            Some(fs) => {
                let first = ols_fit(fs, dataset)?;
                let augmented = attach_control_terms(dataset, &first)?;
                let (mut result, inv) =
                    fit_likelihood(&self.structure, &self.spec, &augmented, alpha, config, curvature)?;
                result.first_stage = Some(first);
                Ok((result, inv))
            }
        }
    }
}

fn check_control_terms(spec: &UtilitySpec, fs: &FirstStageSpec) -> Result<()> {
    let residual = fs.residual_column();
    for alt in &fs.alternatives {
        let covered = spec.terms.iter().any(
            |t| matches!(t, Term::Control { alternative, residual: r, .. } if alternative == alt && *r == residual),
        );
        if !covered {
            return Err(Error::Spec(format!(
                "no control term for endogenous alternative `{alt}` using residual `{residual}`"
            )));
        }
    }
    Ok(())
}

/// First stage by OLS, residuals attached as control terms, then the
/// corrected likelihood. Bootstrap standard errors replace asymptotic ones
/// when `config.bootstrap > 0`.
pub fn two_stage_estimate(
    structure: &MevStructure,
    spec: &UtilitySpec,
    first_stage_spec: &FirstStageSpec,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
    config: &EstimationConfig,
) -> Result<EstimationResult> {
    config.validate()?;
    first_stage_spec.validate()?;
    check_control_terms(spec, first_stage_spec)?;
    let pipeline = Pipeline {
        structure: structure.clone(),
        spec: spec.clone(),
        first_stage: Some(first_stage_spec.clone()),
    };
    let mut result = pipeline.fit(dataset, alpha, config)?;
    if config.bootstrap > 0 {
        let mut warm = config.clone();
        warm.start_values = result.names().into_iter().zip(result.theta()).collect();
        let boot = bootstrap_std_errors(&pipeline, dataset, alpha, &warm)?;
        let se: Vec<Option<f64>> = result
            .parameters
            .iter()
            .zip(&boot.std_errors)
            .map(|(p, s)| (!p.fixed).then_some(*s))
            .collect();
        result.set_std_errors(&se, StdErrorSource::Bootstrap);
        result.bootstrap = Some(boot);
    }
    Ok(result)
}

/// Observation indices of bootstrap resample `b`.
pub fn resample_indices(seed: u64, b: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Standard deviation (ddof = 1) of the estimates over `config.bootstrap`
/// resamples of whole observations, each re-running every stage of the
/// pipeline from `config.start_values`.
pub fn bootstrap_std_errors(
    pipeline: &Pipeline,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
    config: &EstimationConfig,
) -> Result<BootstrapSummary> {
    let b_count = config.bootstrap;
    if b_count < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 resamples, got {b_count}"
        )));
    }
    let inner = EstimationConfig {
        bootstrap: 0,
        asymptotic_std_errors: false,
        ..config.clone()
    };
    // Curvature at the full-sample estimate seeds every resample's BFGS.
    let probe = EstimationConfig {
        bootstrap: 0,
        asymptotic_std_errors: true,
        ..config.clone()
    };
    let curvature = pipeline
        .fit_seeded(dataset, alpha, &probe, None)
        .ok()
        .and_then(|(_, c)| c);
    let n = dataset.len();
    let fits: Vec<Option<Vec<f64>>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(config.seed, b, n);
            let sample = dataset.select(&idx);
            let a = alpha.select(&idx);
            match pipeline.fit_seeded(&sample, &a, &inner, curvature.as_ref()) {
                Ok((r, _)) if r.converged => Some(r.theta()),
                _ => None,
            }
        })
        .collect();
    let kept: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let dropped = b_count - kept.len();
    if dropped as f64 > MAX_DROPPED_SHARE * b_count as f64 {
        return Err(Error::Numerical(format!(
            "{dropped} of {b_count} bootstrap resamples failed to converge"
        )));
    }
    if kept.len() < 2 {
        return Err(Error::Numerical("fewer than 2 usable bootstrap resamples".into()));
    }
    let k = kept[0].len();
    let m = kept.len() as f64;
    let std_errors = (0..k)
        .map(|i| {
            let mean = kept.iter().map(|t| t[i]).sum::<f64>() / m;
            let ss: f64 = kept.iter().map(|t| (t[i] - mean).powi(2)).sum();
            (ss / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSummary {
        std_errors,
        requested: b_count,
        used: kept.len(),
        dropped,
        seed: config.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Likelihood-ratio test of a restricted model nested in a full one.
pub fn lr_test(loglik_restricted: f64, loglik_full: f64, df: usize) -> Result<LrTest> {
    if df == 0 {
        return Err(Error::Domain("LR test needs df >= 1".into()));
    }
    if !loglik_restricted.is_finite() || !loglik_full.is_finite() {
        return Err(Error::Domain("LR test needs finite log-likelihoods".into()));
    }
    if loglik_full < loglik_restricted - 1e-9 {
        return Err(Error::Domain(format!(
            "models not nested or misfit: full {loglik_full} below restricted {loglik_restricted}"
        )));
    }
    let statistic = (2.0 * (loglik_full - loglik_restricted)).max(0.0);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(LrTest {
        statistic,
        df,
        p_value: chi.sf(statistic),
    })
}

/// Number of free utility parameters in `full` absent from `restricted`.
pub fn extra_parameters(full: &EstimationResult, restricted: &EstimationResult) -> usize {
    full.parameters
        .iter()
        .filter(|p| !p.fixed && restricted.get(&p.name).is_none())
        .count()
}
