//! Systematic utilities, MEV generating functions, corrected choice
//! probabilities and the sampling-corrected conditional log-likelihood.
//!
//! With correction weights `α`, the probability entering the likelihood is
//! `softmax_j(V_nj + ln G_nj + ln α_nj)` over available alternatives, where
//! `G_nj` is the derivative of the generating function with respect to
//! `exp(V_nj)`. For MNL `ln G_nj ≡ 0`.
//!
//! The free functions here compile a [`Model`] on every call and are meant for
//! one-off evaluation; the estimator works on a compiled model directly.

mod model;
mod spec;
mod structure;

pub use model::{Model, ParamInfo, ParamKind, MAX_ABS_UTILITY};
pub use spec::{ParamSetting, ParameterVector, Term, UtilitySpec, CYCLIC_SUFFIXES};
pub use structure::{MevStructure, Nest, LAMBDA_MIN};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};
use crate::sampling::AlphaWeights;

fn single(dataset: &ChoiceDataset, n: usize) -> Result<ChoiceDataset> {
    if n >= dataset.len() {
        return Err(Error::Domain(format!("observation index {n} out of range")));
    }
    Ok(dataset.select(&[n]))
}

/// `V_nj` for every alternative of observation `n` (0 where unavailable).
pub fn systematic_utility(
    spec: &UtilitySpec,
    params: &ParameterVector,
    dataset: &ChoiceDataset,
    n: usize,
) -> Result<Vec<f64>> {
    let one = single(dataset, n)?;
    let model = Model::new(&MevStructure::Mnl, spec, &one)?;
    let theta = model.theta_from(params)?;
    Ok(model.utilities(&theta, 0))
}

/// `ln G_j` of the generating function at utilities `v`. Entries for
/// unavailable alternatives are 0.
pub fn log_g_derivative(
    structure: &MevStructure,
    labels: &[String],
    v: &[f64],
    available: &[bool],
    params: &ParameterVector,
) -> Result<Vec<f64>> {
    if v.len() != labels.len() || available.len() != labels.len() {
        return Err(Error::Domain("utility vector does not match alternatives".into()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite utility {x}")));
    }
    match structure {
        MevStructure::Mnl => Ok(vec![0.0; v.len()]),
        MevStructure::Nested { nests } => {
            let nest_of = structure.membership(labels)?;
            let lambdas = nests
                .iter()
                .map(|nest| {
                    let l = params
                        .get(&nest.param)
                        .ok_or_else(|| Error::Spec(format!("no value for nest parameter `{}`", nest.param)))?;
                    if l <= 0.0 {
                        return Err(Error::Domain(format!(
                            "nest parameter `{}` must be positive, got {l}",
                            nest.param
                        )));
                    }
                    Ok(l)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut ln_g = vec![0.0; v.len()];
            let mut logsum = vec![0.0; nests.len()];
            structure::ln_g_nested(v, available, &nest_of, &lambdas, &mut ln_g, &mut logsum);
            Ok(ln_g)
        }
    }
}

/// Choice probabilities of observation `n`, corrected by `α` when given.
pub fn choice_probability(
    structure: &MevStructure,
    spec: &UtilitySpec,
    params: &ParameterVector,
    dataset: &ChoiceDataset,
    n: usize,
    alpha: Option<&AlphaWeights>,
) -> Result<Vec<f64>> {
    let one = single(dataset, n)?;
    let alpha = alpha.map(|a| a.select(&[n]));
    let model = Model::new(structure, spec, &one)?;
    let theta = model.theta_from(params)?;
    model.probabilities(&theta, 0, alpha.as_ref())
}

/// Sampling-corrected conditional log-likelihood.
pub fn corrected_log_likelihood(
    structure: &MevStructure,
    spec: &UtilitySpec,
    params: &ParameterVector,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
) -> Result<f64> {
    alpha.check(dataset)?;
    let model = Model::new(structure, spec, dataset)?;
    let theta = model.theta_from(params)?;
    model.log_likelihood(&theta, Some(alpha))
}

/// Analytic gradient of the corrected log-likelihood, aligned with
/// `params.names`. Names the model does not use get a zero component.
pub fn gradient(
    structure: &MevStructure,
    spec: &UtilitySpec,
    params: &ParameterVector,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
) -> Result<Vec<f64>> {
    alpha.check(dataset)?;
    let model = Model::new(structure, spec, dataset)?;
    let theta = model.theta_from(params)?;
    let (_, grad) = model.log_likelihood_and_gradient(&theta, Some(alpha))?;
    Ok(params
        .names
        .iter()
        .map(|name| model.param_index(name).map_or(0.0, |k| grad[k]))
        .collect())
}

#[cfg(test)]
mod tests;
