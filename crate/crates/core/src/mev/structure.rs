use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound imposed on nest parameters during estimation.
pub const LAMBDA_MIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nest {
    pub name: String,
    pub alternatives: Vec<String>,
    /// Name of the λ parameter; nests may share one.
    pub param: String,
}

/// Generating-function family of the choice model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MevStructure {
    #[default]
    Mnl,
    Nested {
        nests: Vec<Nest>,
    },
}

impl MevStructure {
    pub fn is_mnl(&self) -> bool {
        matches!(self, MevStructure::Mnl)
    }

    pub fn nest_params(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if let MevStructure::Nested { nests } = self {
            for nest in nests {
                if !out.contains(&nest.param) {
                    out.push(nest.param.clone());
                }
            }
        }
        out
    }

    /// Nest index of every alternative, checking that nests partition the set.
    pub fn membership(&self, labels: &[String]) -> Result<Vec<Option<usize>>> {
        match self {
            MevStructure::Mnl => Ok(vec![None; labels.len()]),
            MevStructure::Nested { nests } => {
                let mut member = vec![None; labels.len()];
                for (m, nest) in nests.iter().enumerate() {
                    if nest.alternatives.is_empty() {
                        return Err(Error::Spec(format!("nest `{}` is empty", nest.name)));
                    }
                    for label in &nest.alternatives {
                        let j = labels.iter().position(|l| l == label).ok_or_else(|| {
                            Error::Spec(format!("nest `{}` names unknown alternative `{label}`", nest.name))
                        })?;
                        if member[j].is_some() {
                            return Err(Error::Spec(format!(
                                "alternative `{label}` belongs to more than one nest"
                            )));
                        }
                        member[j] = Some(m);
                    }
                }
                if let Some(j) = member.iter().position(Option::is_none) {
                    return Err(Error::Spec(format!(
                        "alternative `{}` is not assigned to a nest",
                        labels[j]
                    )));
                }
                Ok(member)
            }
        }
    }
}

pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln G_j` for a nested-logit generating function given per-alternative
/// nest index and nest parameters. Unavailable entries are left at 0 and
/// excluded from the nest sums. MNL rows (no nest) are 0.
///
/// `ln G_j = (1/λ_m − 1) V_j + (λ_m − 1) L_m`, `L_m = ln Σ_{i∈m} exp(V_i / λ_m)`.
pub(crate) fn ln_g_nested(
    v: &[f64],
    available: &[bool],
    nest_of: &[Option<usize>],
    lambdas: &[f64],
    out_ln_g: &mut [f64],
    out_logsum: &mut [f64],
) {
    for (m, slot) in out_logsum.iter_mut().enumerate() {
        let lambda = lambdas[m];
        *slot = logsumexp(
            (0..v.len())
                .filter(|&j| available[j] && nest_of[j] == Some(m))
                .map(|j| v[j] / lambda),
        );
    }
    for j in 0..v.len() {
        out_ln_g[j] = match nest_of[j] {
            Some(m) if available[j] => {
                let lambda = lambdas[m];
                (1.0 / lambda - 1.0) * v[j] + (lambda - 1.0) * out_logsum[m]
            }
            _ => 0.0,
        };
    }
}
