use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffixes of the six departure-time harmonics, in feature order.
pub const CYCLIC_SUFFIXES: [&str; 6] = ["sin1", "sin2", "sin3", "cos1", "cos2", "cos3"];

/// One additive block of the systematic utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    /// Alternative attribute with one coefficient shared by the listed
    /// alternatives (all alternatives when the list is empty).
    Generic {
        attribute: String,
        #[serde(default)]
        alternatives: Vec<String>,
        param: String,
    },
    /// Alternative attribute with a coefficient for a single alternative.
    AltSpecific {
        attribute: String,
        alternative: String,
        param: String,
    },
    /// Alternative-specific constant.
    Asc { alternative: String, param: String },
    /// Trip attribute with a coefficient per listed alternative, named
    /// `{prefix}_{alternative}`. The reference alternative is implicitly zero.
    TripSpecific {
        attribute: String,
        alternatives: Vec<String>,
        prefix: String,
    },
    /// Six harmonics of a departure-minute trip attribute for one alternative,
    /// parameters `{prefix}_sin1 .. {prefix}_cos3`.
    CyclicTime {
        attribute: String,
        alternative: String,
        prefix: String,
    },
    /// First-stage residual column entering one alternative's utility.
    Control {
        alternative: String,
        residual: String,
        param: String,
    },
}

impl Term {
    /// Parameter names introduced by this term, in order.
    pub fn param_names(&self) -> Vec<String> {
        match self {
            Term::Generic { param, .. }
            | Term::AltSpecific { param, .. }
            | Term::Asc { param, .. }
            | Term::Control { param, .. } => vec![param.clone()],
            Term::TripSpecific {
                alternatives, prefix, ..
            } => alternatives.iter().map(|a| format!("{prefix}_{a}")).collect(),
            Term::CyclicTime { prefix, .. } => CYCLIC_SUFFIXES.iter().map(|s| format!("{prefix}_{s}")).collect(),
        }
    }

    pub fn is_control(&self) -> bool {
        matches!(self, Term::Control { .. })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Generic { attribute, param, .. } => write!(f, "generic({attribute} -> {param})"),
            Term::AltSpecific {
                attribute,
                alternative,
                param,
            } => write!(f, "alt_specific({attribute}@{alternative} -> {param})"),
            Term::Asc { alternative, param } => write!(f, "asc({alternative} -> {param})"),
            Term::TripSpecific { attribute, prefix, .. } => write!(f, "trip_specific({attribute} -> {prefix}_*)"),
            Term::CyclicTime {
                attribute,
                alternative,
                prefix,
            } => write!(f, "cyclic_time({attribute}@{alternative} -> {prefix}_*)"),
            Term::Control {
                alternative,
                residual,
                param,
            } => write!(f, "control({residual}@{alternative} -> {param})"),
        }
    }
}

/// Starting value and fixed/free status of a named parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSetting {
    #[serde(default)]
    pub start: Option<f64>,
    #[serde(default)]
    pub fixed: bool,
}

/// Declarative linear-in-parameters utility specification.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub terms: Vec<Term>,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSetting>,
}

impl UtilitySpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self {
            terms,
            parameters: BTreeMap::new(),
        }
    }

    /// Distinct parameter names in order of first appearance.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for term in &self.terms {
            for name in term.param_names() {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }

    /// Same specification without control-function terms.
    pub fn without_control(&self) -> Self {
        let terms: Vec<Term> = self.terms.iter().filter(|t| !t.is_control()).cloned().collect();
        let kept = UtilitySpec::new(terms.clone()).param_names();
        Self {
            terms,
            parameters: self
                .parameters
                .iter()
                .filter(|(k, _)| kept.contains(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn control_params(&self) -> Vec<String> {
        self.terms
            .iter()
            .filter(|t| t.is_control())
            .flat_map(Term::param_names)
            .collect()
    }

    pub fn has_control(&self) -> bool {
        self.terms.iter().any(Term::is_control)
    }
}

/// Named parameter values θ.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Spec(format!(
                "{} parameter names but {} values",
                names.len(),
                values.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Spec(format!("parameter `{n}` listed twice")));
            }
        }
        Ok(Self { names, values })
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let (names, values) = pairs.into_iter().map(|(n, v)| (n.into(), v)).unzip();
        Self::new(names, values)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.values[i] = value,
            None => {
                self.names.push(name.to_string());
                self.values.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().copied())
    }
}
