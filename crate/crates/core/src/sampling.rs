//! Stratified sampling protocols and the α correction weights of the
//! conditional maximum-likelihood estimator.
//!
//! Subsample `s` has sample share `H_s`, population share `Q_s` and a
//! qualification rule `R_s(j, x_n)`. The weight entering the corrected
//! likelihood is `α_nj = Σ_s R_s(j, x_n) H_s / Q_s`.

use serde::{Deserialize, Serialize};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};

const SHARE_TOL: f64 = 1e-9;
const CHOICE_BASED_TOL: f64 = 1e-6;

/// Which population members qualify for a subsample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Qualification {
    /// `R_s = 1` when the chosen alternative is in the set, else 0.
    ChoiceBased { alternatives: Vec<usize> },
    /// Dense `(alternative, stratum) -> R_s` table; unlisted cells are 0.
    General { table: Vec<RateCell> },
}

/// One cell `R_s(alternative, stratum)` of a general qualification table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub alternative: usize,
    pub stratum: i64,
    pub rate: f64,
}

impl RateCell {
    pub fn new(alternative: usize, stratum: i64, rate: f64) -> Self {
        Self {
            alternative,
            stratum,
            rate,
        }
    }
}

impl Qualification {
    fn rate(&self, alt: usize, stratum: Option<i64>) -> Result<f64> {
        match self {
            Qualification::ChoiceBased { alternatives } => Ok(if alternatives.contains(&alt) { 1.0 } else { 0.0 }),
            Qualification::General { table } => {
                let stratum =
                    stratum.ok_or_else(|| Error::Protocol("general qualification needs a stratum column".into()))?;
                Ok(table
                    .iter()
                    .find(|c| c.alternative == alt && c.stratum == stratum)
                    .map_or(0.0, |c| c.rate))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub id: i64,
    /// Share of this subsample in the total sample, `N_s / N`.
    pub h: f64,
    /// Population share of the qualifying subpopulation.
    pub q: f64,
    pub qualification: Qualification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingProtocol {
    pub subsamples: Vec<Subsample>,
    /// Trip attribute holding the integer exogenous stratum code.
    #[serde(default)]
    pub stratum_attribute: Option<String>,
}

impl SamplingProtocol {
    /// Plain random sampling: one subsample everyone qualifies for.
    pub fn random(n_alternatives: usize) -> Self {
        Self {
            subsamples: vec![Subsample {
                id: 0,
                h: 1.0,
                q: 1.0,
                qualification: Qualification::ChoiceBased {
                    alternatives: (0..n_alternatives).collect(),
                },
            }],
            stratum_attribute: None,
        }
    }

    /// One choice-based subsample per alternative, `R_s(j) = 1{j = s}`.
    pub fn choice_based(h: &[f64], q: &[f64]) -> Self {
        Self {
            subsamples: h
                .iter()
                .zip(q)
                .enumerate()
                .map(|(j, (&h, &q))| Subsample {
                    id: j as i64,
                    h,
                    q,
                    qualification: Qualification::ChoiceBased { alternatives: vec![j] },
                })
                .collect(),
            stratum_attribute: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsamples.is_empty() {
            return Err(Error::Protocol("no subsamples declared".into()));
        }
        let total: f64 = self.subsamples.iter().map(|s| s.h).sum();
        if (total - 1.0).abs() > SHARE_TOL {
            return Err(Error::Protocol(format!("sample shares H sum to {total}, expected 1")));
        }
        for s in &self.subsamples {
            if !(s.h >= 0.0 && s.h.is_finite()) {
                return Err(Error::Protocol(format!("subsample {}: invalid H {}", s.id, s.h)));
            }
            if !(s.q > 0.0 && s.q <= 1.0) {
                return Err(Error::Protocol(format!(
                    "subsample {}: population share Q = {} outside (0, 1]",
                    s.id, s.q
                )));
            }
            if let Qualification::General { table } = &s.qualification {
                if self.stratum_attribute.is_none() {
                    return Err(Error::Protocol(format!(
                        "subsample {} uses a general table but no stratum attribute is declared",
                        s.id
                    )));
                }
                if let Some(c) = table.iter().find(|c| !(0.0..=1.0).contains(&c.rate)) {
                    return Err(Error::Protocol(format!(
                        "subsample {}: qualification probability {} outside [0, 1]",
                        s.id, c.rate
                    )));
                }
                for (i, c) in table.iter().enumerate() {
                    if table[..i]
                        .iter()
                        .any(|d| d.alternative == c.alternative && d.stratum == c.stratum)
                    {
                        return Err(Error::Protocol(format!(
                            "subsample {}: duplicate cell (alternative {}, stratum {})",
                            s.id, c.alternative, c.stratum
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every subsample qualifies on the chosen alternative alone,
    /// so α does not vary across observations.
    pub fn is_choice_based(&self) -> bool {
        self.subsamples
            .iter()
            .all(|s| matches!(s.qualification, Qualification::ChoiceBased { .. }))
    }
}

/// Correction weights `α_nj`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaWeights {
    /// `α ≡ 1`: random sampling or correction switched off.
    Uniform { n_alternatives: usize },
    /// Purely choice-based: one weight per alternative.
    ByAlternative { values: Vec<f64> },
    /// General protocol: `values[n][j]`, `NaN` for unavailable alternatives.
    ByObservation { values: Vec<Vec<f64>> },
}

impl AlphaWeights {
    #[inline]
    pub fn get(&self, n: usize, j: usize) -> f64 {
        match self {
            AlphaWeights::Uniform { .. } => 1.0,
            AlphaWeights::ByAlternative { values } => values[j],
            AlphaWeights::ByObservation { values } => values[n][j],
        }
    }

    #[inline]
    pub fn ln(&self, n: usize, j: usize) -> f64 {
        match self {
            AlphaWeights::Uniform { .. } => 0.0,
            _ => self.get(n, j).ln(),
        }
    }

    /// Reindexes observation-level weights after resampling.
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            AlphaWeights::ByObservation { values } => AlphaWeights::ByObservation {
                values: indices.iter().map(|&i| values[i].clone()).collect(),
            },
            other => other.clone(),
        }
    }

    /// Multiplies every weight by `factor` (used to probe scale invariance).
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            AlphaWeights::Uniform { n_alternatives } => AlphaWeights::ByAlternative {
                values: vec![factor; *n_alternatives],
            },
            AlphaWeights::ByAlternative { values } => AlphaWeights::ByAlternative {
                values: values.iter().map(|v| v * factor).collect(),
            },
            AlphaWeights::ByObservation { values } => AlphaWeights::ByObservation {
                values: values
                    .iter()
                    .map(|row| row.iter().map(|v| v * factor).collect())
                    .collect(),
            },
        }
    }

    /// Checks the weights against a dataset's shape.
    pub fn check(&self, dataset: &ChoiceDataset) -> Result<()> {
        let j = dataset.n_alternatives();
        match self {
            AlphaWeights::Uniform { n_alternatives } if *n_alternatives != j => Err(Error::Protocol(format!(
                "α covers {n_alternatives} alternatives, dataset has {j}"
            ))),
            AlphaWeights::ByAlternative { values } if values.len() != j => Err(Error::Protocol(format!(
                "α covers {} alternatives, dataset has {j}",
                values.len()
            ))),
            AlphaWeights::ByObservation { values } if values.len() != dataset.len() => Err(Error::Protocol(format!(
                "α covers {} observations, dataset has {}",
                values.len(),
                dataset.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// `α_nj = Σ_s R_s(j, x_n) H_s / Q_s` for every observation and available alternative.
pub fn compute_alpha(protocol: &SamplingProtocol, dataset: &ChoiceDataset) -> Result<AlphaWeights> {
    protocol.validate()?;
    let j_count = dataset.n_alternatives();
    let unreachable = |j: usize| {
        Error::Protocol(format!(
            "alternative `{}` unreachable under protocol (α = 0)",
            dataset.alternatives()[j].label
        ))
    };

    if protocol.is_choice_based() {
        let mut values = vec![0.0; j_count];
        for (j, slot) in values.iter_mut().enumerate() {
            for s in &protocol.subsamples {
                *slot += s.qualification.rate(j, None)? * s.h / s.q;
            }
        }
        for (j, v) in values.iter().enumerate() {
            let used = dataset.observations().iter().any(|o| o.available[j]);
            if used && !(*v > 0.0) {
                return Err(unreachable(j));
            }
        }
        return Ok(AlphaWeights::ByAlternative { values });
    }

    let stratum_idx = match &protocol.stratum_attribute {
        Some(name) => Some(dataset.trip_attr_index(name)?),
        None => None,
    };
    let mut values = Vec::with_capacity(dataset.len());
    for obs in dataset.observations() {
        let stratum = match stratum_idx {
            Some(b) => {
                let raw = obs.trip_attrs[b];
                if !raw.is_finite() || raw.fract() != 0.0 {
                    return Err(Error::Protocol(format!(
                        "observation {}: stratum value {raw} is not an integer code",
                        obs.obs_id
                    )));
                }
                Some(raw as i64)
            }
            None => None,
        };
        let mut row = vec![f64::NAN; j_count];
        for j in (0..j_count).filter(|&j| obs.available[j]) {
            let mut a = 0.0;
            for s in &protocol.subsamples {
                a += s.qualification.rate(j, stratum)? * s.h / s.q;
            }
            if !(a > 0.0 && a.is_finite()) {
                return Err(unreachable(j));
            }
            row[j] = a;
        }
        values.push(row);
    }
    Ok(AlphaWeights::ByObservation { values })
}

/// `α_j = H_j / Q_j` for a purely choice-based sample.
pub fn compute_alpha_choice_based(h: &[f64], q: &[f64]) -> Result<AlphaWeights> {
    if h.len() != q.len() || h.is_empty() {
        return Err(Error::Protocol("H and Q must be non-empty and of equal length".into()));
    }
    for (name, shares) in [("H", h), ("Q", q)] {
        if let Some(v) = shares.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Protocol(format!(
                "{name} shares must be strictly positive, found {v}"
            )));
        }
        let total: f64 = shares.iter().sum();
        if (total - 1.0).abs() > CHOICE_BASED_TOL {
            return Err(Error::Protocol(format!("{name} shares sum to {total}, expected 1")));
        }
    }
    Ok(AlphaWeights::ByAlternative {
        values: h.iter().zip(q).map(|(h, q)| h / q).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Alternative, AttributeSchema, Observation};
    use approx::assert_relative_eq;

    fn dataset(j: usize, chosen: &[usize], strata: &[f64]) -> ChoiceDataset {
        let alts = (0..j)
            .map(|id| Alternative {
                id,
                label: format!("a{id}"),
            })
            .collect();
        let obs = chosen
            .iter()
            .zip(strata)
            .enumerate()
            .map(|(n, (&c, &s))| Observation {
                obs_id: n as i64,
                chosen: c,
                available: vec![true; j],
                alt_attrs: vec![vec![]; j],
                trip_attrs: vec![s],
                subsample_id: 0,
                weight: 1.0,
            })
            .collect();
        ChoiceDataset::new(alts, 0, AttributeSchema::new::<&str, _>([], ["stratum"]), obs).unwrap()
    }

    #[test]
    fn random_sampling_gives_unit_alpha() {
        let ds = dataset(3, &[0, 1, 2], &[0., 0., 0.]);
        let alpha = compute_alpha(&SamplingProtocol::random(3), &ds).unwrap();
        for n in 0..3 {
            for j in 0..3 {
                assert_eq!(alpha.get(n, j), 1.0);
            }
        }
    }

    #[test]
    fn two_choice_based_subsamples() {
        let ds = dataset(2, &[0, 1], &[0., 0.]);
        let p = SamplingProtocol::choice_based(&[0.5, 0.5], &[0.25, 0.75]);
        let alpha = compute_alpha(&p, &ds).unwrap();
        assert_relative_eq!(alpha.get(0, 0), 2.0);
        assert_relative_eq!(alpha.get(1, 1), 2.0 / 3.0);
    }

    #[test]
    fn unreachable_alternative_errors() {
        let ds = dataset(3, &[0, 1], &[0., 0.]);
        let mut p = SamplingProtocol::choice_based(&[0.5, 0.5], &[0.5, 0.5]);
        p.subsamples.truncate(2);
        let err = compute_alpha(&p, &ds).unwrap_err();
        assert!(err.to_string().contains("unreachable"), "{err}");
    }

    #[test]
    fn choice_based_ratio_matches_share_table() {
        // car and taxi rows of the population / estimation-sample share table
        let a = compute_alpha_choice_based(&[0.066, 0.934], &[0.521, 0.479]).unwrap();
        assert_relative_eq!(a.get(0, 0), 0.066 / 0.521, epsilon = 1e-12);
        assert!((a.get(0, 0) - 0.12668).abs() < 5e-6);
        let t = compute_alpha_choice_based(&[0.276, 0.724], &[0.004, 0.996]).unwrap();
        assert_relative_eq!(t.get(0, 0), 69.0, epsilon = 1e-12);
        let same = compute_alpha_choice_based(&[0.2, 0.8], &[0.2, 0.8]).unwrap();
        assert_eq!(same.get(0, 1), 1.0);
        assert!(compute_alpha_choice_based(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn general_protocol_matches_choice_based_when_indicator() {
        let ds = dataset(3, &[0, 1, 2, 1], &[1., 2., 1., 2.]);
        let h = [0.3, 0.3, 0.4];
        let q = [0.5, 0.3, 0.2];
        let cb = compute_alpha(&SamplingProtocol::choice_based(&h, &q), &ds).unwrap();
        let direct = compute_alpha_choice_based(&h, &q).unwrap();
        let general = SamplingProtocol {
            subsamples: (0..3)
                .map(|s| Subsample {
                    id: s as i64,
                    h: h[s],
                    q: q[s],
                    qualification: Qualification::General {
                        table: vec![RateCell::new(s, 1, 1.0), RateCell::new(s, 2, 1.0)],
                    },
                })
                .collect(),
            stratum_attribute: Some("stratum".into()),
        };
        let ga = compute_alpha(&general, &ds).unwrap();
        for n in 0..4 {
            for j in 0..3 {
                assert_eq!(cb.get(n, j), direct.get(n, j));
                assert_eq!(ga.get(n, j), direct.get(n, j));
            }
        }
    }

    #[test]
    fn exogenous_stratification_varies_by_observation() {
        // subsample 0 samples stratum 1 only, subsample 1 everyone choosing alt 1
        let p = SamplingProtocol {
            subsamples: vec![
                Subsample {
                    id: 0,
                    h: 0.5,
                    q: 0.4,
                    qualification: Qualification::General {
                        table: vec![RateCell::new(0, 1, 1.0), RateCell::new(1, 1, 1.0)],
                    },
                },
                Subsample {
                    id: 1,
                    h: 0.5,
                    q: 0.25,
                    qualification: Qualification::General {
                        table: vec![RateCell::new(1, 1, 1.0), RateCell::new(1, 2, 1.0)],
                    },
                },
            ],
            stratum_attribute: Some("stratum".into()),
        };
        let ds = dataset(2, &[0, 1], &[1., 1.]);
        let a = compute_alpha(&p, &ds).unwrap();
        assert_relative_eq!(a.get(0, 0), 1.25);
        assert_relative_eq!(a.get(0, 1), 1.25 + 2.0);
        assert_relative_eq!(a.get(1, 1), 3.25);
        // alt 0 in stratum 2 qualifies for no subsample
        let ds2 = dataset(2, &[1], &[2.]);
        let err = compute_alpha(&p, &ds2).unwrap_err();
        assert!(err.to_string().contains("unreachable"));
    }

    #[test]
    fn invalid_protocols() {
        let mut p = SamplingProtocol::choice_based(&[0.5, 0.4], &[0.5, 0.5]);
        assert!(p.validate().is_err());
        p.subsamples[1].h = 0.5;
        p.subsamples[1].q = 0.0;
        assert!(p.validate().is_err());
    }
}
