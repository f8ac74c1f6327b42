//! Synthetic mode-choice data with known parameters.
//!
//! Prices of priced alternatives follow `p = γ0_j + γ z + δ time + ξ`; for
//! endogenous alternatives the same `ξ` enters the utility error as
//! `ε = φ ξ + Gumbel`, so a control function in `ξ̂` is correctly specified.
//! Choice-based samples are drawn from a simulated population with `Q` taken
//! from the population's realised shares.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeSchema, ChoiceDataset, DatasetSchema, Observation};
use crate::error::{Error, Result};
use crate::mev::{Term, UtilitySpec};
use crate::sampling::SamplingProtocol;
use crate::stage1::FirstStageSpec;

/// Population dataset with its price residuals and Gumbel draws.
type Population = (ChoiceDataset, Vec<Vec<f64>>, Vec<Vec<f64>>);

pub const ATTR_COST: &str = "cost";
pub const ATTR_TIME: &str = "time";
pub const ATTR_INSTRUMENT: &str = "z";
pub const TRIP_ZONE: &str = "zone";
pub const RESIDUAL: &str = "xi_cost";
pub const PARAM_TIME: &str = "b_time";
pub const PARAM_PHI: &str = "phi";

pub fn asc_param(label: &str) -> String {
    format!("asc_{label}")
}

pub fn cost_param(label: &str) -> String {
    format!("b_cost_{label}")
}

/// Standard Gumbel by inverse transform of `u ∈ (0, 1)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// One standard Gumbel draw; `u = 0` is redrawn so the result is finite.
#[inline]
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return gumbel_from_uniform(u);
        }
    }
}

pub fn draw_gumbel<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Domain("draw count must be at least 1".into()));
    }
    Ok((0..count).map(|_| gumbel(rng)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltDgp {
    pub label: String,
    #[serde(default)]
    pub asc: f64,
    /// Alternative-specific cost coefficient; `None` for cost-free modes.
    #[serde(default)]
    pub beta_cost: Option<f64>,
    /// Price carries the utility-relevant shock `ξ`.
    #[serde(default)]
    pub endogenous: bool,
    #[serde(default)]
    pub price_intercept: f64,
    /// Probability the alternative is in a trip's choice set.
    #[serde(default = "one")]
    pub availability: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum SamplingDesign {
    Random,
    /// Draw `sample_size` trips from the population with chosen-alternative
    /// shares `h`.
    ChoiceBased {
        h: Vec<f64>,
        sample_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Population size (the sample itself under random sampling).
    pub n: usize,
    /// The first alternative is the reference.
    pub alternatives: Vec<AltDgp>,
    pub beta_time: f64,
    #[serde(default = "default_time_range")]
    pub time_range: [f64; 2],
    #[serde(default = "default_instrument_range")]
    pub instrument_range: [f64; 2],
    /// Price slope on the instrument.
    pub gamma: f64,
    /// Price slope on travel time.
    #[serde(default)]
    pub delta: f64,
    pub xi_std: f64,
    #[serde(default)]
    pub phi: f64,
    /// Number of zone codes drawn into a `zone` trip attribute; 0 omits it.
    #[serde(default)]
    pub zones: usize,
    #[serde(default = "default_design")]
    pub sampling: SamplingDesign,
    pub seed: u64,
}

fn default_time_range() -> [f64; 2] {
    [0.0, 2.0]
}

fn default_instrument_range() -> [f64; 2] {
    [0.0, 2.0]
}

fn default_design() -> SamplingDesign {
    SamplingDesign::Random
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.alternatives.len() < 2 {
            return bad("at least two alternatives are needed".into());
        }
        for (i, a) in self.alternatives.iter().enumerate() {
            if self.alternatives[..i].iter().any(|b| b.label == a.label) {
                return bad(format!("duplicate alternative `{}`", a.label));
            }
            if !(a.availability > 0.0 && a.availability <= 1.0) {
                return bad(format!("availability of `{}` must be in (0, 1]", a.label));
            }
            if a.endogenous && a.beta_cost.is_none() {
                return bad(format!("endogenous alternative `{}` needs beta_cost", a.label));
            }
        }
        if self.alternatives[0].asc != 0.0 {
            return bad(format!(
                "reference alternative `{}` must have asc 0",
                self.alternatives[0].label
            ));
        }
        if !(self.xi_std >= 0.0 && self.xi_std.is_finite()) {
            return bad(format!("xi_std must be non-negative, got {}", self.xi_std));
        }
        for (name, r) in [
            ("time_range", self.time_range),
            ("instrument_range", self.instrument_range),
        ] {
            if !(r[0] < r[1]) {
                return bad(format!("{name} must be increasing"));
            }
        }
        if let SamplingDesign::ChoiceBased { h, sample_size } = &self.sampling {
            if h.len() != self.alternatives.len() {
                return bad(format!(
                    "{} H targets for {} alternatives",
                    h.len(),
                    self.alternatives.len()
                ));
            }
            if h.iter().any(|x| !(*x > 0.0)) || (h.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("H targets must be positive and sum to 1".into());
            }
            if *sample_size == 0 || *sample_size > self.n {
                return bad(format!("sample_size must be in 1..={}", self.n));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.alternatives.iter().map(|a| a.label.clone()).collect()
    }

    pub fn has_endogeneity(&self) -> bool {
        self.alternatives.iter().any(|a| a.endogenous)
    }

    pub fn schema(&self) -> DatasetSchema {
        let trip: Vec<&str> = if self.zones > 0 { vec![TRIP_ZONE] } else { vec![] };
        let mut attributes = AttributeSchema::new([ATTR_COST, ATTR_TIME, ATTR_INSTRUMENT], trip);
        attributes.units.insert(ATTR_COST.into(), "USD".into());
        DatasetSchema {
            alternatives: self.labels(),
            reference: self.alternatives[0].label.clone(),
            attributes,
        }
    }

    /// Correctly specified utility; control terms appear iff some price is
    /// endogenous.
    pub fn utility_spec(&self) -> UtilitySpec {
        let mut terms = Vec::new();
        for a in &self.alternatives[1..] {
            terms.push(Term::Asc {
                alternative: a.label.clone(),
                param: asc_param(&a.label),
            });
        }
        for a in self.alternatives.iter().filter(|a| a.beta_cost.is_some()) {
            terms.push(Term::AltSpecific {
                attribute: ATTR_COST.into(),
                alternative: a.label.clone(),
                param: cost_param(&a.label),
            });
        }
        terms.push(Term::Generic {
            attribute: ATTR_TIME.into(),
            alternatives: vec![],
            param: PARAM_TIME.into(),
        });
        for a in self.alternatives.iter().filter(|a| a.endogenous) {
            terms.push(Term::Control {
                alternative: a.label.clone(),
                residual: RESIDUAL.into(),
                param: PARAM_PHI.into(),
            });
        }
        UtilitySpec::new(terms)
    }

    pub fn first_stage_spec(&self) -> Option<FirstStageSpec> {
        self.has_endogeneity().then(|| FirstStageSpec {
            endogenous: ATTR_COST.into(),
            alternatives: self
                .alternatives
                .iter()
                .filter(|a| a.endogenous)
                .map(|a| a.label.clone())
                .collect(),
            instruments: vec![ATTR_INSTRUMENT.into()],
            covariates: if self.delta != 0.0 {
                vec![ATTR_TIME.into()]
            } else {
                vec![]
            },
            intercept: true,
            residual: Some(RESIDUAL.into()),
        })
    }

    /// True values keyed by the parameter names of [`Self::utility_spec`].
    pub fn true_params(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for a in &self.alternatives[1..] {
            out.insert(asc_param(&a.label), a.asc);
        }
        for a in &self.alternatives {
            if let Some(b) = a.beta_cost {
                out.insert(cost_param(&a.label), b);
            }
        }
        out.insert(PARAM_TIME.into(), self.beta_time);
        if self.has_endogeneity() {
            out.insert(PARAM_PHI.into(), self.phi);
        }
        out
    }
}

/// Latent quantities behind a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub n_population: usize,
    /// Realised chosen-alternative shares of the population.
    pub population_shares: Vec<f64>,
    pub protocol: SamplingProtocol,
    /// Population rows kept in the sample (all rows under random sampling).
    pub sample_indices: Option<Vec<usize>>,
    /// Price shock `ξ[n][j]` of every population row (0 where not endogenous).
    pub xi: Vec<Vec<f64>>,
    /// Total utility error `ε[n][j]` of every population row.
    pub epsilon: Vec<Vec<f64>>,
}

fn simulate_population(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<Population> {
    let j_count = config.alternatives.len();
    let shock = if config.xi_std > 0.0 {
        Some(Normal::new(0.0, config.xi_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut observations = Vec::with_capacity(config.n);
    let mut all_xi = Vec::with_capacity(config.n);
    let mut all_eps = Vec::with_capacity(config.n);
    for n in 0..config.n {
        let available = loop {
            let a: Vec<bool> = config
                .alternatives
                .iter()
                .map(|alt| rng.random::<f64>() < alt.availability)
                .collect();
            if a.iter().filter(|x| **x).count() >= 2 {
                break a;
            }
        };
        let mut alt_attrs = Vec::with_capacity(j_count);
        let mut xi = vec![0.0; j_count];
        let mut eps = vec![0.0; j_count];
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, alt) in config.alternatives.iter().enumerate() {
            let time = rng.random_range(config.time_range[0]..config.time_range[1]);
            let mut v = alt.asc + config.beta_time * time;
            let row = match alt.beta_cost {
                Some(beta) => {
                    let z = rng.random_range(config.instrument_range[0]..config.instrument_range[1]);
                    let s = shock.map_or(0.0, |d| d.sample(rng));
                    let cost = alt.price_intercept + config.gamma * z + config.delta * time + s;
                    v += beta * cost;
                    if alt.endogenous {
                        xi[j] = s;
                    }
                    vec![cost, time, z]
                }
                None => vec![f64::NAN, time, f64::NAN],
            };
            eps[j] = config.phi * xi[j] + gumbel(rng);
            if available[j] && v + eps[j] > best.0 {
                best = (v + eps[j], j);
            }
            alt_attrs.push(row);
        }
        let trip_attrs = if config.zones > 0 {
            vec![rng.random_range(0..config.zones) as f64]
        } else {
            vec![]
        };
        observations.push(Observation {
            obs_id: n as i64,
            chosen: best.1,
            available,
            alt_attrs,
            trip_attrs,
            subsample_id: 0,
            weight: 1.0,
        });
        all_xi.push(xi);
        all_eps.push(eps);
    }
    let schema = config.schema();
    let dataset = ChoiceDataset::new(schema.alternatives(), 0, schema.attributes, observations)?;
    Ok((dataset, all_xi, all_eps))
}

fn chosen_shares(dataset: &ChoiceDataset) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.n_alternatives()];
    for o in dataset.observations() {
        counts[o.chosen] += 1.0;
    }
    counts.iter().map(|c| c / dataset.len() as f64).collect()
}

/// Simulates the population and, for choice-based designs, draws the sample
/// from it. Same configuration, same dataset.
pub fn simulate_dataset(config: &DgpConfig) -> Result<(ChoiceDataset, TruthRecord)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (population, xi, epsilon) = simulate_population(config, &mut rng)?;
    let shares = chosen_shares(&population);
    let (dataset, protocol, sample_indices) = match &config.sampling {
        SamplingDesign::Random => (population, SamplingProtocol::random(config.alternatives.len()), None),
        SamplingDesign::ChoiceBased { h, sample_size } => {
            let s = apply_choice_based_sampling(&population, h, *sample_size, &mut rng)?;
            (s.dataset, s.protocol, Some(s.indices))
        }
    };
    let truth = TruthRecord {
        params: config.true_params(),
        seed: config.seed,
        n_population: config.n,
        population_shares: shares,
        protocol,
        sample_indices,
        xi,
        epsilon,
    };
    Ok((dataset, truth))
}

#[derive(Clone, Debug)]
pub struct ChoiceBasedSample {
    pub dataset: ChoiceDataset,
    pub protocol: SamplingProtocol,
    /// Source rows drawn, in source order.
    pub indices: Vec<usize>,
}

/// Integer counts summing to `total`, proportional to `h` (largest remainder).
fn allocate(h: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = h.iter().map(|x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = total.saturating_sub(counts.iter().sum());
    for &j in order.iter().cycle().take(missing) {
        counts[j] += 1;
    }
    counts
}

/// Draws without replacement within chosen-alternative strata so that the
/// sample shares hit `h`. The protocol records the realised `H` and the
/// source's chosen shares as `Q`.
pub fn apply_choice_based_sampling<R: Rng + ?Sized>(
    dataset: &ChoiceDataset,
    h_targets: &[f64],
    sample_size: usize,
    rng: &mut R,
) -> Result<ChoiceBasedSample> {
    let j_count = dataset.n_alternatives();
    if h_targets.len() != j_count {
        return Err(Error::Protocol(format!(
            "{} H targets for {j_count} alternatives",
            h_targets.len()
        )));
    }
    if h_targets.iter().any(|x| !(*x > 0.0)) || (h_targets.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Protocol("H targets must be positive and sum to 1".into()));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); j_count];
    for (n, o) in dataset.observations().iter().enumerate() {
        strata[o.chosen].push(n);
    }
    let counts = allocate(h_targets, sample_size);
    for j in 0..j_count {
        if strata[j].is_empty() || counts[j] > strata[j].len() {
            return Err(Error::Protocol(format!(
                "stratum `{}` too small: {} rows required, {} available",
                dataset.alternatives()[j].label,
                counts[j],
                strata[j].len()
            )));
        }
    }
    let mut indices = Vec::with_capacity(sample_size);
    for j in 0..j_count {
        let picks = sample(rng, strata[j].len(), counts[j]);
        indices.extend(picks.into_iter().map(|k| strata[j][k]));
    }
    indices.sort_unstable();
    let q = chosen_shares(dataset);
    let h: Vec<f64> = counts.iter().map(|&c| c as f64 / sample_size as f64).collect();
    let protocol = SamplingProtocol::choice_based(&h, &q);
    let subsample = dataset
        .select(&indices)
        .map_observations(|_, o| o.subsample_id = o.chosen as i64)?;
    Ok(ChoiceBasedSample {
        dataset: subsample,
        protocol,
        indices,
    })
}
