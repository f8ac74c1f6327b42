//! Elasticities and simulated compensating variations.
//!
//! Population predictions use choice probabilities without the sampling
//! correction. Compensating variations follow the usual simulation recipe:
//! draw Gumbel errors, find the best baseline utility, then the smallest
//! price rebate that restores it in the counterfactual choice set. Utility
//! is linear in price, so the rebate for each alternative is a closed form.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};
use crate::estimate::EstimationResult;
use crate::mev::{MevStructure, Model};
use crate::stage1::attach_control_terms;
use crate::synth::gumbel;

fn default_cost() -> String {
    "cost".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScenarioKind {
    Eliminate { alternatives: Vec<String> },
    FixedTax { alternatives: Vec<String>, amount: f64 },
    ProportionalTax { alternatives: Vec<String>, rate: f64 },
}

impl ScenarioKind {
    fn alternatives(&self) -> &[String] {
        match self {
            ScenarioKind::Eliminate { alternatives }
            | ScenarioKind::FixedTax { alternatives, .. }
            | ScenarioKind::ProportionalTax { alternatives, .. } => alternatives,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(flatten)]
    pub kind: ScenarioKind,
    /// Restrict to observations whose chosen alternative is listed; `None`
    /// applies to every observation.
    #[serde(default)]
    pub applies_to: Option<Vec<String>>,
    /// Alternative attribute holding the price.
    #[serde(default = "default_cost")]
    pub cost_attribute: String,
}

impl Scenario {
    pub fn new(name: impl Into<String>, kind: ScenarioKind) -> Self {
        Self {
            name: name.into(),
            kind,
            applies_to: None,
            cost_attribute: default_cost(),
        }
    }

    pub fn applies_to(mut self, alternatives: &[&str]) -> Self {
        self.applies_to = Some(alternatives.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScenarioKind::FixedTax { amount, .. } if !(*amount >= 0.0 && amount.is_finite()) => {
                Err(Error::Config(format!(
                    "scenario `{}`: tax amount must be non-negative, got {amount}",
                    self.name
                )))
            }
            ScenarioKind::ProportionalTax { rate, .. } if !(*rate >= 0.0 && rate.is_finite()) => Err(Error::Config(
                format!("scenario `{}`: tax rate must be non-negative, got {rate}", self.name),
            )),
            _ => Ok(()),
        }
    }
}

/// Counterfactual version of a dataset under a scenario.
#[derive(Clone, Debug)]
pub struct Counterfactual {
    pub dataset: ChoiceDataset,
    /// Observations the scenario applies to.
    pub applicable: Vec<bool>,
    /// Price change `Δp[n][j]` (0 where untouched).
    pub price_change: Vec<Vec<f64>>,
}

fn resolve(dataset: &ChoiceDataset, labels: &[String]) -> Result<Vec<bool>> {
    let mut mask = vec![false; dataset.n_alternatives()];
    for l in labels {
        mask[dataset.alt_index(l)?] = true;
    }
    Ok(mask)
}

/// Applies a scenario to the observations it covers. Eliminations shrink
/// availability; taxes raise the price attribute of available alternatives.
pub fn apply_scenario(dataset: &ChoiceDataset, scenario: &Scenario) -> Result<Counterfactual> {
    scenario.validate()?;
    let targets = resolve(dataset, scenario.kind.alternatives())?;
    let applicable: Vec<bool> = match &scenario.applies_to {
        None => vec![true; dataset.len()],
        Some(labels) => {
            let chosen_in = resolve(dataset, labels)?;
            dataset.observations().iter().map(|o| chosen_in[o.chosen]).collect()
        }
    };
    let j_count = dataset.n_alternatives();
    let mut price_change = vec![vec![0.0; j_count]; dataset.len()];
    let cost_idx = match scenario.kind {
        ScenarioKind::Eliminate { .. } => None,
        _ => Some(dataset.alt_attr_index(&scenario.cost_attribute)?),
    };
    for (n, o) in dataset.observations().iter().enumerate() {
        if applicable[n] {
            if let ScenarioKind::Eliminate { .. } = scenario.kind {
                if (0..j_count).all(|j| !o.available[j] || targets[j]) {
                    return Err(Error::Domain(format!(
                        "scenario `{}` empties the choice set of observation {}",
                        scenario.name, o.obs_id
                    )));
                }
            }
            if let Some(k) = cost_idx {
                if let Some(j) = (0..j_count).find(|&j| targets[j] && o.available[j] && o.alt_attrs[j][k].is_nan()) {
                    return Err(Error::Domain(format!(
                        "scenario `{}`: observation {} has no `{}` for `{}`",
                        scenario.name,
                        o.obs_id,
                        scenario.cost_attribute,
                        dataset.alternatives()[j].label
                    )));
                }
            }
        }
    }
    let cf = dataset.map_observations(|n, o| {
        if !applicable[n] {
            return;
        }
        for j in 0..j_count {
            if !(targets[j] && o.available[j]) {
                continue;
            }
            match &scenario.kind {
                ScenarioKind::Eliminate { .. } => o.available[j] = false,
                ScenarioKind::FixedTax { amount, .. } => price_change[n][j] = *amount,
                ScenarioKind::ProportionalTax { rate, .. } => {
                    price_change[n][j] = rate * o.alt_attrs[j][cost_idx.unwrap()];
                }
            }
            if let Some(k) = cost_idx {
                o.alt_attrs[j][k] += price_change[n][j];
            }
        }
        // the recorded choice carries no meaning in a counterfactual; keep it valid
        if !o.available[o.chosen] {
            o.chosen = o.available.iter().position(|a| *a).unwrap_or(o.chosen);
        }
    })?;
    Ok(Counterfactual {
        dataset: cf,
        applicable,
        price_change,
    })
}

/// Dataset with the control residuals of a two-stage fit attached, when the
/// fit needs them and the dataset lacks them.
fn prepared(result: &EstimationResult, dataset: &ChoiceDataset) -> Result<ChoiceDataset> {
    match &result.first_stage {
        Some(fs) if dataset.alt_attr_index(&fs.spec.residual_column()).is_err() => attach_control_terms(dataset, fs),
        _ => Ok(dataset.clone()),
    }
}

fn compiled(result: &EstimationResult, dataset: &ChoiceDataset) -> Result<(Model, Vec<f64>)> {
    let model = Model::new(&result.structure, &result.spec, dataset)?;
    let theta = model.theta_from(&result.parameter_vector())?;
    Ok((model, theta))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight each observation by its predicted probability of the alternative.
    #[default]
    Probability,
    Uniform,
}

fn coefficient(model: &Model, theta: &[f64], attribute: &str, alt: usize, label: &str) -> Result<f64> {
    model.linear_coefficient(theta, attribute, alt).ok_or_else(|| {
        Error::Spec(format!(
            "attribute `{attribute}` does not enter the utility of `{label}`"
        ))
    })
}

/// Whether `attribute` enters the utility of `alternative` linearly.
pub fn enters_utility(
    result: &EstimationResult,
    dataset: &ChoiceDataset,
    attribute: &str,
    alternative: &str,
) -> Result<bool> {
    let data = prepared(result, dataset)?;
    let j = data.alt_index(alternative)?;
    let (model, theta) = compiled(result, &data)?;
    Ok(model.linear_coefficient(&theta, attribute, j).is_some())
}

/// Aggregate direct point elasticity of the demand for `alternative` with
/// respect to one of its attributes.
pub fn point_elasticity_direct(
    result: &EstimationResult,
    dataset: &ChoiceDataset,
    attribute: &str,
    alternative: &str,
    weighting: Weighting,
) -> Result<f64> {
    let data = prepared(result, dataset)?;
    let j = data.alt_index(alternative)?;
    let a = data.alt_attr_index(attribute)?;
    let (model, theta) = compiled(result, &data)?;
    let beta = coefficient(&model, &theta, attribute, j, alternative)?;
    let nest = model.nest_of()[j];
    let lambda = nest.map_or(1.0, |m| model.nest_lambdas(&theta)[m]);
    let (mut num, mut den) = (0.0, 0.0);
    for (n, o) in data.observations().iter().enumerate() {
        if !o.available[j] {
            continue;
        }
        let p = model.probabilities(&theta, n, None)?;
        // probability of j within its nest
        let within = match nest {
            Some(m) => {
                let s: f64 = (0..p.len())
                    .filter(|&i| model.nest_of()[i] == Some(m))
                    .map(|i| p[i])
                    .sum();
                p[j] / s
            }
            None => 1.0,
        };
        let e = beta * o.alt_attrs[j][a] * (1.0 / lambda - (1.0 / lambda - 1.0) * within - p[j]);
        let w = o.weight
            * match weighting {
                Weighting::Probability => p[j],
                Weighting::Uniform => 1.0,
            };
        num += w * e;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Domain(format!("`{alternative}` has zero predicted demand")));
    }
    Ok(num / den)
}

/// Expected demand `Σ_n w_n P_n(j)` without the sampling correction.
pub fn expected_demand(result: &EstimationResult, dataset: &ChoiceDataset, alternative: &str) -> Result<f64> {
    let data = prepared(result, dataset)?;
    let j = data.alt_index(alternative)?;
    let (model, theta) = compiled(result, &data)?;
    let mut total = 0.0;
    for n in 0..data.len() {
        total += model.weight(n) * model.probabilities(&theta, n, None)?[j];
    }
    Ok(total)
}

/// Centred arc elasticity of aggregate demand: the attribute is scaled by
/// `1 ± perturbation/2` and midpoint bases are used on both axes.
pub fn arc_elasticity_aggregate(
    result: &EstimationResult,
    dataset: &ChoiceDataset,
    attribute: &str,
    alternative: &str,
    perturbation: f64,
) -> Result<f64> {
    if !(perturbation > 0.0 && perturbation < 2.0) {
        return Err(Error::Domain(format!(
            "perturbation must be in (0, 2), got {perturbation}"
        )));
    }
    let data = prepared(result, dataset)?;
    let j = data.alt_index(alternative)?;
    let a = data.alt_attr_index(attribute)?;
    {
        let (model, theta) = compiled(result, &data)?;
        coefficient(&model, &theta, attribute, j, alternative)?;
    }
    let scaled = |factor: f64| {
        data.map_observations(|_, o| o.alt_attrs[j][a] *= factor)
            .and_then(|d| expected_demand(result, &d, alternative))
    };
    let up = scaled(1.0 + perturbation / 2.0)?;
    let down = scaled(1.0 - perturbation / 2.0)?;
    let mid = 0.5 * (up + down);
    if mid == 0.0 {
        return Err(Error::Domain(format!("`{alternative}` has zero predicted demand")));
    }
    Ok(((up - down) / mid) / perturbation)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct Accumulator {
    sum: f64,
    c: f64,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.c
    }
}

fn compensated_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accumulator::default();
    let mut n = 0usize;
    for x in xs {
        acc.add(x);
        n += 1;
    }
    acc.total() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareOptions {
    pub draws: usize,
    pub seed: u64,
    /// Trip attribute used to group observations, e.g. an origin zone.
    #[serde(default)]
    pub group_by: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareRow {
    pub index: usize,
    pub obs_id: i64,
    /// Mean compensating variation over draws.
    pub nu: f64,
    /// Monte Carlo standard error of `nu`.
    pub mc_se: f64,
    pub group: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = compensated_mean(values.iter().copied());
        let std = if values.len() > 1 {
            (compensated_mean(values.iter().map(|v| (v - mean).powi(2))) * values.len() as f64
                / (values.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: values.len(),
            mean,
            std,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: f64,
    pub count: usize,
    pub mean: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub scenario: String,
    pub draws: usize,
    pub seed: u64,
    pub rows: Vec<WelfareRow>,
    /// `None` when the scenario applies to no observation.
    pub summary: Option<Summary>,
    pub group_by: Option<String>,
    pub groups: Vec<GroupAggregate>,
}

/// Per-observation mean compensating variation under `scenario`, simulated
/// with `options.draws` Gumbel draws per observation. Observation `n` uses
/// its own random stream, so scenarios sharing a seed share draws.
pub fn simulate_compensating_variation(
    result: &EstimationResult,
    dataset: &ChoiceDataset,
    scenario: &Scenario,
    options: &WelfareOptions,
) -> Result<WelfareReport> {
    if options.draws == 0 {
        return Err(Error::Domain("at least one draw is needed".into()));
    }
    if let MevStructure::Nested { .. } = result.structure {
        let theta = result.parameter_vector();
        let off = result
            .structure
            .nest_params()
            .into_iter()
            .find(|p| theta.get(p) != Some(1.0));
        if let Some(p) = off {
            return Err(Error::Domain(format!(
                "welfare simulation draws independent Gumbel errors; nest parameter `{p}` is not 1"
            )));
        }
    }
    let base = prepared(result, dataset)?;
    let cf = apply_scenario(&base, scenario)?;
    let (model0, theta) = compiled(result, &base)?;
    let (model1, _) = compiled(result, &cf.dataset)?;
    let j_count = base.n_alternatives();
    let cost = &scenario.cost_attribute;
    let beta: Vec<Option<f64>> = (0..j_count)
        .map(|j| model0.linear_coefficient(&theta, cost, j).filter(|b| *b < 0.0))
        .collect();
    let group_idx = options
        .group_by
        .as_deref()
        .map(|g| base.trip_attr_index(g))
        .transpose()?;

    let indices: Vec<usize> = (0..base.len()).filter(|&n| cf.applicable[n]).collect();
    let rows: Vec<Result<WelfareRow>> = indices
        .par_iter()
        .map(|&n| {
            let obs0 = &base.observations()[n];
            let obs1 = &cf.dataset.observations()[n];
            let v0 = model0.utilities(&theta, n);
            let v1 = model1.utilities(&theta, n);
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(n as u64);
            let mut eps = vec![0.0; j_count];
            let mut sum = Accumulator::default();
            let mut sum_sq = Accumulator::default();
            let mut range = (f64::INFINITY, f64::NEG_INFINITY);
            for _ in 0..options.draws {
                for e in eps.iter_mut() {
                    *e = gumbel(&mut rng);
                }
                let u0: Vec<f64> = (0..j_count).map(|j| v0[j] + eps[j]).collect();
                let best = (0..j_count)
                    .filter(|&j| obs0.available[j])
                    .map(|j| u0[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut nu = f64::INFINITY;
                for j in (0..j_count).filter(|&j| obs1.available[j]) {
                    let candidate = match beta[j] {
                        Some(b) => cf.price_change[n][j] + (best - u0[j]) / (-b),
                        None if v1[j] + eps[j] >= best => 0.0,
                        None => f64::INFINITY,
                    };
                    nu = nu.min(candidate);
                }
                if nu == f64::INFINITY {
                    return Err(Error::Numerical(format!(
                        "compensation infeasible for observation {}",
                        obs0.obs_id
                    )));
                }
                let nu = nu.max(0.0);
                range = (range.0.min(nu), range.1.max(nu));
                sum.add(nu);
                sum_sq.add(nu * nu);
            }
            let t = options.draws as f64;
            // identical draws are reported exactly rather than via sum / T
            let constant = range.0 == range.1;
            let mean = if constant { range.0 } else { sum.total() / t };
            let var = if options.draws > 1 && !constant {
                ((sum_sq.total() - t * mean * mean) / (t - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(WelfareRow {
                index: n,
                obs_id: obs0.obs_id,
                nu: mean,
                mc_se: (var / t).sqrt(),
                group: group_idx.map(|g| obs0.trip_attrs[g]),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = rows.iter().map(|r| r.nu).collect();

    let mut by_group: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        if let Some(g) = r.group {
            // order keys numerically, including negatives
            let key = if g >= 0.0 {
                g.to_bits() ^ (1 << 63)
            } else {
                !g.to_bits()
            };
            by_group.entry(key).or_insert((g, Vec::new())).1.push(r.nu);
        }
    }
    let groups = by_group
        .into_values()
        .map(|(group, v)| {
            let mean = compensated_mean(v.iter().copied());
            GroupAggregate {
                group,
                count: v.len(),
                mean,
                total: mean * v.len() as f64,
            }
        })
        .collect();
    Ok(WelfareReport {
        scenario: scenario.name.clone(),
        draws: options.draws,
        seed: options.seed,
        summary: Summary::of(&values),
        rows,
        group_by: options.group_by.clone(),
        groups,
    })
}
