//! A utility specification compiled against a dataset.
//!
//! Every `(observation, available alternative)` pair gets a sparse row of
//! `(parameter, regressor)` entries so utilities are plain dot products.
//! The likelihood is evaluated over fixed-size observation chunks that are
//! reduced in order, which keeps results independent of the thread count.

use rayon::prelude::*;

use super::spec::{Term, UtilitySpec};
use super::structure::{ln_g_nested, logsumexp, MevStructure, LAMBDA_MIN};
use crate::dataset::{cyclic_time_features, ChoiceDataset};
use crate::error::{Error, Result};
use crate::sampling::AlphaWeights;

/// Utilities beyond this magnitude are rejected rather than saturated.
pub const MAX_ABS_UTILITY: f64 = 700.0;

const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Utility,
    Nest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub start: f64,
    pub fixed: bool,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug)]
struct LinearCoef {
    attribute: String,
    alt: usize,
    param: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    params: Vec<ParamInfo>,
    n_alt: usize,
    obs_ids: Vec<i64>,
    available: Vec<bool>,
    chosen: Vec<usize>,
    weights: Vec<f64>,
    row_start: Vec<usize>,
    entries: Vec<(u32, f64)>,
    nest_of: Vec<Option<usize>>,
    nest_param: Vec<usize>,
    linear: Vec<LinearCoef>,
}

struct Workspace {
    v: Vec<f64>,
    ln_g: Vec<f64>,
    w: Vec<f64>,
    p: Vec<f64>,
    logsum: Vec<f64>,
    lambdas: Vec<f64>,
    coef: Vec<f64>,
}

impl Workspace {
    fn new(j: usize, m: usize) -> Self {
        Self {
            v: vec![0.0; j],
            ln_g: vec![0.0; j],
            w: vec![0.0; j],
            p: vec![0.0; j],
            logsum: vec![0.0; m],
            lambdas: vec![1.0; m],
            coef: vec![0.0; j],
        }
    }
}

fn spec_err(term: &Term, msg: impl std::fmt::Display) -> Error {
    Error::Spec(format!("term {term}: {msg}"))
}

impl Model {
    pub fn new(structure: &MevStructure, spec: &UtilitySpec, dataset: &ChoiceDataset) -> Result<Self> {
        let labels: Vec<String> = dataset.alternatives().iter().map(|a| a.label.clone()).collect();
        let n_alt = labels.len();
        let reference = dataset.reference();
        let alt = |term: &Term, label: &str| -> Result<usize> {
            labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| spec_err(term, format!("unknown alternative `{label}`")))
        };

        let mut params: Vec<ParamInfo> = Vec::new();
        let param_index = |name: &str, kind: ParamKind, params: &mut Vec<ParamInfo>| -> Result<usize> {
            if let Some(i) = params.iter().position(|p| p.name == name) {
                if params[i].kind != kind {
                    return Err(Error::Spec(format!(
                        "parameter `{name}` used both as a utility coefficient and a nest parameter"
                    )));
                }
                return Ok(i);
            }
            let (start, lower, upper) = match kind {
                ParamKind::Utility => (0.0, f64::NEG_INFINITY, f64::INFINITY),
                ParamKind::Nest => (1.0, LAMBDA_MIN, 1.0),
            };
            params.push(ParamInfo {
                name: name.to_string(),
                kind,
                start,
                fixed: false,
                lower,
                upper,
            });
            Ok(params.len() - 1)
        };

        // Resolve every term to per-alternative feature extractors.
        enum Source {
            Alt(usize),
            Trip(usize),
            One,
            Cyclic(usize, usize),
        }
        struct Feature {
            term: usize,
            alt: usize,
            param: usize,
            source: Source,
        }
        let mut features: Vec<Feature> = Vec::new();
        let mut linear = Vec::new();
        for (ti, term) in spec.terms.iter().enumerate() {
            match term {
                Term::Generic {
                    attribute,
                    alternatives,
                    param,
                } => {
                    let a = dataset
                        .schema()
                        .alt_index(attribute)
                        .ok_or_else(|| spec_err(term, format!("unknown alternative attribute `{attribute}`")))?;
                    let k = param_index(param, ParamKind::Utility, &mut params)?;
                    let alts: Vec<usize> = if alternatives.is_empty() {
                        (0..n_alt).collect()
                    } else {
                        alternatives.iter().map(|l| alt(term, l)).collect::<Result<_>>()?
                    };
                    for j in alts {
                        features.push(Feature {
                            term: ti,
                            alt: j,
                            param: k,
                            source: Source::Alt(a),
                        });
                        linear.push(LinearCoef {
                            attribute: attribute.clone(),
                            alt: j,
                            param: k,
                        });
                    }
                }
                Term::AltSpecific {
                    attribute,
                    alternative,
                    param,
                } => {
                    let a = dataset
                        .schema()
                        .alt_index(attribute)
                        .ok_or_else(|| spec_err(term, format!("unknown alternative attribute `{attribute}`")))?;
                    let j = alt(term, alternative)?;
                    let k = param_index(param, ParamKind::Utility, &mut params)?;
                    features.push(Feature {
                        term: ti,
                        alt: j,
                        param: k,
                        source: Source::Alt(a),
                    });
                    linear.push(LinearCoef {
                        attribute: attribute.clone(),
                        alt: j,
                        param: k,
                    });
                }
                Term::Asc { alternative, param } => {
                    let j = alt(term, alternative)?;
                    if j == reference {
                        return Err(spec_err(term, "the reference alternative carries no constant"));
                    }
                    let k = param_index(param, ParamKind::Utility, &mut params)?;
                    features.push(Feature {
                        term: ti,
                        alt: j,
                        param: k,
                        source: Source::One,
                    });
                }
                Term::TripSpecific {
                    attribute,
                    alternatives,
                    ..
                } => {
                    let b = dataset
                        .schema()
                        .trip_index(attribute)
                        .ok_or_else(|| spec_err(term, format!("unknown trip attribute `{attribute}`")))?;
                    for (label, name) in alternatives.iter().zip(term.param_names()) {
                        let j = alt(term, label)?;
                        if j == reference {
                            return Err(spec_err(
                                term,
                                "trip-specific coefficients of the reference alternative are fixed to zero",
                            ));
                        }
                        let k = param_index(&name, ParamKind::Utility, &mut params)?;
                        features.push(Feature {
                            term: ti,
                            alt: j,
                            param: k,
                            source: Source::Trip(b),
                        });
                    }
                }
                Term::CyclicTime {
                    attribute, alternative, ..
                } => {
                    let b = dataset
                        .schema()
                        .trip_index(attribute)
                        .ok_or_else(|| spec_err(term, format!("unknown trip attribute `{attribute}`")))?;
                    let j = alt(term, alternative)?;
                    if j == reference {
                        return Err(spec_err(
                            term,
                            "departure-time terms of the reference alternative are fixed to zero",
                        ));
                    }
                    for (h, name) in term.param_names().iter().enumerate() {
                        let k = param_index(name, ParamKind::Utility, &mut params)?;
                        features.push(Feature {
                            term: ti,
                            alt: j,
                            param: k,
                            source: Source::Cyclic(b, h),
                        });
                    }
                }
                Term::Control {
                    alternative,
                    residual,
                    param,
                } => {
                    let r = dataset
                        .schema()
                        .alt_index(residual)
                        .ok_or_else(|| spec_err(term, format!("residual column `{residual}` not attached")))?;
                    let j = alt(term, alternative)?;
                    let k = param_index(param, ParamKind::Utility, &mut params)?;
                    features.push(Feature {
                        term: ti,
                        alt: j,
                        param: k,
                        source: Source::Alt(r),
                    });
                }
            }
        }

        let nest_of = structure.membership(&labels)?;
        let mut nest_param = Vec::new();
        if let MevStructure::Nested { nests } = structure {
            for nest in nests {
                nest_param.push(param_index(&nest.param, ParamKind::Nest, &mut params)?);
            }
        }

        for (name, setting) in &spec.parameters {
            let p = params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Spec(format!("settings given for unknown parameter `{name}`")))?;
            if let Some(start) = setting.start {
                if !start.is_finite() {
                    return Err(Error::Spec(format!("parameter `{name}` has a non-finite start")));
                }
                p.start = start;
            }
            p.fixed = setting.fixed;
        }
        for p in &params {
            if p.kind == ParamKind::Nest && !(p.start > 0.0 && p.start <= 1.0) {
                return Err(Error::Domain(format!(
                    "nest parameter `{}` must lie in (0, 1], got {}",
                    p.name, p.start
                )));
            }
        }

        // Sparse design rows.
        let n_obs = dataset.len();
        let mut row_start = Vec::with_capacity(n_obs * n_alt + 1);
        let mut entries: Vec<(u32, f64)> = Vec::new();
        let mut available = Vec::with_capacity(n_obs * n_alt);
        let mut cyclic_cache: Vec<Option<[f64; 6]>> = vec![None; dataset.schema().trip_attributes.len()];
        let mut by_alt: Vec<Vec<&Feature>> = vec![Vec::new(); n_alt];
        for f in &features {
            by_alt[f.alt].push(f);
        }
        row_start.push(0);
        for obs in dataset.observations() {
            cyclic_cache.iter_mut().for_each(|c| *c = None);
            for j in 0..n_alt {
                available.push(obs.available[j]);
                if obs.available[j] {
                    let first = entries.len();
                    for f in &by_alt[j] {
                        let term = &spec.terms[f.term];
                        let x = match f.source {
                            Source::Alt(a) => obs.alt_attrs[j][a],
                            Source::Trip(b) => obs.trip_attrs[b],
                            Source::One => 1.0,
                            Source::Cyclic(b, h) => {
                                if cyclic_cache[b].is_none() {
                                    let t = obs.trip_attrs[b];
                                    cyclic_cache[b] = Some(
                                        cyclic_time_features(t)
                                            .map_err(|e| spec_err(term, format!("observation {}: {e}", obs.obs_id)))?,
                                    );
                                }
                                cyclic_cache[b].expect("filled above")[h]
                            }
                        };
                        if !x.is_finite() {
                            return Err(spec_err(
                                term,
                                format!(
                                    "missing value for available alternative `{}` in observation {}",
                                    labels[j], obs.obs_id
                                ),
                            ));
                        }
                        let k = f.param as u32;
                        match entries[first..].iter_mut().find(|e| e.0 == k) {
                            Some(e) => e.1 += x,
                            None => entries.push((k, x)),
                        }
                    }
                }
                row_start.push(entries.len());
            }
        }

        Ok(Self {
            params,
            n_alt,
            obs_ids: dataset.observations().iter().map(|o| o.obs_id).collect(),
            available,
            chosen: dataset.observations().iter().map(|o| o.chosen).collect(),
            weights: dataset.observations().iter().map(|o| o.weight).collect(),
            row_start,
            entries,
            nest_of,
            nest_param,
            linear,
        })
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_obs(&self) -> usize {
        self.chosen.len()
    }

    pub fn n_alternatives(&self) -> usize {
        self.n_alt
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn start_values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.start).collect()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&k| !self.params[k].fixed).collect()
    }

    pub fn is_nested(&self) -> bool {
        !self.nest_param.is_empty()
    }

    pub fn is_available(&self, n: usize, j: usize) -> bool {
        self.available[n * self.n_alt + j]
    }

    pub fn chosen(&self, n: usize) -> usize {
        self.chosen[n]
    }

    pub fn weight(&self, n: usize) -> f64 {
        self.weights[n]
    }

    /// Nest index of each alternative (`None` throughout for MNL).
    pub fn nest_of(&self) -> &[Option<usize>] {
        &self.nest_of
    }

    /// Current value of each nest's λ.
    pub fn nest_lambdas(&self, theta: &[f64]) -> Vec<f64> {
        self.nest_param.iter().map(|&k| theta[k]).collect()
    }

    /// Full parameter vector in model order from named values.
    pub fn theta_from(&self, values: &super::ParameterVector) -> Result<Vec<f64>> {
        self.params
            .iter()
            .map(|p| {
                values
                    .get(&p.name)
                    .ok_or_else(|| Error::Spec(format!("no value supplied for parameter `{}`", p.name)))
            })
            .collect()
    }

    /// Total coefficient of a linearly entering alternative attribute for one
    /// alternative, or `None` when no term uses it there.
    pub fn linear_coefficient(&self, theta: &[f64], attribute: &str, alt: usize) -> Option<f64> {
        let mut found = false;
        let mut total = 0.0;
        for l in self.linear.iter().filter(|l| l.attribute == attribute && l.alt == alt) {
            found = true;
            total += theta[l.param];
        }
        found.then_some(total)
    }

    /// Systematic utilities of observation `n`; unavailable entries are 0.
    pub fn utilities_into(&self, theta: &[f64], n: usize, out: &mut [f64]) {
        for (j, slot) in out.iter_mut().enumerate().take(self.n_alt) {
            let r = n * self.n_alt + j;
            *slot = self.entries[self.row_start[r]..self.row_start[r + 1]]
                .iter()
                .map(|&(k, x)| theta[k as usize] * x)
                .sum();
        }
    }

    pub fn utilities(&self, theta: &[f64], n: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_alt];
        self.utilities_into(theta, n, &mut v);
        v
    }

    /// Fills `ws.w` with `V + ln G + ln α` and `ws.p` with the corrected probabilities.
    fn kernel(&self, theta: &[f64], n: usize, alpha: Option<&AlphaWeights>, ws: &mut Workspace) -> Result<()> {
        let base = n * self.n_alt;
        let avail = &self.available[base..base + self.n_alt];
        self.utilities_into(theta, n, &mut ws.v);
        for j in 0..self.n_alt {
            if avail[j] && !(ws.v[j].abs() <= MAX_ABS_UTILITY) {
                return Err(Error::Numerical(format!(
                    "utility {} of alternative {j} in observation {} exceeds ±{MAX_ABS_UTILITY}",
                    ws.v[j], self.obs_ids[n]
                )));
            }
        }
        if self.is_nested() {
            for (m, &k) in self.nest_param.iter().enumerate() {
                if !(theta[k] > 0.0) {
                    return Err(Error::Domain(format!(
                        "nest parameter `{}` must be positive, got {}",
                        self.params[k].name, theta[k]
                    )));
                }
                ws.lambdas[m] = theta[k];
            }
            ln_g_nested(&ws.v, avail, &self.nest_of, &ws.lambdas, &mut ws.ln_g, &mut ws.logsum);
        }
        let mut any = false;
        for j in 0..self.n_alt {
            ws.w[j] = if avail[j] {
                any = true;
                let ln_alpha = alpha.map_or(0.0, |a| a.ln(n, j));
                ws.v[j] + ws.ln_g[j] + ln_alpha
            } else {
                f64::NEG_INFINITY
            };
        }
        if !any {
            return Err(Error::Domain(format!(
                "observation {} has no available alternative",
                self.obs_ids[n]
            )));
        }
        let lse = logsumexp(ws.w.iter().copied());
        for j in 0..self.n_alt {
            ws.p[j] = if avail[j] { (ws.w[j] - lse).exp() } else { 0.0 };
        }
        Ok(())
    }

    /// Corrected choice probabilities `softmax(V + ln G + ln α)` for observation `n`.
    pub fn probabilities(&self, theta: &[f64], n: usize, alpha: Option<&AlphaWeights>) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self.n_alt, self.nest_param.len());
        self.kernel(theta, n, alpha, &mut ws)?;
        Ok(ws.p)
    }

    /// Weighted log-likelihood contribution of one observation; adds the
    /// gradient contribution to `grad` when supplied.
    fn observation(
        &self,
        theta: &[f64],
        n: usize,
        alpha: Option<&AlphaWeights>,
        ws: &mut Workspace,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.kernel(theta, n, alpha, ws)?;
        let y = self.chosen[n];
        let weight = self.weights[n];
        let ll = weight * ws.p[y].ln();
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-likelihood at observation {}",
                self.obs_ids[n]
            )));
        }
        let Some(grad) = grad else {
            return Ok(ll);
        };
        let base = n * self.n_alt;
        // c_j = 1{j = y} − P_j; a_i is the coefficient on ∂V_i/∂β.
        if self.is_nested() {
            let m_count = self.nest_param.len();
            let mut c_nest = vec![0.0; m_count];
            let mut vbar = vec![0.0; m_count];
            for j in 0..self.n_alt {
                if !self.available[base + j] {
                    continue;
                }
                let m = self.nest_of[j].expect("nested structure covers all alternatives");
                let c = f64::from(u8::from(j == y)) - ws.p[j];
                c_nest[m] += c;
                let q = (ws.v[j] / ws.lambdas[m] - ws.logsum[m]).exp();
                vbar[m] += q * ws.v[j];
            }
            for j in 0..self.n_alt {
                if !self.available[base + j] {
                    ws.coef[j] = 0.0;
                    continue;
                }
                let m = self.nest_of[j].expect("nested structure covers all alternatives");
                let lambda = ws.lambdas[m];
                let c = f64::from(u8::from(j == y)) - ws.p[j];
                let q = (ws.v[j] / lambda - ws.logsum[m]).exp();
                ws.coef[j] = c / lambda + (lambda - 1.0) / lambda * c_nest[m] * q;
                // ∂W_j/∂λ = −V_j/λ² + L_m − (λ − 1) V̄_m / λ²
                let k = self.nest_param[m];
                if !self.params[k].fixed {
                    let dw = -ws.v[j] / (lambda * lambda) + ws.logsum[m] - (lambda - 1.0) * vbar[m] / (lambda * lambda);
                    grad[k] += weight * c * dw;
                }
            }
        } else {
            for j in 0..self.n_alt {
                ws.coef[j] = if self.available[base + j] {
                    f64::from(u8::from(j == y)) - ws.p[j]
                } else {
                    0.0
                };
            }
        }
        for j in 0..self.n_alt {
            let a = weight * ws.coef[j];
            if a == 0.0 {
                continue;
            }
            let r = base + j;
            for &(k, x) in &self.entries[self.row_start[r]..self.row_start[r + 1]] {
                grad[k as usize] += a * x;
            }
        }
        Ok(ll)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.params.len() {
            return Err(Error::Spec(format!(
                "parameter vector has {} entries, model has {}",
                theta.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Corrected log-likelihood `Σ_n w_n ln P̃_n(y_n)`.
    pub fn log_likelihood(&self, theta: &[f64], alpha: Option<&AlphaWeights>) -> Result<f64> {
        self.check_theta(theta)?;
        let m = self.nest_param.len();
        let chunks: Vec<Result<f64>> = (0..self.n_obs().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut ws = Workspace::new(self.n_alt, m);
                let mut sum = 0.0;
                for n in c * CHUNK..((c + 1) * CHUNK).min(self.n_obs()) {
                    sum += self.observation(theta, n, alpha, &mut ws, None)?;
                }
                Ok(sum)
            })
            .collect();
        let mut total = 0.0;
        for c in chunks {
            total += c?;
        }
        Ok(total)
    }

    /// Log-likelihood and its analytic gradient with respect to every parameter.
    pub fn log_likelihood_and_gradient(&self, theta: &[f64], alpha: Option<&AlphaWeights>) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let k = self.params.len();
        let m = self.nest_param.len();
        let chunks: Vec<Result<(f64, Vec<f64>)>> = (0..self.n_obs().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut ws = Workspace::new(self.n_alt, m);
                let mut grad = vec![0.0; k];
                let mut sum = 0.0;
                for n in c * CHUNK..((c + 1) * CHUNK).min(self.n_obs()) {
                    sum += self.observation(theta, n, alpha, &mut ws, Some(&mut grad))?;
                }
                Ok((sum, grad))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; k];
        for c in chunks {
            let (s, g) = c?;
            total += s;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        Ok((total, grad))
    }
}
