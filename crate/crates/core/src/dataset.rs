//! Long-format choice data: loading, validation and feature transforms.
//!
//! A dataset holds one [`Observation`] per decision maker. Alternative
//! attributes are stored densely as `[alternative][attribute]` with `NaN`
//! marking a missing cell; unavailable alternatives carry no attribute
//! requirements.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// Reserved columns of the long CSV layout.
pub const COL_OBS_ID: &str = "obs_id";
pub const COL_ALT_ID: &str = "alt_id";
pub const COL_CHOSEN: &str = "chosen";
pub const COL_AVAILABLE: &str = "available";
pub const COL_SUBSAMPLE: &str = "subsample_id";
pub const COL_WEIGHT: &str = "weight";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternative {
    pub id: usize,
    pub label: String,
}

/// Attribute names (and optional units) known to a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    /// Attributes that vary by alternative (cost, time, ...).
    #[serde(default)]
    pub alt_attributes: Vec<String>,
    /// Attributes that only vary by observation (tract covariates, departure minute, ...).
    #[serde(default)]
    pub trip_attributes: Vec<String>,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
}

impl AttributeSchema {
    pub fn new<A: Into<String>, B: Into<String>>(
        alt: impl IntoIterator<Item = A>,
        trip: impl IntoIterator<Item = B>,
    ) -> Self {
        Self {
            alt_attributes: alt.into_iter().map(Into::into).collect(),
            trip_attributes: trip.into_iter().map(Into::into).collect(),
            units: BTreeMap::new(),
        }
    }

    pub fn alt_index(&self, name: &str) -> Option<usize> {
        self.alt_attributes.iter().position(|a| a == name)
    }

    pub fn trip_index(&self, name: &str) -> Option<usize> {
        self.trip_attributes.iter().position(|a| a == name)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in self.alt_attributes.iter().chain(&self.trip_attributes) {
            if name.is_empty() {
                return Err(Error::Schema("empty attribute name".into()));
            }
            if [
                COL_OBS_ID,
                COL_ALT_ID,
                COL_CHOSEN,
                COL_AVAILABLE,
                COL_SUBSAMPLE,
                COL_WEIGHT,
            ]
            .contains(&name.as_str())
            {
                return Err(Error::Schema(format!("attribute name `{name}` is reserved")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("attribute `{name}` declared twice")));
            }
        }
        Ok(())
    }
}

/// Everything needed to interpret a long CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Alternative labels, indexed by `alt_id`.
    pub alternatives: Vec<String>,
    /// Label of the alternative whose trip-specific parameters are fixed to zero.
    pub reference: String,
    #[serde(flatten)]
    pub attributes: AttributeSchema,
}

impl DatasetSchema {
    pub fn alternatives(&self) -> Vec<Alternative> {
        self.alternatives
            .iter()
            .enumerate()
            .map(|(id, label)| Alternative {
                id,
                label: label.clone(),
            })
            .collect()
    }

    pub fn reference_index(&self) -> Result<usize> {
        self.alternatives
            .iter()
            .position(|a| *a == self.reference)
            .ok_or_else(|| {
                Error::Schema(format!(
                    "reference alternative `{}` is not among the alternatives",
                    self.reference
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub obs_id: i64,
    pub chosen: usize,
    pub available: Vec<bool>,
    /// `[alternative][attribute]`, `NaN` when absent.
    pub alt_attrs: Vec<Vec<f64>>,
    pub trip_attrs: Vec<f64>,
    pub subsample_id: i64,
    pub weight: f64,
}

impl Observation {
    pub fn is_available(&self, alt: usize) -> bool {
        self.available.get(alt).copied().unwrap_or(false)
    }

    pub fn available_count(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }
}

/// Validated, immutable collection of choice observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    alternatives: Vec<Alternative>,
    reference: usize,
    schema: AttributeSchema,
    observations: Vec<Observation>,
}

impl ChoiceDataset {
    /// Builds a dataset, checking shape and choice invariants of every observation.
    pub fn new(
        alternatives: Vec<Alternative>,
        reference: usize,
        schema: AttributeSchema,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        schema.validate()?;
        if alternatives.is_empty() {
            return Err(Error::Schema("no alternatives declared".into()));
        }
        for (i, alt) in alternatives.iter().enumerate() {
            if alt.id != i {
                return Err(Error::Schema(format!(
                    "alternative ids must be dense 0..J-1; `{}` has id {}",
                    alt.label, alt.id
                )));
            }
            if alternatives[..i].iter().any(|a| a.label == alt.label) {
                return Err(Error::Schema(format!("duplicate alternative `{}`", alt.label)));
            }
        }
        if reference >= alternatives.len() {
            return Err(Error::Schema("reference alternative out of range".into()));
        }
        let j = alternatives.len();
        let a = schema.alt_attributes.len();
        let b = schema.trip_attributes.len();
        for obs in &observations {
            let bad_shape = obs.available.len() != j
                || obs.alt_attrs.len() != j
                || obs.alt_attrs.iter().any(|row| row.len() != a)
                || obs.trip_attrs.len() != b;
            if bad_shape {
                return Err(Error::Schema(format!(
                    "observation {} does not match the dataset shape",
                    obs.obs_id
                )));
            }
            if obs.chosen >= j {
                return Err(Error::Schema(format!(
                    "observation {}: chosen alternative {} out of range",
                    obs.obs_id, obs.chosen
                )));
            }
            if !obs.available[obs.chosen] {
                return Err(Error::Schema(format!(
                    "observation {}: chosen not available",
                    obs.obs_id
                )));
            }
            if !(obs.weight.is_finite() && obs.weight > 0.0) {
                return Err(Error::Schema(format!(
                    "observation {}: weight must be positive and finite",
                    obs.obs_id
                )));
            }
        }
        Ok(Self {
            alternatives,
            reference,
            schema,
            observations,
        })
    }

    pub fn alternatives(&self) -> &[Alternative] {
        &self.alternatives
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn alt_index(&self, label: &str) -> Result<usize> {
        self.alternatives
            .iter()
            .position(|a| a.label == label)
            .ok_or_else(|| Error::Schema(format!("unknown alternative `{label}`")))
    }

    pub fn alt_attr_index(&self, name: &str) -> Result<usize> {
        self.schema
            .alt_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown alternative attribute `{name}`")))
    }

    pub fn trip_attr_index(&self, name: &str) -> Result<usize> {
        self.schema
            .trip_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown trip attribute `{name}`")))
    }

    /// Every observation must offer at least two alternatives to carry information.
    pub fn check_estimable(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Schema("dataset has no observations".into()));
        }
        if let Some(obs) = self.observations.iter().find(|o| o.available_count() < 2) {
            return Err(Error::Schema(format!(
                "observation {} has fewer than two available alternatives",
                obs.obs_id
            )));
        }
        Ok(())
    }

    /// Fails unless `attribute` is present for every observation where one of
    /// `alts` is available.
    pub fn require_alt_attribute(&self, attribute: &str, alts: &[usize]) -> Result<()> {
        let a = self.alt_attr_index(attribute)?;
        for obs in &self.observations {
            for &j in alts {
                if obs.available[j] && obs.alt_attrs[j][a].is_nan() {
                    return Err(Error::Schema(format!(
                        "attribute `{attribute}` missing for available alternative `{}` in observation {}",
                        self.alternatives[j].label, obs.obs_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// New dataset restricted to (and ordered by) `indices`; repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            alternatives: self.alternatives.clone(),
            reference: self.reference,
            schema: self.schema.clone(),
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
        }
    }

    /// New dataset with an extra alternative attribute column. `values[n][j]`
    /// may be `NaN` where the column does not apply. Replaces an existing
    /// column of the same name.
    pub fn with_alt_column(&self, name: &str, values: &[Vec<f64>]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Schema(format!(
                "column `{name}` has {} rows, dataset has {}",
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        let idx = match out.schema.alt_index(name) {
            Some(idx) => idx,
            None => {
                if out.schema.trip_index(name).is_some() {
                    return Err(Error::Schema(format!("`{name}` is already a trip attribute")));
                }
                out.schema.alt_attributes.push(name.to_string());
                for obs in &mut out.observations {
                    for row in &mut obs.alt_attrs {
                        row.push(f64::NAN);
                    }
                }
                out.schema.alt_attributes.len() - 1
            }
        };
        let j = self.n_alternatives();
        for (obs, row) in out.observations.iter_mut().zip(values) {
            if row.len() != j {
                return Err(Error::Schema(format!(
                    "column `{name}` row for observation {} has {} entries, expected {j}",
                    obs.obs_id,
                    row.len()
                )));
            }
            for (alt, value) in row.iter().enumerate() {
                obs.alt_attrs[alt][idx] = *value;
            }
        }
        Ok(out)
    }

    /// Applies `f` to a copy of every observation. Shape changes are rejected.
    pub fn map_observations(&self, mut f: impl FnMut(usize, &mut Observation)) -> Result<Self> {
        let mut observations = self.observations.clone();
        for (n, obs) in observations.iter_mut().enumerate() {
            f(n, obs);
        }
        Self::new(
            self.alternatives.clone(),
            self.reference,
            self.schema.clone(),
            observations,
        )
    }
}

fn parse_flag(field: &str, column: &str, row: usize) -> Result<bool> {
    match field.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Parse {
            row,
            message: format!("column `{column}` must be 0 or 1, found `{other}`"),
        }),
    }
}

fn parse_int<T: std::str::FromStr>(field: &str, column: &str, row: usize) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        row,
        message: format!("column `{column}`: `{field}` is not an integer"),
    })
}

fn parse_value(field: &str, column: &str, row: usize) -> Result<f64> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(f64::NAN);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            row,
            message: format!("column `{column}`: `{field}` is not a finite number"),
        }),
    }
}

/// Loads a long-format CSV file (one row per observation-alternative pair).
pub fn load_long_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<ChoiceDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_long_csv(file, schema)
}

/// Reader-based variant of [`load_long_csv`]. Lines starting with `#` are skipped.
pub fn read_long_csv<R: Read>(reader: R, schema: &DatasetSchema) -> Result<ChoiceDataset> {
    let alternatives = schema.alternatives();
    let reference = schema.reference_index()?;
    let attrs = &schema.attributes;
    attrs.validate()?;
    let j_count = alternatives.len();

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| column(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")));
    let c_obs = required(COL_OBS_ID)?;
    let c_alt = required(COL_ALT_ID)?;
    let c_chosen = required(COL_CHOSEN)?;
    let c_avail = required(COL_AVAILABLE)?;
    let c_sub = required(COL_SUBSAMPLE)?;
    let c_weight = column(COL_WEIGHT);
    let alt_cols = attrs
        .alt_attributes
        .iter()
        .map(|n| required(n))
        .collect::<Result<Vec<_>>>()?;
    let trip_cols = attrs
        .trip_attributes
        .iter()
        .map(|n| required(n))
        .collect::<Result<Vec<_>>>()?;

    struct Pending {
        obs: Observation,
        seen: Vec<bool>,
        chosen_rows: usize,
        trip_seen: bool,
        first_row: usize,
    }
    let mut order: Vec<i64> = Vec::new();
    let mut pending: HashMap<i64, Pending> = HashMap::new();

    for (i, record) in rdr.records().enumerate() {
        let position_row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map(|p| p.line() as usize).unwrap_or(position_row),
            message: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(position_row);
        let obs_id: i64 = parse_int(&record[c_obs], COL_OBS_ID, row)?;
        let alt: usize = parse_int(&record[c_alt], COL_ALT_ID, row)?;
        if alt >= j_count {
            return Err(Error::Parse {
                row,
                message: format!("alt_id {alt} out of range (J = {j_count})"),
            });
        }
        let chosen = parse_flag(&record[c_chosen], COL_CHOSEN, row)?;
        let available = parse_flag(&record[c_avail], COL_AVAILABLE, row)?;
        let subsample: i64 = parse_int(&record[c_sub], COL_SUBSAMPLE, row)?;
        let weight = match c_weight {
            Some(c) if !record[c].trim().is_empty() => parse_value(&record[c], COL_WEIGHT, row)?,
            _ => 1.0,
        };

        let entry = pending.entry(obs_id).or_insert_with(|| {
            order.push(obs_id);
            Pending {
                obs: Observation {
                    obs_id,
                    chosen: usize::MAX,
                    available: vec![false; j_count],
                    alt_attrs: vec![vec![f64::NAN; alt_cols.len()]; j_count],
                    trip_attrs: vec![f64::NAN; trip_cols.len()],
                    subsample_id: subsample,
                    weight,
                },
                seen: vec![false; j_count],
                chosen_rows: 0,
                trip_seen: false,
                first_row: row,
            }
        });
        if entry.seen[alt] {
            return Err(Error::Parse {
                row,
                message: format!("duplicate row for (obs_id {obs_id}, alt_id {alt})"),
            });
        }
        entry.seen[alt] = true;
        if entry.obs.subsample_id != subsample {
            return Err(Error::Parse {
                row,
                message: format!("observation {obs_id} has inconsistent subsample_id"),
            });
        }
        if entry.obs.weight != weight {
            return Err(Error::Parse {
                row,
                message: format!("observation {obs_id} has inconsistent weight"),
            });
        }
        if chosen {
            if !available {
                return Err(Error::Parse {
                    row,
                    message: format!("observation {obs_id}: chosen not available"),
                });
            }
            entry.chosen_rows += 1;
            entry.obs.chosen = alt;
        }
        entry.obs.available[alt] = available;
        for (a, &c) in alt_cols.iter().enumerate() {
            entry.obs.alt_attrs[alt][a] = parse_value(&record[c], &headers[c], row)?;
        }
        for (b, &c) in trip_cols.iter().enumerate() {
            let v = parse_value(&record[c], &headers[c], row)?;
            if !entry.trip_seen {
                entry.obs.trip_attrs[b] = v;
            } else {
                let prev = entry.obs.trip_attrs[b];
                let same = (prev.is_nan() && v.is_nan()) || prev == v;
                if !same {
                    return Err(Error::Parse {
                        row,
                        message: format!(
                            "trip attribute `{}` differs across rows of observation {obs_id}",
                            &headers[c]
                        ),
                    });
                }
            }
        }
        entry.trip_seen = true;
    }

    let mut observations = Vec::with_capacity(order.len());
    for id in order {
        let p = pending.remove(&id).expect("observation recorded in order");
        match p.chosen_rows {
            1 => {}
            0 => {
                return Err(Error::Parse {
                    row: p.first_row,
                    message: format!("observation {id} has no chosen alternative"),
                })
            }
            k => {
                return Err(Error::Parse {
                    row: p.first_row,
                    message: format!("observation {id} has {k} chosen alternatives"),
                })
            }
        }
        if p.obs.available_count() < 2 {
            return Err(Error::Parse {
                row: p.first_row,
                message: format!("observation {id} has fewer than two available alternatives"),
            });
        }
        observations.push(p.obs);
    }
    ChoiceDataset::new(alternatives, reference, attrs.clone(), observations)
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes the dataset in the long layout understood by [`read_long_csv`].
/// Every alternative gets a row; unavailable ones are flagged `available = 0`.
pub fn write_long_csv<W: Write>(dataset: &ChoiceDataset, writer: W) -> Result<()> {
    let schema = dataset.schema();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = vec![
        COL_OBS_ID,
        COL_ALT_ID,
        COL_CHOSEN,
        COL_AVAILABLE,
        COL_SUBSAMPLE,
        COL_WEIGHT,
    ];
    header.extend(schema.alt_attributes.iter().map(String::as_str));
    header.extend(schema.trip_attributes.iter().map(String::as_str));
    let to_err = |e: csv::Error| Error::Schema(format!("CSV write failed: {e}"));
    wtr.write_record(&header).map_err(to_err)?;
    for obs in dataset.observations() {
        for j in 0..dataset.n_alternatives() {
            let mut record = vec![
                obs.obs_id.to_string(),
                j.to_string(),
                u8::from(obs.chosen == j).to_string(),
                u8::from(obs.available[j]).to_string(),
                obs.subsample_id.to_string(),
                fmt_value(obs.weight),
            ];
            record.extend(obs.alt_attrs[j].iter().map(|v| fmt_value(*v)));
            record.extend(obs.trip_attrs.iter().map(|v| fmt_value(*v)));
            wtr.write_record(&record).map_err(to_err)?;
        }
    }
    wtr.flush()
        .map_err(|e| Error::Schema(format!("CSV write failed: {e}")))?;
    Ok(())
}

pub fn save_long_csv(dataset: &ChoiceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_long_csv(dataset, std::io::BufWriter::new(file))
}

/// Six harmonic terms of the departure minute:
/// `sin(2πt/1440), sin(4πt/1440), sin(6πt/1440), cos(2πt/1440), cos(4πt/1440), cos(6πt/1440)`.
pub fn cyclic_time_features(t: f64) -> Result<[f64; 6]> {
    if !(0.0..MINUTES_PER_DAY).contains(&t) {
        return Err(Error::Domain(format!("departure minute {t} outside [0, 1440)")));
    }
    let base = 2.0 * PI * t / MINUTES_PER_DAY;
    Ok([
        base.sin(),
        (2.0 * base).sin(),
        (3.0 * base).sin(),
        base.cos(),
        (2.0 * base).cos(),
        (3.0 * base).cos(),
    ])
}

/// Land-use diversity `D = (Σ_c p_c ln p_c) / |C|`, with `0 ln 0 = 0`.
///
/// The value is non-positive; no sign flip or `ln |C|` normalisation is applied.
pub fn entropy_diversity_index(proportions: &[f64]) -> Result<f64> {
    if proportions.is_empty() {
        return Err(Error::Domain("no land-use categories".into()));
    }
    if let Some(p) = proportions.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Domain(format!("invalid proportion {p}")));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("proportions sum to {total}, not 1")));
    }
    let sum: f64 = proportions.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
    Ok(sum / proportions.len() as f64)
}

/// Location and scale of a standardising transform (sample std, ddof = 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain("standardisation needs at least two values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Domain("zero variance: cannot standardise".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }
}

/// Standardises `values`, returning the transformed vector and the transform
/// so it can be reused on counterfactual or resampled data.
pub fn standardize(values: &[f64]) -> Result<(Vec<f64>, Standardization)> {
    let t = Standardization::fit(values)?;
    Ok((values.iter().map(|v| t.apply(*v)).collect(), t))
}
