//! Run configuration: one TOML file drives every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fusedchoice::dataset::{load_long_csv, ChoiceDataset, DatasetSchema};
use fusedchoice::estimate::EstimationConfig;
use fusedchoice::mev::{MevStructure, Term, UtilitySpec};
use fusedchoice::poststat::{Scenario, Weighting};
use fusedchoice::sampling::{compute_alpha, AlphaWeights, SamplingProtocol};
use fusedchoice::stage1::FirstStageSpec;
use fusedchoice::synth::DgpConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    /// Long-format CSV, relative to the configuration file.
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: DatasetSchema,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingSection {
    #[default]
    Random,
    /// One subsample per chosen alternative; shares keyed by label.
    ChoiceBased {
        h: BTreeMap<String, f64>,
        q: BTreeMap<String, f64>,
    },
    /// Arbitrary protocol with alternatives given by index.
    General(SamplingProtocol),
}

impl SamplingSection {
    pub fn protocol(&self, labels: &[String]) -> Result<SamplingProtocol, CliError> {
        match self {
            SamplingSection::Random => Ok(SamplingProtocol::random(labels.len())),
            SamplingSection::ChoiceBased { h, q } => {
                let pick = |map: &BTreeMap<String, f64>, what: &str| {
                    for key in map.keys() {
                        if !labels.contains(key) {
                            return Err(CliError::Config(format!(
                                "sampling.{what}: unknown alternative `{key}`"
                            )));
                        }
                    }
                    labels
                        .iter()
                        .map(|l| {
                            map.get(l)
                                .copied()
                                .ok_or_else(|| CliError::Config(format!("sampling.{what}: missing alternative `{l}`")))
                        })
                        .collect::<Result<Vec<f64>, _>>()
                };
                Ok(SamplingProtocol::choice_based(&pick(h, "h")?, &pick(q, "q")?))
            }
            SamplingSection::General(p) => Ok(p.clone()),
        }
    }

    pub fn from_protocol(protocol: &SamplingProtocol, labels: &[String]) -> Self {
        if protocol.is_choice_based() && protocol.subsamples.len() == labels.len() && protocol.subsamples.len() > 1 {
            let mut h = BTreeMap::new();
            let mut q = BTreeMap::new();
            for (s, label) in protocol.subsamples.iter().zip(labels) {
                h.insert(label.clone(), s.h);
                q.insert(label.clone(), s.q);
            }
            SamplingSection::ChoiceBased { h, q }
        } else if protocol.subsamples.len() == 1 && protocol.subsamples[0].q == 1.0 {
            SamplingSection::Random
        } else {
            SamplingSection::General(protocol.clone())
        }
    }
}

fn default_draws() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelfareSection {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    /// Trip attribute for per-group aggregates.
    #[serde(default)]
    pub group_by: Option<String>,
}

impl Default for WelfareSection {
    fn default() -> Self {
        Self {
            draws: default_draws(),
            seed: 0,
            group_by: None,
        }
    }
}

fn default_attributes() -> Vec<String> {
    vec!["cost".into(), "time".into()]
}

fn default_perturbation() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticitySection {
    #[serde(default = "default_attributes")]
    pub attributes: Vec<String>,
    /// Defaults to every alternative.
    #[serde(default)]
    pub alternatives: Option<Vec<String>>,
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

impl Default for ElasticitySection {
    fn default() -> Self {
        Self {
            attributes: default_attributes(),
            alternatives: None,
            perturbation: default_perturbation(),
            weighting: Weighting::default(),
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Relative to the configuration file.
    #[serde(default = "default_output")]
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_output(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilitySpec>,
    #[serde(default)]
    pub mev: MevStructure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<FirstStageSpec>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub welfare: WelfareSection,
    #[serde(default)]
    pub elasticity: ElasticitySection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<DgpConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<Scenario>,
}

/// A parsed configuration with its location and content hash.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// SHA-256 of the configuration file bytes, hex encoded.
    pub hash: String,
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Config(format!("{}: not valid UTF-8", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            hash: config_hash(&bytes),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.resolve(&self.config.output.directory);
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(dir)
    }

    pub fn dataset_section(&self) -> Result<&DatasetSection, CliError> {
        self.config
            .dataset
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [dataset] section".into()))
    }

    pub fn utility(&self) -> Result<&UtilitySpec, CliError> {
        self.config
            .utility
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [utility] section".into()))
    }

    pub fn load_dataset(&self) -> Result<ChoiceDataset, CliError> {
        let section = self.dataset_section()?;
        Ok(load_long_csv(self.resolve(&section.path), &section.schema)?)
    }

    pub fn alpha(&self, dataset: &ChoiceDataset) -> Result<AlphaWeights, CliError> {
        let labels: Vec<String> = dataset.alternatives().iter().map(|a| a.label.clone()).collect();
        Ok(compute_alpha(&self.config.sampling.protocol(&labels)?, dataset)?)
    }

    /// Checks everything that does not need the data itself.
    pub fn validate_for_estimation(&self) -> Result<(), CliError> {
        let section = self.dataset_section()?;
        let spec = self.utility()?;
        let schema = &section.schema;
        self.config.estimation.validate()?;
        let labels = &schema.alternatives;
        self.config.sampling.protocol(labels)?.validate()?;

        let residual = self.config.stage1.as_ref().map(|s| s.residual_column());
        let has_alt = |a: &str| schema.attributes.alt_index(a).is_some();
        let has_trip = |a: &str| schema.attributes.trip_index(a).is_some();
        for term in &spec.terms {
            let missing = match term {
                Term::Generic { attribute, .. } | Term::AltSpecific { attribute, .. } => {
                    (!has_alt(attribute)).then_some(attribute)
                }
                Term::TripSpecific { attribute, .. } | Term::CyclicTime { attribute, .. } => {
                    (!has_trip(attribute)).then_some(attribute)
                }
                Term::Control { residual: r, .. } => match &residual {
                    None => {
                        return Err(CliError::Config(format!(
                            "term {term}: control terms need a [stage1] section"
                        )))
                    }
                    Some(col) if col != r => {
                        return Err(CliError::Config(format!(
                            "term {term}: residual must be the first-stage column `{col}`"
                        )))
                    }
                    Some(_) => None,
                },
                Term::Asc { .. } => None,
            };
            if let Some(attribute) = missing {
                return Err(CliError::Config(format!(
                    "term {term}: attribute `{attribute}` is not in the dataset schema"
                )));
            }
        }
        if let Some(fs) = &self.config.stage1 {
            fs.validate()?;
            if !spec.has_control() {
                return Err(CliError::Config(
                    "[stage1] given but the utility has no control terms".into(),
                ));
            }
            for name in std::iter::once(&fs.endogenous)
                .chain(&fs.instruments)
                .chain(&fs.covariates)
            {
                if !has_alt(name) && !has_trip(name) {
                    return Err(CliError::Config(format!(
                        "stage1: column `{name}` is not in the dataset schema"
                    )));
                }
            }
        }
        Ok(())
    }
}
