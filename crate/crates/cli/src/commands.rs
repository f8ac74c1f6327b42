use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fusedchoice::dataset::{write_long_csv, ChoiceDataset, DatasetSchema};
use fusedchoice::estimate::{
    extra_parameters, format_sig, lr_test, maximize_likelihood, two_stage_estimate, EstimationResult, LrTest,
};
use fusedchoice::poststat::{
    arc_elasticity_aggregate, enters_utility, point_elasticity_direct, simulate_compensating_variation, WelfareOptions,
    WelfareReport,
};
use fusedchoice::sampling::AlphaWeights;
use fusedchoice::synth::simulate_dataset;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSection, LoadedConfig, OutputSection, RunConfig, SamplingSection};
use crate::output::{num, opt, slug, write_csv, write_json, write_text};
use crate::CliError;

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const RESULT_FILE: &str = "estimates.json";
pub const UNCORRECTED_RESULT_FILE: &str = "estimates_uncorrected.json";
pub const LR_FILE: &str = "lr_test.json";
pub const ELASTICITY_FILE: &str = "elasticities.csv";
pub const WELFARE_SUMMARY_FILE: &str = "welfare_summary.csv";

/// Simulates data from the `[synth]` section and writes the long CSV, the
/// truth record and a run configuration for estimating on it.
pub fn cmd_simulate(config_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let dgp = loaded
        .config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [synth] section".into()))?;
    let (dataset, truth) = simulate_dataset(dgp)?;
    let dir = loaded.output_dir()?;

    let data_path = dir.join(DATA_FILE);
    let mut file = fs::File::create(&data_path).map_err(|source| CliError::Io {
        path: data_path.clone(),
        source,
    })?;
    writeln!(file, "# config_hash: {}", loaded.hash).map_err(|source| CliError::Io {
        path: data_path.clone(),
        source,
    })?;
    write_long_csv(&dataset, std::io::BufWriter::new(file))?;

    let truth_path = write_json(&dir.join(TRUTH_FILE), &loaded.hash, &truth)?;

    let schema: DatasetSchema = dgp.schema();
    let mut estimation = loaded.config.estimation.clone();
    estimation.seed = dgp.seed;
    let run = RunConfig {
        dataset: Some(DatasetSection {
            path: PathBuf::from(DATA_FILE),
            schema: schema.clone(),
        }),
        sampling: SamplingSection::from_protocol(&truth.protocol, &schema.alternatives),
        utility: Some(dgp.utility_spec()),
        mev: Default::default(),
        stage1: dgp.first_stage_spec(),
        estimation,
        welfare: loaded.config.welfare.clone(),
        elasticity: loaded.config.elasticity.clone(),
        output: OutputSection {
            directory: PathBuf::from("results"),
        },
        synth: None,
        scenarios: loaded.config.scenarios.clone(),
    };
    let text = toml::to_string(&run).map_err(|e| CliError::Config(format!("cannot write run config: {e}")))?;
    let header = format!("# generated by simulate; source config_hash: {}\n", loaded.hash);
    let run_path = write_text(&dir.join(RUN_CONFIG_FILE), &(header + &text))?;
    Ok(vec![data_path, truth_path, run_path])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EstimateFlags {
    pub no_endogeneity_correction: bool,
    pub no_sampling_correction: bool,
    /// Fit with and without the control function and test between them.
    pub compare: bool,
}

#[derive(Serialize, Deserialize)]
pub struct ResultFile {
    #[serde(default)]
    pub config_hash: String,
    pub model: String,
    pub result: EstimationResult,
}

#[derive(Serialize)]
struct ResultBody<'a> {
    model: &'a str,
    result: &'a EstimationResult,
}

fn describe(two_stage: bool, sampling_corrected: bool) -> String {
    format!(
        "{}, {}",
        if two_stage {
            "two-stage control function"
        } else {
            "single stage"
        },
        if sampling_corrected {
            "sampling-corrected"
        } else {
            "no sampling correction"
        }
    )
}

fn emit_result(
    dir: &Path,
    json_name: &str,
    hash: &str,
    model: &str,
    result: &EstimationResult,
) -> Result<Vec<PathBuf>, CliError> {
    let stem = json_name.trim_end_matches(".json");
    let mut files = vec![write_json(&dir.join(json_name), hash, &ResultBody { model, result })?];
    let mut text = format!("Model: {model}\n\n{}", result.table());
    if let Some(fs) = &result.first_stage {
        let _ = write!(text, "\n{}", fs.report());
    }
    files.push(write_text(&dir.join(format!("{stem}.txt")), &text)?);
    let rows: Vec<Vec<String>> = result
        .parameters
        .iter()
        .map(|p| {
            vec![
                p.name.clone(),
                num(p.estimate),
                opt(p.std_error),
                opt(p.z),
                p.fixed.to_string(),
            ]
        })
        .collect();
    let header = ["parameter", "estimate", "std_error", "z", "fixed"].map(String::from);
    files.push(write_csv(&dir.join(format!("{stem}.csv")), hash, &header, &rows)?);
    print!("{text}");
    Ok(files)
}

fn fit(
    loaded: &LoadedConfig,
    dataset: &ChoiceDataset,
    alpha: &AlphaWeights,
    two_stage: bool,
) -> Result<EstimationResult, CliError> {
    let c = &loaded.config;
    let spec = loaded.utility()?;
    Ok(match (&c.stage1, two_stage) {
        (Some(fs), true) => two_stage_estimate(&c.mev, spec, fs, dataset, alpha, &c.estimation)?,
        _ => maximize_likelihood(&c.mev, &spec.without_control(), dataset, alpha, &c.estimation)?,
    })
}

/// One- or two-stage estimation per the flags; `--compare` adds the fit
/// without control terms and the likelihood-ratio test between the two.
pub fn cmd_estimate(config_path: &Path, flags: EstimateFlags) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    loaded.validate_for_estimation()?;
    let has_stage1 = loaded.config.stage1.is_some();
    if flags.compare && !has_stage1 {
        return Err(CliError::Config("--compare needs a [stage1] section".into()));
    }
    if flags.compare && flags.no_endogeneity_correction {
        return Err(CliError::Config(
            "--compare and --no-endogeneity-correction exclude each other".into(),
        ));
    }
    let dataset = loaded.load_dataset()?;
    let alpha = if flags.no_sampling_correction {
        AlphaWeights::Uniform {
            n_alternatives: dataset.n_alternatives(),
        }
    } else {
        loaded.alpha(&dataset)?
    };
    let sampling_corrected = !flags.no_sampling_correction;
    let dir = loaded.output_dir()?;
    let two_stage = has_stage1 && !flags.no_endogeneity_correction;

    let primary = fit(&loaded, &dataset, &alpha, two_stage)?;
    let mut files = emit_result(
        &dir,
        RESULT_FILE,
        &loaded.hash,
        &describe(two_stage, sampling_corrected),
        &primary,
    )?;
    if flags.compare {
        let restricted = fit(&loaded, &dataset, &alpha, false)?;
        println!();
        files.extend(emit_result(
            &dir,
            UNCORRECTED_RESULT_FILE,
            &loaded.hash,
            &describe(false, sampling_corrected),
            &restricted,
        )?);
        let df = extra_parameters(&primary, &restricted);
        let test: LrTest = lr_test(restricted.log_likelihood, primary.log_likelihood, df)?;
        println!(
            "\nLR test of endogeneity correction: statistic {}, df {}, p-value {:.3e}",
            format_sig(test.statistic),
            test.df,
            test.p_value
        );
        files.push(write_json(&dir.join(LR_FILE), &loaded.hash, &test)?);
    }
    Ok(files)
}

pub fn read_result(path: &Path) -> Result<ResultFile, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn result_for(loaded: &LoadedConfig, result_path: Option<&Path>) -> Result<ResultFile, CliError> {
    let path = match result_path {
        Some(p) => p.to_path_buf(),
        None => loaded.resolve(&loaded.config.output.directory).join(RESULT_FILE),
    };
    read_result(&path)
}

/// Grid of aggregate point and arc elasticities, one row per alternative and
/// two columns per attribute. Cells are empty where the attribute does not
/// enter the alternative's utility.
pub fn cmd_elasticity(config_path: &Path, result_path: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let result = result_for(&loaded, result_path)?.result;
    let dataset = loaded.load_dataset()?;
    let settings = &loaded.config.elasticity;
    let alternatives: Vec<String> = match &settings.alternatives {
        Some(a) => a.clone(),
        None => dataset.alternatives().iter().map(|a| a.label.clone()).collect(),
    };
    let mut header = vec!["alternative".to_string()];
    for attr in &settings.attributes {
        header.push(format!("{attr}_point"));
        header.push(format!("{attr}_arc"));
    }
    let mut rows = Vec::new();
    let mut table = String::new();
    let _ = write!(table, "{:<16}", "Alternative");
    for h in &header[1..] {
        let _ = write!(table, " {h:>16}");
    }
    table.push('\n');
    for alt in &alternatives {
        let mut row = vec![alt.clone()];
        let _ = write!(table, "{alt:<16}");
        for attr in &settings.attributes {
            let has_attribute = dataset.alt_attr_index(attr).is_ok();
            let cells = if has_attribute && enters_utility(&result, &dataset, attr, alt)? {
                let point = point_elasticity_direct(&result, &dataset, attr, alt, settings.weighting)?;
                let arc = arc_elasticity_aggregate(&result, &dataset, attr, alt, settings.perturbation)?;
                [Some(point), Some(arc)]
            } else {
                [None, None]
            };
            for c in cells {
                row.push(opt(c));
                let _ = write!(table, " {:>16}", c.map_or("NaN".to_string(), format_sig));
            }
        }
        table.push('\n');
        rows.push(row);
    }
    print!("{table}");
    let dir = loaded.output_dir()?;
    Ok(vec![write_csv(
        &dir.join(ELASTICITY_FILE),
        &loaded.hash,
        &header,
        &rows,
    )?])
}

#[derive(Serialize)]
struct WelfareSummaries<'a> {
    scenarios: Vec<&'a WelfareReport>,
}

/// Simulated compensating variations for every declared scenario.
pub fn cmd_welfare(config_path: &Path, result_path: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    if loaded.config.scenarios.is_empty() {
        return Err(CliError::Config("no [[scenarios]] declared".into()));
    }
    let result = result_for(&loaded, result_path)?.result;
    let dataset = loaded.load_dataset()?;
    let w = &loaded.config.welfare;
    let options = WelfareOptions {
        draws: w.draws,
        seed: w.seed,
        group_by: w.group_by.clone(),
    };
    let dir = loaded.output_dir()?;
    let mut files = Vec::new();
    let mut reports = Vec::new();
    for scenario in &loaded.config.scenarios {
        let report = simulate_compensating_variation(&result, &dataset, scenario, &options)?;
        let name = slug(&scenario.name);
        let mut header = ["obs_id", "nu", "mc_se"].map(String::from).to_vec();
        if let Some(g) = &options.group_by {
            header.push(g.clone());
        }
        let rows: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.obs_id.to_string(), num(r.nu), num(r.mc_se)];
                if options.group_by.is_some() {
                    row.push(opt(r.group));
                }
                row
            })
            .collect();
        files.push(write_csv(
            &dir.join(format!("welfare_{name}.csv")),
            &loaded.hash,
            &header,
            &rows,
        )?);
        if let Some(g) = &options.group_by {
            let header = [g.as_str(), "count", "mean", "total"].map(String::from);
            let rows: Vec<Vec<String>> = report
                .groups
                .iter()
                .map(|a| vec![num(a.group), a.count.to_string(), num(a.mean), num(a.total)])
                .collect();
            files.push(write_csv(
                &dir.join(format!("welfare_{name}_groups.csv")),
                &loaded.hash,
                &header,
                &rows,
            )?);
        }
        reports.push(report);
    }

    let header = ["scenario", "count", "mean", "std", "min", "q1", "median", "q3", "max"].map(String::from);
    let mut rows = Vec::new();
    println!(
        "{:<20} {:>8} {:>12} {:>12} {:>12} {:>12}",
        "Scenario", "N", "mean", "q1", "median", "q3"
    );
    for r in &reports {
        let row = match &r.summary {
            Some(s) => {
                println!(
                    "{:<20} {:>8} {:>12} {:>12} {:>12} {:>12}",
                    r.scenario,
                    s.count,
                    format_sig(s.mean),
                    format_sig(s.q1),
                    format_sig(s.median),
                    format_sig(s.q3)
                );
                vec![
                    r.scenario.clone(),
                    s.count.to_string(),
                    num(s.mean),
                    num(s.std),
                    num(s.min),
                    num(s.q1),
                    num(s.median),
                    num(s.q3),
                    num(s.max),
                ]
            }
            None => {
                println!("{:<20} {:>8}", r.scenario, 0);
                let mut row = vec![r.scenario.clone(), "0".into()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row
            }
        };
        rows.push(row);
    }
    files.push(write_csv(
        &dir.join(WELFARE_SUMMARY_FILE),
        &loaded.hash,
        &header,
        &rows,
    )?);
    files.push(write_json(
        &dir.join("welfare_summary.json"),
        &loaded.hash,
        &WelfareSummaries {
            scenarios: reports.iter().collect(),
        },
    )?);
    Ok(files)
}
