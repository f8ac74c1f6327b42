use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusedchoice_cli::commands::{read_result, ELASTICITY_FILE, RESULT_FILE, WELFARE_SUMMARY_FILE};

const BIN: &str = env!("CARGO_BIN_EXE_fusedchoice");

fn synth_config(seed: Option<u64>, endogenous: bool) -> String {
    let seed = seed.map_or(String::new(), |s| format!("seed = {s}\n"));
    let (phi, endo) = if endogenous { (1.0, "true") } else { (0.0, "false") };
    format!(
        r#"
[output]
directory = "sim"

[estimation]
bootstrap = 0

[welfare]
draws = 50
group_by = "zone"

[synth]
n = 1500
beta_time = -1.0
gamma = 1.0
xi_std = 0.5
phi = {phi}
zones = 3
{seed}
[[synth.alternatives]]
label = "walk"

[[synth.alternatives]]
label = "transit"
asc = 0.5
beta_cost = -1.0
price_intercept = 1.0

[[synth.alternatives]]
label = "tnc"
asc = 1.0
beta_cost = -0.8
endogenous = {endo}
price_intercept = 2.0
availability = 0.8

[[scenarios]]
name = "no-op"
type = "fixed_tax"
alternatives = ["tnc"]
amount = 0.0

[[scenarios]]
name = "no tnc"
type = "eliminate"
alternatives = ["tnc"]
"#
    )
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path, endogenous: bool) -> PathBuf {
    fs::write(dir.join("sim.toml"), synth_config(Some(11), endogenous)).unwrap();
    ok(&run(&["simulate", "sim.toml"], dir));
    dir.join("sim").join("run.toml")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn simulate_writes_data_truth_and_run_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), true);
    let sim = tmp.path().join("sim");
    for f in ["data.csv", "truth.json", "run.toml"] {
        assert!(sim.join(f).is_file(), "{f} missing");
    }
    let head = fs::read_to_string(sim.join("data.csv")).unwrap();
    assert!(head.starts_with("# config_hash: "));
    let loaded = fusedchoice_cli::LoadedConfig::load(&run_toml).unwrap();
    loaded.validate_for_estimation().unwrap();
    assert_eq!(loaded.load_dataset().unwrap().len(), 1500);
}

#[test]
fn missing_seed_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("sim.toml"), synth_config(None, false)).unwrap();
    let out = run(&["simulate", "sim.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(fusedchoice_cli::EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_config_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["estimate", "nope.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(fusedchoice_cli::EXIT_IO));
}

#[test]
fn simulate_rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), true);
    simulate(b.path(), true);
    for f in ["data.csv", "truth.json", "run.toml"] {
        let x = fs::read(a.path().join("sim").join(f)).unwrap();
        let y = fs::read(b.path().join("sim").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn no_sampling_correction_on_random_sample_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), false);
    let results = run_toml.parent().unwrap().join("results");
    let rt = run_toml.to_str().unwrap();

    ok(&run(&["estimate", rt], tmp.path()));
    let corrected = read_result(&results.join(RESULT_FILE)).unwrap().result;
    ok(&run(&["estimate", rt, "--no-sampling-correction"], tmp.path()));
    let plain = read_result(&results.join(RESULT_FILE)).unwrap().result;

    assert!(corrected.sampling_corrected && !plain.sampling_corrected);
    for (a, b) in corrected.parameters.iter().zip(&plain.parameters) {
        assert_eq!(a.name, b.name);
        assert!(
            (a.estimate - b.estimate).abs() < 1e-9,
            "{}: {} vs {}",
            a.name,
            a.estimate,
            b.estimate
        );
    }
    assert!((corrected.log_likelihood - plain.log_likelihood).abs() < 1e-9);
}

#[test]
fn malformed_term_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), false);
    let text = fs::read_to_string(&run_toml).unwrap();
    let broken = text.replacen("attribute = \"time\"", "attribute = \"fare\"", 1);
    assert_ne!(text, broken);
    fs::write(&run_toml, broken).unwrap();
    let out = run(&["estimate", run_toml.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(fusedchoice_cli::EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("b_time") && err.contains("fare"), "{err}");
}

#[test]
fn control_term_without_stage1_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), true);
    let text = fs::read_to_string(&run_toml).unwrap();
    let start = text.find("[stage1]").unwrap();
    let end = start + text[start..].find("\n\n").unwrap();
    fs::write(&run_toml, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let out = run(&["estimate", run_toml.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(fusedchoice_cli::EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1"));
}

#[test]
fn compare_writes_both_fits_and_lr_test() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), true);
    ok(&run(&["estimate", run_toml.to_str().unwrap(), "--compare"], tmp.path()));
    let results = run_toml.parent().unwrap().join("results");
    let lr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(results.join("lr_test.json")).unwrap()).unwrap();
    assert_eq!(lr["df"], 1);
    assert!(lr["statistic"].as_f64().unwrap() > 3.84);
    let full = read_result(&results.join(RESULT_FILE)).unwrap();
    let restricted = read_result(&results.join("estimates_uncorrected.json")).unwrap();
    assert!(full.result.get("phi").is_some());
    assert!(restricted.result.get("phi").is_none());
    assert_eq!(full.config_hash, restricted.config_hash);
}

#[test]
fn elasticity_grid_shape_and_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), false);
    let mut text = fs::read_to_string(&run_toml).unwrap();
    text.push_str("\n[utility.parameters.b_time]\nstart = 0.0\nfixed = true\n");
    fs::write(&run_toml, text).unwrap();
    let rt = run_toml.to_str().unwrap();
    ok(&run(&["estimate", rt], tmp.path()));
    ok(&run(&["elasticity", rt], tmp.path()));

    let rows = csv_rows(&run_toml.parent().unwrap().join("results").join(ELASTICITY_FILE));
    assert_eq!(
        rows[0],
        ["alternative", "cost_point", "cost_arc", "time_point", "time_arc"]
    );
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 5));
    let walk = &rows[1];
    assert_eq!(walk[0], "walk");
    assert_eq!((walk[1].as_str(), walk[2].as_str()), ("", ""));
    for row in &rows[1..] {
        for cell in &row[3..] {
            assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "{row:?}");
        }
    }
    for row in &rows[2..] {
        assert!(row[1].parse::<f64>().unwrap() < 0.0);
    }
}

#[test]
fn welfare_outputs_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), true);
    let rt = run_toml.to_str().unwrap();
    ok(&run(&["estimate", rt], tmp.path()));
    ok(&run(&["welfare", rt], tmp.path()));
    let results = run_toml.parent().unwrap().join("results");

    let noop = csv_rows(&results.join("welfare_no-op.csv"));
    assert_eq!(noop[0], ["obs_id", "nu", "mc_se", "zone"]);
    assert!(noop[1..].iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));

    let summary = csv_rows(&results.join(WELFARE_SUMMARY_FILE));
    assert_eq!(summary[1][0], "no-op");
    for cell in &summary[1][2..] {
        assert_eq!(cell.parse::<f64>().unwrap(), 0.0);
    }

    let per_obs = csv_rows(&results.join("welfare_no_tnc.csv"));
    let nus: Vec<f64> = per_obs[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let mean = nus.iter().sum::<f64>() / nus.len() as f64;
    let reported: f64 = summary[2][2].parse().unwrap();
    assert!((mean - reported).abs() < 1e-12, "{mean} vs {reported}");
    assert!(reported > 0.0);

    let groups = csv_rows(&results.join("welfare_no_tnc_groups.csv"));
    let counted: usize = groups[1..].iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(counted, nus.len());
}

#[test]
fn tax_on_never_available_alternative_is_free() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), false);
    let sim = run_toml.parent().unwrap();
    let rt = run_toml.to_str().unwrap();
    ok(&run(&["estimate", rt], tmp.path()));

    // Drop every trip that chose tnc and make tnc unavailable in the rest.
    let data = fs::read_to_string(sim.join("data.csv")).unwrap();
    let lines: Vec<&str> = data.lines().filter(|l| !l.starts_with('#')).collect();
    let tnc_choosers: std::collections::HashSet<&str> = lines[1..]
        .iter()
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[1] == "2" && f[2] == "1"
        })
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let mut out = vec![lines[0].to_string()];
    for l in &lines[1..] {
        let mut f: Vec<String> = l.split(',').map(String::from).collect();
        if tnc_choosers.contains(f[0].as_str()) {
            continue;
        }
        if f[1] == "2" {
            f[3] = "0".into();
        }
        out.push(f.join(","));
    }
    fs::write(sim.join("data_no_tnc.csv"), out.join("\n") + "\n").unwrap();

    let text = fs::read_to_string(&run_toml).unwrap();
    let text = text.replace("path = \"data.csv\"", "path = \"data_no_tnc.csv\"");
    let start = text.find("[[scenarios]]").unwrap();
    let text = format!(
        "{}[[scenarios]]\nname = \"tax\"\ntype = \"fixed_tax\"\nalternatives = [\"tnc\"]\namount = 5.0\n",
        &text[..start]
    );
    fs::write(sim.join("never.toml"), text).unwrap();
    let result = sim.join("results").join(RESULT_FILE);
    ok(&run(
        &[
            "welfare",
            sim.join("never.toml").to_str().unwrap(),
            "--result",
            result.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    let rows = csv_rows(&sim.join("results").join("welfare_tax.csv"));
    assert!(rows.len() > 1);
    assert!(rows[1..].iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn outputs_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let run_toml = simulate(tmp.path(), false);
    let hash = fusedchoice_cli::config::config_hash(&fs::read(&run_toml).unwrap());
    ok(&run(&["estimate", run_toml.to_str().unwrap()], tmp.path()));
    let results = run_toml.parent().unwrap().join("results");
    let first = fs::read_to_string(results.join("estimates.csv")).unwrap();
    assert_eq!(first.lines().next().unwrap(), format!("# config_hash: {hash}"));
    assert_eq!(read_result(&results.join(RESULT_FILE)).unwrap().config_hash, hash);
}
