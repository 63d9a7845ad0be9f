//! Exit-code and stage behaviour of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn write_config(dir: &Path, run_dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
[data]
source = "synthetic"

[data.synthetic]
n_control = 1
n_patient = 2
seed = 3
image_size = 48
fiber_count = 5
mean_fiber_diameter = 12.0
membrane_thickness = 1
noise_sd = 100.0
hole_fraction = 0.0
deficient_fiber_fraction = 0.5
deficiency_factor = 0.3
rrf_fraction = 0.0
rrf_gain = 1.5
deficient_channels = ["NDUFB8"]
subsarcolemmal_band = 2
subsarcolemmal_gain = 1.2

[data.synthetic.baseline_intensity]
Dystrophin = 20000.0
NDUFB8 = 25600.0
VDAC1 = 10000.0

[preprocess]
patch_size = 24
split_seed = 2
group_by_subject = false

[train]
backbones = ["smallcnn"]
channel_selections = ["NDUFB8"]
seeds = [1]
learning_rate = 0.01
max_epochs = 1
batch_size = 4
early_stop_patience = 1

[explain]
top_k = 1
patches_per_class = 1
methods = ["gradients"]

[output]
dir = "{}"
"#,
        run_dir.display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mitoxplain"))
}

#[test]
fn synth_stage_exits_zero_and_writes_data() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), &run_dir);

    let output = binary().args(["synth", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(run_dir.join("data/subjects.csv").exists());
    assert!(run_dir.join("manifest.toml").exists());
    // the pipeline halts after the data stage
    assert!(!run_dir.join("patches").exists());
}

#[test]
fn full_run_and_report_print() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), &run_dir);

    let output = binary().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(run_dir.join("report.md").exists());

    let report = binary().args(["report", "--config"]).arg(&config).output().unwrap();
    assert!(report.status.success());
    let stdout = String::from_utf8_lossy(&report.stdout);
    assert!(stdout.contains("# Experiment report"));
    assert!(stdout.contains("| Model |"));

    // everything reused when the pipeline runs again
    let rerun = binary().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(rerun.status.success());
    assert!(String::from_utf8_lossy(&rerun.stderr).contains("skipped"));
}

#[test]
fn report_on_a_bare_run_dir_states_the_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("never-ran");
    let config = write_config(tmp.path(), &run_dir);

    let output = binary().args(["report", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("evaluate stage has not run"));
    assert!(stdout.contains("render stage has not run"));
}

#[test]
fn invalid_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), &run_dir);

    // bad override: empty cohort
    let output = binary()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--n-control", "0", "--n-patient", "0"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));

    // missing config file
    let output = binary()
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    // wrong source for the subcommand
    let output = binary().args(["ingest", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), &run_dir);

    // patch size larger than the image: patchify yields nothing and fails
    let output = binary()
        .args(["patchify", "--config"])
        .arg(&config)
        .args(["--patch-size", "64"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1), "{}", String::from_utf8_lossy(&output.stderr));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("patchify"), "{stderr}");
}

#[test]
fn overrides_reach_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let other_dir = tmp.path().join("elsewhere");
    let config = write_config(tmp.path(), &run_dir);

    let output = binary()
        .args(["synth", "--config"])
        .arg(&config)
        .arg("--output-dir")
        .arg(&other_dir)
        .args(["--n-patient", "3"])
        .args(["--normalization", "percentile:5:95"])
        .args(["--edge-policy", "pad_zero"])
        .args(["--ratios", "0.6,0.2,0.2"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(!run_dir.exists());
    let subjects = fs::read_to_string(other_dir.join("data/subjects.csv")).unwrap();
    assert_eq!(subjects.lines().count() - 1, 4, "1 control + 3 patients");

    // malformed enum values are config errors
    let output = binary()
        .args(["synth", "--config"])
        .arg(&config)
        .args(["--normalization", "minmax"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}
