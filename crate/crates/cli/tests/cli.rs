use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_burnmap");

fn burnmap(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("BURNMAP_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path) -> PathBuf {
    ok(&burnmap(&["synth", "--compact", "--out", "scn"], dir));
    dir.join("scn")
}

const QUICK: [&str; 8] = ["--trees", "15", "--max-pixels", "6", "--select-k", "4", "--cv", "5"];

fn run_dir(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().expect("run prints its directory").trim())
}

#[test]
fn full_run_writes_every_artifact_and_a_complete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = synth(tmp.path());
    let mut args = vec!["run", "--config", "scn/run.toml"];
    args.extend(QUICK);
    let dir = tmp.path().join(run_dir(&ok(&burnmap(&args, tmp.path()))));
    assert!(dir.starts_with(scn.join("runs")));
    for f in [
        "features.csv",
        "importance.csv",
        "cv_scores.csv",
        "predictions.csv",
        "thresholds.csv",
        "gaps.csv",
        "separability.csv",
        "manifest.json",
        "config.toml",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\""));
    assert!(manifest.contains("\"config_hash\""));
}

#[test]
fn identical_runs_get_new_directories_and_identical_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let mut args = vec!["run", "--config", "scn/run.toml"];
    args.extend(QUICK);
    let a = tmp.path().join(run_dir(&ok(&burnmap(&args, tmp.path()))));
    let b = tmp.path().join(run_dir(&ok(&burnmap(&args, tmp.path()))));
    assert_ne!(a, b);
    for f in ["predictions.csv", "importance.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn single_sensor_run_has_only_that_sensors_features() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let mut args = vec!["run", "--config", "scn/run.toml", "--sensor-mode", "B_only"];
    args.extend(QUICK);
    let dir = tmp.path().join(run_dir(&ok(&burnmap(&args, tmp.path()))));
    let importance = fs::read_to_string(dir.join("importance.csv")).unwrap();
    assert!(importance.lines().skip(1).all(|l| l.starts_with("B_")));
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let root = tmp.path().join("env_root");
    let mut args = vec!["run", "--manifest", "scn/manifest.json", "--plots", "scn/plots.csv"];
    args.extend(QUICK);
    let out = Command::new(BIN)
        .args(&args)
        .current_dir(tmp.path())
        .env("BURNMAP_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    let dir = run_dir(&ok(&out));
    assert!(dir.starts_with(&root), "{}", dir.display());
}

#[test]
fn missing_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = burnmap(&["run", "--manifest", "nope.json", "--plots", "nope.csv"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn failing_stage_exits_nonzero_and_leaves_an_incomplete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    fs::write(
        tmp.path().join("bad.csv"),
        "plot_id,label,group,wkt_polygon\np1,burned,none,\"POLYGON ((0 0, 1 0))\"\n",
    )
    .unwrap();
    let out = burnmap(
        &["run", "--manifest", "scn/manifest.json", "--plots", "bad.csv", "--output-root", "runs"],
        tmp.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage ingest failed"));
    let run = fs::read_dir(tmp.path().join("runs")).unwrap().next().unwrap().unwrap().path();
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"incomplete\""));
    assert!(manifest.contains("\"failed_stage\": \"ingest\""));
}

#[test]
fn stage_commands_chain_and_refuse_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let scene = ["--manifest", "scn/manifest.json", "--plots", "scn/plots.csv"];
    let with = |cmd: &str, rest: &[&str]| {
        let mut v = vec![cmd];
        v.extend(scene);
        v.extend(rest);
        burnmap(&v, d)
    };
    ok(&with("ingest", &["--out", "gaps.csv"]));
    ok(&with("features", &["--max-pixels", "6", "--out", "features.csv"]));
    ok(&with("separability", &["--events", "scn/events.csv", "--out", "sep.csv"]));
    ok(&burnmap(
        &["train", "--features", "features.csv", "--plots", "scn/plots.csv", "--trees", "20", "--cv", "5", "--out", "train"],
        d,
    ));
    let thr = ok(&burnmap(&["threshold", "--scores", "train/cv_scores.csv", "--out", "thr"], d));
    assert!(thr.contains("max_accuracy") && thr.contains("balanced"));
    ok(&burnmap(
        &[
            "report",
            "--model",
            "train/model.txt",
            "--features",
            "features.csv",
            "--plots",
            "scn/plots.csv",
            "--thresholds",
            "thr/thresholds.json",
            "--out",
            "report",
        ],
        d,
    ));
    let preds = fs::read_to_string(d.join("report/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 41);
    assert!(preds.starts_with("plot_id,mean_score,call_max,call_balanced,label,group"));

    let again = with("ingest", &["--out", "gaps.csv"]);
    assert!(!again.status.success());
}

#[test]
fn ablation_compares_three_sensor_modes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let mut args = vec!["ablate", "--config", "scn/run.toml", "--no-select", "--pool", "10"];
    args.extend(QUICK);
    let stdout = ok(&burnmap(&args, tmp.path()));
    let root = tmp.path().join(run_dir(&stdout));
    let cmp = fs::read_to_string(root.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 7);
    for mode in ["combined", "A_only", "B_only"] {
        assert!(cmp.contains(mode));
    }
}

#[test]
fn unknown_sensor_mode_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = burnmap(&["run", "--manifest", "m", "--plots", "p", "--sensor-mode", "C_only"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
