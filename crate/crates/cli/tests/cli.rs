use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set",
    "data.samples_per_class=2",
    "--set",
    "data.val_per_class=2",
    "--set",
    "data.steps=4",
    "--set",
    "train.epochs=1",
    "--set",
    "ablate.seeds=0",
];

fn masnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--quiet", "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    masnn(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p.to_string_lossy().into_owned());
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(masnn(&["bogus"]).status.code(), Some(2));
    assert_eq!(masnn(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    ok(&masnn(&["--help"]));
}

#[test]
fn invalid_config_exits_three_with_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[lif]\nbeta = 2\n").unwrap();
    let o = masnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.ini:2"), "{}", err);

    let o = masnn(&["train", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(3));
    let o = masnn(&["train", "--set", "lif.beta"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let o = tiny("eval", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_is_reproducible_and_eval_matches() {
    let dir = TempDir::new().unwrap();
    let files = ["train_report.csv", "metrics.csv", "checkpoint.bin"];
    ok(&tiny("train", dir.path(), &["--seed", "7"]));
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    ok(&tiny("train", dir.path(), &["--seed", "7"]));
    for (f, want) in files.iter().zip(&first) {
        assert_eq!(&fs::read(dir.path().join(f)).unwrap(), want, "{} differs", f);
    }
    ok(&tiny("eval", dir.path(), &[]));
    assert!(dir.path().join("eval.csv").exists());
}

#[test]
fn different_seeds_differ() {
    let dir = TempDir::new().unwrap();
    ok(&tiny("train", dir.path(), &["--seed", "1"]));
    let a = fs::read(dir.path().join("metrics.csv")).unwrap();
    ok(&tiny("train", dir.path(), &["--seed", "2"]));
    assert_ne!(fs::read(dir.path().join("metrics.csv")).unwrap(), a);
}

#[test]
fn ablate_dims_grid_has_eight_rows() {
    let dir = TempDir::new().unwrap();
    ok(&tiny("ablate", dir.path(), &["--grid", "dims"]));
    let csv = fs::read_to_string(dir.path().join("ablate_dims.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "{}", csv);
    let cells: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(cells, ["none", "TA", "CA", "SA", "TCA", "TSA", "CSA", "TCSA"]);
    assert!(!dir.path().join("ablate_locations.csv").exists());
}

#[test]
fn artifacts_stay_under_out_dir() {
    let root = TempDir::new().unwrap();
    let out = root.path().join("run");
    ok(&tiny("synth-data", &out, &[]));
    ok(&tiny("train", &out, &[]));
    ok(&tiny("profile-energy", &out, &[]));
    ok(&tiny("visualize", &out, &["--step", "1"]));
    ok(&tiny("check-isometry", &out, &[]));
    let top: Vec<_> = fs::read_dir(root.path()).unwrap().collect();
    assert_eq!(top.len(), 1);
    let files = files_under(&out);
    for want in [
        "config.ini",
        "labels.csv",
        "checkpoint.bin",
        "energy.csv",
        "isometry.csv",
        "rates.csv",
        "conv1_t01.ppm",
    ] {
        assert!(files.iter().any(|f| f.ends_with(want)), "missing {} in {:?}", want, files);
    }
}

#[test]
fn heatmaps_are_p6() {
    let dir = TempDir::new().unwrap();
    ok(&tiny("visualize", dir.path(), &["--layer", "conv2", "--step", "0"]));
    let img = fs::read(dir.path().join("asrv").join("conv2_t00.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n"));
    let o = tiny("visualize", dir.path(), &["--layer", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn energy_report_has_ratio() {
    let dir = TempDir::new().unwrap();
    ok(&tiny("profile-energy", dir.path(), &["--set", "attention.dims=TCSA"]));
    let txt = fs::read_to_string(dir.path().join("energy.txt")).unwrap();
    let r: f64 = txt
        .lines()
        .find(|l| l.starts_with("r_ee"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|v| v.parse().ok())
        .expect("r_ee line");
    assert!(r.is_finite() && r > 0.0);
}
