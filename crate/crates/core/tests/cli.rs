//! End-to-end runs of the `lungvol` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lungvol::drr::{decode_rimg, encode_rimg, simulate_network_inputs};
use lungvol::phantom::{read_manifest, MANIFEST_NAME};
use lungvol::volgrid::{read_rvol_file, Rvol};

const SMALL_MODEL: &[&str] = &["--side", "32", "--depth", "2", "--base-channels", "4", "--head", "16,8"];
const SHORT_RUN: &[&str] = &["--max-epochs", "2", "--patience", "1", "--batch-size", "4"];

fn lungvol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungvol")).args(args).output().expect("spawn lungvol")
}

fn ok(args: &[&str]) -> Output {
    let out = lungvol(args);
    assert!(
        out.status.success(),
        "lungvol {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    let out = lungvol(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lungvol: error:"), "no diagnostic for {args:?}: {stderr}");
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 12 cases at 32 px split 6/3/3.
fn small_dataset(dir: &Path, seed: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["phantom-gen", "--n", "12", "--seed", seed, "--out", s(dir), "--side", "32"];
    args.extend_from_slice(&["--splits", "6,3,3"]);
    args.extend_from_slice(extra);
    ok(&args);
    dir.join(MANIFEST_NAME)
}

fn train_small(manifest: &Path, out: &Path, view: &str) -> PathBuf {
    let mut args = vec!["train", "--manifest", s(manifest), "--seed", "4", "--out", s(out), "--view", view];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(SHORT_RUN);
    ok(&args);
    out.join("best.ckpt")
}

fn file_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_gen_is_deterministic_and_exact_labels_are_true_volumes() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let ma = small_dataset(&a, "9", &["--no-volumes"]);
    small_dataset(&b, "9", &["--no-volumes"]);
    assert_eq!(file_bytes(&a), file_bytes(&b));

    let records = read_manifest(&ma).unwrap();
    assert_eq!(records.len(), 12);
    for r in &records {
        assert_eq!(r.label_liters, r.true_tlv_liters, "{}", r.case_id);
    }
}

#[test]
fn simulate_matches_library_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["phantom-gen", "--n", "3", "--seed", "5", "--out", s(&data), "--side", "64", "--splits", "1,1,1"]);
    let volume = data.join("volumes").join("case00000_ct.rvol");
    let Rvol::Volume(vol) = read_rvol_file(&volume).unwrap() else {
        panic!("expected a CT volume");
    };
    let (want_f, want_l) = simulate_network_inputs(&vol, 64).unwrap();

    let mut runs = Vec::new();
    for k in 0..2 {
        let (f, l) = (t.path().join(format!("f{k}.rimg")), t.path().join(format!("l{k}.rimg")));
        ok(&["simulate", "--volume", s(&volume), "--out-frontal", s(&f), "--out-lateral", s(&l), "--side", "64"]);
        runs.push((fs::read(&f).unwrap(), fs::read(&l).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0].0, encode_rimg(&want_f));
    assert_eq!(runs[0].1, encode_rimg(&want_l));
    assert_eq!(decode_rimg(&runs[0].0).unwrap(), want_f);
}

#[test]
fn evaluate_perfect_predictions_gives_zero_error() {
    let t = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&t.path().join("data"), "6", &["--no-volumes"]);
    let pred = t.path().join("pred.csv");
    let mut csv = String::from("case_id,predicted_liters\n");
    for r in read_manifest(&manifest).unwrap() {
        csv.push_str(&format!("{},{}\n", r.case_id, r.label_liters));
    }
    fs::write(&pred, csv).unwrap();
    let out = t.path().join("eval");
    ok(&["evaluate", "--manifest", s(&manifest), "--predictions", s(&pred), "--out", s(&out)]);

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0, "MAPE in {metrics}");
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0, "MAE in {metrics}");
    for f in ["predictions.csv", "bland_altman.csv", "scatter.svg", "bland_altman.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn ensemble_of_identical_models_matches_the_single_model() {
    let t = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&t.path().join("data"), "7", &["--no-volumes"]);
    let ck = train_small(&manifest, &t.path().join("run"), "frontal");
    let out = t.path().join("report");
    ok(&[
        "report",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ck),
        "--ensemble",
        s(&ck),
        s(&ck),
        "--out",
        s(&out),
    ]);
    let single = fs::read_to_string(out.join("frontal").join("predictions.csv")).unwrap();
    let ensemble = fs::read_to_string(out.join("ensemble").join("predictions.csv")).unwrap();
    assert_eq!(single, ensemble);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
}

#[test]
fn finetune_then_evaluate_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&t.path().join("data"), "8", &["--no-volumes"]);
    let ck = train_small(&manifest, &t.path().join("run"), "lateral");
    let tuned = t.path().join("tuned");
    let mut args = vec!["finetune", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--seed", "1"];
    args.extend_from_slice(&["--out", s(&tuned)]);
    args.extend_from_slice(SHORT_RUN);
    ok(&args);
    for f in ["best.ckpt", "config.json", "history.csv"] {
        assert!(tuned.join(f).is_file(), "{f}");
    }
    let out = t.path().join("eval");
    ok(&["evaluate", "--manifest", s(&manifest), "--checkpoint", s(&tuned.join("best.ckpt")), "--out", s(&out)]);
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn tiny_ladder_run_writes_stage_metrics() {
    let t = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&t.path().join("data"), "10", &["--no-volumes"]);
    let out = t.path().join("ladder");
    let mut args = vec!["ladder", "--manifest", s(&manifest), "--seed", "2", "--out", s(&out)];
    args.extend_from_slice(&["--stages", "sim-exact,real-noisy", "--views", "frontal,lateral"]);
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(SHORT_RUN);
    ok(&args);
    for stage in ["sim-exact", "real-noisy"] {
        let metrics = fs::read_to_string(out.join(stage).join("metrics.csv")).unwrap();
        assert!(metrics.lines().count() >= 3, "{stage}: {metrics}");
    }
}

#[test]
fn failures_have_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope.rvol");
    let f = t.path().join("f.rimg");
    let l = t.path().join("l.rimg");
    let sim = |v: &Path| exit_code(&["simulate", "--volume", s(v), "--out-frontal", s(&f), "--out-lateral", s(&l)]);
    assert_eq!(sim(&missing), 3);

    let bad = t.path().join("bad.rvol");
    fs::write(&bad, b"NOTRVOL\0garbage header bytes").unwrap();
    assert_eq!(sim(&bad), 5);

    assert_eq!(exit_code(&["phantom-gen", "--n", "3", "--seed", "1", "--out", s(t.path()), "--splits", "1,1"]), 2);

    let manifest = small_dataset(&t.path().join("data"), "11", &["--no-volumes"]);
    let ck = train_small(&manifest, &t.path().join("run"), "frontal");

    let mut args = vec!["finetune", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--seed", "1"];
    args.extend_from_slice(&["--out", s(t.path()), "--view", "lateral"]);
    args.extend_from_slice(SMALL_MODEL);
    assert_eq!(exit_code(&args), 7);

    // Re-list a training case under the test split.
    let text = fs::read_to_string(&manifest).unwrap();
    let train_row = text.lines().find(|l| l.ends_with(",train")).unwrap();
    let leaked = t.path().join("data").join("leaked.csv");
    fs::write(&leaked, format!("{text}{}\n", train_row.replace(",train", ",test"))).unwrap();
    let mut args = vec!["train", "--manifest", s(&leaked), "--seed", "1", "--out", s(t.path())];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(SHORT_RUN);
    assert_eq!(exit_code(&args), 6);
}
