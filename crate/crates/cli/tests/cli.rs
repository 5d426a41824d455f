//! Drives the binary end to end at micro scale.

use std::path::Path;
use std::process::{Command, Output};

const MICRO: &[&str] = &[
    "--finetune-iterations",
    "5",
    "--mask-iterations",
    "3",
    "--n-masks",
    "3",
    "--n-backgrounds",
    "4",
    "--n-generated",
    "4",
    "--seg-epochs",
    "1",
    "--lo=-1",
    "--hi",
    "1",
];

fn maskdiff(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_maskdiff")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "maskdiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_png(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
}

#[test]
fn init_config_round_trips_through_run_flags() {
    let text = stdout(&maskdiff(&["init-config", "--seed", "9"]));
    assert!(text.contains("profile = \"toy\""));
    assert!(text.contains("seed = 9"));
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("full.toml");
    maskdiff(&["init-config", "--profile", "full", "-o", path(&file)]);
    assert!(std::fs::read_to_string(&file).unwrap().contains("n_generated = 1500"));

    let bad = Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .args(["run", "--out", path(dir.path()), "--n-generated", "0"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn stage_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p);
    maskdiff(&["synth-toy", "--out", path(&d("data")), "--n", "20", "--backgrounds", "4", "--seed", "1"]);
    assert_eq!(count_png(&d("data/images")), 20);
    assert_eq!(count_png(&d("data/backgrounds")), 4);

    let data = d("data");
    let lesion = d("lesion.ckpt");
    maskdiff(&[&["finetune", "--data", path(&data), "--out", path(&lesion)], MICRO].concat());
    assert!(lesion.is_file());
    maskdiff(&[&["gen-masks", "--data", path(&data), "--out", path(&d("masks"))], MICRO].concat());
    assert_eq!(count_png(&d("masks")), 3);
    let bgs = d("data/backgrounds");
    maskdiff(
        &[&["gen-pairs", "--model", path(&lesion), "--masks", path(&d("masks")), "--backgrounds", path(&bgs), "--out", path(&d("gen"))], MICRO]
            .concat(),
    );
    assert_eq!(count_png(&d("gen/images")), 4);
    let filtered = maskdiff(&[&["filter", "--generated", path(&d("gen")), "--data", path(&data), "--out", path(&d("kept"))], MICRO].concat());
    assert!(stdout(&filtered).contains("kept 4 of 4"));
    assert!(d("kept/quality_report.json").is_file());
    let seg = maskdiff(&[&["segment", "--data", path(&data), "--synthetic", path(&d("kept")), "--out", path(&d("seg"))], MICRO].concat());
    assert!(stdout(&seg).contains("train 16"), "{}", stdout(&seg));
    assert!(d("seg/metrics.json").is_file());
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let printed = stdout(&maskdiff(&[&["run", "--toy-n", "20", "--seed", "2", "--out", path(&out)], MICRO].concat()));
    assert!(printed.contains("delta"));
    let text = stdout(&maskdiff(&["report", path(&out)]));
    assert_eq!(text, std::fs::read_to_string(out.join("report.txt")).unwrap());
    assert_eq!(text, printed);
    let json = stdout(&maskdiff(&["report", "--json", path(&out.join("manifest.json"))]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["curation"]["generated"], 4);
}
