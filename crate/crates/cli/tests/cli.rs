use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--data.count=6",
    "--train.batch=3",
    "--langevin.steps=1",
    "--metrics.samples=4",
    "--metrics.top_m=2",
    "--metrics.ncc_images=3",
];

fn spgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgen")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = spgen(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn train_small(dir: &Path, iters: &str) -> String {
    let out = dir.to_str().unwrap();
    ok(&with_small(&["train", "--out", out, "--train.iters", iters]));
    dir.join(format!("ckpt-{:06}.spgn", iters.parse::<u64>().unwrap())).to_str().unwrap().to_string()
}

#[test]
fn train_with_zero_iterations_writes_only_the_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), "0");
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".spgn"))
        .collect();
    names.sort();
    assert_eq!(names, vec!["ckpt-000000.spgn"]);
    let cfg = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(cfg.contains("train.iters = 0"));
}

#[test]
fn synthesize_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(&dir.path().join("run"), "2");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let rec = ok(&["synthesize", "--ckpt", &ckpt, "--n", "4", "--seed", "7", "--out", o.to_str().unwrap()]);
        assert_eq!(rec[0]["n"], 4);
    }
    assert_eq!(
        std::fs::read(a.join("synthesized.png")).unwrap(),
        std::fs::read(b.join("synthesized.png")).unwrap()
    );
    let log = std::fs::read_to_string(dir.path().join("run/train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn evaluation_commands_emit_records() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(&dir.path().join("run"), "1");
    let out = dir.path().join("eval");
    let o = out.to_str().unwrap();
    let mse = ok(&["eval-mse", "--ckpt", &ckpt, "--out", o]);
    assert_eq!(mse[0]["metric"], "mse");
    assert!(mse[0]["value"].as_f64().unwrap() >= 0.0);
    let fid = ok(&["eval-fid", "--ckpt", &ckpt, "--out", o]);
    assert_eq!(fid[0]["detail"]["shrinkage"], 1e-6);
    let rec = ok(&["reconstruct", "--ckpt", &ckpt, "--n", "2", "--out", o]);
    assert_eq!(rec[0]["metric"], "mse");
    assert!(out.join("reconstruction.png").exists());
    let interp = ok(&["eval-interp", "--ckpt", &ckpt, "--dense", &ckpt, "--out", o]);
    assert_eq!(interp[0]["value"], 0.0);
    let dis = ok(&["dissect", "--ckpt", &ckpt, "--n", "2", "--layer", "layer3", "--out", o]);
    assert_eq!(dis[0]["trees"], 2);
    assert!(out.join("index.html").exists());
    assert!(out.join("or_candidates.txt").exists());
}

#[test]
fn make_sprites_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let rec = ok(&["make-sprites", "--n", "5", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(rec[0]["count"], 5);
    let pngs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 5);
    let labels = std::fs::read_to_string(dir.path().join("labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 5);
}

#[test]
fn failures_print_one_json_error_line() {
    let out = spgen(&["make-sprites", "--bogus.key", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("bogus.key"));

    let out = spgen(&["synthesize", "--ckpt", "/nonexistent.spgn"]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn gradcheck_passes_on_default_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgen(&["gradcheck", "--n", "2", "--out", dir.path().to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.lines().count() >= 19);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
