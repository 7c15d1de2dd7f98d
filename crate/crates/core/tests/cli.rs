use std::fs;
use std::path::{Path, PathBuf};

use forge_harness::cli::{run, EXIT_INPUT, EXIT_OK, EXIT_UNAVAILABLE};

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel).to_string_lossy().into_owned()
}

fn forge(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("forge").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn only_attempt(out: &Path) -> PathBuf {
    let runs: Vec<_> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs[0].join("attempt-1")
}

#[test]
fn prune_then_build_then_eval_from_saved_report() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = data("demo/manifest.jsonl");
    let prune_out = tmp.path().join("p");
    let (code, stdout, stderr) = forge(&[
        "prune",
        "--manifest",
        &manifest,
        "--out",
        prune_out.to_str().unwrap(),
        &data("size_model.json"),
    ]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.starts_with("instances=12 "), "{stdout}");
    let report = only_attempt(&prune_out).join("prune_report.json");
    assert!(report.exists());

    let build_out = tmp.path().join("b");
    let (code, stdout, stderr) =
        forge(&["build", "--manifest", &manifest, "--out", build_out.to_str().unwrap(), report.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.contains("mean_build_s=") && stdout.contains("cache_hit_rate="), "{stdout}");
    let dir = only_attempt(&build_out);
    assert!(dir.join("trace.json").exists() && dir.join("trace.csv").exists());

    let eval_out = tmp.path().join("e");
    let (code, stdout, stderr) = forge(&[
        "eval",
        "--manifest",
        &manifest,
        "--out",
        eval_out.to_str().unwrap(),
        report.to_str().unwrap(),
        &data("demo/patches.jsonl"),
    ]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.starts_with("resolved="), "{stdout}");
    let dir = only_attempt(&eval_out);
    let verdicts = fs::read_to_string(dir.join("verdicts.jsonl")).unwrap();
    assert_eq!(verdicts.lines().count(), 19);
    assert!(dir.join("artifacts").is_dir());
}

#[test]
fn validate_reports_every_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) =
        forge(&["validate", "--manifest", &data("demo/manifest.jsonl"), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.starts_with("valid="), "{stdout}");
    let dir = only_attempt(tmp.path());
    assert_eq!(fs::read_to_string(dir.join("validation.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn bench_sched_writes_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = forge(&[
        "bench-sched",
        "64",
        "--workers",
        "8",
        "--trials",
        "3",
        "--dist",
        "pareto",
        "--dist-params",
        "scale=10,shape=1.5",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("trial=")).count(), 3);
    let dir = only_attempt(tmp.path());
    for f in ["comparison.json", "balanced_batching.csv", "producer_consumer.csv", "run.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let manifest = data("demo/manifest.jsonl");
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--manifest", "/no/such/file.jsonl", "--out", out],
        vec!["eval", "--manifest", &manifest, "--profile", "nope", "--out", out],
        vec!["eval", "--manifest", &manifest, "--timeout", "0", "--out", out],
        vec!["eval", "--manifest", &manifest, "--builders", "0", "--out", out],
        vec!["eval", "--manifest", &manifest, "--out", out, "-", "/no/patches.jsonl"],
        vec!["build", "--manifest", &manifest, "--out", out, "/no/report.json"],
        vec!["bench-sched", "--dist", "weibull", "--out", out],
        vec!["bench-sched", "--dist", "lognormal", "--dist-params", "sigma=-1", "--out", out],
        vec!["prune", "--manifest", &manifest, "--backend", "podman", "--out", out],
    ];
    for args in cases {
        let (code, _, stderr) = forge(&args);
        assert_eq!(code, EXIT_INPUT, "{args:?}: {stderr}");
        assert!(!stderr.is_empty());
    }
}

#[test]
fn report_from_another_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let (code, _, _) = forge(&["prune", "--manifest", &data("pipeline16/manifest.jsonl"), "--out", out]);
    assert_eq!(code, EXIT_OK);
    let report = only_attempt(tmp.path()).join("prune_report.json");
    let (code, _, stderr) = forge(&["build", "--manifest", &data("demo/manifest.jsonl"), "--out", out, report.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT, "{stderr}");
    assert!(stderr.contains("does not fit the manifest"), "{stderr}");
}

#[test]
fn unreachable_engine_exits_3() {
    if std::env::var_os("FORGE_CONTAINER_HOST").is_some() || Path::new("/var/run/docker.sock").exists() {
        eprintln!("container engine may be reachable; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, stderr) = forge(&[
        "eval",
        "--manifest",
        &data("demo/manifest.jsonl"),
        "--backend",
        "container",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_UNAVAILABLE, "{stderr}");
}
