use std::path::Path;
use std::process::{Command, Output};

fn priormap(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priormap"))
        .arg("--set")
        .arg(format!("out_dir=\"{}\"", out_dir.display()))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "scene.extent.h=24",
    "--set",
    "scene.extent.w=12",
    "--set",
    "data.train_count=3",
    "--set",
    "data.eval_count=2",
    "--set",
    "prior.k=6",
    "--set",
    "decoder.channels=16",
    "--set",
    "decoder.num_instances=6",
    "--set",
    "decoder.num_prior=3",
    "--set",
    "decoder.num_points=4",
    "--set",
    "decoder.layers=2",
    "--set",
    "decoder.self_heads=2",
    "--set",
    "decoder.cross_heads=2",
    "--set",
    "train.steps=3",
];

fn tiny(out_dir: &Path, cmd: &[&str]) -> Output {
    let args: Vec<&str> = TINY.iter().chain(cmd).copied().collect();
    priormap(out_dir, &args)
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = priormap(dir.path(), &["--set", "train.stepz=3", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));

    let o = priormap(dir.path(), &["--set", "decoder.num_prior=99", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = priormap(dir.path(), &["--config", missing.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.toml"));
}

#[test]
fn missing_inputs_name_the_step_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["fit-priors"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run gen-data first"), "{}", stderr(&o));

    assert!(tiny(dir.path(), &["gen-data"]).status.success());
    let o = tiny(dir.path(), &["train", "--prior-mode", "prior"]);
    assert!(stderr(&o).contains("run fit-priors first"), "{}", stderr(&o));
    let o = tiny(dir.path(), &["eval", "--prior-mode", "random"]);
    assert!(stderr(&o).contains("run train --prior-mode random first"), "{}", stderr(&o));
    let o = tiny(dir.path(), &["stability-report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run train first"), "{}", stderr(&o));
}

#[test]
fn full_sequence_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        &["gen-data"][..],
        &["fit-priors"],
        &["train", "--prior-mode", "random"],
        &["eval", "--prior-mode", "random"],
        &["stability-report"],
    ] {
        let o = tiny(dir.path(), cmd);
        assert!(o.status.success(), "{cmd:?}: {}", stderr(&o));
    }
    for f in [
        "data/effective-config.toml",
        "priors/priors.json",
        "priors/clusters.json",
        "train-random/params.json",
        "train-random/log.csv",
        "train-random/stability.json",
        "eval-random/report.json",
        "eval-random/report.csv",
        "stability/report.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train-random/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stability/report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["comparison"], serde_json::Value::Null);
}

#[test]
fn bench_rejects_unknown_variants_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = priormap(dir.path(), &["bench-attn", "--variant", "fastest"]);
    assert_eq!(o.status.code(), Some(2));

    let csv = dir.path().join("t.csv");
    let o = priormap(
        dir.path(),
        &[
            "--set",
            "bench.queries=10",
            "--set",
            "bench.grid_h=8",
            "--set",
            "bench.grid_w=4",
            "--set",
            "bench.attention.channels=16",
            "--set",
            "bench.attention.num_heads=2",
            "bench-attn",
            "--repeats",
            "1",
            "--variant",
            "parallel",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,M,N,queries,mean_ms,sd_ms,sample_count"));
    assert!(lines.next().unwrap().starts_with("parallel,3,4,10,"));
    assert!(lines.next().is_none());
}
