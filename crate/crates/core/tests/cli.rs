//! End-to-end runs of the command-line tool on a small synthetic graph.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chainsformer::config::RunConfig;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainsformer")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SPEC: &str = "entities = 120\npath = [\"link\"]\nalpha = 1.0\n";

const CONFIG: &str = "epochs = 4\nwalks = 32\ntop_k = 8\ndim = 8\nfilter_dim = 8\naffine_hidden = 4\nbatch_size = 8\nthreads = 1\n";

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let stdout = ok(&["synth", "--spec", spec.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(stdout.contains("(source, link) -> target"));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 4);
    for name in names {
        let name = name.to_str().unwrap();
        assert_eq!(read(&a, name), read(&b, name), "{name} differs");
    }
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, config) = (root.join("spec.toml"), root.join("run.toml"));
    fs::write(&spec, SPEC).unwrap();
    fs::write(&config, CONFIG).unwrap();
    let (data, ingested, run) = (root.join("data"), root.join("ingested"), root.join("run"));
    let p = |p: &Path| p.to_str().unwrap().to_string();
    ok(&["synth", "--spec", &p(&spec), "--out", &p(&data)]);

    let report = ok(&["ingest", "--data", &p(&data), "--out", &p(&ingested)]);
    assert!(report.contains("entities"));
    for f in ["relational.tsv", "numerical_train.tsv", "entities.txt", "stats.txt"] {
        assert!(ingested.join(f).exists(), "ingest wrote no {f}");
    }

    // flags win over the config file
    let (config, run_dir, ingested_dir) = (p(&config), p(&run), p(&ingested));
    let base = ["--config", &config, "--out", &run_dir, "--top-k", "6"];
    let train = [&base[..], &["train", "--data", &ingested_dir]].concat();
    ok(&train);
    let resolved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(resolved.train.top_k, 6);
    assert_eq!(resolved.train.epochs, 4);
    let metrics = read(&run, "metrics.csv");
    assert_eq!(metrics.lines().count(), 5);
    let checkpoint = fs::read(run.join("checkpoint.bin")).unwrap();

    let eval = [&base[..], &["eval"]].concat();
    ok(&eval);
    let first = read(&run, "eval_test.csv");
    assert!(read(&run, "eval_test.txt").contains("train-mean baseline"));
    ok(&eval);
    assert_eq!(read(&run, "eval_test.csv"), first);

    let test_line = read(&ingested, "numerical_test.tsv").lines().next().unwrap().to_string();
    let fields: Vec<&str> = test_line.split('\t').collect();
    let predict = [&base[..], &["predict", "--entity", fields[0], "--attribute", fields[1]]].concat();
    let text = ok(&predict);
    assert!(text.starts_with(&format!("{} / {} = ", fields[0], fields[1])));
    assert!(text.contains(&format!("target {:.6}", fields[2].parse::<f64>().unwrap())));
    let trace: serde_json::Value = serde_json::from_str(&read(&run, "trace.json")).unwrap();
    assert!(trace["prediction"].as_f64().unwrap().is_finite());

    let explain = [&base[..], &["explain", "--attribute", "target"]].concat();
    let table = ok(&explain);
    assert!(table.starts_with("rank\tcount\tshare\tchain"));
    assert_eq!(read(&run, "key_chains_test_target.tsv"), table);

    // retraining from the same settings is bitwise identical
    ok(&train);
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), checkpoint);
    assert_eq!(read(&run, "metrics.csv"), metrics);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.bin");
    let out = cli(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("nowhere.bin"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let out = cli(&["--lambda", "1.5", "synth", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
