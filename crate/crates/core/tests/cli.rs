use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use urrl::datagen::{decode_dataset, Split};
use urrl::model::read_checkpoint;
use urrl::trainer::evaluate;

const SMALL: &str = "n = 480\ndim = 6\nnum_classes = 3\nblob_separation = 5\nhidden = 16\nembed_dim = 8\nk = 20\nbatch_size = 32\nmax_epochs = 3\n";

fn urrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urrl")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    fs::write(&config, format!("{SMALL}{extra}")).unwrap();
    let out = dir.path().join("data");
    let o = urrl(&["synth", "--config", s(&config), "--out", s(&out), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    Fixture { data: out.join("dataset.upll"), dir, config }
}

#[test]
fn synth_is_idempotent_and_reports_statistics() {
    let f = fixture("");
    let again = f.dir.path().join("again");
    assert!(urrl(&["synth", "--config", s(&f.config), "--out", s(&again), "--seed", "5"]).status.success());
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(again.join("dataset.upll")).unwrap());
    assert_eq!(
        fs::read(f.dir.path().join("data/dataset.json")).unwrap(),
        fs::read(again.join("dataset.json")).unwrap()
    );
    let side: serde_json::Value = serde_json::from_slice(&fs::read(again.join("dataset.json")).unwrap()).unwrap();
    let coverage = side["stats"]["coverage"].as_f64().unwrap();
    // 1 − μ(1 − η) with η = μ = 0.3, three binomial standard deviations.
    let sigma = (0.21f64 * 0.79 / 480.0).sqrt();
    assert!((coverage - 0.79).abs() < 3.0 * sigma, "{coverage}");
}

#[test]
fn clean_synth_has_full_coverage() {
    let f = fixture("eta = 0\nmu = 0\n");
    let side: serde_json::Value =
        serde_json::from_slice(&fs::read(f.dir.path().join("data/dataset.json")).unwrap()).unwrap();
    assert_eq!(side["stats"]["coverage"].as_f64(), Some(1.0));
}

#[test]
fn train_outputs_are_consistent_and_reproducible() {
    let f = fixture("");
    let run = |name: &str| {
        let out = f.dir.path().join(name);
        let o = urrl(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&out), "--seed", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["metrics.jsonl", "report.json", "checkpoint.bin", "refinement.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    let epochs = report["epochs_run"].as_u64().unwrap() as usize;
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), epochs);

    let ds = decode_dataset(&fs::read(&f.data).unwrap()).unwrap();
    let params = read_checkpoint(fs::File::open(a.join("checkpoint.bin")).unwrap()).unwrap();
    assert_eq!(evaluate(&params, &ds, Split::Test).unwrap(), report["test_acc"].as_f64().unwrap());
    assert!(a.join("timing.json").exists());
}

#[test]
fn export_embeddings_rows_are_unit_norm() {
    let f = fixture("");
    let run = f.dir.path().join("run");
    assert!(urrl(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--seed", "1"])
        .status
        .success());
    let ckpt = run.join("checkpoint.bin");
    let export = |name: &str| {
        let out = f.dir.path().join(name);
        let o = urrl(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("embeddings.csv")).unwrap()
    };
    let csv = export("e1");
    assert_eq!(csv, export("e2"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "instance_id,true_label,e0,e1,e2,e3,e4,e5,e6,e7");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 480);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        let norm: f64 = cols[2..].iter().map(|v| v.parse::<f32>().unwrap() as f64).map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "row {i}: {norm}");
    }
}

#[test]
fn ablate_and_sweep_tables() {
    let f = fixture("");
    let out = f.dir.path().join("ablate");
    let o = urrl(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&out), "--seeds", "1,2,3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("ablation_raw.csv")).unwrap().lines().count(), 13);
    assert_eq!(fs::read_to_string(out.join("ablation_summary.csv")).unwrap().lines().count(), 5);

    let out = f.dir.path().join("sweep");
    let o = urrl(&[
        "sweep",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&out),
        "--seeds",
        "1,2",
        "--grid",
        "phi=0.5,0.6,0.7,0.8,0.9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value = serde_json::from_slice(&fs::read(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(table["aggregates"].as_array().unwrap().len(), 5);
    assert_eq!(table["raw"].as_array().unwrap().len(), 10);
    assert_eq!(table["aggregates"][0]["config"], "phi=0.5");
}

#[test]
fn emcheck_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = urrl(&["emcheck", "--out", s(dir.path()), "--seed", "3", "--configs", "50"]);
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("emcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = fixture("");
    let out = f.dir.path().join("x");

    let bad = f.dir.path().join("bad.conf");
    fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let o = urrl(&["synth", "--config", s(&bad), "--out", s(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = urrl(&["train", "--data", s(&f.data), "--out", s(&out), "--seed", "1", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let o = urrl(&["ablate", "--data", s(&f.data), "--out", s(&out), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = f.dir.path().join("nope.upll");
    let o = urrl(&["train", "--data", s(&missing), "--out", s(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(3));

    let corrupt = f.dir.path().join("corrupt.upll");
    let mut bytes = fs::read(&f.data).unwrap();
    bytes[0] = b'X';
    fs::write(&corrupt, &bytes).unwrap();
    let o = urrl(&["train", "--data", s(&corrupt), "--out", s(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(4));

    let run = f.dir.path().join("run");
    assert!(urrl(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--seed", "1"])
        .status
        .success());
    let other_cfg = f.dir.path().join("wide.conf");
    fs::write(&other_cfg, "n = 60\ndim = 9\n").unwrap();
    let other = f.dir.path().join("wide");
    assert!(urrl(&["synth", "--config", s(&other_cfg), "--out", s(&other), "--seed", "1"]).status.success());
    let o = urrl(&[
        "export-embeddings",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&other.join("dataset.upll")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(5));
}
