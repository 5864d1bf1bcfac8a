use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST: &str =
    r#"{"pretrain_epochs": 2, "joint_epochs": 2, "batch_size": 24, "embedding_size": 32}"#;
const SMALL_DATA: &str =
    r#"{"n_train_ids": 10, "n_test_ids": 5, "imgs_per_id_per_view": 2, "seed": 4}"#;

fn airid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = airid(args);
    assert!(
        out.status.success(),
        "airid {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Temp dir holding a small dataset and the fast training config.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.json"), FAST).unwrap();
        fs::write(dir.path().join("synth.json"), SMALL_DATA).unwrap();
        let f = Self { dir };
        ok(&[
            "synth",
            "--config",
            s(&f.path("synth.json")),
            "--out",
            s(&f.data()),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self) -> PathBuf {
        self.path("train.json")
    }
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.manifest.json"))).unwrap())
        .unwrap()
}

#[test]
fn eval_without_checkpoint_is_a_data_error() {
    let f = Fixture::new();
    let out = airid(&["eval", "--data", s(&f.data()), "--out", s(&f.path("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(airid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(airid(&["eval"]).status.code(), Some(1));
    assert_eq!(airid(&["--help"]).status.code(), Some(0));
    assert_eq!(airid(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_named() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    fs::write(&bad, r#"{"joint_epochs": 2, "lamda_g": 0.1}"#).unwrap();
    let out = airid(&[
        "pretrain",
        "--config",
        s(&bad),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda_g"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let f = Fixture::new();
    let out = airid(&[
        "pretrain",
        "--data",
        s(&f.path("nowhere")),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_is_a_numeric_error() {
    let f = Fixture::new();
    let cfg = f.path("hot.json");
    fs::write(
        &cfg,
        r#"{"pretrain_epochs": 3, "batch_size": 24, "lr_pretrain": 1e30}"#,
    )
    .unwrap();
    let out = airid(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_then_eval_reports_all_metrics() {
    let f = Fixture::new();
    let (run, cfg, data) = (f.path("run"), f.config(), f.data());
    let common = ["--config", s(&cfg), "--data", s(&data), "--out", s(&run)];
    ok(&[&["train", "--variant", "no-sc"], &common[..]].concat());
    assert!(
        run.join("pretrained.airc").is_file(),
        "train pretrains when no checkpoint exists"
    );
    ok(&[
        "eval",
        "--data",
        s(&f.data()),
        "--out",
        s(&run),
        "--rankings",
    ]);
    let r = report(&run);
    for k in ["rank1", "rank5", "rank10", "mAP"] {
        let v = r["metrics"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(r["variant"], "no-sc");
    assert_eq!(r["data"]["queries"], 5);
    assert!(!r.to_string().contains("started_at"));

    let m = manifest(&run, "train");
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["variant"], "no-sc");
    assert_eq!(m["argv"][2], "--variant");
    assert_eq!(
        m["checkpoint_sha256"]["checkpoint"].as_str().unwrap().len(),
        64
    );
    let e = manifest(&run, "eval");
    assert_eq!(e["inputs"]["checkpoint"], s(&run.join("model.airc")));

    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 2);
    let ranks = fs::read_to_string(run.join("rankings.tsv")).unwrap();
    assert_eq!(
        ranks.lines().count(),
        1 + 5 * r["data"]["gallery_images"].as_u64().unwrap() as usize
    );
}

#[test]
fn resume_continues_to_the_same_model() {
    let f = Fixture::new();
    let cfg = f.path("ckpt.json");
    fs::write(&cfg, r#"{"pretrain_epochs": 2, "joint_epochs": 3, "batch_size": 24, "embedding_size": 32, "checkpoint_every": 1}"#).unwrap();
    let (a, b) = (f.path("a"), f.path("b"));
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data()),
        "--out",
        s(&a),
    ]);
    let mid = a.join("checkpoints").join("joint-epoch0001.airc");
    assert!(mid.is_file());
    ok(&[
        "train",
        "--resume",
        s(&mid),
        "--data",
        s(&f.data()),
        "--out",
        s(&b),
    ]);
    assert_eq!(
        fs::read(a.join("model.airc")).unwrap(),
        fs::read(b.join("model.airc")).unwrap()
    );
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let f = Fixture::new();
    let out = f.path("ablate");
    ok(&[
        "ablate",
        "--config",
        s(&f.config()),
        "--data",
        s(&f.data()),
        "--out",
        s(&out),
    ]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,rank1,rank5,rank10,mAP");
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["full", "no-adv", "no-sc", "mmd", "coral", "img2a"]);
    for v in &names {
        assert!(out.join(v).join("model.airc").is_file());
        assert_eq!(report(&out.join(v))["variant"], *v);
    }
    assert!(out.join("ablate.manifest.json").is_file());

    let subset = f.path("subset");
    ok(&[
        "ablate",
        "--config",
        s(&f.config()),
        "--data",
        s(&f.data()),
        "--out",
        s(&subset),
        "--variants",
        "coral,full",
        "--pretrained",
        s(&out.join("pretrained.airc")),
    ]);
    let table = fs::read_to_string(subset.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(
        fs::read(subset.join("full").join("model.airc")).unwrap(),
        fs::read(out.join("full").join("model.airc")).unwrap(),
        "same pretrained model and seed give the same variant run"
    );
}

#[test]
fn sweep_and_report() {
    let f = Fixture::new();
    let (sw, run, rep) = (f.path("sweep"), f.path("run"), f.path("report"));
    ok(&[
        "sweep",
        "--config",
        s(&f.config()),
        "--data",
        s(&f.data()),
        "--out",
        s(&sw),
        "--param",
        "lambda-d",
        "--values",
        "0.1,0.5",
    ]);
    let table = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("lambda_D,0.1,"));

    for v in ["no-adv", "full"] {
        let dir = run.join(v);
        ok(&[
            "train",
            "--config",
            s(&f.config()),
            "--data",
            s(&f.data()),
            "--out",
            s(&dir),
            "--variant",
            v,
        ]);
        ok(&["eval", "--data", s(&f.data()), "--out", s(&dir)]);
    }
    let out = airid(&[
        "report",
        s(&run.join("no-adv")),
        s(&f.path("missing")),
        s(&run.join("full")),
        s(&sw),
        "--out",
        s(&rep),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    let table = fs::read_to_string(rep.join("comparison.csv")).unwrap();
    let variants: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(variants, ["full", "no-adv"]);
    let cmc = fs::read_to_string(rep.join("cmc.svg")).unwrap();
    assert!(cmc.starts_with("<svg") && cmc.matches("<polyline").count() == 2);
    assert!(rep.join("sweep0_lambda_D.svg").is_file());

    let out = airid(&[
        "report",
        s(&f.path("missing")),
        "--out",
        s(&f.path("empty")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
