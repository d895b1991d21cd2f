use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rehearsal_core::data::parse_ethucy;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rehearsal"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"ego": {"d": 8}, "final": {"d_model": 16, "layers": 1, "k": 3}},
  "train": {"max_steps": 3, "batch": 4, "eval_every": 2, "threads": 1},
  "synth": {"n_scenes": 3}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.config(), TINY).unwrap();
        ok(&[
            "synth",
            "--config",
            s(&f.config()),
            "--seed",
            "4",
            "--out",
            s(&f.data()),
        ]);
        f
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.config();
        let data = self.data();
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--desk",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--held-out",
            "scene_002",
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn synth_files_parse_and_repeat() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(&[
        "synth",
        "--config",
        s(&f.config()),
        "--seed",
        "4",
        "--out",
        s(&again),
    ]);
    for i in 0..3 {
        let name = format!("scene_{i:03}.txt");
        let a = fs::read_to_string(f.data().join(&name)).unwrap();
        assert_eq!(a, fs::read_to_string(again.join(&name)).unwrap());
        assert_eq!(parse_ethucy(&a).unwrap().len(), 4 * 20);
    }
    assert_eq!(
        fs::read(f.data().join("run_manifest.json")).unwrap(),
        fs::read(again.join("run_manifest.json")).unwrap()
    );
}

#[test]
fn synth_zero_scenes_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"synth": {"n_scenes": 0}}"#).unwrap();
    let out = dir.path().join("empty");
    let o = ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty corpus"));
    let files: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 1);
}

#[test]
fn train_is_byte_identical() {
    let f = Fixture::new();
    f.train("a", &[]);
    f.train("b", &[]);
    for file in [
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
        "best/params.bin",
        "train_log.jsonl",
        "run_manifest.json",
    ] {
        assert_eq!(
            fs::read(f.path("a").join(file)).unwrap(),
            fs::read(f.path("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
    let log = fs::read_to_string(f.path("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn resume_continues() {
    let f = Fixture::new();
    f.train("r", &[]);
    let ckpt = f.path("r/checkpoint");
    f.train("r", &["--resume", s(&ckpt), "--max-steps", "5"]);
    let log = fs::read_to_string(f.path("r/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [1, 2, 3, 4, 5]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["global_step"], 5);
}

#[test]
fn resume_rejects_model_changes() {
    let f = Fixture::new();
    f.train("r", &[]);
    let ckpt = f.path("r/checkpoint");
    let o = run(&[
        "train",
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("r2")),
        "--resume",
        s(&ckpt),
        "--ki",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--desk",
        "--data",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let o = run(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.learning_rate"));
    assert_eq!(run(&["analyze", "kernels"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_analyze_intervene() {
    let f = Fixture::new();
    f.train("t", &[]);
    let ckpt = f.path("t/best");
    let data = f.data();

    let o = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--k",
        "5",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["K"], 5);
    assert_eq!(report["n_agents"], 4);
    assert!(report["minade"].as_f64().unwrap() > 0.0);
    let again = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--k",
        "5",
    ]);
    assert_eq!(o.stdout, again.stdout);

    let out = f.path("insights");
    ok(&[
        "analyze",
        "insights",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("insights.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "window,ego_id,insight_0,insight_1,insight_2"
    );
    assert_eq!(lines.count(), 4);

    let out = f.path("acts");
    ok(&[
        "analyze",
        "activations",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--probe",
    ]);
    let csv = fs::read_to_string(out.join("activations.csv")).unwrap();
    let mut rd = csv.lines();
    let header: Vec<&str> = rd.next().unwrap().split(',').collect();
    let n_counts = header.iter().filter(|h| h.starts_with("count_")).count();
    assert_eq!(n_counts, 4);
    for line in rd {
        let cols: Vec<&str> = line.split(',').collect();
        let n_r: u64 = cols[4].parse().unwrap();
        let total: u64 = cols[5..5 + n_counts]
            .iter()
            .map(|c| c.parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, n_r);
    }

    let ids: Vec<i64> = {
        let text = fs::read_to_string(data.join("scene_002.txt")).unwrap();
        let mut v: Vec<i64> = parse_ethucy(&text)
            .unwrap()
            .iter()
            .map(|r| r.agent_id)
            .collect();
        v.dedup();
        v
    };
    let same = f.path("same");
    let (ego, donor) = (ids[0].to_string(), ids[1].to_string());
    ok(&[
        "intervene",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--ego",
        &ego,
        "--donor",
        &ego,
        "--out",
        s(&same),
    ]);
    for file in ["kernel.json", "rehearsal.json"] {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(same.join(file)).unwrap()).unwrap();
        assert_eq!(v["rehearsal_delta"], 0.0);
        assert_eq!(v["prediction_delta"], 0.0);
    }

    let x = f.path("x");
    let y = f.path("y");
    for out in [&x, &y] {
        ok(&[
            "intervene",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--ego",
            &ego,
            "--donor",
            &donor,
            "--seed",
            "3",
            "--out",
            s(out),
        ]);
    }
    for file in ["kernel.json", "rehearsal.json"] {
        assert_eq!(
            fs::read(x.join(file)).unwrap(),
            fs::read(y.join(file)).unwrap()
        );
    }

    let o = run(&[
        "intervene",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--ego",
        "999",
        "--donor",
        &ego,
        "--out",
        s(&x),
    ]);
    assert!(!o.status.success());
}

#[test]
fn empty_test_set_gives_empty_export() {
    let f = Fixture::new();
    f.train("t", &[]);
    // a scene too short to cut any window from
    let short: String = (0..5)
        .map(|t| format!("{}\t1.0\t{}\t0.0\n", t * 10, t as f64 * 0.5))
        .collect();
    fs::write(f.data().join("short.txt"), short).unwrap();
    let out = f.path("empty");
    let o = ok(&[
        "analyze",
        "insights",
        "--checkpoint",
        s(&f.path("t/checkpoint")),
        "--data",
        s(&f.data()),
        "--held-out",
        "short",
        "--out",
        s(&out),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no ego-eligible"));
    let csv = fs::read_to_string(out.join("insights.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}
