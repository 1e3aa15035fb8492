//! End-to-end tests of the `micrank` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use micrank::manifest::Manifest;
use micrank::ranker::{write_checkpoint, RankerConfig, RankerModel};
use micrank::scene::distance;

fn micrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micrank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = micrank(args);
    assert!(
        out.status.success(),
        "micrank {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, n: usize, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["simulate", "--out", s(&out), "--n", &n, "--seed", &seed];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("manifest.jsonl")
}

/// A depth-reduced ranker config so CLI training stays fast.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[ranker]\nblocks = 1\nsub_blocks = 2\ndilations = [1, 2]\n\n[trainer]\nbatch_utterances = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a", 10, 1, &[]);
    let b = simulate(dir.path(), "b", 10, 1, &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.records.len(), 10);
    for rec in &m.records {
        assert_eq!(rec.channel_paths.len(), 8);
        for p in &rec.channel_paths {
            let (x, y) = (m.resolve(p), dir.path().join("b").join(p));
            assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{p}");
        }
        assert!(m.resolve(rec.clean_path.as_deref().unwrap()).exists());
        assert!(rec
            .relevance()
            .unwrap()
            .iter()
            .all(|w| (0.0..=1.0).contains(w)));
    }
    assert!(dir.path().join("a/config.resolved.toml").exists());

    let empty = simulate(dir.path(), "empty", 0, 1, &[]);
    assert_eq!(fs::read_to_string(empty).unwrap(), "");
}

#[test]
fn train_writes_outputs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = simulate(dir.path(), "data", 6, 3, &[]);
    let train = |out: &str, epochs: &str, resume: bool| {
        let out = dir.path().join(out);
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--train",
            s(&data),
            "--valid",
            s(&data),
            "--out",
            s(&out),
            "--strategy",
            "ranknet",
            "--epochs",
            epochs,
            "--seed",
            "4",
        ];
        if resume {
            args.push("--resume");
        }
        ok(&args);
        out
    };
    let full = train("full", "2", false);
    for f in [
        "checkpoint.bin",
        "state.bin",
        "history.jsonl",
        "config.resolved.toml",
    ] {
        assert!(full.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(full.join("history.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = history
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].get("config").is_some());
    for (k, rec) in lines[1..].iter().enumerate() {
        assert_eq!(rec["epoch"], k + 1);
        for key in ["train_loss", "valid_metric", "lr", "wall_time"] {
            assert!(rec[key].is_number(), "{key}");
        }
    }

    train("split", "1", false);
    let split = train("split", "2", true);
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(split.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn train_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data", 2, 5, &[]);
    let out = dir.path().join("out");

    let bad = micrank(&[
        "train",
        "--train",
        s(&data),
        "--valid",
        s(&data),
        "--out",
        s(&out),
        "--strategy",
        "bogus",
    ]);
    assert_eq!(bad.status.code(), Some(2));

    // Drop the labels of the second record.
    let text = fs::read_to_string(&data).unwrap();
    let mut lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    lines[1].as_object_mut().unwrap().remove("relevance");
    let unlabeled = data.with_file_name("unlabeled.jsonl");
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&unlabeled, body).unwrap();
    let out2 = micrank(&[
        "train",
        "--train",
        s(&unlabeled),
        "--valid",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(out2.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out2.stderr).contains("sim000006"));
}

#[test]
fn rank_methods() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data", 5, 20, &["--no-noise"]);
    let m = Manifest::load(&data).unwrap();

    let rank = |method: &str| ok(&["rank", "--manifest", s(&data), "--method", method]);
    assert_eq!(rank("random:7"), rank("random:7"));
    assert_ne!(rank("random:7"), rank("random:8"));

    let closest: Vec<serde_json::Value> = rank("closest")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (rec, r) in m.records.iter().zip(&closest) {
        let p = rec.sim_metadata().unwrap().scene.placement;
        let d: Vec<f64> = p
            .mic_pos
            .iter()
            .map(|x| distance(x, &p.speaker_pos))
            .collect();
        let nearest = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        assert_eq!(r["order"][0], nearest);
        assert_eq!(r["id"], rec.id.as_str());
    }

    for method in ["ev", "cd-blind", "cd-informed", "sdr"] {
        let lines = rank(method);
        assert_eq!(lines.lines().count(), 5, "{method}");
    }

    let ckpt = dir.path().join("m24.bin");
    let cfg = RankerConfig {
        n_mels: 24,
        ..RankerConfig::default()
    }
    .with_depth(1, 1);
    write_checkpoint(&RankerModel::<f32>::build(cfg, 0).unwrap(), &ckpt).unwrap();
    let method = format!("micrank:{}", s(&ckpt));
    let bad = micrank(&["rank", "--manifest", s(&data), "--method", &method]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("24"));

    // Without clean references the informed distance has nothing to compare.
    let text = fs::read_to_string(&data).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("clean_path");
            format!("{v}\n")
        })
        .collect();
    let no_clean = data.with_file_name("no_clean.jsonl");
    fs::write(&no_clean, stripped).unwrap();
    let bad = micrank(&[
        "rank",
        "--manifest",
        s(&no_clean),
        "--method",
        "cd-informed",
    ]);
    assert!(!bad.status.success());

    assert_eq!(
        micrank(&["rank", "--manifest", s(&data), "--method", "nope"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn evaluate_reports_oracle_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data", 4, 30, &[]);
    let sdr = dir.path().join("sdr.jsonl");
    let random = dir.path().join("random.jsonl");
    ok(&[
        "rank",
        "--manifest",
        s(&data),
        "--method",
        "sdr",
        "--out",
        s(&sdr),
    ]);
    ok(&[
        "rank",
        "--manifest",
        s(&data),
        "--method",
        "random:1",
        "--out",
        s(&random),
    ]);

    let report_dir = dir.path().join("report");
    let table = ok(&[
        "evaluate",
        "--manifest",
        s(&data),
        "--rankings",
        s(&sdr),
        s(&random),
        "--k",
        "3",
        "--out",
        s(&report_dir),
        "--csv",
    ]);
    assert!(table.contains("oracle"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let methods = report["methods"].as_array().unwrap();
    assert_eq!(methods[0]["method"], "oracle");
    assert_eq!(methods[0]["accuracy"], 1.0);
    assert_eq!(methods.len(), 3);
    assert!(report_dir.join("details.csv").exists());

    let too_deep = micrank(&[
        "evaluate",
        "--manifest",
        s(&data),
        "--rankings",
        s(&sdr),
        "--k",
        "9",
    ]);
    assert_eq!(too_deep.status.code(), Some(1));

    // Rankings for a different set of utterances.
    let other = simulate(dir.path(), "other", 2, 90, &[]);
    let other_rank = dir.path().join("other.jsonl");
    ok(&[
        "rank",
        "--manifest",
        s(&other),
        "--method",
        "sdr",
        "--out",
        s(&other_rank),
    ]);
    let mismatch = micrank(&[
        "evaluate",
        "--manifest",
        s(&data),
        "--rankings",
        s(&other_rank),
    ]);
    assert_eq!(mismatch.status.code(), Some(1));
    let err = String::from_utf8_lossy(&mismatch.stderr);
    assert!(err.contains("sim000030"), "{err}");
}

#[test]
fn verify_passes_and_detects_faults() {
    let out = micrank(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text
        .lines()
        .any(|l| l.starts_with("PASS gradcheck listnet")));
    assert!(!text.contains("FAIL"));
    assert!(text.contains("parameter census total: 266799"));

    let out = micrank(&["verify", "--inject-gradient-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradcheck"));
}

#[test]
fn thread_setting_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_micrank"))
        .args(["verify"])
        .env("MICRANK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
