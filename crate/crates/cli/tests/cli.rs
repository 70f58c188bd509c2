use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tajweed_cli::manifest::read_log;
use tajweed_core::config::{BackboneSource, RunConfig};
use tajweed_core::synth::{write_corpus, SynthSpec};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A synthetic corpus of `n` clips and a config pointing at it.
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_clips: n,
            clips_per_speaker: 5,
            ..Default::default()
        };
        write_corpus(&dir.path().join("corpus"), &spec).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.root = "corpus".into();
        cfg.data.cache_dir = "cache".into();
        cfg.data.runs_dir = "runs".into();
        cfg.data.backbone_init = BackboneSource::Random;
        cfg.train.batch_size = 8;
        cfg.save(&dir.path().join("run.toml")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tajweed"))
            .current_dir(self.dir.path())
            .args(["--manifest-log", "log/manifest.jsonl"])
            .args(args)
            .output()
            .unwrap()
    }

    fn json(&self, args: &[&str]) -> Value {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        let out = self.run(&all);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn log(&self) -> Vec<tajweed_cli::manifest::RunManifest> {
        read_log(&self.path("log/manifest.jsonl")).unwrap()
    }
}

fn only_run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn prepare_is_reproducible_and_logged() {
    let ws = Workspace::new(20);
    let a = ws.json(&["prepare", "--root", "corpus", "--manifest", "a.csv"]);
    let b = ws.json(&["prepare", "--root", "corpus", "--manifest", "b.csv"]);
    assert_eq!(a["split_manifest_sha256"], b["split_manifest_sha256"]);
    assert_eq!((a["train"].as_u64(), a["test"].as_u64()), (Some(16), Some(4)));
    assert_eq!(
        std::fs::read(ws.path("a.csv")).unwrap(),
        std::fs::read(ws.path("b.csv")).unwrap()
    );
    let c = ws.json(&["prepare", "--root", "corpus", "--seed", "7", "--manifest", "c.csv"]);
    assert_eq!(c["clips"], 20);

    let log = ws.log();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|m| m.command == "prepare" && m.exit_status == 0));
    assert_eq!(log[0].seed, Some(42));
    assert_eq!(log[2].seed, Some(7));
    assert!(log[0].input_hashes.keys().any(|k| k.ends_with("labels.csv")));
}

#[test]
fn missing_labels_is_a_data_error() {
    let ws = Workspace::new(5);
    std::fs::remove_file(ws.path("corpus/labels.csv")).unwrap();
    let out = ws.run(&["prepare", "--root", "corpus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("labels.csv") && err.contains("not found"), "{err}");
    let log = ws.log();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].exit_status, 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new(5);
    assert_eq!(ws.run(&["train"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
    let bad = ws.run(&["train", "--config", "run.toml", "--set", "dropout_p=2.0"]);
    assert_eq!(bad.status.code(), Some(1), "{}", String::from_utf8_lossy(&bad.stderr));
    let unknown = ws.run(&["train", "--config", "run.toml", "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn preprocess_skips_cached_clips_and_reports_bad_files() {
    let ws = Workspace::new(10);
    let first = ws.json(&["preprocess", "--config", "run.toml"]);
    assert_eq!((first["written"].as_u64(), first["skipped"].as_u64()), (Some(10), Some(0)));
    let second = ws.json(&["preprocess", "--config", "run.toml"]);
    assert_eq!((second["written"].as_u64(), second["skipped"].as_u64()), (Some(0), Some(10)));

    // A corrupt file fails on its own; the rest of the corpus is still processed.
    std::fs::remove_dir_all(ws.path("cache")).unwrap();
    std::fs::write(ws.path("corpus/audio/S1_3.wav"), b"RIFF\x00\x00not a wave").unwrap();
    let out = ws.run(&["--json", "preprocess", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("S1_3"), "{err}");
    let cached = std::fs::read_dir(ws.path("cache")).unwrap().count();
    assert_eq!(cached, 9);
}

#[test]
fn train_without_cache_points_at_preprocess() {
    let ws = Workspace::new(10);
    let out = ws.run(&["train", "--config", "run.toml", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tajweed preprocess"));
}

#[test]
fn train_evaluate_predict_round_trip() {
    let ws = Workspace::new(10);
    ws.json(&["preprocess", "--config", "run.toml"]);
    let trained = ws.json(&["train", "--config", "run.toml", "--epochs", "1", "--set", "seed=3"]);
    assert_eq!(trained["epochs"], 1);

    let run = only_run_dir(&ws.path("runs"));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    for f in ["config.toml", "split_manifest.csv", "checkpoint_final", "checkpoint_best", "curves.png", "report.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let saved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!((saved.train.epochs, saved.train.seed), (1, 3));

    let ckpt = run.join("checkpoint_final");
    let report = ws.json(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--out", "eval.json"]);
    let final_acc = &trained["final"]["test_accuracy"];
    assert_eq!(&report["per_rule_accuracy"], final_acc);
    assert_eq!(report["checkpoint_id"], trained["model_id"]);
    assert_eq!(report["n_clips"], 2);
    assert!(ws.path("eval.json").is_file());

    let pred = ws.json(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "corpus/audio/S1_1.wav"]);
    let probs = pred["probabilities"].as_array().unwrap();
    assert_eq!(probs.len(), 3);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
    assert_eq!(pred["model_id"], trained["model_id"]);

    let commands: Vec<String> = ws.log().into_iter().map(|m| m.command).collect();
    assert_eq!(commands, ["preprocess", "train", "evaluate", "predict"]);
}

fn http_get(port: u16, path: &str) -> Option<String> {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_reports_ready_for_a_checkpoint() {
    use tajweed_core::dsp::DspConfig;
    use tajweed_core::model::{save_checkpoint, BackboneInit, CheckpointHeader, ModelConfig, TajweedNet};

    let ws = Workspace::new(1);
    let cfg = ModelConfig::default();
    let net = TajweedNet::build(&cfg, &BackboneInit::Random, 0).unwrap();
    let header = CheckpointHeader {
        model: cfg,
        dsp: DspConfig::default(),
        seed: 0,
        epoch: 0,
    };
    let ckpt = ws.path("m.ckpt");
    save_checkpoint(&net, &header, &ckpt).unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();

    let mut child = Command::new(env!("CARGO_BIN_EXE_tajweed"))
        .current_dir(ws.dir.path())
        .args(["--manifest-log", "log/manifest.jsonl", "serve", "--port"])
        .arg(port.to_string())
        .arg("--checkpoint")
        .arg(&ckpt)
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(60);
    let mut health = None;
    while std::time::Instant::now() < deadline {
        if let Some(resp) = http_get(port, "/health") {
            health = Some(resp);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    let rules = http_get(port, "/rules");
    child.kill().unwrap();
    child.wait().unwrap();

    let health = health.expect("server never answered /health");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(health.contains("\"ready\""), "{health}");
    assert!(rules.unwrap().contains("separate_stretching"));
}
