use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoalign_core::autodiff::DIFFERENTIABLE_OPS;
use geoalign_core::datagen::read_dataset;
use geoalign_core::gradaudit::PIPELINE_CHECKS;
use geoalign_core::training::Checkpoint;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn geoalign");
    if std::env::var_os("GEOALIGN_TEST_VERBOSE").is_some() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny world and model: 80 records, 16 held out, batch 8.
fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "count": 80, "holdout": 16, "rs_size": 16, "sv_size": 8, "temporal": 2,
        "patch": 4, "width": 16, "depth": 1, "heads": 2, "ff_width": 24,
        "embed_dim": 8, "rff_frequencies": 8, "loc_hidden": 16, "batch_size": 8,
        "epochs": epochs, "bank_capacity": 32, "probe_steps": 40, "probe_hidden": 8,
    });
    let path = dir.join("small.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(epochs: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let config = small_config(dir.path(), epochs);
        let data = dir.path().join("data");
        let out = run(&["--config", s(&config), "gen-data", "--out", s(&data)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let out_dir = self.path(out);
        let mut args = vec!["--config", s(&self.config), "pretrain", "--data", s(&self.data), "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn metrics(&self, out: &str) -> Vec<Value> {
        fs::read_to_string(self.path(out).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn gen_data_same_seed_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&["--seed", "7", "gen-data", "--count", "100", "--out", s(d)]);
        assert_eq!(code(&out), 0);
    }
    for f in ["manifest.json", "records.bin", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    assert_eq!(code(&run(&["--seed", "8", "gen-data", "--count", "100", "--out", s(&c)])), 0);
    assert_ne!(fs::read(a.join("records.bin")).unwrap(), fs::read(c.join("records.bin")).unwrap());
}

#[test]
fn gen_data_zero_count_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["gen-data", "--count", "0", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn gen_data_unwritable_path_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = run(&["gen-data", "--count", "5", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot write"));
}

#[test]
fn gen_data_summary_matches_manifest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d");
    let out = run(&["--seed", "11", "gen-data", "--count", "64", "--out", s(&d)]);
    assert_eq!(code(&out), 0);
    let summary = stdout_json(&out);
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    let ds = read_dataset(&d).unwrap();
    assert_eq!(summary["count"], 64);
    assert_eq!(manifest["count"], 64);
    assert_eq!(manifest["offsets"].as_array().unwrap().len(), 64);
    assert_eq!(ds.records.len(), 64);
    let positives = ds.records.iter().filter(|r| r.label_class == 1).count();
    assert_eq!(summary["positive_labels"], positives);
    assert_eq!(summary["seed"], 11);
    assert_eq!(manifest["world"]["config"]["seed"], 11);
    assert_eq!(summary["region_deg"], manifest["world"]["config"]["region_deg"]);
    // The written config carries the resolved seed and reproduces the summary hash.
    let cfg_text = fs::read_to_string(d.join("config.json")).unwrap();
    let cfg: Value = serde_json::from_str(&cfg_text).unwrap();
    assert_eq!(cfg["seed"], 11);
    assert_eq!(cfg["count"], 64);
}

#[test]
fn tiny_pretrain_writes_checkpoints_and_metrics() {
    let fx = Fixture::new(3);
    let out = fx.pretrain("run", &["--max-steps", "20", "--checkpoint-every", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = fx.path("run");
    for f in ["final.ckpt", "step-00000010.ckpt", "step-00000020.ckpt", "config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let m = fx.metrics("run");
    assert_eq!(m.len(), 20);
    for (i, line) in m.iter().enumerate() {
        assert_eq!(line["step"], i as u64);
        assert_eq!(line["bank_len"].as_u64().unwrap(), (8 * (i as u64 + 1)).min(32));
    }
    let ck = Checkpoint::load(&run_dir.join("final.ckpt")).unwrap();
    assert_eq!(ck.step, 20);
    assert_eq!(stdout_json(&out)["step"], 20);
}

#[test]
fn zero_lambda_leaves_location_mlp_without_gradient() {
    let fx = Fixture::new(1);
    let out = fx.pretrain("run", &["--lambda", "0"]);
    assert_eq!(code(&out), 0);
    let m = fx.metrics("run");
    assert_eq!(m.len(), 8);
    for line in &m {
        assert_eq!(line["loc_grad_norm"].as_f64().unwrap(), 0.0);
        let secl = line["secl"].as_f64().unwrap();
        assert!(secl.is_finite() && secl > 0.0);
        let (incl, total) = (line["incl"].as_f64().unwrap(), line["total"].as_f64().unwrap());
        assert!((total - incl).abs() <= 1e-6 * incl.abs().max(1.0));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let fx = Fixture::new(3);
    assert_eq!(code(&fx.pretrain("full", &[])), 0);
    assert_eq!(code(&fx.pretrain("part", &["--max-steps", "11"])), 0);
    let part = fx.path("part").join("final.ckpt");
    assert_eq!(Checkpoint::load(&part).unwrap().step, 11);
    // Flags are ignored on resume; the stored config wins.
    let out = fx.pretrain("part", &["--resume", s(&part), "--lr", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(fx.path("full").join("final.ckpt")).unwrap(),
        fs::read(fx.path("part").join("final.ckpt")).unwrap()
    );
    let strip = |v: &Vec<Value>| -> Vec<Value> {
        v.iter()
            .map(|l| {
                let mut l = l.clone();
                l.as_object_mut().unwrap().remove("wall_ms");
                l
            })
            .collect()
    };
    assert_eq!(strip(&fx.metrics("full")), strip(&fx.metrics("part")));
}

#[test]
fn pretrain_is_deterministic() {
    let fx = Fixture::new(1);
    assert_eq!(code(&fx.pretrain("a", &[])), 0);
    assert_eq!(code(&fx.pretrain("b", &[])), 0);
    assert_eq!(
        fs::read(fx.path("a").join("final.ckpt")).unwrap(),
        fs::read(fx.path("b").join("final.ckpt")).unwrap()
    );
}

#[test]
fn pretrain_rejects_bad_data() {
    let fx = Fixture::new(1);
    let blob = fx.data.join("records.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&blob, bytes).unwrap();
    assert_eq!(code(&fx.pretrain("run", &[])), 3);

    let missing = fx.path("nowhere");
    let out = run(&["--config", s(&fx.config), "pretrain", "--data", s(&missing), "--out", s(&fx.path("r"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn pretrain_rejects_dataset_from_another_world() {
    let fx = Fixture::new(1);
    let out = run(&[
        "--config", s(&fx.config), "--seed", "99", "pretrain", "--data", s(&fx.data), "--out", s(&fx.path("r")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_4_and_keeps_last_good_checkpoint() {
    let fx = Fixture::new(2);
    let out = fx.pretrain("run", &["--lr", "1e30"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let path = fx.path("run").join("last-good.ckpt");
    let ck = Checkpoint::load(&path).unwrap();
    assert!(ck.step < 16);
    assert!(ck.store.iter().all(|(_, p)| p.value.all_finite()));
    assert!(!fx.path("run").join("final.ckpt").exists());
    assert_eq!(fx.metrics("run").len() as u64, ck.step);
}

#[test]
fn evaluate_reports_retrieval_and_probes_with_checkpoint_hash() {
    let fx = Fixture::new(1);
    assert_eq!(code(&fx.pretrain("run", &[])), 0);
    let ckpt = fx.path("run").join("final.ckpt");
    let report_path = fx.path("report.json");
    let out = run(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--probe", "linear", "--probe", "nonlinear",
        "--baseline", "--out", s(&report_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    let on_disk: Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report, on_disk);

    let ck = Checkpoint::load(&ckpt).unwrap();
    let want = sha256_hex(serde_json::to_string(&ck.config).unwrap().as_bytes());
    assert_eq!(report["config_hash"], want.as_str());
    let metrics = report["metrics"].as_array().unwrap();
    assert!(metrics.iter().all(|m| m["config_hash"] == want.as_str()));
    assert_eq!(report["config"], serde_json::to_value(&ck.config).unwrap());

    let find = |task: &str, metric: &str| {
        metrics
            .iter()
            .find(|m| m["task"] == task && m["metric"] == metric)
            .and_then(|m| m["value"].as_f64())
            .unwrap_or_else(|| panic!("missing {task}/{metric}"))
    };
    for k in [1, 5, 10] {
        let r = find("retrieval_sv_to_rs", &format!("recall@{k}"));
        assert!((0.0..=1.0).contains(&r));
    }
    for name in ["probe_linear_field_sign", "probe_nonlinear_field_sign", "probe_linear_field_sign_random_init"] {
        let acc = find(name, "accuracy");
        assert!((0.0..=1.0).contains(&acc), "{name}");
    }
    assert!(find("geo_regression", "rmse_concat").is_finite());
}

#[test]
fn evaluate_rejects_corrupt_checkpoint() {
    let fx = Fixture::new(1);
    assert_eq!(code(&fx.pretrain("run", &[])), 0);
    let ckpt = fx.path("run").join("final.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = fx.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = run(&["evaluate", "--checkpoint", s(&bad), "--data", s(&fx.data), "--out", s(&fx.path("r.json"))]);
    assert_eq!(code(&out), 3);

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8] = 0x7f;
    fs::write(&bad, bytes).unwrap();
    let out = run(&["evaluate", "--checkpoint", s(&bad), "--data", s(&fx.data), "--out", s(&fx.path("r.json"))]);
    assert_eq!(code(&out), 3);
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    (fields[1].parse().unwrap(), fields[2].parse().unwrap(), bytes[pos + 1..].to_vec())
}

#[test]
fn heatmap_files_agree_and_stay_in_range() {
    let fx = Fixture::new(1);
    // Zero steps: an untrained checkpoint.
    assert_eq!(code(&fx.pretrain("run", &["--max-steps", "0"])), 0);
    let ckpt = fx.path("run").join("final.ckpt");
    for (mode, extra, rows, cols) in [
        ("loc", vec![], 11, 11),
        ("loc", vec!["--half", "3", "--resolution", "0.005"], 7, 7),
        ("inr", vec!["--resolution", "0.001"], 20, 20),
    ] {
        let stem = fx.path(&format!("hm/{mode}{rows}"));
        let mut args = vec![
            "heatmap", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--index", "5", "--mode", mode, "--out",
            s(&stem),
        ];
        args.extend(extra);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("argmax cell"));

        let csv = read_csv(&stem.with_extension("csv"));
        assert_eq!(csv.len(), rows);
        assert!(csv.iter().all(|r| r.len() == cols));
        let flat: Vec<f64> = csv.into_iter().flatten().collect();
        assert!(flat.iter().all(|v| (-1.0..=1.0).contains(v)));

        let (w, h, pixels) = read_pgm(&stem.with_extension("pgm"));
        assert_eq!((w, h), (cols, rows));
        assert_eq!(pixels.len(), flat.len());
        for (k, (&p, &v)) in pixels.iter().zip(&flat).enumerate() {
            let want = ((v + 1.0) / 2.0 * 255.0).round() as u8;
            assert_eq!(p, want, "pixel {k}");
        }

        let meta: Value = serde_json::from_slice(&fs::read(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta["rows"], rows);
        assert_eq!(meta["cols"], cols);
        assert!(meta["config"].is_object());
    }
}

#[test]
fn heatmap_bad_index_is_usage_error() {
    let fx = Fixture::new(1);
    assert_eq!(code(&fx.pretrain("run", &["--max-steps", "0"])), 0);
    let ckpt = fx.path("run").join("final.ckpt");
    let out = run(&[
        "heatmap", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--index", "80", "--out", s(&fx.path("h")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!fx.path("h.pgm").exists());
}

#[test]
fn gradcheck_lists_every_check_once_and_passes() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with("PASS") || l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let want: Vec<&str> = DIFFERENTIABLE_OPS.iter().chain(PIPELINE_CHECKS).copied().collect();
    assert_eq!(names, want);
}

#[test]
fn gradcheck_injected_fault_fails() {
    let out = run(&["gradcheck", "--inject-fault", "--instances", "2"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8(out.stdout).unwrap();
    let failed: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert!(failed.contains(&"map"));
}

#[test]
fn malformed_flags_and_config_are_usage_errors() {
    assert_eq!(code(&run(&["pretrain"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gen-data", "--out", s(&dir.path().join("d"))])), 2);
    fs::write(&cfg, r#"{"tau": -1.0}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gen-data", "--out", s(&dir.path().join("d"))])), 2);
}

#[test]
fn thread_cap_does_not_change_results() {
    let fx = Fixture::new(1);
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let dir = fx.path(&format!("t{threads}"));
        let out = bin()
            .env("GAIR_THREADS", threads)
            .args(["--config", s(&fx.config), "pretrain", "--data", s(&fx.data), "--out", s(&dir)])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        outs.push(fs::read(dir.join("final.ckpt")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let out = bin().env("GAIR_THREADS", "zero").args(["gradcheck"]).output().unwrap();
    assert_eq!(code(&out), 2);
}
