use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dfmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfmamba"))
        .args(args)
        .env_remove("DFMAMBA_THREADS")
        .output()
        .expect("binary runs")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn gen(dir: &Path, seed: &str) -> Output {
    dfmamba(&["gen", "--count", "12", "--seed", seed, "--input", "64", "--out", dir.to_str().unwrap()])
}

#[test]
fn gen_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let ra = gen(&a, "5");
    assert_eq!(code(&ra), 0, "{}", String::from_utf8_lossy(&ra.stderr));
    let rb = gen(&b, "5");
    assert_eq!(report(&ra)["metrics"], report(&rb)["metrics"]);
    for f in ["manifest", "images.bin", "joints.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(report(&ra)["seed"], 5);
}

#[test]
fn train_eval_and_resume() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(code(&gen(&data, "0")), 0);
    let run = t.path().join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    let common = ["--preset", "tiny", "--holdout", "4", "--batch-size", "4", "--data", d, "--out", r];
    let mut args = vec!["train", "--epochs", "2"];
    args.extend(common);
    let out = dfmamba(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let logged: Vec<f64> = log
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|kv| kv.strip_prefix("heldout_mpjpe=")))
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(logged.len(), 3);
    let best = logged.iter().copied().fold(f64::INFINITY, f64::min);

    let ck = run.join("best.ckpt");
    let ev = dfmamba(&["eval", "--data", d, "--ckpt", ck.to_str().unwrap()]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let mpjpe = report(&ev)["metrics"]["mpjpe"].as_f64().unwrap();
    assert!((mpjpe - best).abs() <= 1e-9, "{mpjpe} vs {best}");

    let last = run.join("last.ckpt");
    let mut args = vec!["train", "--epochs", "3", "--ckpt", last.to_str().unwrap()];
    args.extend(common);
    let out = dfmamba(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("epoch=3 "), "{log}");
    assert_eq!(report(&out)["metrics"]["train_loss"].as_array().unwrap().len(), 1);

    let mut args = vec!["train", "--epochs", "1", "--arch", "CCGGGG", "--ckpt", last.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&dfmamba(&args)), 1);
}

#[test]
fn gradcheck_tiny_passes() {
    let out = dfmamba(&["gradcheck", "--arch", "CCDGDG", "--preset", "tiny"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["passed"], true);
    assert!(r["checks"].as_object().unwrap().len() > 30);
}

#[test]
fn bench_and_inspect() {
    for seq in [false, true] {
        let mut args = vec!["bench", "--preset", "tiny", "--input", "64", "--iters", "2"];
        if seq {
            args.push("--sequential");
        }
        let out = dfmamba(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(report(&out)["timings"]["images_per_sec"].as_f64().unwrap() > 0.0);
    }
    let out = dfmamba(&["inspect", "--preset", "tiny", "--input", "128", "--anchors", "25"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    let json_start = text.find('{').unwrap();
    let r: Value = serde_json::from_str(&text[json_start..]).unwrap();
    assert_eq!(r["metrics"]["stage_shapes"][0], serde_json::json!([8, 32, 32]));
    assert_eq!(r["metrics"]["pyramid"][3]["shape"], serde_json::json!([64, 4, 4]));
    assert_eq!(r["config"]["anchors"], 25);
}

#[test]
fn config_file_supplies_arch() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.toml");
    std::fs::write(&cfg, "arch = \"CCGGGG\"\npreset = \"tiny\"\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = dfmamba(&["--config", c, "inspect", "--input", "64"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let r: Value = serde_json::from_str(&text[text.find('{').unwrap()..]).unwrap();
    assert_eq!(r["config"]["arch"], "CCGGGG");
    let out = dfmamba(&["--config", c, "inspect", "--input", "64", "--arch", "DDDDDD"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("DDDDDD"));

    std::fs::write(&cfg, "arch = \"CCGGGG\"\ncolour = 3\n").unwrap();
    assert_eq!(code(&dfmamba(&["--config", c, "inspect"])), 2);
    std::fs::write(&cfg, "arch = \"CCQGGG\"\n").unwrap();
    assert_eq!(code(&dfmamba(&["--config", c, "inspect"])), 2);
}

#[test]
fn usage_errors_exit_2() {
    let out = dfmamba(&["bench", "--iter", "3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--iters"));
    assert_eq!(code(&dfmamba(&["inspect", "--anchors", "4"])), 2);
    assert_eq!(code(&dfmamba(&["inspect", "--arch", "CCDGD"])), 2);
    assert_eq!(code(&dfmamba(&["frobnicate"])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_dfmamba"))
        .args(["inspect", "--preset", "tiny"])
        .env("DFMAMBA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_dfmamba"))
        .args(["inspect", "--preset", "tiny", "--input", "64"])
        .env("DFMAMBA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let t = tempfile::tempdir().unwrap();
    let out = dfmamba(&["eval", "--data", t.path().to_str().unwrap(), "--ckpt", "nope.ckpt"]);
    assert_eq!(code(&out), 1);
}
