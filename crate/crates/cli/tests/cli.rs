use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn biaslab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaslab"))
        .current_dir(dir)
        .env("BIASLAB_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = biaslab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn pipeline(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data", "--out", "run", "--seed", "3", "--n-vit", "24", "--n-pref", "12",
            "--n-eval", "6",
        ],
    );
    ok(
        dir,
        &[
            "cache-ref",
            "--out",
            "run",
            "--seed",
            "3",
            "--corpus",
            "run/vit.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "vit",
            "--out",
            "run",
            "--seed",
            "3",
            "--corpus",
            "run/vit.jsonl",
            "--reference",
            "run/reference.snap",
            "--cache",
            "run/vit.cache",
            "--max-steps",
            "3",
            "--batch-size",
            "8",
            "--alpha",
            "0.5",
            "--alpha-end",
            "0.1",
            "--alpha-schedule",
            "cosine",
        ],
    );
    ok(
        dir,
        &[
            "cache-ref",
            "--out",
            "run",
            "--corpus",
            "run/pref.jsonl",
            "--snapshot",
            "run/vit.snap",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "dpo",
            "--out",
            "run",
            "--seed",
            "3",
            "--corpus",
            "run/pref.jsonl",
            "--reference",
            "run/vit.snap",
            "--cache",
            "run/pref.cache",
            "--max-steps",
            "2",
            "--batch-size",
            "4",
            "--gamma",
            "1",
        ],
    );
    ok(
        dir,
        &[
            "eval",
            "--out",
            "run",
            "--snapshot",
            "run/dpo.snap",
            "--corpus",
            "run/eval.jsonl",
        ],
    );
}

fn without_duration(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("duration_secs");
    v
}

#[test]
fn pipeline_rerun_reproduces_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in ["gen-data", "cache-ref", "train-vit", "train-dpo", "eval"] {
        let file = format!("run/{name}.manifest.json");
        let ma = json(&a.path().join(&file));
        let mb = json(&b.path().join(&file));
        assert!(!ma["outputs"].as_object().unwrap().is_empty());
        assert!(ma["duration_secs"].as_f64().unwrap() >= 0.0);
        assert_eq!(without_duration(ma), without_duration(mb), "{name}");
    }
    let log = std::fs::read_to_string(a.path().join("run/vit.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen-data", "--out", "run", "--n-vit", "16", "--n-pref", "4", "--n-eval", "2",
        ],
    );
    ok(
        dir.path(),
        &["cache-ref", "--out", "run", "--corpus", "run/vit.jsonl"],
    );
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[train]\nepochs = 2\nbatch_size = 8\nmax_steps = 2\n[train.objective]\nbeta = 0.2\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "cfg.toml",
            "train",
            "vit",
            "--out",
            "run",
            "--corpus",
            "run/vit.jsonl",
            "--reference",
            "run/reference.snap",
            "--max-steps",
            "1",
        ],
    );
    let m = json(&dir.path().join("run/train-vit.manifest.json"));
    let train = &m["config"]["train"];
    assert_eq!(train["epochs"], 2);
    assert_eq!(train["max_steps"], 1);
    assert_eq!(train["objective"]["beta"], 0.2);
    assert_eq!(m["command"], "train vit");
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn seven_b_preset_resolves() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen-data", "--out", "run", "--n-vit", "4", "--n-pref", "8", "--n-eval", "1",
        ],
    );
    ok(
        dir.path(),
        &["cache-ref", "--out", "run", "--corpus", "run/pref.jsonl"],
    );
    ok(
        dir.path(),
        &[
            "--preset",
            "paper-lbp-7b",
            "train",
            "dpo",
            "--out",
            "run",
            "--corpus",
            "run/pref.jsonl",
            "--reference",
            "run/reference.snap",
            "--max-steps",
            "1",
        ],
    );
    let m = json(&dir.path().join("run/train-dpo.manifest.json"));
    let t = &m["config"]["train"];
    assert_eq!(t["learning_rate"], 5e-7);
    assert_eq!(t["batch_size"], 8);
    assert_eq!(t["epochs"], 3);
    assert_eq!(t["weight_decay"], 0.01);
    assert_eq!(t["warmup_ratio"], 0.05);
    assert_eq!(m["config"]["preset"], "paper-lbp-7b");
}

fn write_log(path: &Path, bias: impl Fn(f64) -> f64) {
    let lines: Vec<String> = (0..40)
        .map(|i| {
            let r = (i as f64 * 0.3).sin() + i as f64 * 0.1;
            serde_json::json!({
                "step": i, "phase": "VIT", "reward": r, "bias": bias(r), "alpha": 0.0, "gamma": 0.0
            })
            .to_string()
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn report_correlations() {
    let dir = tempfile::tempdir().unwrap();
    write_log(&dir.path().join("same.jsonl"), |r| r);
    write_log(&dir.path().join("flat.jsonl"), |_| 0.25);
    ok(
        dir.path(),
        &["report", "--out", "run", "same.jsonl", "flat.jsonl"],
    );
    let r = json(&dir.path().join("run/report.json"));
    assert_eq!(r[0]["phases"][0]["correlation"], 1.0);
    assert!(r[1]["phases"][0]["correlation"].is_null());
    assert_eq!(r[1]["phases"][0]["terminal"]["bias"], 0.25);
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data", "--out", "run", "--n-vit", "8", "--n-pref", "4", "--n-eval", "1",
        ],
    );
    ok(
        d,
        &["cache-ref", "--out", "run", "--corpus", "run/vit.jsonl"],
    );
    ok(
        d,
        &[
            "cache-ref",
            "--out",
            "other",
            "--seed",
            "9",
            "--corpus",
            "run/vit.jsonl",
        ],
    );

    let missing = biaslab(
        d,
        &[
            "train",
            "vit",
            "--out",
            "run",
            "--corpus",
            "nope.jsonl",
            "--reference",
            "run/reference.snap",
        ],
    );
    assert_eq!(missing.status.code(), Some(4));
    assert_eq!(error_line(&missing)["error"], "missing_file");

    let mismatch = biaslab(
        d,
        &[
            "train",
            "vit",
            "--out",
            "run",
            "--corpus",
            "run/vit.jsonl",
            "--reference",
            "other/reference.snap",
            "--cache",
            "run/vit.cache",
        ],
    );
    assert_eq!(mismatch.status.code(), Some(5));
    assert_eq!(error_line(&mismatch)["exit_code"], 5);

    let invalid = biaslab(
        d,
        &["train", "vit", "--out", "run", "--warmup-ratio", "1.5"],
    );
    assert_eq!(invalid.status.code(), Some(3));

    std::fs::write(d.join("bad.toml"), "[train\nepochs = ").unwrap();
    let parse = biaslab(d, &["--config", "bad.toml", "report", "x.jsonl"]);
    assert_eq!(parse.status.code(), Some(6));

    let usage = biaslab(d, &["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));

    let codes = [missing, mismatch, invalid, parse, usage].map(|o| o.status.code().unwrap());
    let unique: std::collections::BTreeSet<_> = codes.iter().collect();
    assert_eq!(unique.len(), codes.len());
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data", "--out", "run", "--n-vit", "8", "--n-pref", "4", "--n-eval", "2",
        ],
    );
    ok(
        d,
        &["cache-ref", "--out", "run", "--corpus", "run/vit.jsonl"],
    );
    let before = std::fs::read(d.join("run/vit.jsonl")).unwrap();
    let snap = std::fs::read(d.join("run/reference.snap")).unwrap();
    ok(
        d,
        &[
            "train",
            "vit",
            "--out",
            "run",
            "--corpus",
            "run/vit.jsonl",
            "--reference",
            "run/reference.snap",
            "--max-steps",
            "1",
        ],
    );
    assert_eq!(std::fs::read(d.join("run/vit.jsonl")).unwrap(), before);
    assert_eq!(std::fs::read(d.join("run/reference.snap")).unwrap(), snap);
}

#[test]
fn grad_check_command_reports_every_objective() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data", "--out", "run", "--n-vit", "4", "--n-pref", "2", "--n-eval", "1",
        ],
    );
    ok(
        d,
        &["cache-ref", "--out", "run", "--corpus", "run/vit.jsonl"],
    );
    let out = ok(
        d,
        &[
            "grad-check",
            "--out",
            "run",
            "--corpus",
            "run/vit.jsonl",
            "--reference",
            "run/reference.snap",
            "--coords",
            "3",
            "--examples",
            "2",
        ],
    );
    assert_eq!(out.lines().count(), 5);
    let r = json(&d.join("run/grad-check.json"));
    assert_eq!(r["entries"].as_array().unwrap().len(), 5);
}
