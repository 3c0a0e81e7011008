use std::path::Path;
use std::process::{Command, Output};

fn selsync(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selsync"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SELSYNC_PS_ADDR")
        .output()
        .unwrap()
}

fn config(strategy: &str, train: &str, test: &str) -> String {
    format!(
        r#"{{
  "model": {{"input_dim": 3, "hidden_dims": [6], "num_classes": 3}},
  "dataset": {{"kind": "files", "train": "{train}", "test": "{test}"}},
  "partitioning": {{"kind": "seldp"}},
  "strategy": {strategy},
  "cluster": {{"N": 2}},
  "batch": 8,
  "lr": {{"initial_lr": 0.05}},
  "budget": {{"epochs": 2}},
  "eval_every": 5,
  "patience": null,
  "seeds": {{"data": 1, "init": 2, "schedule": 3}}
}}"#
    )
}

#[test]
fn generate_run_replay_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = selsync(
        &["generate-data", "--classes", "3", "--per-class", "40", "--test-per-class", "10", "--dim", "3", "--seed", "5",
          "--train", "data/train.csv", "--test", "data/test.csv"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header = std::fs::read_to_string(d.join("data/train.csv")).unwrap();
    assert!(header.starts_with("label,f0,f1,f2\n"));
    assert!(d.join("data/train.csv.meta.json").exists());

    let train = d.join("data/train.csv");
    let test = d.join("data/test.csv");
    let (train, test) = (train.to_str().unwrap(), test.to_str().unwrap());
    std::fs::write(d.join("bsp.json"), config(r#"{"kind": "bsp"}"#, train, test)).unwrap();
    std::fs::write(d.join("sel.json"), config(r#"{"kind": "selsync", "delta": 0.2, "warmup": 5}"#, train, test)).unwrap();

    for name in ["bsp", "sel"] {
        let out = selsync(&["run", "--config", &format!("{name}.json"), "--out", name], d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["metrics.jsonl", "eval.csv", "summary.json"] {
            assert!(d.join(name).join(f).exists());
        }
    }

    let out = selsync(&["replay-trace", "--trace", "sel/metrics.jsonl", "--deltas", "0,0.1,0.25,0.3,0.5,1.0", "--warmup", "5"], d);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "delta,sync_steps");
    assert_eq!(lines.len(), 7);

    let out = selsync(&["compare", "--baseline", "bsp/summary.json", "--candidate", "bsp/summary.json"], d);
    assert!(out.status.success());
    let cmp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cmp["conv_diff"], 0.0);
    assert_eq!(cmp["speedup"], 1.0);
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(r#"{"kind": "bsp"}"#, "missing.csv", "missing.csv").replace(r#""epochs": 2"#, r#""steps": 0"#);
    std::fs::write(dir.path().join("bad.json"), cfg).unwrap();
    let out = selsync(&["run", "--config", "bad.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}
