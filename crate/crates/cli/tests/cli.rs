use std::path::Path;
use std::process::{Command, Output};

fn divtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divtok"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SMALL: &str = r#"
[model.config]
vocab_size = 256
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 12
max_seq = 64

[corpus]
synthetic_bytes = 4000

[probe]
prefix_len = 8
total_len = 24
count = 6

[train]
batch_size = 2
seq_len = 16
"#;

#[test]
fn props_succeeds_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("props.toml");
    write(&cfg, "experiment = \"props\"\n[props]\npairs = 200\n");
    let out_dir = dir.path().join("out");
    let o = divtok(&["props", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["experiment"], "props");
    assert_eq!(manifest["passed"], true);
    assert!(out_dir.join("props.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(divtok(&["dance"]).status.code(), Some(2));
    assert_eq!(divtok(&["props", "--bogus"]).status.code(), Some(2));
    assert_eq!(divtok(&["props", "--config", "/nonexistent.toml"]).status.code(), Some(2));

    let wrong = dir.path().join("wrong.toml");
    write(&wrong, "experiment = \"train\"\n");
    assert_eq!(divtok(&["props", "--config", wrong.to_str().unwrap()]).status.code(), Some(2));

    let unknown = dir.path().join("unknown.toml");
    write(&unknown, "experiment = \"props\"\nlearning = 1\n");
    assert_eq!(divtok(&["props", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    write(&missing, "experiment = \"metrics\"\n[model]\ncheckpoint = \"/nonexistent/model.ckpt\"\n");
    assert_eq!(divtok(&["metrics", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    assert_eq!(divtok(&["props", "--workers", "0"]).status.code(), Some(2));
}

#[test]
fn train_then_sparsify_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = dir.path().join("train.toml");
    let train_cfg_text = format!("experiment = \"train\"\n{}", SMALL.replacen("[model.config]", "[model]\npretrain_steps = 2\n\n[model.config]", 1));
    write(&train_cfg, &train_cfg_text);
    let train_out = dir.path().join("train");
    let o = divtok(&["train", "--config", train_cfg.to_str().unwrap(), "--out", train_out.to_str().unwrap(), "--workers", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_out.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(train_out.join("loss_trace.csv").exists());

    let sp_cfg = dir.path().join("sparsify.toml");
    let text = format!(
        "experiment = \"sparsify\"\n{}\n[schedule]\nincrements = [20.0, 10.0]\nmasked_steps = 2\ndense_steps = 1\nallocation = \"balanced\"\n",
        SMALL.replacen(
            "[model.config]",
            &format!("[model]\ncheckpoint = \"{}\"\n\n[model.config]", ckpt.display()),
            1
        )
    );
    write(&sp_cfg, &text);
    let sp_out = dir.path().join("sparsify");
    let o = divtok(&["sparsify", "--config", sp_cfg.to_str().unwrap(), "--out", sp_out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((summary["achieved"].as_f64().unwrap() - 30.0).abs() <= 1.0);
    assert!(sp_out.join("round_01/plan.toml").exists());
}
