use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn visualrwkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visualrwkv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let config = json!({
        "model": {
            "d_model": 16, "n_layers": 2, "n_heads": 2, "head_dim": 8, "d_ffn": 32,
            "vocab_size": 259, "d_vision": 12, "patch": 8, "lora_rank": 1,
            "recurrence": "dd", "scan_mode": "bi", "prompt": "sandwich"
        },
        "train": {
            "lr_init": 0.003, "lr_end": 0.0001, "schedule": "cosine", "weight_decay": 0.01,
            "epochs_stage1": 0.5, "epochs_stage2": 0.5, "batch_size": 4, "grad_accum": 2,
            "reduction": "sample", "seed": 3
        },
        "data": { "grid": 2, "palette": 4, "n_train": 16, "n_eval": 8 }
    });
    let p = dir.join("small.json");
    std::fs::write(&p, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    p
}

#[test]
fn selftest_passes() {
    let out = visualrwkv(&["selftest"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(
        visualrwkv(&["train", "--config", "missing.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        visualrwkv(&["bench", "--unknown-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(
        visualrwkv(&["ablate", "--checkpoint", "x.vrwk"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(visualrwkv(&[]).status.code(), Some(2));
    assert_eq!(visualrwkv(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    value["model"]["n_heads"] = json!(3);
    std::fs::write(&cfg, value.to_string()).unwrap();
    assert_eq!(
        visualrwkv(&["train", "--config", path(&cfg)]).status.code(),
        Some(1)
    );
}

#[test]
fn bench_csv_has_constant_rwkv_state() {
    let out = visualrwkv(&["bench", "--model", "rwkv", "--max-len", "300"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("model,seq_len,per_token_ns,cum_ms,state_bytes,activation_bytes")
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(),
        ["128", "256", "300"]
    );
    assert!(rows.iter().all(|r| r[0] == "rwkv" && r[4] == rows[0][4]));
}

#[test]
fn bench_attention_cache_grows() {
    let out = visualrwkv(&["bench", "--model", "attention", "--max-len", "512"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let bytes: Vec<u64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(bytes.len(), 3);
    assert!(bytes.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn gen_data_is_deterministic() {
    let a = visualrwkv(&["gen-data", "--n", "5", "--seed", "4"]);
    let b = visualrwkv(&["gen-data", "--n", "5", "--seed", "4"]);
    let c = visualrwkv(&["gen-data", "--n", "5", "--seed", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["shape"], json!([32, 32, 3]));
    assert!(first["instruction"]
        .as_str()
        .unwrap()
        .starts_with("what color is cell"));
    let empty = visualrwkv(&["gen-data", "--n", "0"]);
    assert!(empty.status.success() && empty.stdout.is_empty());
}

#[test]
fn train_infer_and_ablate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ckpt = dir.path().join("small.vrwk");
    let summary = dir.path().join("summary.json");
    let out = visualrwkv(&[
        "train",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&summary),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(report["stage1_steps"], json!(1));
    assert_eq!(report["losses"].as_array().unwrap().len(), 2);
    assert_eq!(report["n_eval"], json!(8));

    let mut ppm = b"P6\n32 32\n255\n".to_vec();
    ppm.extend((0..32 * 32).flat_map(|i| {
        if i % 32 < 16 {
            [255u8, 0, 0]
        } else {
            [0, 0, 255]
        }
    }));
    let image = dir.path().join("split.ppm");
    std::fs::write(&image, ppm).unwrap();
    let out = visualrwkv(&[
        "infer",
        "--checkpoint",
        path(&ckpt),
        "--image",
        path(&image),
        "--prompt",
        "what color is cell (0,0)?",
        "--max-len",
        "4",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.ends_with(b"\n"));

    for (axis, rows) in [("reduction", 2), ("image_tokens", 8), ("prompt", 3)] {
        let out = visualrwkv(&[
            "ablate",
            "--axis",
            axis,
            "--checkpoint",
            path(&ckpt),
            "--config",
            path(&cfg),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let array = value.as_array().unwrap();
        assert_eq!(array.len(), rows, "{axis}");
        for row in array {
            assert_eq!(row["n"], json!(8));
            let acc = row["accuracy"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn infer_without_checkpoint_file_fails() {
    let out = visualrwkv(&[
        "infer",
        "--checkpoint",
        "/nonexistent.vrwk",
        "--prompt",
        "hi",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
