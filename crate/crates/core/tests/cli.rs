use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "pretrain": {"max_steps": 400, "min_steps": 100, "validation_size": 200},
  "stream": {"domains": [
    {"name": "noise", "corruption": "gauss-noise", "severity": 3, "duration": 4},
    {"name": "bright", "corruption": "brightness", "severity": 2, "duration": 4}
  ]}
}"#;

fn moase(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moase"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOASE_CONFIG")
        .env_remove("MOASE_SEED")
        .env_remove("MOASE_MODE")
        .env_remove("MOASE_STREAM")
        .env_remove("MOASE_ROUNDS")
        .env_remove("MOASE_OUT")
        .env_remove("MOASE_CHECKPOINT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(moase(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(moase(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        moase(&["adapt", "--seed", "x"], dir.path()).status.code(),
        Some(2)
    );

    let out = moase(&["adapt", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"daopd": {"temperature": -1.0}}"#).unwrap();
    let out = moase(&["adapt", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("daopd.temperature"),
        "{}",
        stderr(&out)
    );

    std::fs::write(&bad, r#"{"daopd": {"temprature": 2.0}}"#).unwrap();
    let out = moase(&["adapt", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let cfg = small_config(dir.path());
    let out = moase(&["adapt", "--config", &cfg, "--mode", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = moase(&["adapt", "--config", &cfg, "--stream", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_adapt_sweep_diag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = moase(&["pretrain", "--config", &cfg, "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = dir.path().join("run/source.ckpt");
    let text = std::fs::read_to_string(&ckpt).unwrap();
    assert!(text.starts_with("moase-checkpoint v1\nconfig {"));
    let ckpt = ckpt.to_str().unwrap();

    let out = moase(
        &[
            "adapt",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt,
            "--mode",
            "moase++",
            "--out",
            "adapt",
            "--rounds",
            "2",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let jsonl = std::fs::read_to_string(dir.path().join("adapt/metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 16);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "round",
        "domain",
        "error",
        "js",
        "ic",
        "strengths",
        "routing",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let csv = std::fs::read_to_string(dir.path().join("adapt/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,domain,batches,mean_error,mean_js,mean_ic");
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("all,overall,16,"));

    let out = moase(
        &[
            "sweep",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt,
            "--out",
            "sweep",
            "--param",
            "ema_alpha",
            "--values",
            "0.99,0.995,0.999",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("ema_alpha,0.99,moase++,"));

    let out = moase(
        &[
            "sweep",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt,
            "--param",
            "nope",
            "--values",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_moase"))
        .args(["diag", "--checkpoint", ckpt, "--out", "diag"])
        .env("MOASE_CONFIG", &cfg)
        .env("MOASE_MODE", "source-frozen")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mode=source-frozen"));
    let diag = std::fs::read_to_string(dir.path().join("diag/diag.csv")).unwrap();
    assert!(diag.starts_with("step,round,domain,js,ic_0,ic_1,ic_2,ic_3\n"));
    assert_eq!(diag.lines().count(), 9);
}

#[test]
fn checkpoint_for_other_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(
        moase(&["pretrain", "--config", &cfg, "--out", "."], dir.path())
            .status
            .success()
    );
    let other = dir.path().join("other.json");
    std::fs::write(&other, r#"{"model": {"channels": 6}}"#).unwrap();
    let out = moase(
        &[
            "adapt",
            "--config",
            other.to_str().unwrap(),
            "--checkpoint",
            "source.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(
        dir.path().join("broken.ckpt"),
        "moase-checkpoint v1\nconfig {}\ntensor embed.weight 2\n1.0\n",
    )
    .unwrap();
    let out = moase(
        &["adapt", "--config", &cfg, "--checkpoint", "broken.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("checkpoint"));
}
