use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[sft]
steps = 6
batch_size = 4
[rl]
updates = 2
rollout_batch = 4
minibatches = 2
epochs = 1
eval_every = 1
eval_rollouts = 1
"#;

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapo-lab"))
        .args(args)
        .env("LAPO_LAB_DIR", dir)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    let common = ["--config", c, "--suite", "reach", "--deterministic"];
    let run = |sub: &[&str]| ok(d, &[sub, &common[..]].concat());

    assert!(run(&["gen-demos"]).contains("10 demos"));
    assert!(run(&["precompute-latents"]).contains("latent targets"));
    assert!(run(&["sft"]).contains("sft-seed3.ckpt"));
    let rl = run(&["rl", "--dump-rollouts", "roll.bin"]);
    assert!(rl.contains("update    0"), "{rl}");
    let metrics = d.join("metrics/rl-lapo-adaptive-seed3/metrics.jsonl");
    let first = std::fs::read(&metrics).unwrap();
    assert_eq!(first.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("metrics/rl-lapo-adaptive-seed3/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["deterministic"], true);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    run(&["rl"]);
    assert_eq!(std::fs::read(&metrics).unwrap(), first);

    let ckpt = d.join("checkpoints/rl-lapo-adaptive-seed3.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let a = run(&["eval", "--checkpoint", ckpt]);
    let b = run(&["eval", "--checkpoint", ckpt]);
    assert_eq!(a, b);
    assert!(a.contains("reach/9"));

    let replay = run(&["replay", "--file", "roll.bin", "--traj", "1"]);
    assert!(replay.contains("decision 0"), "{replay}");
    assert!(replay.contains("micro-steps"));
}

#[test]
fn expert_eval_is_perfect() {
    let (dir, cfg) = setup();
    let out = ok(
        dir.path(),
        &["eval", "--expert", "--config", cfg.to_str().unwrap(), "--suite", "all", "--rollouts", "2"],
    );
    assert_eq!(out.matches("overall SR 1.000").count(), 3, "{out}");
}

#[test]
fn baseline_flag_maps_to_zero_latents() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    ok(d, &["gen-demos", "--config", c]);
    ok(d, &["precompute-latents", "--config", c]);
    ok(d, &["sft", "--config", c]);
    ok(d, &["rl", "--config", c, "--baseline", "ppo-action-only", "--deterministic"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("metrics/rl-ppo-fixed0-seed3/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["latent_mode"], "fixed:0");
    assert_eq!(manifest["config"]["rl"]["lambda1"], 0.0);
    assert_eq!(manifest["config"]["rl"]["lambda3"], 0.0);
}

#[test]
fn ablate_writes_one_tagged_metric_file_per_value() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    ok(d, &["gen-demos", "--config", c]);
    ok(d, &["precompute-latents", "--config", c]);
    let out = ok(d, &["ablate", "--config", c, "--grid", "lambda1=0,0.1,0.5,1"]);
    assert_eq!(out.lines().count(), 4, "{out}");
    for v in ["0", "0.1", "0.5", "1"] {
        let m = d.join(format!("metrics/ablate-lambda1={v}-seed3/metrics.jsonl"));
        assert!(m.exists(), "{}", m.display());
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();

    let missing = lab(d, &["sft", "--config", c]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    std::fs::write(d.join("bad.toml"), "seed = 1\nwat = 2\n").unwrap();
    assert_eq!(lab(d, &["gen-demos", "--config", "bad.toml"]).status.code(), Some(1));
    assert_eq!(lab(d, &["gen-demos", "--latent-mode", "fixed:99"]).status.code(), Some(1));
    assert_eq!(lab(d, &["ablate", "--grid", "gamma=0.5"]).status.code(), Some(1));
    assert_eq!(lab(d, &["frobnicate"]).status.code(), Some(1));

    std::fs::write(d.join("demos.bin"), b"LAPODEM1\x01").unwrap();
    let corrupt = lab(d, &["precompute-latents", "--config", c]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8(corrupt.stderr).unwrap().contains("offset"));
}

#[test]
fn numeric_abort_exits_with_two() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    ok(d, &["gen-demos", "--config", c]);
    ok(d, &["precompute-latents", "--config", c]);
    ok(d, &["sft", "--config", c]);
    let path = d.join("checkpoints/sft-seed3.ckpt");
    let mut ck = lapo::params::Checkpoint::read(&path).unwrap();
    let names = ck.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if name.starts_with("value.") && name.ends_with(".w") {
            for w in ck.params.tensors_mut()[i].data_mut() {
                *w = 3e9;
            }
        }
    }
    ck.write(&path).unwrap();
    let out = lab(d, &["rl", "--config", c]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("checkpoints/rl-lapo-adaptive-seed3/rl_last_good.ckpt").exists());
}
