use std::path::Path;
use std::process::{Command, Output};

fn tempomoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempomoe")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const CONFIG: &str = r#"{"batch": 2, "window": 32, "stride": 32, "lr": 1e-3, "warmup_steps": 1,
  "denoiser": {"blocks": 1, "latent_dim": 16, "heads": 2, "motion_dim": 25}}"#;

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tempomoe(&["--help"], dir.path())), 0);
    assert_eq!(code(&tempomoe(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&tempomoe(&["sample", "--solver", "euler", "--checkpoint", "a", "--music", "b"], dir.path())), 1);
    assert_eq!(code(&tempomoe(&["make-data", "--bpms", "fast"], dir.path())), 1);
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), CONFIG).unwrap();

    let o = tempomoe(&["make-data", "--bpms", "90,150", "--per-bpm", "2", "--frames", "64", "--skeleton", "toy3", "--out", "data"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("data/manifest.json").exists());
    // out-of-range tempo
    assert_eq!(code(&tempomoe(&["make-data", "--bpms", "20", "--skeleton", "toy3", "--out", "bad"], d)), 1);

    let o = tempomoe(&["train", "--config", "cfg.json", "--manifest", "data/manifest.json", "--steps", "2", "--seed", "3", "--out", "run"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/checkpoint.json").exists() && d.join("run/checkpoint.bin").exists());
    // missing manifest, malformed config
    assert_eq!(code(&tempomoe(&["train", "--manifest", "nope.json", "--out", "x"], d)), 1);
    std::fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&tempomoe(&["train", "--config", "broken.json", "--manifest", "data/manifest.json"], d)), 1);

    let music = "data/music/bpm90_000.tmoe";
    let o = tempomoe(&["sample", "--checkpoint", "run/checkpoint.json", "--music", music, "--frames", "48", "--steps", "3", "--out", "s"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = tempomoe::container::load_motion(&d.join("s/sample.tmoe")).unwrap();
    assert_eq!((out.len(), out.dim()), (48, 25));
    let o = tempomoe(&["sample", "--checkpoint", "run/checkpoint.json", "--music", music, "--frames", "48", "--solver", "ancestral", "--out", "s2"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&tempomoe(&["sample", "--checkpoint", "run/checkpoint.json", "--music", music, "--frames", "500", "--out", "s3"], d)), 1);

    // output directory blocked by a plain file: runtime failure
    std::fs::write(d.join("blocked"), "").unwrap();
    let o = tempomoe(&["sample", "--checkpoint", "run/checkpoint.json", "--music", music, "--frames", "8", "--steps", "2", "--out", "blocked"], d);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let o = tempomoe(&["eval", "--checkpoint", "run/checkpoint.json", "--manifest", "data/manifest.json", "--steps", "2", "--out", "e"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e/eval.json")).unwrap()).unwrap();
    for k in ["fid_k", "fid_g", "div_k", "div_g", "bas_mean"] {
        assert!(report[k].is_number(), "{k}");
    }
    assert_eq!(report["bas_per_sample"].as_array().unwrap().len(), 2);

    let o = tempomoe(&["analyze-routing", "--checkpoint", "run/checkpoint.json", "--manifest", "data/manifest.json", "--out", "r"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("r/routing.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "layer,sample_id,frame,group_a,group_b,w_a,w_b,gamma_quarter,gamma_half,gamma_whole");
    assert_eq!(csv.lines().count(), 1 + 4 * 64);
    assert!(d.join("r/routing_summary.json").exists());
}

#[test]
fn ablate_runs_every_axis_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = tempomoe(&["ablate", "--out", "a"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/ablation.json")).unwrap()).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r["ok"] == true));
    let o = tempomoe(&["ablate", "--axis", "group_count", "--out", "g"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(code(&tempomoe(&["ablate", "--axis", "tempo", "--out", "t"], dir.path())), 1);
    let err = String::from_utf8_lossy(&tempomoe(&["ablate", "--axis", "tempo"], dir.path()).stderr).into_owned();
    assert!(err.contains("inter_mode"), "{err}");
}
