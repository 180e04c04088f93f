mod common;

use std::collections::{BTreeMap, BTreeSet};

use tempomoe::checkpoint::{blob_path, Checkpoint};
use tempomoe::error::Class;
use tempomoe::generate::generate;
use tempomoe::routing::{analyze, write_csv, CSV_HEADER};
use tempomoe::trainer::{Control, Corpus, Trainer};
use tempomoe_core::diffusion::{SamplerConfig, Solver};
use tempomoe_core::kinematics::Skeleton;
use tempomoe_core::tempomoe::{Granularity, RouteMode};
use tempomoe_core::Tensor;

fn bits(ts: &[Tensor<f32>]) -> Vec<u32> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn save_load_forward_is_bitwise() {
    let (ck, pairs) = common::trained(common::tiny_denoiser(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert!(blob_path(&path).exists());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.params.names(), ck.params.names());
    assert_eq!(bits(back.params.tensors()), bits(ck.params.tensors()));
    let model = back.model().unwrap();
    let x = Tensor::new(&[20, 25], (0..500).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let music = pairs[0].music.window(0, 20);
    let a = model.predict(ck.params.tensors(), &x, 321.0, Some(music.frames()), None).unwrap();
    let b = model.predict(back.params.tensors(), &x, 321.0, Some(music.frames()), None).unwrap();
    assert_eq!(bits(&[a]), bits(&[b]));
}

#[test]
fn truncated_blob_is_rejected() {
    let (ck, _) = common::trained(common::tiny_denoiser(), 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let blob = blob_path(&path);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().class, Class::Validation);
}

#[test]
fn training_is_deterministic_and_lr_zero_is_inert() {
    let (a, _) = common::trained(common::tiny_denoiser(), 3);
    let (b, _) = common::trained(common::tiny_denoiser(), 3);
    assert_eq!(bits(a.params.tensors()), bits(b.params.tensors()));

    let skel = Skeleton::toy3();
    let ps = common::pairs(&[90.0, 150.0], 64, &skel);
    let cfg = tempomoe_core::train::TrainConfig { lr: 0.0, max_steps: Some(3), ..common::tiny_config(common::tiny_denoiser()) };
    let corpus = Corpus::from_pairs(&ps, skel, cfg.window, cfg.stride).unwrap();
    let mut t = Trainer::new(cfg, corpus, None).unwrap();
    let before = bits(t.state.params.tensors());
    let ck = t.run(|_, _| Control::Continue).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(bits(ck.params.tensors()), before);
}

#[test]
fn run_writes_logs_and_checkpoints() {
    let skel = Skeleton::toy3();
    let ps = common::pairs(&[90.0, 150.0], 64, &skel);
    let cfg = tempomoe_core::train::TrainConfig {
        max_steps: Some(4),
        checkpoint_every: 2,
        ..common::tiny_config(common::tiny_denoiser())
    };
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::from_pairs(&ps, skel, cfg.window, cfg.stride).unwrap();
    let mut t = Trainer::new(cfg, corpus, Some(dir.path().to_path_buf())).unwrap();
    let mut seen = 0;
    t.run(|_, log| {
        seen += 1;
        assert!(log.loss.total.is_finite());
        Control::Continue
    })
    .unwrap();
    assert_eq!(seen, 4);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["simple", "joint", "vel", "acc", "contact", "kin_total", "total"] {
        assert!(first["loss"][k].is_number(), "{k}");
    }
    for f in ["checkpoint_step2.json", "checkpoint_step4.json", "checkpoint.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn generated_motion_has_requested_shape_and_binary_contacts() {
    let (ck, pairs) = common::trained(common::tiny_denoiser(), 1);
    let model = ck.model().unwrap();
    for solver in [Solver::DpmPp2M, Solver::Ancestral] {
        let cfg = SamplerConfig { solver, steps: 4, ..SamplerConfig::default() };
        let m = generate(&ck, &model, &pairs[0].music, 40, &cfg).unwrap();
        assert_eq!((m.len(), m.dim()), (40, 25));
        m.check_binary_contacts().unwrap();
    }
    let too_long = generate(&ck, &model, &pairs[0].music, 65, &SamplerConfig::default()).unwrap_err();
    assert_eq!(too_long.class, Class::Validation);
}

#[test]
fn routing_csv_contracts() {
    let (ck, pairs) = common::trained(common::tiny_denoiser(), 1);
    let model = ck.model().unwrap();
    let analysis = analyze(&ck, &model, &pairs, 0).unwrap();
    assert_eq!(analysis.records.len(), 2 * 2 * 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("routing.csv");
    write_csv(&path, &analysis.records).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
    let mut groups: BTreeMap<(String, String), BTreeSet<(String, String)>> = BTreeMap::new();
    for row in rd.records() {
        let r = row.unwrap();
        let g: f64 = (7..10).map(|i| r[i].parse::<f64>().unwrap()).sum();
        assert!((g - 1.0).abs() < 1e-6, "{g}");
        assert_ne!(&r[3], &r[4]);
        groups.entry((r[0].to_string(), r[1].to_string())).or_default().insert((r[3].to_string(), r[4].to_string()));
    }
    assert_eq!(groups.len(), 4);
    // sequence-level tempo gate: one distinct pair per (layer, sample)
    assert!(groups.values().all(|s| s.len() == 1));
    let s = &analysis.summary;
    assert_eq!(s.layers.len(), 2);
    for l in &s.layers {
        assert!((l.group_frequency.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!((l.mean_gamma.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(s.by_bpm.len(), 2);
}

#[test]
fn sequence_granularity_gives_one_row_per_layer() {
    let mut d = common::tiny_denoiser();
    d.routing.granularity = Granularity::Sequence;
    d.routing.inter_mode = RouteMode::Top1;
    let (ck, pairs) = common::trained(d, 1);
    let a = analyze(&ck, &ck.model().unwrap(), &pairs, 0).unwrap();
    assert_eq!(a.records.len(), 2 * 2);
    assert!(a.records.iter().all(|r| r.frame == -1 && r.group_b == -1));
}

#[test]
fn ffn_baseline_has_no_routing() {
    let mut d = common::tiny_denoiser();
    d.ffn_baseline = true;
    let (ck, pairs) = common::trained(d, 1);
    let e = analyze(&ck, &ck.model().unwrap(), &pairs, 0).err().unwrap();
    assert_eq!(e.class, Class::Validation);
}
