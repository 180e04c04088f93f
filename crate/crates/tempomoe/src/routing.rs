//! Routing statistics: per-position records and per-layer summaries.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tempomoe_core::dataset::Pair;
use tempomoe_core::denoiser::Denoiser;
use tempomoe_core::diffusion::{forward_noise, gaussian};
use tempomoe_core::tempomoe::{Granularity, RoutingDecision};

use crate::checkpoint::Checkpoint;
use crate::error::{AppError, AppResult};

pub const CSV_HEADER: [&str; 10] =
    ["layer", "sample_id", "frame", "group_a", "group_b", "w_a", "w_b", "gamma_quarter", "gamma_half", "gamma_whole"];

/// One CSV row. `frame` is −1 for sequence-level decisions; `group_b` is −1
/// when only one group runs. Under soft/average routing every group runs and
/// the two heaviest are reported.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub sample_id: String,
    pub frame: i64,
    pub group_a: i64,
    pub group_b: i64,
    pub w_a: f64,
    pub w_b: f64,
    pub gamma_quarter: f64,
    pub gamma_half: f64,
    pub gamma_whole: f64,
}

/// The two heaviest selected groups with their weights.
pub fn top_two(d: &RoutingDecision) -> [(i64, f64); 2] {
    let mut sel: Vec<(usize, f64)> = d.selected.iter().copied().zip(d.group_weights.iter().copied()).collect();
    sel.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let get = |i: usize| sel.get(i).map_or((-1, 0.0), |&(g, w)| (g as i64, w));
    [get(0), get(1)]
}

pub fn records(sample_id: &str, layer: usize, d: &RoutingDecision) -> Vec<RoutingRecord> {
    let [(ga, wa), (gb, wb)] = top_two(d);
    d.gamma
        .iter()
        .enumerate()
        .map(|(i, g)| RoutingRecord {
            layer,
            sample_id: sample_id.to_string(),
            frame: if d.granularity == Granularity::Frame { i as i64 } else { -1 },
            group_a: ga,
            group_b: gb,
            w_a: wa,
            w_b: wb,
            gamma_quarter: g[0],
            gamma_half: g[1],
            gamma_whole: g[2],
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// Fraction of samples in which each group was selected.
    pub group_frequency: Vec<f64>,
    pub mean_gamma: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub bpm: Option<f64>,
    /// Mean anchor BPM of the selected groups, over layers.
    pub mean_selected_anchor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingSummary {
    pub anchors: Vec<f64>,
    pub layers: Vec<LayerSummary>,
    pub samples: Vec<SampleSummary>,
    /// Mean selected anchor per labelled input tempo.
    pub by_bpm: BTreeMap<String, f64>,
}

pub struct Analysis {
    pub records: Vec<RoutingRecord>,
    pub summary: RoutingSummary,
}

/// Diffusion step at which routing is probed. Gates see only the music, so
/// the choice affects nothing but the unused denoising output.
pub const PROBE_T: usize = 500;

pub fn analyze(ck: &Checkpoint, model: &Denoiser, pairs: &[Pair], seed: u64) -> AppResult<Analysis> {
    if ck.config.denoiser.ffn_baseline {
        return Err(AppError::invalid("checkpoint uses the FFN baseline; it has no routing to analyse"));
    }
    let anchors = ck.config.denoiser.bank.anchors.clone();
    let g = anchors.len();
    let layers = ck.config.denoiser.blocks;
    let sched = ck.config.schedule()?;
    let t = PROBE_T.min(sched.steps);
    let mut recs = Vec::new();
    let mut freq = vec![vec![0.0; g]; layers];
    let mut gamma_sum = vec![[0.0; 3]; layers];
    let mut gamma_n = vec![0usize; layers];
    let mut samples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in pairs {
        let x0 = ck.stats.normalize_frames(p.motion.frames())?;
        let eps = gaussian(x0.rows(), x0.cols(), &mut rng).cast::<f32>();
        let x_t = forward_noise(&x0, t, &eps, &sched)?;
        let mut sink: Vec<(usize, RoutingDecision)> = Vec::new();
        model.predict(ck.params.tensors(), &x_t, t as f64, Some(p.music.frames()), Some(&mut sink))?;
        let mut anchor_sum = 0.0;
        let mut anchor_n = 0usize;
        for (layer, d) in &sink {
            recs.extend(records(&p.id, *layer, d));
            for &s in &d.selected {
                freq[*layer][s] += 1.0;
            }
            let ranked = top_two(d);
            let k = d.selected.len().min(2);
            for &(grp, _) in &ranked[..k] {
                anchor_sum += anchors[grp as usize];
                anchor_n += 1;
            }
            for gm in &d.gamma {
                for (acc, v) in gamma_sum[*layer].iter_mut().zip(gm) {
                    *acc += v;
                }
            }
            gamma_n[*layer] += d.gamma.len();
        }
        samples.push(SampleSummary { sample_id: p.id.clone(), bpm: p.bpm, mean_selected_anchor: anchor_sum / anchor_n.max(1) as f64 });
    }
    let n = pairs.len().max(1) as f64;
    let layer_summaries = (0..layers)
        .map(|l| LayerSummary {
            layer: l,
            group_frequency: freq[l].iter().map(|c| c / n).collect(),
            mean_gamma: gamma_sum[l].map(|v| v / gamma_n[l].max(1) as f64),
        })
        .collect();
    let mut by: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &samples {
        if let Some(b) = s.bpm {
            let e = by.entry(format!("{b}")).or_default();
            e.0 += s.mean_selected_anchor;
            e.1 += 1;
        }
    }
    let by_bpm = by.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
    Ok(Analysis { records: recs, summary: RoutingSummary { anchors, layers: layer_summaries, samples, by_bpm } })
}

pub fn write_csv(path: &Path, records: &[RoutingRecord]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::runtime(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| AppError::runtime(format!("{}: {e}", path.display())))?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| AppError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}
