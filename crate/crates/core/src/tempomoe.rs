//! Tempo-anchored expert groups and the two-stage router.
//!
//! Each group is tied to an anchor BPM and owns three experts whose
//! depthwise kernels span a quarter, half and whole beat at that tempo.
//! A per-sequence tempo gate picks groups; a beat gate mixes the three
//! experts inside each picked group.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_tensor, Init, Linear, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Real, Tensor};

pub const DEFAULT_ANCHORS: [f64; 8] = [60.0, 80.0, 100.0, 120.0, 140.0, 160.0, 180.0, 200.0];
/// Anchor whose kernels are replicated in the homogeneous layouts.
pub const REFERENCE_BPM: f64 = 120.0;
pub const MIN_KERNEL: usize = 3;
/// Logit offset used to drop experts before a softmax.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatScale {
    Quarter,
    Half,
    Whole,
}

impl BeatScale {
    pub const ALL: [BeatScale; 3] = [BeatScale::Quarter, BeatScale::Half, BeatScale::Whole];

    pub fn ratio(self) -> f64 {
        match self {
            BeatScale::Quarter => 0.25,
            BeatScale::Half => 0.5,
            BeatScale::Whole => 1.0,
        }
    }

    pub fn from_ratio(r: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.ratio() == r)
            .ok_or_else(|| Error::Invalid(format!("beat scale {r} is not one of 1/4, 1/2, 1")))
    }
}

/// How `r·F_b` becomes an odd kernel size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRounding {
    /// `F_b` first rounded to whole frames (ties to even), then the smallest
    /// odd integer not below `r·F_b`. Reproduces the published kernel table.
    #[default]
    WholeFrameBeat,
    /// Smallest odd integer not below the exact `r·F_b`.
    CeilOdd,
}

pub fn frames_per_beat(fps: f64, bpm: f64) -> Result<f64> {
    if !(fps > 0.0 && fps.is_finite()) || !(bpm > 0.0 && bpm.is_finite()) {
        return Err(Error::OutOfRange(format!("fps={fps}, bpm={bpm}: both must be positive")));
    }
    Ok(60.0 * fps / bpm)
}

pub fn kernel_size(fps: f64, bpm: f64, scale: BeatScale) -> Result<usize> {
    kernel_size_with(fps, bpm, scale, KernelRounding::WholeFrameBeat)
}

pub fn kernel_size_with(fps: f64, bpm: f64, scale: BeatScale, rounding: KernelRounding) -> Result<usize> {
    let fb = frames_per_beat(fps, bpm)?;
    let fb = match rounding {
        KernelRounding::WholeFrameBeat => libm::rint(fb),
        KernelRounding::CeilOdd => fb,
    };
    let n = libm::ceil(scale.ratio() * fb - 1e-9) as usize;
    let n = if n % 2 == 0 { n + 1 } else { n };
    Ok(n.max(MIN_KERNEL))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub fps: f64,
    pub bpm_anchor: f64,
    pub beat_scale: BeatScale,
    pub kernel_size: usize,
    pub frames_per_beat: f64,
}

impl KernelSpec {
    pub fn new(fps: f64, bpm_anchor: f64, beat_scale: BeatScale, rounding: KernelRounding) -> Result<Self> {
        Ok(Self {
            fps,
            bpm_anchor,
            beat_scale,
            kernel_size: kernel_size_with(fps, bpm_anchor, beat_scale, rounding)?,
            frames_per_beat: frames_per_beat(fps, bpm_anchor)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Homogeneity {
    /// Every group uses its own anchor's kernels.
    #[default]
    Hetero,
    /// Every group copies the reference anchor's three kernels.
    HomoMultiScale,
    /// Every expert uses the reference anchor's half-beat kernel.
    HomoSameScale,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSet {
    #[default]
    Mixed,
    QuarterOnly,
    HalfOnly,
    WholeOnly,
}

impl ScaleSet {
    /// Beat scale assigned to expert slot `e` (0..3).
    pub fn scale_for(self, e: usize) -> BeatScale {
        match self {
            ScaleSet::Mixed => BeatScale::ALL[e],
            ScaleSet::QuarterOnly => BeatScale::Quarter,
            ScaleSet::HalfOnly => BeatScale::Half,
            ScaleSet::WholeOnly => BeatScale::Whole,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub anchors: Vec<f64>,
    pub fps: f64,
    pub homogeneity: Homogeneity,
    pub scales: ScaleSet,
    pub rounding: KernelRounding,
    /// Hidden width of each expert as a multiple of `D`.
    pub expansion: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            anchors: DEFAULT_ANCHORS.to_vec(),
            fps: 30.0,
            homogeneity: Homogeneity::Hetero,
            scales: ScaleSet::Mixed,
            rounding: KernelRounding::WholeFrameBeat,
            expansion: 2,
        }
    }
}

/// `n` anchors spread evenly over `[lo, hi]`.
pub fn uniform_anchors(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Kernel specs per group and expert slot.
pub fn kernel_grid(cfg: &BankConfig) -> Result<Vec<[KernelSpec; 3]>> {
    if cfg.anchors.is_empty() {
        return Err(Error::Invalid("expert bank needs at least one anchor".to_string()));
    }
    cfg.anchors
        .iter()
        .map(|&anchor| {
            let spec = |e: usize| {
                let (bpm, scale) = match cfg.homogeneity {
                    Homogeneity::Hetero => (anchor, cfg.scales.scale_for(e)),
                    Homogeneity::HomoMultiScale => (REFERENCE_BPM, cfg.scales.scale_for(e)),
                    Homogeneity::HomoSameScale => (REFERENCE_BPM, BeatScale::Half),
                };
                let mut s = KernelSpec::new(cfg.fps, bpm, scale, cfg.rounding)?;
                s.bpm_anchor = anchor;
                Ok(s)
            };
            Ok([spec(0)?, spec(1)?, spec(2)?])
        })
        .collect()
}

/// Pointwise expand, depthwise temporal conv, GELU, pointwise project.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expert {
    pub expand: Linear,
    pub conv: usize,
    pub project: Linear,
    pub kernel: usize,
}

impl Expert {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize, k: usize) -> Self {
        let expand = Linear::new(store, rng, &format!("{name}.expand"), d, hidden, Init::Xavier);
        let bound = libm::sqrt(3.0 / k as f64);
        let conv = store.add(format!("{name}.conv"), init_tensor(rng, hidden, k, Init::Uniform(bound)));
        let project = Linear::new(store, rng, &format!("{name}.project"), hidden, d, Init::Xavier);
        Self { expand, conv, project, kernel: k }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, h: Var) -> Var {
        let x = self.expand.forward(tape, h);
        let w = tape.param(self.conv);
        let x = tape.depthwise_conv1d(x, w);
        let x = tape.gelu(x);
        self.project.forward(tape, x)
    }

    pub fn apply<S: Real>(&self, params: &[Tensor<S>], h: &Tensor<S>) -> Tensor<S> {
        let x = self.expand.apply(params, h);
        let x = tensor::depthwise_conv1d(&x, &params[self.conv]).expect("expert conv shapes");
        let x = x.map(tensor::gelu);
        self.project.apply(params, &x)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.project.param_count() + self.expand.out_dim * self.kernel
    }
}

/// Per-expert invocation counters. Cloning snapshots the current values.
#[derive(Debug, Default)]
pub struct CallCounters(Vec<[AtomicUsize; 3]>);

impl CallCounters {
    fn new(groups: usize) -> Self {
        Self((0..groups).map(|_| Default::default()).collect())
    }

    fn bump(&self, g: usize, e: usize) {
        self.0[g][e].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Vec<[usize; 3]> {
        self.0.iter().map(|c| [0, 1, 2].map(|e| c[e].load(Ordering::Relaxed))).collect()
    }

    pub fn reset(&self) {
        self.0.iter().flatten().for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

impl Clone for CallCounters {
    fn clone(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|c| [0, 1, 2].map(|e| AtomicUsize::new(c[e].load(Ordering::Relaxed))))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExpertGroupBank {
    pub config: BankConfig,
    pub specs: Vec<[KernelSpec; 3]>,
    pub experts: Vec<[Expert; 3]>,
    pub calls: CallCounters,
}

impl ExpertGroupBank {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        config: BankConfig,
    ) -> Result<Self> {
        if d < 4 {
            return Err(Error::OutOfRange(format!("latent dim {d} must be at least 4")));
        }
        let specs = kernel_grid(&config)?;
        let hidden = config.expansion.max(1) * d;
        let experts = specs
            .iter()
            .enumerate()
            .map(|(g, s)| {
                [0, 1, 2].map(|e| Expert::new(store, rng, &format!("{name}.g{g}.e{e}"), d, hidden, s[e].kernel_size))
            })
            .collect();
        let calls = CallCounters::new(specs.len());
        Ok(Self { config, specs, experts, calls })
    }

    pub fn groups(&self) -> usize {
        self.experts.len()
    }

    pub fn kernels(&self) -> Vec<[usize; 3]> {
        self.specs.iter().map(|s| s.map(|k| k.kernel_size)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().flatten().map(Expert::param_count).sum()
    }

    /// Parameters outside the depthwise kernels; independent of kernel sizes.
    pub fn pointwise_param_count(&self) -> usize {
        self.experts.iter().flatten().map(|e| e.expand.param_count() + e.project.param_count()).sum()
    }

    pub fn run_expert<S: Real>(&self, tape: &mut Tape<'_, S>, g: usize, e: usize, h: Var) -> Var {
        self.calls.bump(g, e);
        self.experts[g][e].forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    Top1,
    #[default]
    Top2,
    Soft,
    Average,
}

impl RouteMode {
    pub fn top_k(self) -> Option<usize> {
        match self {
            RouteMode::Top1 => Some(1),
            RouteMode::Top2 => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterWeighting {
    Sum,
    #[default]
    RenormSoftmax,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sequence,
    #[default]
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub inter_mode: RouteMode,
    pub intra_mode: RouteMode,
    pub inter_weighting: InterWeighting,
    pub granularity: Granularity,
    /// Weight of the optional load-balancing term; 0 disables it.
    pub load_balance: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            inter_mode: RouteMode::Top2,
            intra_mode: RouteMode::Soft,
            inter_weighting: InterWeighting::RenormSoftmax,
            granularity: Granularity::Frame,
            load_balance: 0.0,
        }
    }
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k_indices(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax_f64(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|&x| libm::exp(x - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Groups that run and the weight each one's output receives.
pub fn select_groups(s: &[f64], cfg: &RoutingConfig) -> Result<(Vec<usize>, Vec<f64>)> {
    let g = s.len();
    match cfg.inter_mode.top_k() {
        Some(k) => {
            if g < k {
                return Err(Error::TooFewGroups { k, g });
            }
            let sel = top_k_indices(s, k);
            let w = match cfg.inter_weighting {
                InterWeighting::Sum => vec![1.0; k],
                InterWeighting::RenormSoftmax => softmax_f64(&sel.iter().map(|&i| s[i]).collect::<Vec<_>>()),
            };
            Ok((sel, w))
        }
        None if g == 0 => Err(Error::TooFewGroups { k: 1, g }),
        None if cfg.inter_mode == RouteMode::Soft => Ok(((0..g).collect(), softmax_f64(s))),
        None => Ok(((0..g).collect(), vec![1.0 / g as f64; g])),
    }
}

/// Applies an intra-group mode to a probability triple.
pub fn apply_intra(gamma: [f64; 3], mode: RouteMode) -> [f64; 3] {
    match mode {
        RouteMode::Soft => gamma,
        RouteMode::Average => [1.0 / 3.0; 3],
        RouteMode::Top1 | RouteMode::Top2 => {
            let keep = top_k_indices(&gamma, mode.top_k().unwrap_or(3));
            let z: f64 = keep.iter().map(|&i| gamma[i]).sum();
            let mut out = [0.0; 3];
            for i in keep {
                out[i] = gamma[i] / z;
            }
            out
        }
    }
}

/// One routing call's outcome, reduced to plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub group_scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub group_weights: Vec<f64>,
    /// One triple per routing position: `L` rows at frame granularity, one otherwise.
    pub gamma: Vec<[f64; 3]>,
    pub granularity: Granularity,
}

/// Receives a decision per TempoMoE call.
pub trait RoutingSink {
    fn record(&mut self, layer: usize, decision: &RoutingDecision);
}

impl RoutingSink for Vec<(usize, RoutingDecision)> {
    fn record(&mut self, layer: usize, decision: &RoutingDecision) {
        self.push((layer, decision.clone()));
    }
}

pub struct MoeOutput {
    pub out: Var,
    /// Present when load balancing is enabled.
    pub aux_loss: Option<Var>,
    pub decision: RoutingDecision,
}

/// Expert bank plus its tempo and beat gates.
#[derive(Debug, Clone)]
pub struct TempoMoe {
    pub bank: ExpertGroupBank,
    pub tempo_gate: Mlp,
    pub beat_gate: Mlp,
    pub routing: RoutingConfig,
    pub dim: usize,
}

impl TempoMoe {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        bank: BankConfig,
        routing: RoutingConfig,
    ) -> Result<Self> {
        let bank = ExpertGroupBank::new(store, rng, &format!("{name}.bank"), d, bank)?;
        let g = bank.groups();
        if let Some(k) = routing.inter_mode.top_k() {
            if g < k {
                return Err(Error::TooFewGroups { k, g });
            }
        }
        let half = (d / 2).max(1);
        let tempo_gate = Mlp::new(store, rng, &format!("{name}.tempo_gate"), [d, half, g], Init::Xavier);
        let beat_gate = Mlp::new(store, rng, &format!("{name}.beat_gate"), [d, half, 3], Init::Zero);
        Ok(Self { bank, tempo_gate, beat_gate, routing, dim: d })
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count() + self.tempo_gate.param_count() + self.beat_gate.param_count()
    }

    /// `[1 × G]` scores from the mean-pooled music embedding.
    pub fn tempo_scores<S: Real>(&self, tape: &mut Tape<'_, S>, c: Var) -> Var {
        let pooled = tape.mean_rows(c);
        self.tempo_gate.forward(tape, pooled)
    }

    /// Raw beat-gate logits: `[L × 3]` per frame or `[1 × 3]` pooled.
    pub fn beat_logits<S: Real>(&self, tape: &mut Tape<'_, S>, c: Var) -> Var {
        let x = match self.routing.granularity {
            Granularity::Frame => c,
            Granularity::Sequence => tape.mean_rows(c),
        };
        self.beat_gate.forward(tape, x)
    }

    /// Beat-scale weights after the intra-group mode.
    pub fn beat_weights<S: Real>(&self, tape: &mut Tape<'_, S>, c: Var) -> Var {
        let logits = self.beat_logits(tape, c);
        match self.routing.intra_mode {
            RouteMode::Soft => tape.softmax(logits),
            RouteMode::Average => {
                let (r, _) = tape.value(logits).dims();
                tape.constant(Tensor::full(&[r, 3], S::of(1.0 / 3.0)))
            }
            mode @ (RouteMode::Top1 | RouteMode::Top2) => {
                let k = mode.top_k().unwrap_or(3);
                let lv = tape.value(logits);
                let (r, _) = lv.dims();
                let mut mask = Tensor::zeros(&[r, 3]);
                for i in 0..r {
                    let row: Vec<f64> = lv.row(i).iter().map(|x| x.f64()).collect();
                    let keep = top_k_indices(&row, k);
                    for e in 0..3 {
                        if !keep.contains(&e) {
                            mask.set(i, e, S::of(MASK_LOGIT));
                        }
                    }
                }
                let m = tape.constant(mask);
                let masked = tape.add(logits, m);
                tape.softmax(masked)
            }
        }
    }

    /// Routes `h` `[L×D]` given music embedding `c` `[L×D]`.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        h: Var,
        c: Var,
        layer: usize,
        sink: Option<&mut dyn RoutingSink>,
    ) -> Result<MoeOutput> {
        let (l, d) = tape.value(h).dims();
        if tape.value(c).dims() != (l, d) || d != self.dim {
            return Err(Error::Shape { expected: vec![l, self.dim], got: tape.value(c).shape().to_vec() });
        }
        if l == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        let scores = self.tempo_scores(tape, c);
        let s: Vec<f64> = tape.value(scores).data().iter().map(|x| x.f64()).collect();
        let (selected, plain_weights) = select_groups(&s, &self.routing)?;

        let weights = match (self.routing.inter_mode, self.routing.inter_weighting) {
            (RouteMode::Top1 | RouteMode::Top2, InterWeighting::Sum) | (RouteMode::Average, _) => None,
            (RouteMode::Top1 | RouteMode::Top2, InterWeighting::RenormSoftmax) => {
                let picked = tape.gather_cols(scores, &selected);
                Some(tape.softmax(picked))
            }
            (RouteMode::Soft, _) => Some(tape.softmax(scores)),
        };
        let gamma = self.beat_weights(tape, c);
        let gamma_cols: [Var; 3] = [0, 1, 2].map(|e| tape.slice_cols(gamma, e, 1));

        let mut out: Option<Var> = None;
        for (i, &g) in selected.iter().enumerate() {
            let mut y: Option<Var> = None;
            for (e, &ge) in gamma_cols.iter().enumerate() {
                let f = self.bank.run_expert(tape, g, e, h);
                let term = tape.mul(f, ge);
                y = Some(match y {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            let mut y = y.expect("three experts per group");
            match weights {
                Some(w) => {
                    let wi = tape.slice_cols(w, i, 1);
                    y = tape.mul(y, wi);
                }
                None if self.routing.inter_mode == RouteMode::Average => {
                    y = tape.scale(y, S::of(plain_weights[i]));
                }
                None => {}
            }
            out = Some(match out {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        let out = out.expect("at least one group selected");

        let aux_loss = (self.routing.load_balance > 0.0).then(|| {
            let g = s.len();
            let probs = tape.softmax(scores);
            let mut frac = Tensor::zeros(&[1, g]);
            for &i in &selected {
                frac.set(0, i, S::of(1.0 / selected.len() as f64));
            }
            let f = tape.constant(frac);
            let prod = tape.mul(probs, f);
            let sum = tape.sum(prod);
            tape.scale(sum, S::of(self.routing.load_balance * g as f64))
        });

        let group_weights = match weights {
            Some(w) => tape.value(w).data().iter().map(|x| x.f64()).collect(),
            None => plain_weights,
        };
        let gv = tape.value(gamma);
        let gamma_rows = (0..gv.rows()).map(|r| [0, 1, 2].map(|e| gv.at(r, e).f64())).collect();
        let decision = RoutingDecision {
            group_scores: s,
            selected,
            group_weights,
            gamma: gamma_rows,
            granularity: self.routing.granularity,
        };
        if let Some(sink) = sink {
            sink.record(layer, &decision);
        }
        Ok(MoeOutput { out, aux_loss, decision })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const TABLE: [(f64, [usize; 3]); 8] = [
        (60.0, [9, 15, 31]),
        (80.0, [7, 11, 23]),
        (100.0, [5, 9, 19]),
        (120.0, [5, 9, 15]),
        (140.0, [5, 7, 13]),
        (160.0, [3, 7, 11]),
        (180.0, [3, 5, 11]),
        (200.0, [3, 5, 9]),
    ];

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Randomises every parameter so gates and experts are non-trivial.
    fn jitter(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-amp..amp);
            }
        }
    }

    fn tiny(d: usize, anchors: Vec<f64>, routing: RoutingConfig, seed: u64) -> (ParamStore<f64>, TempoMoe) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = BankConfig { anchors, ..BankConfig::default() };
        let moe = TempoMoe::new(&mut store, &mut rng, "moe", d, bank, routing).unwrap();
        jitter(&mut store, seed + 1, 0.3);
        (store, moe)
    }

    #[test]
    fn frames_per_beat_examples() {
        assert_eq!(frames_per_beat(30.0, 120.0).unwrap(), 15.0);
        assert_eq!(frames_per_beat(30.0, 60.0).unwrap(), 30.0);
        assert_eq!(frames_per_beat(60.0, 120.0).unwrap(), 30.0);
        assert!(frames_per_beat(0.0, 120.0).is_err());
        assert!(frames_per_beat(30.0, -1.0).is_err());
    }

    #[test]
    fn worked_example_at_120() {
        assert_eq!(kernel_size(30.0, 120.0, BeatScale::Quarter).unwrap(), 5);
        assert_eq!(kernel_size(30.0, 120.0, BeatScale::Half).unwrap(), 9);
        assert_eq!(kernel_size(30.0, 120.0, BeatScale::Whole).unwrap(), 15);
        assert_eq!(kernel_size(30.0, 60.0, BeatScale::Whole).unwrap(), 31);
        assert_eq!(kernel_size(30.0, 200.0, BeatScale::Quarter).unwrap(), 3);
    }

    #[test]
    fn full_kernel_table() {
        for (bpm, ks) in TABLE {
            for (e, s) in BeatScale::ALL.into_iter().enumerate() {
                assert_eq!(kernel_size(30.0, bpm, s).unwrap(), ks[e], "bpm {bpm} scale {s:?}");
            }
        }
        let bank = kernel_grid(&BankConfig::default()).unwrap();
        let got: Vec<[usize; 3]> = bank.iter().map(|g| g.map(|s| s.kernel_size)).collect();
        assert_eq!(got, TABLE.map(|t| t.1).to_vec());
    }

    #[test]
    fn ceil_odd_rounding() {
        // 11.25 -> 13 and 3.21 -> 5, exact 15 stays.
        assert_eq!(kernel_size_with(30.0, 80.0, BeatScale::Half, KernelRounding::CeilOdd).unwrap(), 13);
        assert_eq!(kernel_size_with(30.0, 160.0, BeatScale::Whole, KernelRounding::CeilOdd).unwrap(), 13);
        assert_eq!(kernel_size_with(30.0, 140.0, BeatScale::Quarter, KernelRounding::CeilOdd).unwrap(), 5);
        assert_eq!(kernel_size_with(30.0, 120.0, BeatScale::Whole, KernelRounding::CeilOdd).unwrap(), 15);
    }

    #[test]
    fn scale_ratio_parsing() {
        assert_eq!(BeatScale::from_ratio(0.5).unwrap(), BeatScale::Half);
        assert!(BeatScale::from_ratio(0.3).is_err());
    }

    #[test]
    fn kernels_increase_within_group() {
        for g in kernel_grid(&BankConfig::default()).unwrap() {
            assert!(g[0].kernel_size < g[1].kernel_size && g[1].kernel_size < g[2].kernel_size);
            assert!(g.iter().all(|s| s.kernel_size % 2 == 1));
        }
    }

    #[test]
    fn homogeneous_layouts() {
        let multi = BankConfig { homogeneity: Homogeneity::HomoMultiScale, ..BankConfig::default() };
        for g in kernel_grid(&multi).unwrap() {
            assert_eq!(g.map(|s| s.kernel_size), [5, 9, 15]);
        }
        let same = BankConfig { homogeneity: Homogeneity::HomoSameScale, ..BankConfig::default() };
        for g in kernel_grid(&same).unwrap() {
            assert_eq!(g.map(|s| s.kernel_size), [9, 9, 9]);
        }
        let quarter = BankConfig { scales: ScaleSet::QuarterOnly, ..BankConfig::default() };
        assert_eq!(kernel_grid(&quarter).unwrap()[0].map(|s| s.kernel_size), [9, 9, 9]);
        let empty = BankConfig { anchors: vec![], ..BankConfig::default() };
        assert!(kernel_grid(&empty).is_err());
    }

    #[test]
    fn parameter_counts_by_layout() {
        let d = 16;
        let count = |h: Homogeneity| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cfg = BankConfig { homogeneity: h, ..BankConfig::default() };
            let bank = ExpertGroupBank::new(&mut store, &mut rng, "b", d, cfg).unwrap();
            assert_eq!(bank.param_count(), store.count());
            (bank.pointwise_param_count(), bank.param_count())
        };
        let per_expert_pointwise = (d * 2 * d + 2 * d) + (2 * d * d + d);
        let hetero_k: usize = TABLE.iter().flat_map(|t| t.1).sum();
        let (pw, total) = count(Homogeneity::Hetero);
        assert_eq!(pw, 24 * per_expert_pointwise);
        assert_eq!(total, pw + 2 * d * hetero_k);
        let (pw_m, total_m) = count(Homogeneity::HomoMultiScale);
        assert_eq!(pw_m, pw);
        assert_eq!(total_m, pw + 2 * d * 8 * (5 + 9 + 15));
        let (pw_s, total_s) = count(Homogeneity::HomoSameScale);
        assert_eq!(pw_s, pw);
        assert_eq!(total_s, pw + 2 * d * 24 * 9);
    }

    #[test]
    fn select_top2_and_ties() {
        let cfg = RoutingConfig::default();
        let (sel, w) = select_groups(&[0.1, 0.9, 0.3, 0.2], &cfg).unwrap();
        assert_eq!(sel, vec![1, 2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
        let (sel, w) = select_groups(&[0.5; 8], &cfg).unwrap();
        assert_eq!(sel, vec![0, 1]);
        assert_eq!(w, vec![0.5, 0.5]);
        let sum = RoutingConfig { inter_weighting: InterWeighting::Sum, ..cfg };
        assert_eq!(select_groups(&[0.1, 0.9, 0.3], &sum).unwrap().1, vec![1.0, 1.0]);
        assert_eq!(select_groups(&[1.0], &cfg), Err(Error::TooFewGroups { k: 2, g: 1 }));
    }

    #[test]
    fn select_soft_and_average() {
        let avg = RoutingConfig { inter_mode: RouteMode::Average, ..RoutingConfig::default() };
        let (sel, w) = select_groups(&[0.3, -1.0, 2.0, 0.0, 1.0, 1.0, 5.0, 0.2], &avg).unwrap();
        assert_eq!(sel.len(), 8);
        assert!(w.iter().all(|&x| x == 0.125));
        let soft = RoutingConfig { inter_mode: RouteMode::Soft, ..RoutingConfig::default() };
        let (sel, w) = select_groups(&[0.0, 0.0], &soft).unwrap();
        assert_eq!((sel, w), (vec![0, 1], vec![0.5, 0.5]));
    }

    #[test]
    fn intra_modes_on_probabilities() {
        assert_eq!(apply_intra([0.2, 0.5, 0.3], RouteMode::Top1), [0.0, 1.0, 0.0]);
        let t2 = apply_intra([0.2, 0.5, 0.3], RouteMode::Top2);
        assert!((t2[1] - 0.625).abs() < 1e-12 && (t2[2] - 0.375).abs() < 1e-12 && t2[0] == 0.0);
        assert_eq!(apply_intra([0.2, 0.5, 0.3], RouteMode::Average), [1.0 / 3.0; 3]);
    }

    #[test]
    fn gate_basics() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let moe =
            TempoMoe::new(&mut store, &mut rng, "m", 8, BankConfig::default(), RoutingConfig::default()).unwrap();
        // zeroed final tempo layer gives zero scores on a zero embedding
        let w = moe.tempo_gate.second.weight;
        store.tensors_mut()[w] = Tensor::zeros(store.tensors()[w].shape());
        let params = store.tensors();
        let mut tape = Tape::new(params);
        let c = tape.constant(Tensor::zeros(&[5, 8]));
        let s = moe.tempo_scores(&mut tape, c);
        assert!(tape.value(s).data().iter().all(|&x| x == 0.0));
        // zero-init beat gate is uniform
        let c = tape.constant(random(&mut rng, 5, 8));
        let g = moe.beat_weights(&mut tape, c);
        assert!(tape.value(g).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn tempo_scores_ignore_frame_order() {
        let (store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random(&mut rng, 6, 8);
        let mut rev = c.clone();
        for i in 0..6 {
            rev.row_mut(i).copy_from_slice(c.row(5 - i));
        }
        let mut tape = Tape::new(store.tensors());
        let a = tape.constant(c);
        let b = tape.constant(rev);
        let sa = moe.tempo_scores(&mut tape, a);
        let sb = moe.tempo_scores(&mut tape, b);
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn top2_runs_exactly_two_groups() {
        let (store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new(store.tensors());
        let h = tape.constant(random(&mut rng, 12, 8));
        let c = tape.constant(random(&mut rng, 12, 8));
        moe.bank.calls.reset();
        let out = moe.forward(&mut tape, h, c, 0, None).unwrap();
        let calls = moe.bank.calls.snapshot();
        let active: Vec<usize> = (0..8).filter(|&g| calls[g].iter().any(|&n| n > 0)).collect();
        assert_eq!(active, out.decision.selected);
        assert_eq!(active.len(), 2);
        assert!(calls.iter().flatten().all(|&n| n <= 1));
    }

    fn dense_oracle(store: &ParamStore<f64>, moe: &TempoMoe, h: &Tensor<f64>, dec: &RoutingDecision) -> Tensor<f64> {
        let params = store.tensors();
        let g = moe.bank.groups();
        let mut mask = vec![0.0; g];
        for (i, &s) in dec.selected.iter().enumerate() {
            mask[s] = dec.group_weights[i];
        }
        let (l, d) = h.dims();
        let mut out = Tensor::zeros(&[l, d]);
        for (gi, experts) in moe.bank.experts.iter().enumerate() {
            for (e, ex) in experts.iter().enumerate() {
                let y = ex.apply(params, h);
                for t in 0..l {
                    let gamma = dec.gamma[if dec.gamma.len() == 1 { 0 } else { t }][e];
                    for c in 0..d {
                        let v = out.at(t, c) + mask[gi] * gamma * y.at(t, c);
                        out.set(t, c, v);
                    }
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn sparse_matches_dense_oracle(seed in 0u64..1000, l in 3usize..20, mode in 0usize..4, intra in 0usize..4, frame in any::<bool>()) {
            let modes = [RouteMode::Top1, RouteMode::Top2, RouteMode::Soft, RouteMode::Average];
            let routing = RoutingConfig {
                inter_mode: modes[mode],
                intra_mode: modes[intra],
                granularity: if frame { Granularity::Frame } else { Granularity::Sequence },
                ..RoutingConfig::default()
            };
            let (store, moe) = tiny(8, vec![60.0, 120.0, 200.0, 90.0], routing, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let hv = random(&mut rng, l, 8);
            let mut tape = Tape::new(store.tensors());
            let h = tape.constant(hv.clone());
            let c = tape.constant(random(&mut rng, l, 8));
            let out = moe.forward(&mut tape, h, c, 0, None).unwrap();
            for row in &out.decision.gamma {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(out.decision.gamma.len(), if frame { l } else { 1 });
            let oracle = dense_oracle(&store, &moe, &hv, &out.decision);
            prop_assert!(tape.value(out.out).max_abs_diff(&oracle) < 1e-5);
        }
    }

    #[test]
    fn zero_experts_give_zero_output() {
        let (mut store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 6);
        for ex in moe.bank.experts.iter().flatten() {
            for i in [ex.project.weight, ex.project.bias] {
                let shape = store.tensors()[i].shape().to_vec();
                store.tensors_mut()[i] = Tensor::zeros(&shape);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new(store.tensors());
        let h = tape.constant(random(&mut rng, 7, 8));
        let c = tape.constant(random(&mut rng, 7, 8));
        let out = moe.forward(&mut tape, h, c, 0, None).unwrap();
        assert!(tape.value(out.out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn average_intra_equals_soft_with_uniform_gamma() {
        let avg = RoutingConfig { intra_mode: RouteMode::Average, ..RoutingConfig::default() };
        let (store, moe_avg) = tiny(8, DEFAULT_ANCHORS.to_vec(), avg, 8);
        let mut soft = moe_avg.clone();
        soft.routing.intra_mode = RouteMode::Soft;
        let mut store_soft = store.clone();
        // freeze the beat gate at uniform
        for i in [soft.beat_gate.second.weight, soft.beat_gate.second.bias] {
            let shape = store_soft.tensors()[i].shape().to_vec();
            store_soft.tensors_mut()[i] = Tensor::zeros(&shape);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (hv, cv) = (random(&mut rng, 9, 8), random(&mut rng, 9, 8));
        let run = |store: &ParamStore<f64>, moe: &TempoMoe| {
            let mut tape = Tape::new(store.tensors());
            let h = tape.constant(hv.clone());
            let c = tape.constant(cv.clone());
            let o = moe.forward(&mut tape, h, c, 0, None).unwrap();
            tape.value(o.out).clone()
        };
        assert!(run(&store, &moe_avg).max_abs_diff(&run(&store_soft, &soft)) < 1e-12);
    }

    #[test]
    fn any_length_keeps_shape() {
        let (store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in [16, 64, 256, 1024] {
            let mut tape = Tape::new(store.tensors());
            let h = tape.constant(random(&mut rng, l, 8));
            let c = tape.constant(random(&mut rng, l, 8));
            let out = moe.forward(&mut tape, h, c, 0, None).unwrap();
            assert_eq!(tape.value(out.out).dims(), (l, 8));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 10);
        let mut tape = Tape::new(store.tensors());
        let h = tape.constant(Tensor::zeros(&[5, 8]));
        let c = tape.constant(Tensor::zeros(&[4, 8]));
        assert!(matches!(moe.forward(&mut tape, h, c, 0, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn sink_receives_decisions() {
        let (store, moe) = tiny(8, DEFAULT_ANCHORS.to_vec(), RoutingConfig::default(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(store.tensors());
        let h = tape.constant(random(&mut rng, 6, 8));
        let c = tape.constant(random(&mut rng, 6, 8));
        let mut log: Vec<(usize, RoutingDecision)> = Vec::new();
        moe.forward(&mut tape, h, c, 3, Some(&mut log)).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].0, 3);
        assert_eq!(log[0].1.gamma.len(), 6);
    }

    fn moe_loss_check(routing: RoutingConfig, seed: u64) -> f64 {
        let (mut store, moe) = tiny(4, vec![60.0, 120.0, 200.0], routing, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = store.add("h", random(&mut rng, 5, 4));
        let c = store.add("c", random(&mut rng, 5, 4));
        let target = random(&mut rng, 5, 4);
        let report = gradient_check(store.tensors(), 1e-4, 6, seed, |t| {
            let hv = t.param(h);
            let cv = t.param(c);
            let o = moe.forward(t, hv, cv, 0, None).unwrap();
            let tg = t.constant(target.clone());
            let l = t.mse(o.out, tg);
            match o.aux_loss {
                Some(a) => t.add(l, a),
                None => l,
            }
        })
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for (i, routing) in [
            RoutingConfig::default(),
            RoutingConfig { inter_mode: RouteMode::Soft, ..RoutingConfig::default() },
            RoutingConfig { granularity: Granularity::Sequence, load_balance: 0.1, ..RoutingConfig::default() },
            RoutingConfig { intra_mode: RouteMode::Top2, ..RoutingConfig::default() },
        ]
        .into_iter()
        .enumerate()
        {
            let err = moe_loss_check(routing, 20 + i as u64);
            assert!(err < 1e-3, "{routing:?}: {err}");
        }
    }

    #[test]
    fn renorm_weighting_trains_the_tempo_gate() {
        let (mut store, moe) = tiny(4, vec![60.0, 120.0, 200.0], RoutingConfig::default(), 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = store.add("h", random(&mut rng, 5, 4));
        let c = store.add("c", random(&mut rng, 5, 4));
        let loss = |t: &mut Tape<'_, f64>| {
            let hv = t.param(h);
            let cv = t.param(c);
            let o = moe.forward(t, hv, cv, 0, None).unwrap();
            t.sum_squares(o.out)
        };
        let mut tape = Tape::new(store.tensors());
        let out = loss(&mut tape);
        let grads = tape.backward(out);
        let gw = grads.param(moe.tempo_gate.second.weight).unwrap();
        assert!(gw.data().iter().any(|&x| x.abs() > 1e-8));

        let sum = RoutingConfig { inter_weighting: InterWeighting::Sum, ..RoutingConfig::default() };
        let (store2, moe2) = tiny(4, vec![60.0, 120.0, 200.0], sum, 30);
        let mut tape = Tape::new(store2.tensors());
        let hv = tape.constant(store.tensors()[h].clone());
        let cv = tape.constant(store.tensors()[c].clone());
        let o = moe2.forward(&mut tape, hv, cv, 0, None).unwrap();
        let l = tape.sum_squares(o.out);
        let g = tape.backward(l);
        assert!(g.param(moe2.tempo_gate.second.weight).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    }
}
