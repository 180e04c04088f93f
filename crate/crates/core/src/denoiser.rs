//! Transformer denoiser predicting the clean motion `x̂_0`.
//!
//! Each block runs self-attention, music cross-attention and a TempoMoE layer
//! (or a plain FFN), every sublayer wrapped in AdaLN-Zero modulation driven by
//! the timestep embedding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::motion_dim;
use crate::music::MUSIC_DIM;
use crate::nn::{init_tensor, Init, Linear, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::tempomoe::{BankConfig, RoutingConfig, RoutingSink, TempoMoe};
use crate::tensor::{sinusoidal, sinusoidal_positions, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub routing: RoutingConfig,
    pub bank: BankConfig,
    pub motion_dim: usize,
    pub music_dim: usize,
    /// Replace every TempoMoE with a two-layer FFN.
    pub ffn_baseline: bool,
    /// FFN hidden width as a multiple of `latent_dim`.
    pub ffn_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            latent_dim: 512,
            heads: 8,
            routing: RoutingConfig::default(),
            bank: BankConfig::default(),
            motion_dim: motion_dim(24),
            music_dim: MUSIC_DIM,
            ffn_baseline: false,
            ffn_mult: 2,
        }
    }
}

impl DenoiserConfig {
    /// A small configuration for tests and desk-scale runs.
    pub fn tiny(blocks: usize, latent_dim: usize, joints: usize) -> Self {
        Self { blocks, latent_dim, heads: 2, motion_dim: motion_dim(joints), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Heads { dim: self.latent_dim, heads: self.heads });
        }
        if self.blocks == 0 || self.motion_dim == 0 || self.music_dim == 0 {
            return Err(Error::Invalid(String::from("blocks, motion_dim and music_dim must be positive")));
        }
        if self.latent_dim < 4 {
            return Err(Error::OutOfRange(format!("latent dim {} must be at least 4", self.latent_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionLayer {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let mut lin = |p: &str| Linear::new(store, rng, &format!("{name}.{p}"), d, d, Init::Xavier);
        Self { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o") }
    }

    fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var, mem: Var, heads: usize) -> Var {
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, mem);
        let v = self.v.forward(tape, mem);
        let a = tape.attention(q, k, v, heads);
        self.o.forward(tape, a)
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Moe(TempoMoe),
    Ffn(Mlp),
}

#[derive(Debug, Clone)]
pub struct Block {
    /// Projects the timestep embedding to shift/scale/gate for the three sublayers.
    pub ada: Linear,
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
    pub ff: FeedForward,
}

/// Modulation triple for one sublayer.
struct Modulation {
    shift: Var,
    scale: Var,
    gate: Var,
}

fn modulated<S: Real>(tape: &mut Tape<'_, S>, h: Var, m: &Modulation) -> Var {
    let n = tape.layer_norm(h);
    let one_plus = tape.add_scalar(m.scale, S::one());
    let x = tape.mul(n, one_plus);
    tape.add(x, m.shift)
}

fn gated_residual<S: Real>(tape: &mut Tape<'_, S>, h: Var, sub: Var, gate: Var) -> Var {
    let g = tape.mul(sub, gate);
    tape.add(h, g)
}

impl Block {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, cfg: &DenoiserConfig) -> Result<Self> {
        let d = cfg.latent_dim;
        let ada = Linear::new(store, rng, &format!("{name}.ada"), d, 9 * d, Init::Zero);
        let self_attn = AttentionLayer::new(store, rng, &format!("{name}.self_attn"), d);
        let cross_attn = AttentionLayer::new(store, rng, &format!("{name}.cross_attn"), d);
        let ff = if cfg.ffn_baseline {
            FeedForward::Ffn(Mlp::new(store, rng, &format!("{name}.ffn"), [d, cfg.ffn_mult * d, d], Init::Xavier))
        } else {
            FeedForward::Moe(TempoMoe::new(store, rng, &format!("{name}.moe"), d, cfg.bank.clone(), cfg.routing)?)
        };
        Ok(Self { ada, self_attn, cross_attn, ff })
    }

    /// One block. `te` is the `[1×D]` activated timestep embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        h: Var,
        te: Var,
        c: Var,
        heads: usize,
        layer: usize,
        sink: Option<&mut dyn RoutingSink>,
    ) -> Result<(Var, Option<Var>)> {
        let d = tape.value(h).cols();
        let mods = self.ada.forward(tape, te);
        let part = |tape: &mut Tape<'_, S>, i: usize| tape.slice_cols(mods, i * d, d);
        let mut m = Vec::with_capacity(3);
        for s in 0..3 {
            m.push(Modulation { shift: part(tape, 3 * s), scale: part(tape, 3 * s + 1), gate: part(tape, 3 * s + 2) });
        }

        let x = modulated(tape, h, &m[0]);
        let a = self.self_attn.forward(tape, x, x, heads);
        let h = gated_residual(tape, h, a, m[0].gate);

        let x = modulated(tape, h, &m[1]);
        let a = self.cross_attn.forward(tape, x, c, heads);
        let h = gated_residual(tape, h, a, m[1].gate);

        let x = modulated(tape, h, &m[2]);
        let (f, aux) = match &self.ff {
            FeedForward::Moe(moe) => {
                let o = moe.forward(tape, x, c, layer, sink)?;
                (o.out, o.aux_loss)
            }
            FeedForward::Ffn(mlp) => (mlp.forward(tape, x), None),
        };
        Ok((gated_residual(tape, h, f, m[2].gate), aux))
    }
}

pub struct DenoiseOutput {
    pub x0: Var,
    /// Summed load-balancing terms, when enabled.
    pub aux_loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub input: Linear,
    pub music: Linear,
    pub null_token: usize,
    pub time: [Linear; 2],
    pub blocks: Vec<Block>,
    pub output: Linear,
}

impl Denoiser {
    /// Builds the model and its freshly initialised parameters.
    pub fn init<S: Real>(config: DenoiserConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_dim;
        let input = Linear::new(&mut store, &mut rng, "input", config.motion_dim, d, Init::Xavier);
        let music = Linear::new(&mut store, &mut rng, "music", config.music_dim, d, Init::Xavier);
        let null_token = store.add("null_token", init_tensor(&mut rng, 1, d, Init::Uniform(0.02)));
        let time = [
            Linear::new(&mut store, &mut rng, "time.0", d, d, Init::Xavier),
            Linear::new(&mut store, &mut rng, "time.1", d, d, Init::Xavier),
        ];
        let blocks = (0..config.blocks)
            .map(|i| Block::new(&mut store, &mut rng, &format!("blocks.{i}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(&mut store, &mut rng, "output", d, config.motion_dim, Init::Zero);
        Ok((Self { config, input, music, null_token, time, blocks, output }, store))
    }

    /// `[1×D]` timestep embedding before the per-block SiLU.
    pub fn timestep_embedding<S: Real>(&self, tape: &mut Tape<'_, S>, t: f64) -> Var {
        let d = self.config.latent_dim;
        let s = tape.constant(Tensor::from_parts(vec![1, d], sinusoidal(t, d)));
        let h = self.time[0].forward(tape, s);
        let h = tape.silu(h);
        self.time[1].forward(tape, h)
    }

    /// `[L×D]` conditioning stream: projected music plus positions, or the
    /// broadcast null token when `music` is `None`.
    pub fn music_embedding<S: Real>(&self, tape: &mut Tape<'_, S>, music: Option<Var>, len: usize) -> Result<Var> {
        let d = self.config.latent_dim;
        match music {
            Some(m) => {
                let (l, c) = tape.value(m).dims();
                if l != len || c != self.config.music_dim {
                    return Err(Error::Shape { expected: vec![len, self.config.music_dim], got: vec![l, c] });
                }
                let e = self.music.forward(tape, m);
                let p = tape.constant(sinusoidal_positions(len, d));
                Ok(tape.add(e, p))
            }
            None => {
                let n = tape.param(self.null_token);
                Ok(tape.broadcast_rows(n, len))
            }
        }
    }

    /// Predicts `x̂_0` from `x_t` `[L×d]` at timestep `t`.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        x_t: Var,
        t: f64,
        music: Option<Var>,
        mut sink: Option<&mut dyn RoutingSink>,
    ) -> Result<DenoiseOutput> {
        let (l, dm) = tape.value(x_t).dims();
        if dm != self.config.motion_dim {
            return Err(Error::Shape { expected: vec![l, self.config.motion_dim], got: vec![l, dm] });
        }
        if l == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        let d = self.config.latent_dim;
        let c = self.music_embedding(tape, music, l)?;
        let te = self.timestep_embedding(tape, t);
        let te = tape.silu(te);
        let h = self.input.forward(tape, x_t);
        let p = tape.constant(sinusoidal_positions(l, d));
        let mut h = tape.add(h, p);
        let mut aux: Option<Var> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (nh, a) = block.forward(tape, h, te, c, self.config.heads, i, sink.as_mut().map(|s| &mut **s as &mut dyn RoutingSink))?;
            h = nh;
            if let Some(a) = a {
                aux = Some(match aux {
                    Some(acc) => tape.add(acc, a),
                    None => a,
                });
            }
        }
        let h = tape.layer_norm(h);
        Ok(DenoiseOutput { x0: self.output.forward(tape, h), aux_loss: aux })
    }

    /// Convenience pass on plain tensors; no gradients are kept.
    pub fn predict<S: Real>(
        &self,
        params: &[Tensor<S>],
        x_t: &Tensor<S>,
        t: f64,
        music: Option<&Tensor<S>>,
        sink: Option<&mut dyn RoutingSink>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new(params);
        let x = tape.constant(x_t.clone());
        let m = music.map(|m| tape.constant(m.clone()));
        let out = self.forward(&mut tape, x, t, m, sink)?;
        Ok(tape.value(out.x0).clone())
    }

    /// Parameter totals grouped by top-level component.
    pub fn param_report<S: Real>(&self, store: &ParamStore<S>) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in store.names().iter().zip(store.tensors()) {
            let key = component_key(name);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.len(),
                None => out.push((key, t.len())),
            }
        }
        out
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &TempoMoe> {
        self.blocks.iter().filter_map(|b| match &b.ff {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Ffn(_) => None,
        })
    }
}

/// `blocks.3.moe.bank.g1.e0.conv` → `moe`; `input.weight` → `input`.
fn component_key(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or("");
    if first == "blocks" {
        parts.nth(1).unwrap_or("").into()
    } else {
        first.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn jitter(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-amp..amp);
            }
        }
    }

    fn small() -> DenoiserConfig {
        let mut cfg = DenoiserConfig::tiny(2, 8, 3);
        cfg.bank.anchors = vec![60.0, 120.0, 200.0];
        cfg
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = DenoiserConfig { heads: 3, ..small() };
        assert!(matches!(Denoiser::init::<f64>(cfg, 0), Err(Error::Heads { .. })));
    }

    #[test]
    fn init_output_is_output_bias() {
        let (model, mut store) = Denoiser::init::<f64>(small(), 1).unwrap();
        let b = model.output.bias;
        store.tensors_mut()[b] = Tensor::matrix(1, 25, (0..25).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let x = random(&mut rng, 6, 25);
            let m = random(&mut rng, 6, 35);
            let y = model.predict(store.tensors(), &x, rng.random_range(0.0..1000.0), Some(&m), None).unwrap();
            for r in 0..6 {
                assert_eq!(y.row(r), store.tensors()[b].data());
            }
        }
    }

    #[test]
    fn fresh_block_is_identity() {
        let (model, store) = Denoiser::init::<f64>(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hv = random(&mut rng, 5, 8);
        let mut tape = Tape::new(store.tensors());
        let h = tape.constant(hv.clone());
        let c = tape.constant(random(&mut rng, 5, 8));
        let te = tape.constant(random(&mut rng, 1, 8));
        let (out, _) = model.blocks[0].forward(&mut tape, h, te, c, 2, 0, None).unwrap();
        assert_eq!(tape.value(out), &hv);
    }

    #[test]
    fn unit_gates_give_prenorm_residual() {
        let (model, mut store) = Denoiser::init::<f64>(small(), 5).unwrap();
        let block = &model.blocks[0];
        let d = 8;
        let mut bias = Tensor::zeros(&[1, 9 * d]);
        for s in 0..3 {
            for j in 0..d {
                bias.set(0, (3 * s + 2) * d + j, 1.0);
            }
        }
        store.tensors_mut()[block.ada.bias] = bias;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (hv, cv) = (random(&mut rng, 5, d), random(&mut rng, 5, d));
        let params = store.tensors();
        let mut tape = Tape::new(params);
        let h = tape.constant(hv.clone());
        let c = tape.constant(cv.clone());
        let te = tape.constant(random(&mut rng, 1, d));
        let (out, _) = block.forward(&mut tape, h, te, c, 2, 0, None).unwrap();

        let mut t2 = Tape::new(params);
        let h = t2.constant(hv);
        let c = t2.constant(cv);
        let n = t2.layer_norm(h);
        let a = block.self_attn.forward(&mut t2, n, n, 2);
        let h = t2.add(h, a);
        let n = t2.layer_norm(h);
        let a = block.cross_attn.forward(&mut t2, n, c, 2);
        let h = t2.add(h, a);
        let n = t2.layer_norm(h);
        let FeedForward::Moe(moe) = &block.ff else { unreachable!() };
        let f = moe.forward(&mut t2, n, c, 0, None).unwrap().out;
        let h = t2.add(h, f);
        assert!(tape.value(out).max_abs_diff(t2.value(h)) < 1e-12);
    }

    #[test]
    fn shapes_for_any_length() {
        let (model, store) = Denoiser::init::<f32>(small(), 7).unwrap();
        for l in [16, 64, 1024] {
            let x = Tensor::zeros(&[l, 25]);
            let m = Tensor::zeros(&[l, 35]);
            assert_eq!(model.predict(store.tensors(), &x, 10.0, Some(&m), None).unwrap().dims(), (l, 25));
            assert_eq!(model.predict(store.tensors(), &x, 10.0, None, None).unwrap().dims(), (l, 25));
        }
        let bad = model.predict(store.tensors(), &Tensor::zeros(&[8, 25]), 1.0, Some(&Tensor::zeros(&[7, 35])), None);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn ffn_baseline_same_interface() {
        let cfg = DenoiserConfig { ffn_baseline: true, ..small() };
        let (model, store) = Denoiser::init::<f32>(cfg, 8).unwrap();
        assert_eq!(model.moe_layers().count(), 0);
        let y = model.predict(store.tensors(), &Tensor::zeros(&[9, 25]), 3.0, None, None).unwrap();
        assert_eq!(y.dims(), (9, 25));
    }

    #[test]
    fn null_token_changes_output() {
        let (model, mut store) = Denoiser::init::<f64>(small(), 9).unwrap();
        jitter(&mut store, 10, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 25);
        let m = random(&mut rng, 6, 35);
        let a = model.predict(store.tensors(), &x, 100.0, Some(&m), None).unwrap();
        let b = model.predict(store.tensors(), &x, 100.0, None, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn param_report_covers_store() {
        let (model, store) = Denoiser::init::<f32>(small(), 12).unwrap();
        let report = model.param_report(&store);
        assert_eq!(report.iter().map(|r| r.1).sum::<usize>(), store.count());
        assert!(report.iter().any(|(k, _)| k == "moe"));
        let moe: usize = model.moe_layers().map(TempoMoe::param_count).sum();
        assert_eq!(report.iter().find(|(k, _)| k == "moe").unwrap().1, moe);
    }

    #[test]
    fn routing_sink_sees_every_layer() {
        let (model, store) = Denoiser::init::<f32>(small(), 13).unwrap();
        let mut log: Vec<(usize, crate::tempomoe::RoutingDecision)> = Vec::new();
        model.predict(store.tensors(), &Tensor::zeros(&[10, 25]), 3.0, Some(&Tensor::zeros(&[10, 35])), Some(&mut log)).unwrap();
        assert_eq!(log.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn block_gradient_check() {
        let (model, mut store) = Denoiser::init::<f64>(small(), 14).unwrap();
        jitter(&mut store, 15, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = store.add("h", random(&mut rng, 5, 8));
        let c = store.add("c", random(&mut rng, 5, 8));
        let te = store.add("te", random(&mut rng, 1, 8));
        let target = random(&mut rng, 5, 8);
        let block = &model.blocks[0];
        let r = gradient_check(store.tensors(), 1e-4, 4, 17, |t| {
            let (hv, cv, tv) = (t.param(h), t.param(c), t.param(te));
            let (o, _) = block.forward(t, hv, tv, cv, 2, 0, None).unwrap();
            let tg = t.constant(target.clone());
            t.mse(o, tg)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn full_model_gradient_check() {
        let (model, mut store) = Denoiser::init::<f64>(small(), 18).unwrap();
        jitter(&mut store, 19, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random(&mut rng, 8, 25);
        let m = random(&mut rng, 8, 35);
        let target = random(&mut rng, 8, 25);
        let r = gradient_check(store.tensors(), 1e-4, 3, 21, |t| {
            let xv = t.constant(x.clone());
            let mv = t.constant(m.clone());
            let o = model.forward(t, xv, 250.0, Some(mv), None).unwrap();
            let tg = t.constant(target.clone());
            t.mse(o.x0, tg)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
