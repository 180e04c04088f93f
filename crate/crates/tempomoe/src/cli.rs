//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tempomoe_core::diffusion::{SamplerConfig, Solver};
use tempomoe_core::tempomoe::DEFAULT_ANCHORS;
use tempomoe_core::train::TrainConfig;

use crate::ablate::{desk_config, desk_pairs, run_variant, variants};
use crate::checkpoint::Checkpoint;
use crate::container::{load_music, save_motion};
use crate::dataset::{make_data, read_json, skeleton_by_name, write_json, Dataset, Split, SynthSpec};
use crate::error::{AppError, AppResult, EXIT_VALIDATION};
use crate::evaluate::evaluate;
use crate::generate::generate;
use crate::routing::{analyze, write_csv};
use crate::trainer::{Control, Corpus, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tempomoe", version, about = "Tempo-structured MoE diffusion for music-to-dance generation")]
pub struct Cli {
    /// Training configuration (JSON); missing keys take defaults.
    #[arg(long, global = true, value_name = "FILE.json")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic click-track corpus and its manifest.
    MakeData(MakeDataArgs),
    /// Train a denoiser on a manifest's training split.
    Train(TrainArgs),
    /// Generate one motion for a music file.
    Sample(SampleArgs),
    /// Sample every clip of a split and write metrics.
    Eval(EvalArgs),
    /// Export routing decisions and their summary.
    AnalyzeRouting(RoutingArgs),
    /// Run one training step per ablation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ANCHORS.to_vec())]
    pub bpms: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub per_bpm: usize,
    #[arg(long, default_value_t = 512)]
    pub frames: usize,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// `smpl24`, `toy3` or a skeleton JSON path.
    #[arg(long, default_value = "smpl24")]
    pub skeleton: String,
    #[arg(long, default_value_t = 1)]
    pub val_per_bpm: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Caps the number of optimiser steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SolverArg {
    #[value(name = "dpmpp_2m")]
    DpmPp2M,
    Ancestral,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::DpmPp2M => Solver::DpmPp2M,
            SolverArg::Ancestral => Solver::Ancestral,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.5)]
    pub guidance: f64,
    #[arg(long, value_enum, default_value = "dpmpp_2m")]
    pub solver: SolverArg,
}

impl SamplerArgs {
    fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { solver: self.solver.into(), steps: self.steps, guidance: self.guidance, seed, ..SamplerConfig::default() }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub music: PathBuf,
    /// Frames to generate; defaults to the music length.
    #[arg(long)]
    pub frames: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct RoutingArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training data; a small built-in synthetic set is used when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Restrict to one axis.
    #[arg(long)]
    pub axis: Option<String>,
}

fn load_config(path: Option<&Path>) -> AppResult<Option<TrainConfig>> {
    path.map(read_json).transpose()
}

fn mkdir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

pub fn execute(cli: Cli) -> AppResult<()> {
    let config = load_config(cli.config.as_deref())?;
    let out = cli.out.clone();
    match cli.command {
        Command::MakeData(a) => {
            let skel = skeleton_by_name(&a.skeleton)?;
            let spec = SynthSpec {
                bpms: a.bpms,
                per_bpm: a.per_bpm,
                frames: a.frames,
                fps: a.fps,
                val_per_bpm: a.val_per_bpm.min(a.per_bpm.saturating_sub(1)),
                seed: cli.seed.unwrap_or(0),
            };
            let path = make_data(&out, &spec, &skel)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let mut cfg = config.unwrap_or_default();
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.max_steps = Some(n);
            }
            cfg.validate()?;
            let ds = Dataset::open(&a.manifest)?;
            let corpus = Corpus::from_dataset(&ds, &cfg)?;
            let mut trainer = Trainer::new(cfg, corpus, Some(out.clone()))?;
            let ck = trainer.run(|_, _| Control::Continue)?;
            println!("trained {} steps; checkpoint {}", ck.step, crate::trainer::final_checkpoint(&out).display());
        }
        Command::Sample(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let model = ck.model()?;
            let music = load_music(&a.music)?;
            let frames = a.frames.unwrap_or(music.len());
            let seed = cli.seed.unwrap_or(ck.config.seed);
            let motion = generate(&ck, &model, &music, frames, &a.sampler.config(seed))?;
            mkdir(&out)?;
            let path = out.join("sample.tmoe");
            save_motion(&path, &motion, None)?;
            println!("wrote {} ({} frames)", path.display(), motion.len());
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let model = ck.model()?;
            let ds = Dataset::open(&a.manifest)?;
            let mut pairs = ds.pairs(a.split.split())?;
            if pairs.len() < 2 {
                pairs = ds.pairs(None)?;
            }
            let report = evaluate(&ck, &model, &pairs, &a.sampler.config(cli.seed.unwrap_or(ck.config.seed)))?;
            mkdir(&out)?;
            let path = out.join("eval.json");
            write_json(&path, &report)?;
            println!("wrote {}: bas_mean {:.4} fid_k {:.4} fid_g {:.4}", path.display(), report.bas_mean, report.fid_k, report.fid_g);
        }
        Command::AnalyzeRouting(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let model = ck.model()?;
            let ds = Dataset::open(&a.manifest)?;
            let pairs = ds.pairs(a.split.split())?;
            let analysis = analyze(&ck, &model, &pairs, cli.seed.unwrap_or(ck.config.seed))?;
            mkdir(&out)?;
            write_csv(&out.join("routing.csv"), &analysis.records)?;
            write_json(&out.join("routing_summary.json"), &analysis.summary)?;
            println!("wrote {} routing records", analysis.records.len());
        }
        Command::Ablate(a) => {
            let (pairs, skel) = match &a.manifest {
                Some(m) => {
                    let ds = Dataset::open(m)?;
                    (ds.pairs(Some(Split::Train))?, ds.skeleton)
                }
                None => desk_pairs(cli.seed.unwrap_or(0))?,
            };
            let mut base = config.unwrap_or_else(|| desk_config(skel.joints));
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            let vars = variants(&base, a.axis.as_deref())?;
            let results: Vec<_> = vars.iter().map(|v| run_variant(&base, v, &pairs, &skel)).collect();
            for r in &results {
                match (&r.loss, &r.error) {
                    (Some(l), _) => println!("{:<28} ok    params {:>8}  loss {l:.5}", r.name, r.params),
                    (_, Some(e)) => println!("{:<28} FAIL  {e}", r.name),
                    _ => {}
                }
            }
            mkdir(&out)?;
            write_json(&out.join("ablation.json"), &results)?;
            let failed = results.iter().filter(|r| !r.ok).count();
            if failed > 0 {
                return Err(AppError::runtime(format!("{failed} of {} ablation configs failed", results.len())));
            }
            println!("{} configs ran", results.len());
        }
    }
    Ok(())
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
