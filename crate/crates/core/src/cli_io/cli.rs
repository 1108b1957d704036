//! Command-line interface. Every command is deterministic for fixed seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapter::tokenize;
use crate::client_tuning::{tune_concept, TuningConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    capture_activations, default_capture_prompts, gradient_fuse_model, weight_fuse_model, CaptureConfig,
    FusionMethod, FusionReport, GradientFusionConfig, SolverKind,
};
use crate::region_sampler::{sample_with_regions, RegionMask};
use crate::toy_diffusion::pretrain::{demo_concepts, demo_eval_prompts, pretrain, PretrainConfig};
use crate::toy_diffusion::ModelConfig;

use super::{
    eval_identity, format_mask, load_adapter_for, load_dataset, load_model, parse_prompt_file, parse_region_arg,
    parse_seeds, save_adapter, save_dataset, save_model, write_atomic, write_grid, DEFAULT_EVAL_STEPS,
};

#[derive(Debug, Parser)]
#[command(name = "lora-fusion", version, about = "Tune, fuse and sample low-rank concept adapters on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a base model on the built-in synthetic shape world.
    Pretrain(PretrainArgs),
    /// Tune one concept adapter on a dataset directory.
    Tune(TuneArgs),
    /// Fuse several adapters into one model.
    Fuse(FuseArgs),
    /// Sample a latent grid, optionally with regional prompts.
    Sample(SampleArgs),
    /// Compare a fused model against each concept's single-adapter model.
    Eval(EvalArgs),
    /// Write the two-concept demo fixture: datasets, prompts and masks.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = PretrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().jitter)]
    pub jitter: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TuningConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TuningConfig::default().rank)]
    pub rank: usize,
    #[arg(long, default_value_t = TuningConfig::default().lr_embedding)]
    pub lr_embedding: f64,
    #[arg(long, default_value_t = TuningConfig::default().lr_encoder_lora)]
    pub lr_encoder: f64,
    #[arg(long, default_value_t = TuningConfig::default().lr_denoiser_lora)]
    pub lr_denoiser: f64,
    #[arg(long, default_value_t = TuningConfig::default().noise_offset)]
    pub noise_offset: f64,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub adapters: Vec<PathBuf>,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Weight-fusion weights; equal weights when omitted.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Samples per capture prompt.
    #[arg(long, default_value_t = CaptureConfig::default().samples_per_prompt)]
    pub samples: usize,
    #[arg(long, default_value_t = CaptureConfig::default().steps)]
    pub capture_steps: usize,
    #[arg(long, default_value_t = CaptureConfig::default().stride)]
    pub stride: usize,
    #[arg(long, default_value = "closed")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// `MASKFILE:PROMPT`; may be repeated.
    #[arg(long = "region")]
    pub regions: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub adapters: Vec<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value = "1..50")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_STEPS)]
    pub steps: usize,
    /// Method tag for the report; read from the fused model's report file
    /// when omitted.
    #[arg(long)]
    pub method: Option<String>,
}

/// Path of the fusion report written next to a fused model.
pub fn report_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = PretrainConfig {
                steps: a.steps,
                batch: a.batch,
                lr: a.lr,
                jitter: a.jitter,
                seed: a.seed,
            };
            let (model, _) = pretrain(ModelConfig::default(), &cfg)?;
            save_model(&model, &a.out)
        }
        Command::Tune(a) => {
            let base = load_model(&a.base)?;
            let data = load_dataset(&a.dataset)?;
            let cfg = TuningConfig {
                steps: a.steps,
                lr_embedding: a.lr_embedding,
                lr_encoder_lora: a.lr_encoder,
                lr_denoiser_lora: a.lr_denoiser,
                noise_offset: a.noise_offset,
                rank: a.rank,
                rng_seed: a.seed,
                ..TuningConfig::default()
            };
            let adapter = tune_concept(&base, &data, &cfg)?;
            save_adapter(&adapter, &a.out)
        }
        Command::Fuse(a) => {
            let base = load_model(&a.base)?;
            let adapters = a
                .adapters
                .iter()
                .map(|p| load_adapter_for(p, &base))
                .collect::<Result<Vec<_>>>()?;
            let (fused, report) = match a.method.parse::<FusionMethod>()? {
                FusionMethod::Weight => weight_fuse_model(&base, &adapters, a.weights.as_deref())?,
                FusionMethod::Gradient => {
                    if a.weights.is_some() {
                        return Err(Error::InvalidConfig("--weights only applies to weight fusion".into()));
                    }
                    let capture = CaptureConfig {
                        samples_per_prompt: a.samples,
                        steps: a.capture_steps,
                        stride: a.stride,
                        rng_seed: a.seed,
                    };
                    let schedule = base.schedule()?;
                    let batches = adapters
                        .iter()
                        .map(|ad| {
                            let prompts = default_capture_prompts(ad, &base.table);
                            capture_activations(&base, ad, &prompts, &schedule, &capture)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let cfg = GradientFusionConfig {
                        mode: a.mode.parse::<SolverKind>()?,
                        ..GradientFusionConfig::default()
                    };
                    gradient_fuse_model(&base, &adapters, &batches, &cfg)?
                }
            };
            save_model(&fused, &a.out)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            write_atomic(&report_path(&a.out), json.as_bytes())
        }
        Command::Sample(a) => {
            let model = load_model(&a.model)?;
            let regions = a.regions.iter().map(|r| parse_region_arg(r)).collect::<Result<Vec<_>>>()?;
            let prompt = tokenize(&a.prompt);
            if prompt.is_empty() {
                return Err(Error::InvalidConfig("empty prompt".into()));
            }
            let schedule = model.schedule()?;
            let z = sample_with_regions(&model, &prompt, &regions, &schedule, a.steps, a.seed)?;
            write_grid(&z, &a.out)
        }
        Command::Eval(a) => {
            let base = load_model(&a.base)?;
            let fused = load_model(&a.fused)?;
            let adapters = a
                .adapters
                .iter()
                .map(|p| load_adapter_for(p, &base))
                .collect::<Result<Vec<_>>>()?;
            let mut prompts: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
            for (concept, p) in parse_prompt_file(&std::fs::read_to_string(&a.prompts)?, &a.prompts)? {
                prompts.entry(concept).or_default().push(p);
            }
            let seeds = parse_seeds(&a.seeds)?;
            let method = match a.method {
                Some(m) => m,
                None => match std::fs::read_to_string(report_path(&a.fused)) {
                    Ok(text) => {
                        let r: FusionReport = serde_json::from_str(&text)
                            .map_err(|e| Error::Format(format!("fusion report: {e}")))?;
                        r.method.to_string()
                    }
                    Err(_) => "unknown".to_string(),
                },
            };
            let report = eval_identity(&base, &fused, &adapters, &prompts, &seeds, &method, a.steps)?;
            report.write_csv(&a.out)
        }
        Command::Demo(a) => {
            let cfg = ModelConfig::default();
            std::fs::create_dir_all(&a.out)?;
            let mut prompts = String::new();
            for data in demo_concepts(&cfg)? {
                save_dataset(&data, &a.out.join(&data.concept_name))?;
                for p in demo_eval_prompts(&data.concept_name) {
                    prompts.push_str(&format!("{}: {}\n", data.concept_name, p.join(" ")));
                }
            }
            write_atomic(&a.out.join("prompts.txt"), prompts.as_bytes())?;
            let (h, w) = (cfg.latent_h, cfg.latent_w);
            let left = RegionMask::rect(h, w, 0..h, 0..w / 2)?;
            let right = RegionMask::rect(h, w, 0..h, w / 2..w)?;
            write_atomic(&a.out.join("left.mask"), format_mask(&left).as_bytes())?;
            write_atomic(&a.out.join("right.mask"), format_mask(&right).as_bytes())
        }
    }
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::TuningDiverged { .. } => 2,
        _ => 1,
    }
}
