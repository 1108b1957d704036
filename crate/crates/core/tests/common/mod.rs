//! Shared fixtures for the integration tests. The pretrained base and the
//! two demo adapters are built once per test binary.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use lora_fusion::adapter::ConceptAdapter;
use lora_fusion::client_tuning::{tune_concept, ConceptDataset, TuningConfig};
use lora_fusion::toy_diffusion::pretrain::{demo_concepts, pretrain, PretrainConfig};
use lora_fusion::toy_diffusion::{ModelConfig, ModelWeights};

pub struct World {
    pub base: ModelWeights,
    pub datasets: Vec<ConceptDataset>,
    pub adapters: Vec<ConceptAdapter>,
}

/// Default pretraining, then the demo concepts tuned for 2000 steps with
/// seeds 1 and 2.
pub fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let (base, _) = pretrain(ModelConfig::default(), &PretrainConfig::default()).expect("pretraining");
        let datasets = demo_concepts(&base.config).expect("demo fixture");
        let adapters = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let cfg = TuningConfig {
                    rng_seed: i as u64 + 1,
                    ..TuningConfig::default()
                };
                tune_concept(&base, d, &cfg).expect("tuning")
            })
            .collect();
        World {
            base,
            datasets,
            adapters,
        }
    })
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lora-fusion"))
}

/// Runs the binary in `dir` with `args`.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn binary")
}

/// Runs the binary and panics with its stderr unless it succeeds.
pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
