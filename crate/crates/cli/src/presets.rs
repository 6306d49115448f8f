//! Named experiment presets. Every preset resolves to a complete
//! ExperimentConfig with no hidden defaults; the resolved JSON is echoed
//! into each run directory.

use serde::{Deserialize, Serialize};
use stitchkit_model::{ModelConfig, StitchInit, StitchPattern};
use stitchkit_train::corpus::{DataSeeds, GenParams};
use stitchkit_train::eval::EvalConfig;
use stitchkit_train::schedule::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub gen: GenParams,
    pub mixed_n_train: usize,
    pub seeds: DataSeeds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub train: TrainConfig,
    /// (domain, weight) pairs.
    pub mixture: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSpec {
    pub k: usize,
    pub pattern: StitchPattern,
    pub init: StitchInit,
    pub dropout_rate: f64,
    /// "seed" or "expert-<domain>"; which member takes the hub slot.
    pub hub: String,
    pub train: TrainConfig,
    pub mixture: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossCapSpec {
    /// The two experts being merged (hub slot first).
    pub members: Vec<String>,
    pub k: usize,
    pub dropout_rate: f64,
    pub train: TrainConfig,
    /// Budget-matched dense baseline on the same data.
    pub dm_train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub t_min: usize,
    pub t_max: usize,
    pub lr: f64,
    pub steps: usize,
    pub label_seqs: usize,
    pub label_seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub seed_phase: PhaseSpec,
    pub expert_phase: PhaseSpec,
    pub stitch_phase: StitchSpec,
    pub crosscap_phase: CrossCapSpec,
    pub bam_phase: PhaseSpec,
    pub router: RouterSpec,
    pub eval: EvalConfig,
}

fn train_cfg(peak_lr: f64, total_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        peak_lr,
        warmup_steps: (total_steps / 10).max(1),
        total_steps,
        final_lr_fraction: 0.01,
        batch_tokens: 2048,
        seq_len: 128,
        weight_decay: 0.1,
        seed,
        freeze_groups: vec![],
    }
}

/// The base configuration every preset derives from.
pub fn base(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "core".into(),
        model: ModelConfig::desk(),
        data: DataSpec {
            gen: GenParams::default(),
            mixed_n_train: 12_000,
            seeds: DataSeeds {
                arith: seed.wrapping_mul(31).wrapping_add(101),
                code: seed.wrapping_mul(31).wrapping_add(102),
                cipher: seed.wrapping_mul(31).wrapping_add(103),
                mixed: seed.wrapping_mul(31).wrapping_add(104),
                cipher_arith: seed.wrapping_mul(31).wrapping_add(105),
            },
        },
        seed_phase: PhaseSpec {
            train: train_cfg(4e-3, 1400, seed),
            mixture: vec![("mixed".into(), 1.0)],
        },
        expert_phase: PhaseSpec {
            train: train_cfg(2e-3, 650, seed.wrapping_add(1)),
            mixture: vec![],
        },
        stitch_phase: StitchSpec {
            k: 4,
            pattern: StitchPattern::Alternating,
            init: StitchInit::HubIdentity,
            dropout_rate: 0.1,
            hub: "seed".into(),
            train: train_cfg(2e-3, 420, seed.wrapping_add(2)),
            mixture: vec![
                ("arith".into(), 0.15),
                ("code".into(), 0.15),
                ("cipher".into(), 0.15),
                ("mixed".into(), 0.55),
            ],
        },
        crosscap_phase: CrossCapSpec {
            members: vec!["expert-arith".into(), "expert-cipher".into()],
            k: 4,
            dropout_rate: 0.1,
            train: train_cfg(2e-3, 320, seed.wrapping_add(3)),
            dm_train: train_cfg(2e-3, 320, seed.wrapping_add(4)),
        },
        bam_phase: PhaseSpec {
            train: train_cfg(2e-3, 60, seed.wrapping_add(5)),
            mixture: vec![
                ("arith".into(), 0.15),
                ("code".into(), 0.15),
                ("cipher".into(), 0.15),
                ("mixed".into(), 0.55),
            ],
        },
        router: RouterSpec {
            t_min: 8,
            t_max: 64,
            lr: 5e-4,
            steps: 300,
            label_seqs: 256,
            label_seq_len: 64,
        },
        eval: EvalConfig {
            max_prompts: 96,
            loss_windows: 12,
            seq_len: 128,
        },
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "seed-pretrain",
    "expert-arith",
    "expert-code",
    "expert-cipher",
    "bts-stitch",
    "ablation-k1",
    "ablation-k4",
    "ablation-k8",
    "ablation-all-eih",
    "ablation-hub-swap",
    "crosscap",
    "baseline-soup",
    "baseline-btm",
    "baseline-router",
    "baseline-btx-soft",
    "baseline-bam-adapters",
];

/// Resolve a named preset.
pub fn preset(name: &str, seed: u64) -> Option<ExperimentConfig> {
    let mut cfg = base(seed);
    cfg.name = name.to_string();
    match name {
        "core" | "seed-pretrain" | "bts-stitch" | "ablation-k4" | "baseline-soup"
        | "baseline-btm" | "baseline-router" | "baseline-btx-soft" | "baseline-bam-adapters"
        | "crosscap" => {}
        "expert-arith" => cfg.expert_phase.mixture = vec![("arith".into(), 1.0)],
        "expert-code" => cfg.expert_phase.mixture = vec![("code".into(), 1.0)],
        "expert-cipher" => cfg.expert_phase.mixture = vec![("cipher".into(), 1.0)],
        "ablation-k1" => cfg.stitch_phase.k = 1,
        // Desk analogue of the densest setting: one stitch per layer.
        "ablation-k8" => cfg.stitch_phase.k = 8,
        "ablation-all-eih" => cfg.stitch_phase.pattern = StitchPattern::AllExpertsIntoHub,
        "ablation-hub-swap" => cfg.stitch_phase.hub = "best-expert".into(),
        _ => return None,
    }
    Some(cfg)
}

/// Load a config: a preset name, or a path to a fully resolved JSON file.
pub fn resolve_config(spec: &str, seed: u64) -> Result<ExperimentConfig, String> {
    if let Some(cfg) = preset(spec, seed) {
        return Ok(cfg);
    }
    let path = std::path::Path::new(spec);
    if path.exists() {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        return serde_json::from_slice(&bytes)
            .map_err(|e| format!("config {spec}: {e}"));
    }
    Err(format!(
        "`{spec}` is neither a preset ({}) nor a config file",
        PRESET_NAMES.join(", ")
    ))
}
