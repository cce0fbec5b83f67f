//! TOML config files with section headers mirroring the module names, and
//! the precedence rule: built-in defaults < config file < command-line
//! flags.

use anyhow::{Context, Result};
use serde::Deserialize;

use mdlm_core::eval::EvalConfig;
use mdlm_core::generator::{GeneratorConfig, RemaskStrategy};
use mdlm_core::lora::LoraConfig;
use mdlm_core::model::ModelConfig;
use mdlm_core::trainer::{TrainConfig, TrainPhase};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub lora: Option<LoraSection>,
    pub data: DataSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ffn: Option<usize>,
    pub max_positions: Option<usize>,
    pub seed: Option<u64>,
}

impl ModelSection {
    /// Resolve against defaults; the vocabulary supplies `vocab_size`.
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers.unwrap_or(2),
            d_model: self.d_model.unwrap_or(64),
            n_heads: self.n_heads.unwrap_or(4),
            d_ffn: self.d_ffn.unwrap_or(128),
            vocab_size,
            max_positions: self.max_positions.unwrap_or(128),
            seed: self.seed.unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub peak_lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub micro_batch: Option<usize>,
    pub grad_accum: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub mask_rate_min: Option<f64>,
    pub mask_rate_max: Option<f64>,
}

impl TrainSection {
    pub fn build(&self, phase: TrainPhase) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            peak_lr: self.peak_lr.unwrap_or(d.peak_lr),
            warmup_steps: self.warmup_steps.or(d.warmup_steps),
            micro_batch: self.micro_batch.unwrap_or(d.micro_batch),
            grad_accum: self.grad_accum.unwrap_or(d.grad_accum),
            epochs: self.epochs.unwrap_or(d.epochs),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            eps: self.eps.unwrap_or(d.eps),
            seed: self.seed.unwrap_or(d.seed),
            phase,
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            mask_rate_min: self.mask_rate_min.unwrap_or(d.mask_rate_min),
            mask_rate_max: self.mask_rate_max.unwrap_or(d.mask_rate_max),
        }
    }
}

/// Flag-level overrides shared by the train subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Peak learning rate.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Linear warmup steps.
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Micro-batch size.
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Gradient accumulation steps.
    #[arg(long)]
    pub grad_accum: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps between checkpoints (0 disables interval saves).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.peak_lr {
            cfg.peak_lr = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = Some(v);
        }
        if let Some(v) = self.micro_batch {
            cfg.micro_batch = v;
        }
        if let Some(v) = self.grad_accum {
            cfg.grad_accum = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub dropout: Option<f64>,
    pub targets: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection {
            rank: None,
            alpha: None,
            dropout: None,
            targets: None,
            seed: 7,
        }
    }
}

impl LoraSection {
    pub fn build(&self) -> (LoraConfig, u64) {
        let d = LoraConfig::default();
        let cfg = LoraConfig {
            rank: self.rank.unwrap_or(d.rank),
            alpha: self.alpha.unwrap_or(d.alpha),
            dropout: self.dropout.unwrap_or(d.dropout),
            targets: self.targets.clone().unwrap_or(d.targets),
        };
        (cfg, self.seed)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub vocab: Option<String>,
    pub corpus: Option<String>,
    pub sft_max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub steps: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub block_len: Option<usize>,
    pub rep_penalty: Option<f64>,
    pub remask: Option<String>,
    pub stochastic: Option<bool>,
    pub cfg_scale: Option<f64>,
    pub seed: Option<u64>,
}

impl GenerateSection {
    pub fn build(&self) -> Result<GeneratorConfig> {
        let d = GeneratorConfig::default();
        Ok(GeneratorConfig {
            steps: self.steps.unwrap_or(d.steps),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            temperature: self.temperature.unwrap_or(d.temperature),
            block_len: self.block_len.unwrap_or(d.block_len),
            rep_penalty: self.rep_penalty.unwrap_or(d.rep_penalty),
            remask: match &self.remask {
                Some(s) => s.parse::<RemaskStrategy>()?,
                None => d.remask,
            },
            stochastic: self.stochastic.unwrap_or(d.stochastic),
            cfg_scale: self.cfg_scale.unwrap_or(d.cfg_scale),
            seed: self.seed.unwrap_or(d.seed),
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mask_prob: Option<f64>,
    pub max_len: Option<usize>,
    pub seed: Option<u64>,
    pub num_rounds: Option<usize>,
}

impl EvalSection {
    pub fn build(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            mask_prob: self.mask_prob.unwrap_or(d.mask_prob),
            max_len: self.max_len.unwrap_or(d.max_len),
            seed: self.seed.unwrap_or(d.seed),
            num_rounds: self.num_rounds.unwrap_or(d.num_rounds),
        }
    }
}
