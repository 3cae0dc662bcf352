//! JSON config file. Every section is optional; missing fields take the
//! built-in defaults and command-line flags override both.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unter_core::downstream::{FinetuneConfig, Task};
use unter_core::kb::{DEFAULT_PAGE_PREFIX_LEN, DEFAULT_TOP_K_RELATIONS};
use unter_core::nn::{ModelConfig, SpanRepMode};
use unter_core::pretrain::TrainConfig;
use unter_core::text::{Vocab, DEFAULT_SOFT_PROMPTS};
use unter_core::toy::ToyConfig;
use unter_core::Error;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub toy: ToyConfig,
    pub build: BuildSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub finetune: FinetuneSettings,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.line(), e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSettings {
    pub top_k_relations: usize,
    pub page_prefix_len: usize,
    pub num_prompts: usize,
}

impl Default for BuildSettings {
    fn default() -> Self {
        BuildSettings {
            top_k_relations: DEFAULT_TOP_K_RELATIONS,
            page_prefix_len: DEFAULT_PAGE_PREFIX_LEN,
            num_prompts: DEFAULT_SOFT_PROMPTS,
        }
    }
}

/// The vocabulary-independent part of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_size: usize,
    pub max_position: usize,
    pub span_rep: SpanRepMode,
    pub tie_decoder_embeddings: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 0);
        ModelSettings {
            hidden_size: d.hidden_size,
            num_heads: d.num_heads,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            ffn_size: d.ffn_size,
            max_position: d.max_position,
            span_rep: d.span_rep,
            tie_decoder_embeddings: d.tie_decoder_embeddings,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab: &Vocab, init_seed: u64) -> ModelConfig {
        ModelConfig {
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_size: self.ffn_size,
            max_position: self.max_position,
            span_rep: self.span_rep,
            tie_decoder_embeddings: self.tie_decoder_embeddings,
            init_seed,
            ..ModelConfig::desk(vocab.len(), vocab.first_output_id())
        }
    }
}

/// Overrides on top of the per-task defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_fraction: Option<f64>,
    /// Multiply epochs for 1% and 10% subsamples.
    pub scale_low_resource: bool,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// Label ignored by TACRED-style relation scoring.
    pub no_relation: Option<String>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            epochs: None,
            batch_size: None,
            lr: None,
            warmup_fraction: None,
            scale_low_resource: true,
            seeds: DEFAULT_SEEDS.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            no_relation: None,
        }
    }
}

impl FinetuneSettings {
    pub fn for_run(&self, task: Task, fraction: f64) -> FinetuneConfig {
        let d = FinetuneConfig::for_task(task);
        let base = FinetuneConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            warmup_fraction: self.warmup_fraction.unwrap_or(d.warmup_fraction),
        };
        if self.scale_low_resource {
            base.scaled_for_fraction(fraction)
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = serde_json::from_str(r#"{"train": {"total_steps": 5}, "model": {"decoder_layers": 2}}"#).unwrap();
        assert_eq!(cfg.train.total_steps, 5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.decoder_layers, 2);
        assert_eq!(cfg.model.hidden_size, 64);
        assert_eq!(cfg.finetune.seeds, vec![42, 43, 44, 45, 46]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn low_resource_scaling() {
        let s = FinetuneSettings::default();
        assert_eq!(s.for_run(Task::Relc, 0.01).epochs, 250);
        assert_eq!(s.for_run(Task::Relc, 1.0).epochs, 5);
        let fixed = FinetuneSettings { scale_low_resource: false, epochs: Some(2), ..Default::default() };
        assert_eq!(fixed.for_run(Task::Relc, 0.01).epochs, 2);
    }
}
