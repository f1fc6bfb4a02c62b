//! TOML run configuration. Every key has a default; unknown keys are
//! rejected so typos fail loudly. The defaults reproduce the repository's
//! acceptance runs.

use serde::Deserialize;

use audiofm_core::model::ModelConfig;
use audiofm_core::synth::SynthConfig;
use audiofm_core::train::TrainConfig;
use audiofm_core::{CoreError, Result};

fn default_true_dims() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_clips: usize,
    pub seed: u64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub event_rate: f64,
    pub n_classes: usize,
    pub background_amp: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_clips: 24,
            seed: 7,
            duration_min: 5.0,
            duration_max: 15.0,
            event_rate: 1.0,
            n_classes: 4,
            background_amp: 0.02,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(default = "default_true_dims")]
    pub audio_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_mm_blocks: usize,
    pub n_mm_blocks_with_audio_self_attn: usize,
    pub n_single_blocks: usize,
    pub semantic_dim: usize,
    pub sync_dim: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            audio_dim: 64,
            model_dim: 48,
            heads: 4,
            n_mm_blocks: 2,
            n_mm_blocks_with_audio_self_attn: 1,
            n_single_blocks: 1,
            semantic_dim: 16,
            sync_dim: 8,
            text_dim: 16,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub cond_dropout: f64,
    pub mask_prob: f64,
    pub consistency_ratio: f64,
    pub mask_span_min: usize,
    pub mask_span_max: usize,
    pub n_step_levels: u32,
    pub clip_tokens: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            ema_rate: d.ema_rate,
            cond_dropout: d.cond_dropout,
            mask_prob: d.mask_prob,
            consistency_ratio: d.consistency_ratio,
            mask_span_min: d.mask_span_min,
            mask_span_max: d.mask_span_max,
            n_step_levels: d.n_step_levels,
            clip_tokens: d.clip_tokens,
            seed: d.seed,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub duration_s: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n_steps: 32,
            guidance: 4.0,
            seed: 0,
            duration_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub k_projections: usize,
    pub seed: u64,
    pub non_negative_mels: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            k_projections: 100,
            seed: 0,
            non_negative_mels: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read_to_string(path)?;
        toml::from_str(&raw).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            duration_range: (self.data.duration_min, self.data.duration_max),
            event_rate: self.data.event_rate,
            n_classes: self.data.n_classes,
            background_amp: self.data.background_amp,
            semantic_dim: self.model.semantic_dim,
            sync_dim: self.model.sync_dim,
            text_dim: self.model.text_dim,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            audio_dim: self.model.audio_dim,
            model_dim: self.model.model_dim,
            heads: self.model.heads,
            n_mm_blocks: self.model.n_mm_blocks,
            n_mm_blocks_with_audio_self_attn: self.model.n_mm_blocks_with_audio_self_attn,
            n_single_blocks: self.model.n_single_blocks,
            semantic_dim: self.model.semantic_dim,
            sync_dim: self.model.sync_dim,
            text_dim: self.model.text_dim,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            ema_rate: self.train.ema_rate,
            cond_dropout: self.train.cond_dropout,
            mask_prob: self.train.mask_prob,
            consistency_ratio: self.train.consistency_ratio,
            mask_span_min: self.train.mask_span_min,
            mask_span_max: self.train.mask_span_max,
            n_step_levels: self.train.n_step_levels,
            clip_tokens: self.train.clip_tokens,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
        }
    }
}
