//! Run configuration: model dimensions, encoder/adapter selection, optimizer
//! schedule, data paths, and execution switches. Serialized as TOML and
//! echoed into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nnet::{AdapterConfig, EncoderKind, Regime, VitConfig};
use crate::{Error, Result};

/// Network precision of a training run. Operator math is always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    WarmupCosine,
}

impl Default for VitConfig {
    /// Desk-scale backbone: 6 layers, dim 256, 4 heads (head dim 64),
    /// 112×112 canvas with 16px patches, 8-way head, mean pooling.
    fn default() -> Self {
        VitConfig {
            image_size: 112,
            patch_size: 16,
            model_dim: 256,
            head_count: 4,
            layer_count: 6,
            mlp_ratio: 4,
            class_count: 8,
            use_class_token: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub vit: VitConfig,
    pub encoder: EncoderKind,
    pub adapter: Regime,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub opro_rank: usize,
    pub sigma: f64,
    /// Panels per canvas side (1 for single-panel runs); the operator bank
    /// holds `grid²` panels.
    pub grid: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    pub precision: Precision,
    /// Stop early once validation accuracy reaches this value.
    pub stop_at_acc: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::stage1_defaults()
    }
}

impl RunConfig {
    /// Desk-scale stage-1 pretraining defaults: full-model training with
    /// warmup+cosine at 1e-3.
    pub fn stage1_defaults() -> Self {
        RunConfig {
            vit: VitConfig::default(),
            encoder: EncoderKind::Rope,
            adapter: Regime::Full,
            lora_rank: 8,
            lora_alpha: 16.0,
            opro_rank: 8,
            sigma: 0.02,
            grid: 1,
            lr: 1e-3,
            schedule: ScheduleKind::WarmupCosine,
            warmup_steps: 200,
            weight_decay: 0.05,
            batch_size: 64,
            steps: 3000,
            eval_every: 250,
            seed: 0,
            train_data: PathBuf::new(),
            val_data: PathBuf::new(),
            out_dir: PathBuf::from("runs/stage1"),
            deterministic: false,
            precision: Precision::F32,
            stop_at_acc: None,
        }
    }

    /// Desk-scale stage-2 fine-tuning defaults: adapters at constant 5e-4.
    pub fn stage2_defaults() -> Self {
        RunConfig {
            adapter: Regime::Lora,
            grid: 2,
            lr: 5e-4,
            schedule: ScheduleKind::Constant,
            warmup_steps: 0,
            steps: 2000,
            out_dir: PathBuf::from("runs/stage2"),
            ..Self::stage1_defaults()
        }
    }

    pub fn panel_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            opro_rank: self.opro_rank,
            sigma: self.sigma,
            panel_count: self.panel_count(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::format(format!("config encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate(self.encoder)?;
        if self.grid == 0 {
            return Err(Error::config("grid must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch size and step budget must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval cadence must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.sigma < 0.0 {
            return Err(Error::config("sigma must be non-negative"));
        }
        Ok(())
    }

    /// Stable hash of the scientific configuration (excludes paths).
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        let key = format!(
            "{:?}|{}|{}|{}|{}|{}|{}|{}|{:?}|{}|{}|{}|{}|{}|{:?}|{:?}",
            self.vit,
            self.encoder.name(),
            self.adapter.name(),
            self.lora_rank,
            self.lora_alpha,
            self.opro_rank,
            self.sigma,
            self.grid,
            self.schedule,
            self.warmup_steps,
            self.lr,
            self.weight_decay,
            self.batch_size,
            self.steps,
            self.precision,
            self.seed,
        );
        h.update(key.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
