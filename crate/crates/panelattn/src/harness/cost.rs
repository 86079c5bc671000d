//! Parameter and FLOP accounting.
//!
//! The attention-modulation overhead counts one fused multiply-add per
//! entry of a `d_h × d_h` rotation, applied to both queries and keys of
//! every token in every layer at every step:
//!
//! ```text
//! ΔFLOPs = 2 · N_panel · N_head · d_h² · N_tokens · N_layers · N_steps
//! ```
//!
//! where `N_tokens` is the token count per panel. Operator construction
//! (one matrix exponential per panel per layer per refresh) is counted
//! separately with a calibrated matrix-multiply budget per exponential and
//! is negligible next to the modulation term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nnet::{EncoderKind, Regime};
use crate::{Error, Result};

use super::config::RunConfig;

/// Matrix multiplies charged per exponential evaluation (series terms plus
/// squarings at the 128-wide scale). A calibration constant for the cost
/// report, not a measurement of the implementation.
pub const MATMULS_PER_EXP: u64 = 14;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostInputs {
    pub n_panel: u64,
    pub n_head: u64,
    pub d_h: u64,
    pub n_tokens: u64,
    pub n_layers: u64,
    pub n_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub delta_flops: u64,
    pub exp_flops: u64,
    pub inputs: CostInputs,
}

/// Modulation and exponential cost for a configuration.
pub fn flops_delta(inputs: CostInputs) -> Result<CostReport> {
    let CostInputs {
        n_panel,
        n_head,
        d_h,
        n_tokens,
        n_layers,
        n_steps,
    } = inputs;
    for (name, v) in [
        ("n_panel", n_panel),
        ("n_head", n_head),
        ("d_h", d_h),
        ("n_tokens", n_tokens),
        ("n_layers", n_layers),
        ("n_steps", n_steps),
    ] {
        if v == 0 {
            return Err(Error::param(format!("{name} must be a positive integer")));
        }
    }
    let delta_flops = 2 * n_panel * n_head * d_h * d_h * n_tokens * n_layers * n_steps;
    let operators = n_panel * n_layers;
    let exp_flops = operators * 2 * d_h * d_h * d_h * MATMULS_PER_EXP;
    Ok(CostReport {
        delta_flops,
        exp_flops,
        inputs,
    })
}

/// Panel-operator parameters: two `d_h × ρ` factors per panel per layer.
pub fn opro_param_count(d_h: u64, rank: u64, panels: u64, layers: u64) -> u64 {
    2 * d_h * rank * panels * layers
}

/// LoRA parameters: a down and an up projection per adapted projection per
/// layer.
pub fn lora_param_count(model_dim: u64, rank: u64, projections: u64, layers: u64) -> u64 {
    2 * model_dim * rank * projections * layers
}

/// Closed-form per-group parameter counts for a run configuration. Must
/// agree with direct enumeration of the instantiated model's tensors.
pub fn count_params(cfg: &RunConfig) -> BTreeMap<String, u64> {
    let v = &cfg.vit;
    let d = v.model_dim as u64;
    let dh = v.head_dim() as u64;
    let layers = v.layer_count as u64;
    let md = (v.mlp_ratio as u64) * d;
    let patch_in = (v.patch_size * v.patch_size) as u64;
    let tokens = v.token_count() as u64;
    let classes = v.class_count as u64;
    let panels = cfg.panel_count() as u64;

    let mut counts = BTreeMap::new();
    let mut backbone = patch_in * d + d; // patch embedding
    if v.use_class_token {
        backbone += d;
    }
    // Per layer: two layer norms, four projections, two MLP matrices.
    backbone += layers * (2 * (2 * d) + 4 * (d * d + d) + (d * md + md) + (md * d + d));
    backbone += 2 * d; // final layer norm
    counts.insert("backbone".to_string(), backbone);

    let encoder = match cfg.encoder {
        EncoderKind::Ape => tokens * d,
        EncoderKind::Rope => 0,
        EncoderKind::Liere => 2 * dh * dh,
        EncoderKind::Comrope => dh,
    };
    if encoder > 0 {
        counts.insert("encoder".to_string(), encoder);
    }

    counts.insert("head".to_string(), d * d + d + d * classes + classes);

    if cfg.adapter.uses_lora() {
        counts.insert(
            "lora".to_string(),
            lora_param_count(d, cfg.lora_rank as u64, 4, layers),
        );
    }
    match cfg.adapter {
        Regime::LoraOpro => {
            counts.insert(
                "opro".to_string(),
                opro_param_count(dh, cfg.opro_rank as u64, panels, layers),
            );
        }
        Regime::LoraOproBd => {
            counts.insert("opro_bd".to_string(), layers * panels * (dh / 2));
        }
        Regime::LoraApb => {
            counts.insert("apb".to_string(), layers * panels * dh * 2);
        }
        Regime::LoraAsym => {
            counts.insert(
                "asym".to_string(),
                2 * opro_param_count(dh, cfg.opro_rank as u64, panels, layers),
            );
        }
        _ => {}
    }
    counts
}
