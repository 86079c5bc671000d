//! Closed-form parameter counts against direct enumeration of instantiated
//! model tensors, for every encoder and adapter regime.

use panelattn::harness::{count_params, RunConfig};
use panelattn::nnet::{EncoderKind, Model, Regime, VitConfig};

fn enumerate(cfg: &RunConfig) -> std::collections::BTreeMap<String, u64> {
    let mut model = Model::<f32>::new(cfg.vit, cfg.encoder, 1).unwrap();
    if cfg.adapter != Regime::Full && cfg.adapter != Regime::LinearProbe {
        model
            .attach_adapters(cfg.adapter, cfg.adapter_config(), 2)
            .unwrap();
    }
    model
        .store
        .group_counts()
        .into_iter()
        .map(|(g, n)| (g.name().to_string(), n))
        .collect()
}

#[test]
fn formulas_match_enumeration_across_configs() {
    let tiny = VitConfig {
        image_size: 32,
        patch_size: 8,
        model_dim: 32,
        head_count: 4,
        layer_count: 2,
        mlp_ratio: 2,
        class_count: 8,
        use_class_token: false,
    };
    let encoders = [
        EncoderKind::Ape,
        EncoderKind::Rope,
        EncoderKind::Liere,
        EncoderKind::Comrope,
    ];
    let regimes = [
        Regime::Full,
        Regime::Lora,
        Regime::LoraOpro,
        Regime::LoraOproBd,
        Regime::LoraApb,
        Regime::LoraAsym,
    ];
    for vit in [tiny, VitConfig::default()] {
        for encoder in encoders {
            for adapter in regimes {
                let cfg = RunConfig {
                    vit,
                    encoder,
                    adapter,
                    grid: 2,
                    opro_rank: 4,
                    lora_rank: 8,
                    ..RunConfig::stage2_defaults()
                };
                let formula = count_params(&cfg);
                let enumerated = enumerate(&cfg);
                assert_eq!(
                    formula, enumerated,
                    "mismatch for encoder {} regime {}",
                    encoder.name(),
                    adapter.name()
                );
            }
        }
    }
}

#[test]
fn class_token_and_table_are_counted() {
    let cfg = RunConfig {
        vit: VitConfig {
            use_class_token: true,
            ..VitConfig::default()
        },
        encoder: EncoderKind::Ape,
        ..RunConfig::stage1_defaults()
    };
    let formula = count_params(&cfg);
    let enumerated = enumerate(&cfg);
    assert_eq!(formula, enumerated);
    // 49 patches + 1 class token rows.
    assert_eq!(formula["encoder"], 50 * 256);
}
