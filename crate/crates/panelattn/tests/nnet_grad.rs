//! Finite-difference oracle for the network's hand-written backward pass,
//! plus the adapter-neutrality and invariance checks at the model level.
//!
//! The oracle evaluates the loss through the public forward path only and
//! perturbs one parameter coordinate at a time, so it is independent of
//! every backward-pass code path it validates.

use ndarray::{Array2, Array3};
use panelattn::exec::Exec;
use panelattn::nnet::layers::softmax_rows;
use panelattn::nnet::params::Group;
use panelattn::nnet::{AdapterConfig, EncoderKind, Model, Regime, VitConfig};
use panelattn::opro::PanelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn tiny_config(use_class_token: bool) -> VitConfig {
    VitConfig {
        image_size: 32,
        patch_size: 8,
        model_dim: 32,
        head_count: 4,
        layer_count: 2,
        mlp_ratio: 2,
        class_count: 8,
        use_class_token,
    }
}

fn random_images(rng: &mut ChaCha12Rng, batch: usize, size: usize) -> Array3<u8> {
    Array3::from_shape_fn((batch, size, size), |_| rng.gen::<u8>())
}

fn random_labels(rng: &mut ChaCha12Rng, batch: usize, classes: usize) -> Vec<u8> {
    (0..batch).map(|_| rng.gen_range(0..classes as u8)).collect()
}

fn mean_ce_loss(logits: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs[[r, y as usize]].max(1e-300).ln();
    }
    loss / labels.len() as f64
}

fn forward_loss(model: &Model<f64>, images: &Array3<u8>, labels: &[u8], map: &PanelMap) -> f64 {
    let ops = model.refresh_operators().unwrap();
    let logits = model.forward(&ops, &images.view(), map, Exec::Sequential).unwrap();
    mean_ce_loss(&logits, labels)
}

/// Randomizes the values of every parameter in `groups` so gradients are
/// probed away from special points (zero adapters in particular).
fn randomize_groups(model: &mut Model<f64>, groups: &[Group], scale: f64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .store
        .ids()
        .filter(|id| groups.contains(&model.store.entry(*id).group))
        .collect();
    for id in ids {
        let shape = model.store.entry(id).value.shape().to_vec();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values).unwrap();
        model.store.assign(id, arr).unwrap();
    }
}

/// Checks analytic gradients of every trainable group against central
/// finite differences on `probes_per_group` sampled coordinates.
fn gradcheck(model: &mut Model<f64>, map: &PanelMap, probes_per_group: usize, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let batch = 4;
    let images = random_images(&mut rng, batch, model.cfg.image_size);
    let labels = random_labels(&mut rng, batch, model.cfg.class_count);

    let ops = model.refresh_operators().unwrap();
    let out = model
        .loss_and_grads(&ops, &images.view(), &labels, map, Exec::Sequential)
        .unwrap();

    let trainable: Vec<_> = model
        .store
        .ids()
        .filter(|id| model.layout().is_trainable(*id))
        .collect();
    let mut by_group: std::collections::BTreeMap<Group, Vec<_>> = Default::default();
    for id in trainable {
        by_group.entry(model.store.entry(id).group).or_default().push(id);
    }

    let eps = 1e-5;
    for (group, ids) in by_group {
        let mut checked = 0usize;
        let mut worst: f64 = 0.0;
        while checked < probes_per_group {
            let id = ids[rng.gen_range(0..ids.len())];
            let len = model.store.entry(id).value.len();
            let idx = rng.gen_range(0..len);
            let name = model.store.entry(id).name.clone();

            model.store.nudge(id, idx, eps);
            let plus = forward_loss(model, &images, &labels, map);
            model.store.nudge(id, idx, -2.0 * eps);
            let minus = forward_loss(model, &images, &labels, map);
            model.store.nudge(id, idx, eps);

            let fd = (plus - minus) / (2.0 * eps);
            let analytic = model.grad_of(&out.grads, &name).unwrap()[idx];
            let err = (fd - analytic).abs();
            let tol = 1e-9 + 1e-5 * fd.abs().max(analytic.abs());
            assert!(
                err <= tol,
                "group {} param {name}[{idx}]: fd {fd:.3e} vs analytic {analytic:.3e} (err {err:.3e})",
                group.name()
            );
            worst = worst.max(err);
            checked += 1;
        }
        eprintln!(
            "gradcheck group {:10} probes {probes_per_group} worst abs err {worst:.3e}",
            group.name()
        );
    }
}

#[test]
fn gradcheck_full_regime_rope() {
    let cfg = tiny_config(false);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 11).unwrap();
    model.set_trainable(Regime::Full).unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    gradcheck(&mut model, &map, 60, 101);
}

#[test]
fn gradcheck_full_regime_ape_with_class_token() {
    let cfg = tiny_config(true);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Ape, 12).unwrap();
    model.set_trainable(Regime::Full).unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, true).unwrap();
    gradcheck(&mut model, &map, 60, 102);
}

#[test]
fn gradcheck_full_regime_comrope() {
    let cfg = tiny_config(false);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Comrope, 13).unwrap();
    model.set_trainable(Regime::Full).unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    gradcheck(&mut model, &map, 60, 103);
}

#[test]
fn gradcheck_full_regime_liere() {
    let cfg = tiny_config(false);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Liere, 14).unwrap();
    // Move the generators off zero so the exponential chain is non-trivial.
    randomize_groups(&mut model, &[Group::Encoder], 0.05, 900);
    model.set_trainable(Regime::Full).unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    gradcheck(&mut model, &map, 60, 104);
}

#[test]
fn gradcheck_lora_opro_at_trained_values() {
    let cfg = tiny_config(false);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 15).unwrap();
    model
        .attach_adapters(
            Regime::LoraOpro,
            AdapterConfig {
                lora_rank: 4,
                lora_alpha: 8.0,
                opro_rank: 2,
                sigma: 0.02,
                panel_count: 4,
            },
            77,
        )
        .unwrap();
    randomize_groups(&mut model, &[Group::Lora, Group::Opro], 0.3, 901);
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    gradcheck(&mut model, &map, 80, 105);
}

#[test]
fn gradcheck_bd_apb_asym_adapters() {
    let cfg = tiny_config(false);
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    for (regime, group, seed) in [
        (Regime::LoraOproBd, Group::OproBd, 201u64),
        (Regime::LoraApb, Group::Apb, 202),
        (Regime::LoraAsym, Group::Asym, 203),
    ] {
        let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 16).unwrap();
        model
            .attach_adapters(
                regime,
                AdapterConfig {
                    lora_rank: 4,
                    lora_alpha: 8.0,
                    opro_rank: 2,
                    sigma: 0.02,
                    panel_count: 4,
                },
                seed,
            )
            .unwrap();
        randomize_groups(&mut model, &[group], 0.3, seed + 50);
        gradcheck(&mut model, &map, 50, seed + 100);
    }
}

#[test]
fn gradcheck_linear_probe_only_touches_head() {
    let cfg = tiny_config(false);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 17).unwrap();
    model.set_trainable(Regime::LinearProbe).unwrap();
    let trainable: Vec<_> = model
        .store
        .ids()
        .filter(|id| model.layout().is_trainable(*id))
        .map(|id| model.store.entry(id).group)
        .collect();
    assert!(!trainable.is_empty());
    assert!(trainable.iter().all(|g| *g == Group::Head));
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    gradcheck(&mut model, &map, 60, 107);
}

#[test]
fn adapters_are_exact_identity_at_init() {
    let cfg = tiny_config(false);
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let images = random_images(&mut rng, 3, cfg.image_size);
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();

    let baseline = Model::<f64>::new(cfg, EncoderKind::Rope, 42).unwrap();
    let ops = baseline.refresh_operators().unwrap();
    let base_logits = baseline
        .forward(&ops, &images.view(), &map, Exec::Sequential)
        .unwrap();

    for regime in [
        Regime::Lora,
        Regime::LoraOpro,
        Regime::LoraOproBd,
        Regime::LoraApb,
        Regime::LoraAsym,
    ] {
        let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 42).unwrap();
        model
            .attach_adapters(regime, AdapterConfig { panel_count: 4, ..Default::default() }, 9)
            .unwrap();
        let ops = model.refresh_operators().unwrap();
        let logits = model
            .forward(&ops, &images.view(), &map, Exec::Sequential)
            .unwrap();
        let diff = (&logits - &base_logits)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            diff <= 1e-6,
            "regime {} perturbs the frozen forward at init: {diff:.3e}",
            regime.name()
        );
    }
}

#[test]
fn zero_init_gradients_flow_through_left_factor_only() {
    let cfg = tiny_config(false);
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 21).unwrap();
    model
        .attach_adapters(Regime::LoraOpro, AdapterConfig { panel_count: 4, ..Default::default() }, 3)
        .unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    let images = random_images(&mut rng, 4, cfg.image_size);
    let labels = random_labels(&mut rng, 4, cfg.class_count);
    let ops = model.refresh_operators().unwrap();
    let out = model
        .loss_and_grads(&ops, &images.view(), &labels, &map, Exec::Sequential)
        .unwrap();

    let mut some_left_nonzero = false;
    for l in 0..cfg.layer_count {
        for p in 0..4 {
            let right = model
                .grad_of(&out.grads, &format!("layer{l}.opro_p{p}_right"))
                .unwrap();
            assert!(
                right.iter().all(|v| *v == 0.0),
                "right-factor gradient must vanish exactly at zero init"
            );
            let left = model
                .grad_of(&out.grads, &format!("layer{l}.opro_p{p}_left"))
                .unwrap();
            if left.iter().any(|v| *v != 0.0) {
                some_left_nonzero = true;
            }
        }
    }
    assert!(some_left_nonzero, "optimization must start through the left factor");
}

#[test]
fn single_panel_map_with_trained_operators_matches_plain_forward() {
    let cfg = tiny_config(false);
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let images = random_images(&mut rng, 3, cfg.image_size);

    let plain = Model::<f64>::new(cfg, EncoderKind::Rope, 55).unwrap();
    let single_panel = PanelMap::from_token_grid(cfg.grid_side(), 1, false).unwrap();
    let ops = plain.refresh_operators().unwrap();
    let base = plain
        .forward(&ops, &images.view(), &single_panel, Exec::Sequential)
        .unwrap();

    let mut trained = Model::<f64>::new(cfg, EncoderKind::Rope, 55).unwrap();
    trained
        .attach_adapters(
            Regime::LoraOpro,
            AdapterConfig { panel_count: 4, ..Default::default() },
            7,
        )
        .unwrap();
    randomize_groups(&mut trained, &[Group::Opro], 0.4, 77);
    let ops = trained.refresh_operators().unwrap();
    let logits = trained
        .forward(&ops, &images.view(), &single_panel, Exec::Sequential)
        .unwrap();
    let diff = (&logits - &base).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        diff <= 1e-5,
        "same-panel tokens must keep the frozen attention: {diff:.3e}"
    );
}

#[test]
fn permuting_panels_and_operators_together_leaves_logits_unchanged() {
    let cfg = tiny_config(false);
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let images = random_images(&mut rng, 2, cfg.image_size);

    let mut model = Model::<f64>::new(cfg, EncoderKind::Rope, 88).unwrap();
    model
        .attach_adapters(
            Regime::LoraOpro,
            AdapterConfig { panel_count: 4, ..Default::default() },
            5,
        )
        .unwrap();
    randomize_groups(&mut model, &[Group::Opro], 0.4, 99);

    // Permutation of panels: p → (p + 1) mod 4.
    let mut permuted = model.clone();
    for l in 0..cfg.layer_count {
        for p in 0..4 {
            let to = (p + 1) % 4;
            for side in ["left", "right"] {
                let src = model
                    .store
                    .find(&format!("layer{l}.opro_p{p}_{side}"))
                    .unwrap();
                let dst = permuted
                    .store
                    .find(&format!("layer{l}.opro_p{to}_{side}"))
                    .unwrap();
                let value = model.store.entry(src).value.clone();
                permuted.store.assign(dst, value).unwrap();
            }
        }
    }
    let base_map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    let perm_assignment: Vec<Option<usize>> = base_map
        .assignment()
        .iter()
        .map(|p| p.map(|p| (p + 1) % 4))
        .collect();
    let perm_map = PanelMap::new(perm_assignment, 4).unwrap();

    let ops_a = model.refresh_operators().unwrap();
    let ops_b = permuted.refresh_operators().unwrap();
    let a = model
        .forward(&ops_a, &images.view(), &base_map, Exec::Sequential)
        .unwrap();
    let b = permuted
        .forward(&ops_b, &images.view(), &perm_map, Exec::Sequential)
        .unwrap();
    let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert_eq!(diff, 0.0, "relabeling symmetry must be exact");
}

#[test]
fn parallel_and_sequential_forward_agree() {
    let cfg = tiny_config(false);
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let images = random_images(&mut rng, 20, cfg.image_size);
    let labels = random_labels(&mut rng, 20, cfg.class_count);
    let model = Model::<f64>::new(cfg, EncoderKind::Rope, 3).unwrap();
    let map = PanelMap::from_token_grid(cfg.grid_side(), 2, false).unwrap();
    let ops = model.refresh_operators().unwrap();
    let seq = model
        .forward(&ops, &images.view(), &map, Exec::Sequential)
        .unwrap();
    let par = model
        .forward(&ops, &images.view(), &map, Exec::Parallel)
        .unwrap();
    assert_eq!(seq, par);

    let a = model
        .loss_and_grads(&ops, &images.view(), &labels, &map, Exec::Sequential)
        .unwrap();
    let b = model
        .loss_and_grads(&ops, &images.view(), &labels, &map, Exec::Parallel)
        .unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grads.flat, b.grads.flat);
}

#[test]
fn model_init_is_deterministic() {
    let cfg = tiny_config(false);
    let a = Model::<f32>::new(cfg, EncoderKind::Comrope, 123).unwrap();
    let b = Model::<f32>::new(cfg, EncoderKind::Comrope, 123).unwrap();
    for (x, y) in a.store.entries().iter().zip(b.store.entries().iter()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.value, y.value);
    }
}
