//! Stage-1 pretraining, stage-2 adapter fine-tuning, and evaluation.
//!
//! One process owns the parameters; batch gradients reduce in fixed chunk
//! order, so runs are reproducible for a given `(config, seed)`. The
//! `deterministic` switch additionally forces sequential execution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::benchgen::{load_dataset, LoadedDataset};
use crate::exec::Exec;
use crate::nnet::{Model, Real, Regime};
use crate::opro::PanelMap;
use crate::{Error, Result};

use super::checkpoint::{load_checkpoint, save_checkpoint, RngState};
use super::config::{Precision, RunConfig};
use super::metrics::{append_metrics, MetricsRecord, RunSummary};
use super::optim::{lr_at, Adam};

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_val_acc: f64,
    pub best_step: usize,
    pub final_val_acc: f64,
    pub final_train_loss: f64,
    pub steps_run: usize,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub run_dir: PathBuf,
}

fn gather_batch(data: &LoadedDataset, indices: &[usize]) -> (Array3<u8>, Vec<u8>) {
    let size = data.size;
    let mut images = Array3::zeros((indices.len(), size, size));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&data.images.index_axis(ndarray::Axis(0), i));
        labels.push(data.labels[i]);
    }
    (images, labels)
}

fn mean_ce_from_logits<F: Real>(logits: &ndarray::Array2<F>, labels: &[u8]) -> f64 {
    let mut loss = 0.0f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to64()));
        let mut denom = 0.0f64;
        for v in row.iter() {
            denom += (v.to64() - max).exp();
        }
        loss += denom.ln() + max - logits[[r, y as usize]].to64();
    }
    loss / labels.len() as f64
}

/// Top-1 accuracy and mean loss of a model over a dataset.
fn evaluate_model<F: Real>(
    model: &Model<F>,
    data: &LoadedDataset,
    map: &PanelMap,
    batch: usize,
    exec: Exec,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::param("evaluation dataset is empty"));
    }
    let ops = model.refresh_operators()?;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + batch).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = gather_batch(data, &indices);
        let logits = model.forward(&ops, &images.view(), map, exec)?;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == y as usize {
                correct += 1;
            }
        }
        loss_sum += mean_ce_from_logits(&logits, &labels) * labels.len() as f64;
        start = end;
    }
    Ok((correct as f64 / data.len() as f64, loss_sum / data.len() as f64))
}

/// Weight-decay mask over the flat trainable layout: matrix weights decay,
/// vectors (biases, gains, rates) do not.
fn decay_mask<F: Real>(model: &Model<F>) -> Vec<bool> {
    let mut mask = vec![false; model.layout().total];
    for id in model.store.ids() {
        if let Some(off) = model.layout().offset(id) {
            let e = model.store.entry(id);
            let is_matrix = e.value.ndim() >= 2;
            for slot in mask.iter_mut().skip(off).take(e.value.len()) {
                *slot = is_matrix;
            }
        }
    }
    mask
}

fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000_0000_0000 ^ step);
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

struct TrainContext<'a> {
    cfg: &'a RunConfig,
    stage: u8,
    adapter_seed: u64,
}

fn run_training<F: Real>(
    ctx: &TrainContext<'_>,
    mut model: Model<F>,
    train_data: &LoadedDataset,
    val_data: &LoadedDataset,
) -> Result<TrainOutcome> {
    let cfg = ctx.cfg;
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&run_dir)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    cfg.save(&run_dir.join("config.toml"))?;

    let exec = if cfg.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let map = PanelMap::from_token_grid(cfg.vit.grid_side(), cfg.grid, cfg.vit.use_class_token)?;
    let param_counts: BTreeMap<String, u64> = model
        .store
        .group_counts()
        .into_iter()
        .map(|(g, n)| (g.name().to_string(), n))
        .collect();

    let mut adam = Adam::new(model.layout().total);
    let mask = decay_mask(&model);
    let mut params = model.dump_trainable();
    let mut last_good = params.clone();

    let best_path = run_dir.join("best.ckpt");
    let final_path = run_dir.join("final.ckpt");
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut final_val_acc = 0.0f64;
    let mut last_loss = f64::NAN;
    let started = Instant::now();
    let mut steps_run = 0usize;

    for step in 0..cfg.steps {
        let ops = model.refresh_operators()?;
        let indices = batch_indices(cfg.seed, step as u64, cfg.batch_size, train_data.len());
        let (images, labels) = gather_batch(train_data, &indices);
        let out = model.loss_and_grads(&ops, &images.view(), &labels, &map, exec);
        let out = match out {
            Ok(out) => out,
            Err(Error::Numeric(msg)) => {
                // Divergence: persist the last finite state and abort.
                model.load_trainable(&last_good)?;
                save_checkpoint(
                    &run_dir.join("last_good.ckpt"),
                    &model,
                    cfg.grid,
                    ctx.adapter_seed,
                    cfg.precision,
                    Some(&adam),
                    RngState {
                        seed: cfg.seed,
                        next_step: step as u64,
                    },
                )?;
                return Err(Error::numeric(format!(
                    "training diverged at step {step} ({msg}); last-good checkpoint written to {}",
                    run_dir.join("last_good.ckpt").display()
                )));
            }
            Err(e) => return Err(e),
        };
        last_good.copy_from_slice(&params);
        let lr = lr_at(cfg.schedule, cfg.lr, step, cfg.steps, cfg.warmup_steps);
        adam.step(&mut params, &out.grads.flat, lr, cfg.weight_decay, &mask);
        model.load_trainable(&params)?;
        steps_run = step + 1;
        last_loss = out.loss;

        let at_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if at_eval {
            append_metrics(
                &metrics_path,
                &MetricsRecord {
                    step: step + 1,
                    split: "train".into(),
                    loss: out.loss,
                    accuracy: out.accuracy,
                    wall_ms: started.elapsed().as_millis() as u64,
                    param_counts: param_counts.clone(),
                },
            )?;
            let (val_acc, val_loss) = evaluate_model(&model, val_data, &map, cfg.batch_size, exec)?;
            append_metrics(
                &metrics_path,
                &MetricsRecord {
                    step: step + 1,
                    split: "val".into(),
                    loss: val_loss,
                    accuracy: val_acc,
                    wall_ms: started.elapsed().as_millis() as u64,
                    param_counts: param_counts.clone(),
                },
            )?;
            final_val_acc = val_acc;
            if val_acc > best_val_acc {
                best_val_acc = val_acc;
                best_step = step + 1;
                save_checkpoint(
                    &best_path,
                    &model,
                    cfg.grid,
                    ctx.adapter_seed,
                    cfg.precision,
                    Some(&adam),
                    RngState {
                        seed: cfg.seed,
                        next_step: (step + 1) as u64,
                    },
                )?;
            }
            if let Some(target) = cfg.stop_at_acc {
                if val_acc >= target {
                    break;
                }
            }
        }
    }

    save_checkpoint(
        &final_path,
        &model,
        cfg.grid,
        ctx.adapter_seed,
        cfg.precision,
        Some(&adam),
        RngState {
            seed: cfg.seed,
            next_step: steps_run as u64,
        },
    )?;
    if best_val_acc == f64::NEG_INFINITY {
        let (val_acc, _) = evaluate_model(&model, val_data, &map, cfg.batch_size, exec)?;
        best_val_acc = val_acc;
        final_val_acc = val_acc;
        std::fs::copy(&final_path, &best_path)?;
    }

    let summary = RunSummary {
        stage: ctx.stage,
        encoder: cfg.encoder.name().to_string(),
        regime: if ctx.stage == 1 {
            Regime::Full.name().to_string()
        } else {
            cfg.adapter.name().to_string()
        },
        grid: cfg.grid,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        best_val_acc,
        best_step,
        final_val_acc,
        steps_run,
        param_counts,
        config: cfg.clone(),
    };
    summary.save(&run_dir)?;

    Ok(TrainOutcome {
        best_val_acc,
        best_step,
        final_val_acc,
        final_train_loss: last_loss,
        steps_run,
        checkpoint: final_path,
        best_checkpoint: best_path,
        run_dir,
    })
}

fn load_pair(cfg: &RunConfig) -> Result<(LoadedDataset, LoadedDataset)> {
    let train = load_dataset(&cfg.train_data)?;
    let val = load_dataset(&cfg.val_data)?;
    if train.size != cfg.vit.image_size || val.size != cfg.vit.image_size {
        return Err(Error::config(format!(
            "dataset size {} does not match model canvas {}",
            train.size, cfg.vit.image_size
        )));
    }
    Ok((train, val))
}

/// Trains the backbone from scratch (regime `full`) on a stage-1 dataset.
pub fn train_stage1(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val) = load_pair(cfg)?;
    let ctx = TrainContext {
        cfg,
        stage: 1,
        adapter_seed: 0,
    };
    match cfg.precision {
        Precision::F32 => {
            let mut model = Model::<f32>::new(cfg.vit, cfg.encoder, cfg.seed)?;
            model.set_trainable(Regime::Full)?;
            run_training(&ctx, model, &train, &val)
        }
        Precision::F64 => {
            let mut model = Model::<f64>::new(cfg.vit, cfg.encoder, cfg.seed)?;
            model.set_trainable(Regime::Full)?;
            run_training(&ctx, model, &train, &val)
        }
    }
}

fn frozen_groups(regime: Regime) -> Vec<&'static str> {
    let trainable = regime.trainable_groups();
    crate::nnet::params::Group::all()
        .iter()
        .filter(|g| !trainable.contains(g))
        .map(|g| g.name())
        .collect()
}

fn finetune_impl<F: Real>(
    cfg: &RunConfig,
    stage1_checkpoint: &Path,
    train: &LoadedDataset,
    val: &LoadedDataset,
) -> Result<TrainOutcome> {
    let (mut model, _, header) = load_checkpoint::<F>(stage1_checkpoint)?;
    if header.vit != cfg.vit {
        return Err(Error::config(format!(
            "checkpoint backbone {:?} does not match config {:?}",
            header.vit, cfg.vit
        )));
    }
    if header.encoder != cfg.encoder {
        return Err(Error::config(format!(
            "checkpoint encoder {} does not match config {}",
            header.encoder.name(),
            cfg.encoder.name()
        )));
    }
    let adapter_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    model.attach_adapters(cfg.adapter, cfg.adapter_config(), adapter_seed)?;

    // Freezing contract: everything outside the regime's groups must be
    // bit-identical after training.
    let frozen = frozen_groups(cfg.adapter);
    let hashes_before: Vec<(String, String)> = crate::nnet::params::Group::all()
        .iter()
        .filter(|g| frozen.contains(&g.name()))
        .map(|g| (g.name().to_string(), model.store.group_sha256(*g)))
        .collect();

    let ctx = TrainContext {
        cfg,
        stage: 2,
        adapter_seed,
    };
    let outcome = run_training(&ctx, model, train, val)?;

    // Verify on the final checkpoint.
    let (reloaded, _, _) = load_checkpoint::<F>(&outcome.checkpoint)?;
    for (name, before) in hashes_before {
        let group = crate::nnet::params::Group::all()
            .into_iter()
            .find(|g| g.name() == name)
            .expect("group name round-trips");
        let after = reloaded.store.group_sha256(group);
        if after != before {
            return Err(Error::invariant(format!(
                "frozen group {name} changed during fine-tuning"
            )));
        }
    }
    Ok(outcome)
}

/// Fine-tunes adapters on a stage-2 dataset from a stage-1 checkpoint.
pub fn finetune_stage2(cfg: &RunConfig, stage1_checkpoint: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.adapter == Regime::Full {
        return Err(Error::config(
            "stage-2 fine-tuning requires an adapter regime, not `full`",
        ));
    }
    let (train, val) = load_pair(cfg)?;
    match cfg.precision {
        Precision::F32 => finetune_impl::<f32>(cfg, stage1_checkpoint, &train, &val),
        Precision::F64 => finetune_impl::<f64>(cfg, stage1_checkpoint, &train, &val),
    }
}

/// Evaluates a checkpoint on a dataset manifest.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    deterministic: bool,
) -> Result<MetricsRecord> {
    let data = load_dataset(manifest)?;
    let header = super::checkpoint::load_checkpoint_header(checkpoint)?;
    let exec = if deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let (accuracy, loss, counts) = match header.precision {
        Precision::F32 => {
            let (model, _, header) = load_checkpoint::<f32>(checkpoint)?;
            let map =
                PanelMap::from_token_grid(model.cfg.grid_side(), header.grid, model.cfg.use_class_token)?;
            let (acc, loss) = evaluate_model(&model, &data, &map, 64, exec)?;
            (acc, loss, model.store.group_counts())
        }
        Precision::F64 => {
            let (model, _, header) = load_checkpoint::<f64>(checkpoint)?;
            let map =
                PanelMap::from_token_grid(model.cfg.grid_side(), header.grid, model.cfg.use_class_token)?;
            let (acc, loss) = evaluate_model(&model, &data, &map, 64, exec)?;
            (acc, loss, model.store.group_counts())
        }
    };
    Ok(MetricsRecord {
        step: 0,
        split: "eval".into(),
        loss,
        accuracy,
        wall_ms: 0,
        param_counts: counts
            .into_iter()
            .map(|(g, n)| (g.name().to_string(), n))
            .collect(),
    })
}
