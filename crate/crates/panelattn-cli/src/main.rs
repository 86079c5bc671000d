//! Command-line harness: dataset generation, two-stage training, evaluation,
//! cost accounting, and report aggregation.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use panelattn::benchgen::{gen_stage1, gen_stage2};
use panelattn::exec::Exec;
use panelattn::harness::{
    count_params, evaluate_checkpoint, finetune_stage2, flops_delta, opro_param_count, report_runs,
    train_stage1, CostInputs, Precision, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "panelattn",
    about = "Panel-relative orthogonal attention operators: benchmark generation, training, and accounting",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flag overrides applied on top of `--config` (or the stage defaults).
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run config TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Positional encoding: ape | rope | liere | comrope.
    #[arg(long)]
    encoder: Option<String>,
    /// Adapter regime: none | lora | lora+opro | lora+opro-bd | lora+apb | lora+asym.
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    opro_rank: Option<usize>,
    /// Panels per canvas side.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force sequential execution and fixed reduction order.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Network precision: f32 | f64.
    #[arg(long)]
    precision: Option<String>,
    /// Stop once validation accuracy reaches this value (0..1).
    #[arg(long)]
    stop_at_acc: Option<f64>,
}

impl Overrides {
    fn into_config(self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => base,
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.encoder {
            cfg.encoder = v.parse()?;
        }
        if let Some(v) = &self.adapter {
            cfg.adapter = v.parse()?;
        }
        if let Some(v) = self.lora_rank {
            cfg.lora_rank = v;
            cfg.lora_alpha = 2.0 * v as f64;
        }
        if let Some(v) = self.opro_rank {
            cfg.opro_rank = v;
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        if let Some(v) = self.out {
            cfg.out_dir = v;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.train_data {
            cfg.train_data = v;
        }
        if let Some(v) = self.val_data {
            cfg.val_data = v;
        }
        if let Some(v) = &self.precision {
            cfg.precision = match v.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => bail!("unknown precision {other} (use f32 or f64)"),
            };
        }
        if let Some(v) = self.stop_at_acc {
            cfg.stop_at_acc = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a benchmark dataset (stage 1: single panels; stage 2: grids).
    GenData {
        #[arg(long)]
        stage: u8,
        /// Grid side for stage 2 (2, 3, or 4).
        #[arg(long, default_value_t = 2)]
        grid: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas side in pixels.
        #[arg(long, default_value_t = 112)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Pretrain a backbone from scratch on a stage-1 dataset.
    TrainStage1 {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune adapters on a stage-2 dataset from a stage-1 checkpoint.
    FinetuneStage2 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Per-group parameter counts for a configuration.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Head dimension for the closed-form operator count.
        #[arg(long)]
        dh: Option<u64>,
        #[arg(long)]
        opro_rank: Option<u64>,
        #[arg(long)]
        panels: Option<u64>,
        #[arg(long)]
        layers: Option<u64>,
    },
    /// Modulation/exponential FLOP accounting.
    Flops {
        #[arg(long)]
        n_panel: u64,
        #[arg(long)]
        n_head: u64,
        #[arg(long)]
        dh: u64,
        #[arg(long)]
        n_tokens: u64,
        #[arg(long)]
        n_layers: u64,
        #[arg(long)]
        n_steps: u64,
    },
    /// Aggregate run directories into a CSV/JSON report.
    Report {
        /// Run directories (each containing run.json).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output prefix (writes PREFIX.csv and PREFIX.json).
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData {
            stage,
            grid,
            count,
            seed,
            size,
            out,
            deterministic,
        } => {
            let exec = if deterministic {
                Exec::Sequential
            } else {
                Exec::Parallel
            };
            let manifest = match stage {
                1 => gen_stage1(count, seed, size, &out, exec)?,
                2 => gen_stage2(count, seed, grid, size, &out, exec)?,
                other => bail!("stage must be 1 or 2, got {other}"),
            };
            println!(
                "wrote {} samples (stage {stage}) to {} [hash {}]",
                manifest.records.len(),
                out.display(),
                &manifest.header.config_hash[..12]
            );
        }
        Cmd::TrainStage1 { overrides } => {
            let cfg = overrides.into_config(RunConfig::stage1_defaults())?;
            let outcome = train_stage1(&cfg)?;
            println!(
                "stage-1 done: best val acc {:.4} at step {}, final val acc {:.4}, checkpoint {}",
                outcome.best_val_acc,
                outcome.best_step,
                outcome.final_val_acc,
                outcome.best_checkpoint.display()
            );
        }
        Cmd::FinetuneStage2 {
            checkpoint,
            overrides,
        } => {
            let cfg = overrides.into_config(RunConfig::stage2_defaults())?;
            let outcome = finetune_stage2(&cfg, &checkpoint)?;
            println!(
                "stage-2 ({}) done: best val acc {:.4} at step {}, checkpoint {}",
                cfg.adapter.name(),
                outcome.best_val_acc,
                outcome.best_step,
                outcome.best_checkpoint.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            data,
            deterministic,
        } => {
            let record = evaluate_checkpoint(&checkpoint, &data, deterministic)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Cmd::CountParams {
            config,
            dh,
            opro_rank,
            panels,
            layers,
        } => {
            if let Some(path) = config {
                let cfg = RunConfig::load(&path)?;
                let counts = count_params(&cfg);
                println!("{}", serde_json::to_string_pretty(&counts)?);
            } else {
                match (dh, opro_rank, panels, layers) {
                    (Some(dh), Some(rank), Some(panels), Some(layers)) => {
                        let count = opro_param_count(dh, rank, panels, layers);
                        println!(
                            "{}",
                            serde_json::json!({
                                "opro": count,
                                "inputs": {"dh": dh, "opro_rank": rank, "panels": panels, "layers": layers},
                            })
                        );
                    }
                    _ => bail!("pass --config FILE, or all of --dh --opro-rank --panels --layers"),
                }
            }
        }
        Cmd::Flops {
            n_panel,
            n_head,
            dh,
            n_tokens,
            n_layers,
            n_steps,
        } => {
            let report = flops_delta(CostInputs {
                n_panel,
                n_head,
                d_h: dh,
                n_tokens,
                n_layers,
                n_steps,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Report { runs, out } => {
            let report = report_runs(&runs)?;
            let (csv_path, json_path) = report.save(&out)?;
            print!("{}", report.to_csv());
            eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
        }
    }
    Ok(())
}
