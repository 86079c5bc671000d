//! Metrics records, run summaries, and multi-run report aggregation.
//!
//! Each run directory holds a `metrics.jsonl` stream (one record per line)
//! and a `run.json` summary. [`report_runs`] aggregates summaries into a
//! per-(encoder, grid, regime) table with multi-seed statistics and deltas
//! against the LoRA baseline, emitted as CSV and JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: u64,
    pub param_counts: BTreeMap<String, u64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::invariant(format!(
                "accuracy {} outside [0, 1]",
                self.accuracy
            )));
        }
        Ok(())
    }
}

/// Appends one metrics line to a JSONL stream.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    record.validate()?;
    let mut line =
        serde_json::to_string(record).map_err(|e| Error::format(format!("metrics encode: {e}")))?;
    line.push('\n');
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Per-run summary written at the end of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: u8,
    pub encoder: String,
    pub regime: String,
    pub grid: usize,
    pub seed: u64,
    pub config_hash: String,
    pub best_val_acc: f64,
    pub best_step: usize,
    pub final_val_acc: f64,
    pub steps_run: usize,
    pub param_counts: BTreeMap<String, u64>,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("summary encode: {e}")))?;
        fs::write(dir.join("run.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("summary decode: {e}")))
    }
}

/// One aggregated row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeRow {
    pub encoder: String,
    pub grid: usize,
    pub regime: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// `mean(regime) − mean(lora)` within the same (encoder, grid) group.
    pub delta_vs_lora: Option<f64>,
    /// Per-seed `acc(regime) − acc(lora)` for seeds present in both.
    pub per_seed_deltas: Vec<(u64, f64)>,
    pub trainable_params: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<RegimeRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Builds the aggregated report from run directories (each containing a
/// `run.json`).
pub fn report_runs(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::param("no run directories given"));
    }
    let mut summaries = Vec::new();
    for dir in run_dirs {
        summaries.push(RunSummary::load(dir)?);
    }

    let mut groups: BTreeMap<(String, usize), Vec<&RunSummary>> = BTreeMap::new();
    for s in &summaries {
        groups.entry((s.encoder.clone(), s.grid)).or_default().push(s);
    }

    let mut rows = Vec::new();
    for ((encoder, grid), members) in groups {
        let mut by_regime: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
        for m in members {
            by_regime.entry(m.regime.clone()).or_default().push(m);
        }
        let lora_by_seed: BTreeMap<u64, f64> = by_regime
            .get("lora")
            .map(|runs| runs.iter().map(|r| (r.seed, r.best_val_acc)).collect())
            .unwrap_or_default();
        let lora_mean = by_regime
            .get("lora")
            .map(|runs| mean(&runs.iter().map(|r| r.best_val_acc).collect::<Vec<_>>()));

        for (regime, runs) in &by_regime {
            let mut runs: Vec<&&RunSummary> = runs.iter().collect();
            runs.sort_by_key(|r| r.seed);
            let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
            let accuracies: Vec<f64> = runs.iter().map(|r| r.best_val_acc).collect();
            let trainable_groups: Vec<&'static str> = regime
                .parse::<crate::nnet::Regime>()
                .map(|r| r.trainable_groups().iter().map(|g| g.name()).collect())
                .unwrap_or_default();
            let trainable: u64 = runs[0]
                .param_counts
                .iter()
                .filter(|(g, _)| trainable_groups.contains(&g.as_str()))
                .map(|(_, n)| *n)
                .sum();
            let delta = if regime == "lora" {
                None
            } else {
                lora_mean.map(|l| mean(&accuracies) - l)
            };
            let per_seed_deltas: Vec<(u64, f64)> = runs
                .iter()
                .filter_map(|r| {
                    lora_by_seed
                        .get(&r.seed)
                        .map(|l| (r.seed, r.best_val_acc - l))
                })
                .collect();
            rows.push(RegimeRow {
                encoder: encoder.clone(),
                grid,
                regime: regime.clone(),
                seeds,
                mean_acc: mean(&accuracies),
                std_acc: std_dev(&accuracies),
                accuracies,
                delta_vs_lora: if regime == "lora" { None } else { delta },
                per_seed_deltas: if regime == "lora" { Vec::new() } else { per_seed_deltas },
                trainable_params: trainable,
            });
        }
    }
    Ok(Report { rows })
}

impl Report {
    /// Comma-separated table, one row per (encoder, grid, regime).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "encoder,grid,regime,n_seeds,mean_acc,std_acc,delta_vs_lora,trainable_params\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{},{}\n",
                r.encoder,
                r.grid,
                r.regime,
                r.seeds.len(),
                r.mean_acc,
                r.std_acc,
                r.delta_vs_lora
                    .map(|d| format!("{d:.4}"))
                    .unwrap_or_default(),
                r.trainable_params,
            ));
        }
        out
    }

    pub fn save(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = prefix.with_extension("csv");
        let json_path = prefix.with_extension("json");
        if let Some(dir) = prefix.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&csv_path, self.to_csv())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("report encode: {e}")))?;
        fs::write(&json_path, json)?;
        Ok((csv_path, json_path))
    }
}
