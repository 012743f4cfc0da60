//! Reproducible experiment entry points behind the CLI.
//!
//! Every command writes `resolved_config.toml` into the output directory
//! next to its results.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod weights;

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use bench::{bench_samples, run_bench, write_bench_csv, BenchRow, BenchSamples};
pub use config::{resolved_config, BenchConfig, ExperimentConfig};
pub use metrics::{read_metrics_csv, write_metrics_csv, write_transcripts, PointSummary, METRICS_HEADER};
pub use weights::{load_weights, WeightFile, WEIGHTS_VERSION};

use crate::feel_sim::{collect_dataset, run_experiment, CollectSummary, RunResult};
use crate::par::Exec;
use crate::ura_codebook::{coherence_stats, init_base, synthesize, CoherenceReport, InitScheme, ShearMatrix};
use crate::{Error, Result};

fn prepare(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("resolved_config.toml"), resolved_config(cfg, command)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs every SNR point and writes `metrics.csv`, `rounds.jsonl` and
/// `summary.json`.
pub fn simulate(cfg: &ExperimentConfig, exec: Exec) -> Result<(Vec<RunResult>, Vec<PointSummary>)> {
    prepare(cfg, "simulate")?;
    let receiver = cfg.receiver()?;
    let runs = run_experiment(&cfg.feel, &receiver, &cfg.snr_db, cfg.seed, exec)?;
    write_metrics_csv(&cfg.out.join("metrics.csv"), &runs)?;
    write_transcripts(&cfg.out.join("rounds.jsonl"), &runs)?;
    let summary: Vec<PointSummary> = runs.iter().map(PointSummary::of).collect();
    write_json(cfg.out.join("summary.json"), &summary)?;
    Ok((runs, summary))
}

/// Writes the training dataset into `cfg.dataset` (default `<out>/dataset`).
pub fn collect(cfg: &ExperimentConfig, exec: Exec) -> Result<(PathBuf, CollectSummary)> {
    prepare(cfg, "collect")?;
    let dir = cfg.dataset.clone().unwrap_or_else(|| cfg.out.join("dataset"));
    let summary = collect_dataset(&cfg.feel, cfg.d, cfg.seed, &dir, exec)?;
    write_json(cfg.out.join("collect_summary.json"), &summary)?;
    Ok((dir, summary))
}

/// Writes `decode_bench.csv`.
pub fn decode_bench(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<BenchRow>> {
    prepare(cfg, "decode-bench")?;
    let rows = run_bench(cfg, exec)?;
    write_bench_csv(&cfg.out.join("decode_bench.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub label: String,
    pub report: CoherenceReport,
}

/// Coherence report of the configured weight file (if any) and of the fixed
/// Gaussian and Bernoulli codebooks; writes `codebook_stats.json`.
///
/// Codebooks are popularity ordered, so the popular subset is the leading
/// `top_fraction` of rows.
pub fn codebook_stats(cfg: &ExperimentConfig) -> Result<Vec<CodebookStats>> {
    prepare(cfg, "codebook-stats")?;
    let mut out = Vec::new();
    if let Some(path) = &cfg.weights {
        let wf = WeightFile::read(path)?;
        out.push(CodebookStats {
            label: format!("learnt/{}", wf.header.init_scheme.name()),
            report: coherence_stats(&wf.codebook()?, None, cfg.top_fraction)?,
        });
    }
    for scheme in [InitScheme::Gaussian, InitScheme::Bernoulli] {
        let base = init_base(cfg.feel.n, cfg.d, scheme, cfg.seed, None)?;
        let c = synthesize(&base, &ShearMatrix::identity(cfg.d))?;
        out.push(CodebookStats {
            label: format!("fixed/{}", scheme.name()),
            report: coherence_stats(&c, None, cfg.top_fraction)?,
        });
    }
    write_json(cfg.out.join("codebook_stats.json"), &out)?;
    Ok(out)
}
