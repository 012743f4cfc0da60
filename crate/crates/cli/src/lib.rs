//! Command-line front end: `simulate`, `collect`, `decode-bench` and
//! `codebook-stats`.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use airfeel::feel_sim::AggregationMode;
use airfeel::harness::{self, ExperimentConfig};
use airfeel::par::{self, Exec};

/// Exit code for invalid arguments or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "airfeel",
    version,
    about = "Digital over-the-air federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the federated loop at every SNR point and write metrics.
    Simulate(Common),
    /// Write the perfect-aggregation training dataset.
    Collect(Common),
    /// Decoder-only recovery sweep over codebook setups.
    DecodeBench(Common),
    /// Coherence and singular-value report of the codebooks.
    CodebookStats(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Pa,
    Baseline,
    Learnt,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated SNR list in dB (decode-bench uses the first value).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn resolve(&self, bench: bool) -> Result<(ExperimentConfig, Exec)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(snr) = &self.snr {
            if bench {
                cfg.bench.snr_db = *snr.first().context("--snr needs at least one value")?;
            } else {
                cfg.snr_db = snr.clone();
            }
        }
        if let Some(mode) = self.mode {
            cfg.mode = match mode {
                Mode::Pa => AggregationMode::Pa,
                Mode::Baseline => AggregationMode::Baseline,
                Mode::Learnt => AggregationMode::Learnt,
            };
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().context("invalid configuration")?;
        let exec = if self.sequential {
            Exec::Sequential
        } else {
            Exec::best()
        };
        Ok((cfg, exec))
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate(c) => {
            let (cfg, exec) = c.resolve(false).map_err(Usage)?;
            let (_, summary) = harness::simulate(&cfg, exec)?;
            println!("mode {} -> {}", cfg.mode.name(), cfg.out.display());
            println!(
                "{:>8} {:>10} {:>8} {:>10} {:>7}",
                "snr_db", "final_acc", "ka_mae", "recovery", "failed"
            );
            for p in summary {
                println!(
                    "{:>8} {:>10.4} {:>8.3} {:>10.3} {:>7}",
                    p.snr_db, p.final_accuracy, p.final_ka_mae, p.mean_frag_recovery, p.failed_rounds
                );
            }
        }
        Command::Collect(c) => {
            let (cfg, exec) = c.resolve(false).map_err(Usage)?;
            let (dir, s) = harness::collect(&cfg, exec)?;
            println!(
                "{} rounds -> {} (train {}, val {}, test {})",
                s.rounds,
                dir.display(),
                s.train,
                s.val,
                s.test
            );
        }
        Command::DecodeBench(c) => {
            let (cfg, exec) = c.resolve(true).map_err(Usage)?;
            let rows = harness::decode_bench(&cfg, exec)?;
            println!("decode-bench at {} dB -> {}", cfg.bench.snr_db, cfg.out.display());
            println!(
                "{:<7} {:<12} {:<10} {:<8} {:>9} {:>7} {:>7}",
                "code", "init", "ordering", "decoder", "recovery", "f1", "ka_mae"
            );
            for r in rows {
                println!(
                    "{:<7} {:<12} {:<10} {:<8} {:>9.3} {:>7.3} {:>7.3}",
                    r.codebook,
                    r.init.name(),
                    if r.ordering { "popularity" } else { "none" },
                    r.decoder,
                    r.frag_recovery,
                    r.support_f1,
                    r.ka_mae
                );
            }
        }
        Command::CodebookStats(c) => {
            let (cfg, _) = c.resolve(false).map_err(Usage)?;
            for s in harness::codebook_stats(&cfg)? {
                let r = s.report;
                println!(
                    "{:<22} max|xcorr| {:.4} mean {:.4} popular mean {:.4}  sigma [{:.4}, {:.4}] ratio {:.4}",
                    s.label,
                    r.max_abs_xcorr,
                    r.mean_abs_xcorr,
                    r.popular_mean_abs_xcorr,
                    r.sigma_min,
                    r.sigma_max,
                    r.condition
                );
            }
        }
    }
    Ok(())
}

/// Marks configuration errors so they map to [`EXIT_USAGE`].
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    par::init_threads_from_env();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("usage error: {e:#}");
                EXIT_USAGE
            } else {
                eprintln!("error: {e:#}");
                EXIT_FAILURE
            }
        }
    }
}
