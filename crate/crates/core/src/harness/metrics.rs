//! Metrics CSV, round transcripts and run summaries.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::feel_sim::{MetricsRow, RunResult};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "snr_db,round,test_acc,ka_mae,frag_recovery,sigma2_hat";

pub fn write_metrics_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for run in runs {
        for r in &run.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.snr_db, r.round, r.test_acc, r.ka_mae, r.frag_recovery, r.sigma2_hat
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or(Error::Empty("metrics file"))??;
    if header != METRICS_HEADER {
        return Err(Error::Parse(format!("unexpected metrics header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!(
                "metrics row {i}: expected 6 fields, found {}",
                f.len()
            )));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse()
                .map_err(|_| Error::Parse(format!("metrics row {i}: bad number `{}`", f[k])))
        };
        rows.push(MetricsRow {
            snr_db: num(0)?,
            round: f[1]
                .parse()
                .map_err(|_| Error::Parse(format!("metrics row {i}: bad round `{}`", f[1])))?,
            test_acc: num(2)?,
            ka_mae: num(3)?,
            frag_recovery: num(4)?,
            sigma2_hat: num(5)?,
        });
    }
    Ok(rows)
}

/// One JSON line per round record, tagged with its SNR.
pub fn write_transcripts(path: &Path, runs: &[RunResult]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        snr_db: f64,
        #[serde(flatten)]
        record: &'a crate::feel_sim::RoundRecord,
    }
    let mut w = BufWriter::new(File::create(path)?);
    for run in runs {
        for record in &run.records {
            let line = Line {
                snr_db: run.snr_db,
                record,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::Parse(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub snr_db: f64,
    pub final_accuracy: f64,
    pub final_ka_mae: f64,
    pub mean_frag_recovery: f64,
    pub failed_rounds: usize,
}

impl PointSummary {
    pub fn of(run: &RunResult) -> Self {
        let rounds = run.rows.len().max(1) as f64;
        Self {
            snr_db: run.snr_db,
            final_accuracy: run.final_accuracy(),
            final_ka_mae: run.final_ka_mae(),
            mean_frag_recovery: run.rows.iter().map(|r| r.frag_recovery).sum::<f64>() / rounds,
            failed_rounds: run.failed_rounds(),
        }
    }
}
