//! Decoder-only recovery benchmark over codebook setups.
//!
//! Activity vectors come from the dataset test split or, without a dataset,
//! from a short perfect-aggregation run. The data-driven fixed codebook is
//! calibrated on vectors that are not decoded. Every row decodes the same vectors
//! with the same noise draws. With ordering off, each round's codewords are
//! relabelled by a random permutation and the decoder gets a uniform prior,
//! which removes everything the popularity ordering provides.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::channel::{transmit, ActivityVector, ChannelConfig};
use crate::decoder::{decode, DecoderParams};
use crate::feel_sim::export::Split;
use crate::feel_sim::{
    decoder_sigma2_init, read_dataset, smoothed_prior, support_f1, DatasetSample, Receiver, Simulation,
};
use crate::par::{self, Exec};
use crate::rng::{self, tag};
use crate::ura_codebook::{init_base, synthesize, InitScheme, ShearMatrix, UraCodebook};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `learnt` or `fixed`.
    pub codebook: String,
    pub init: InitScheme,
    pub ordering: bool,
    /// `learnt` or `baseline`.
    pub decoder: String,
    pub trials: usize,
    pub frag_recovery: f64,
    pub support_f1: f64,
    pub ka_mae: f64,
}

pub const BENCH_HEADER: &str = "codebook,init,ordering,decoder,trials,frag_recovery,support_f1,ka_mae";

/// Decoded activity vectors and the disjoint calibration set used by the
/// data-driven fixed codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSamples {
    pub eval: Vec<DatasetSample>,
    pub calibration: Vec<DatasetSample>,
}

fn read_split(cfg: &ExperimentConfig, dir: &Path, split: Split) -> Result<Vec<DatasetSample>> {
    let (header, samples) = read_dataset(&dir.join(split.file_name()))?;
    if header.n != cfg.feel.n || header.d != cfg.d {
        return Err(Error::config(
            "dataset",
            format!(
                "dataset has n = {}, d = {}; config has n = {}, d = {}",
                header.n, header.d, cfg.feel.n, cfg.d
            ),
        ));
    }
    Ok(samples)
}

/// Benchmark samples: the dataset test split (calibrated on the train split)
/// or, without a dataset, a perfect-aggregation run split at random into at
/// most `cfg.bench.trials` evaluation vectors and the rest for calibration.
pub fn bench_samples(cfg: &ExperimentConfig, exec: Exec) -> Result<BenchSamples> {
    let mut rng = rng::stream(cfg.seed, &[tag::BENCH, 0]);
    let mut pick = |pool: &[DatasetSample], k: usize| -> (Vec<DatasetSample>, Vec<DatasetSample>) {
        let mut chosen = vec![false; pool.len()];
        for i in index::sample(&mut rng, pool.len(), k) {
            chosen[i] = true;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (s, c) in pool.iter().zip(chosen) {
            if c {
                a.push(s.clone())
            } else {
                b.push(s.clone())
            }
        }
        (a, b)
    };
    let out = match &cfg.dataset {
        Some(dir) => {
            let test = read_split(cfg, dir, Split::Test)?;
            let calibration = read_split(cfg, dir, Split::Train)?;
            let k = cfg.bench.trials.min(test.len());
            BenchSamples {
                eval: pick(&test, k).0,
                calibration,
            }
        }
        None => {
            let mut sim = Simulation::new(cfg.feel.clone(), Receiver::Pa, f64::INFINITY, cfg.seed)?.with_exec(exec);
            let mut pool = Vec::new();
            for _ in 0..cfg.bench.pa_rounds {
                let rec = sim.run_round()?;
                if rec.round < cfg.bench.skip_rounds {
                    continue;
                }
                for frag in &rec.x {
                    let mut x = vec![0u32; cfg.feel.n];
                    for &(i, c) in frag {
                        x[i as usize] = c;
                    }
                    pool.push(DatasetSample {
                        round: rec.round,
                        k_a: rec.k_a,
                        pi: rec.pi.clone(),
                        x,
                    });
                }
            }
            let k = cfg.bench.trials.min(pool.len() / 2);
            let (eval, calibration) = pick(&pool, k);
            BenchSamples { eval, calibration }
        }
    };
    if out.eval.is_empty() {
        return Err(Error::Empty("benchmark samples"));
    }
    if out.calibration.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    Ok(out)
}

/// Random relabelling of the codewords of one round.
fn round_permutation(seed: u64, round: usize, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[tag::BENCH, 1, round as u64]));
    perm
}

#[derive(Debug, Clone, Copy, Default)]
struct TrialOutcome {
    exact: bool,
    f1: f64,
    ka_err: f64,
}

/// Recovery metrics of one decoder/codebook setup.
pub fn evaluate(
    cfg: &ExperimentConfig,
    c: &UraCodebook,
    params: &DecoderParams,
    samples: &[DatasetSample],
    ordering: bool,
    popularity_prior: bool,
    exec: Exec,
) -> (f64, f64, f64) {
    let n = c.n();
    let snr = cfg.bench.snr_db;
    let sigma2_0 = decoder_sigma2_init(snr, cfg.feel.ka_min, cfg.feel.ka_max, c.d());
    let uniform = vec![1.0 / n as f64; n];
    let outcomes = par::map_indexed(exec, samples.len(), |i| {
        let s = &samples[i];
        let (x, prior) = if ordering {
            let prior = if popularity_prior {
                smoothed_prior(&s.pi, cfg.feel.prior_smoothing)
            } else {
                uniform.clone()
            };
            (ActivityVector::new(s.x.clone()), prior)
        } else {
            let perm = round_permutation(cfg.seed, s.round, n);
            let mut counts = vec![0u32; n];
            for (j, &v) in s.x.iter().enumerate() {
                counts[perm[j]] = v;
            }
            (ActivityVector::new(counts), uniform.clone())
        };
        let ch = ChannelConfig {
            snr_db: snr,
            seed: rng::derive(cfg.seed, &[tag::BENCH, 2, i as u64]),
        };
        let decoded = transmit(&x, c, &ch).and_then(|y| decode(&y, c, &prior, params, sigma2_0, None));
        match decoded {
            Ok(out) => TrialOutcome {
                exact: out.x == x,
                f1: support_f1(&x, &out.x),
                ka_err: (out.k_hat - x.k_a() as f64).abs(),
            },
            Err(_) => TrialOutcome {
                ka_err: x.k_a() as f64,
                ..Default::default()
            },
        }
    });
    let t = outcomes.len().max(1) as f64;
    (
        outcomes.iter().filter(|o| o.exact).count() as f64 / t,
        outcomes.iter().map(|o| o.f1).sum::<f64>() / t,
        outcomes.iter().map(|o| o.ka_err).sum::<f64>() / t,
    )
}

/// Runs every benchmark row: each learnt weight file with ordering on and
/// off, and each fixed initial codebook with the baseline decoder and (when
/// a main weight file is configured) the learnt decoder, ordering on and off.
pub fn run_bench(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<BenchRow>> {
    let BenchSamples {
        eval: samples,
        calibration,
    } = bench_samples(cfg, exec)?;
    let mut learnt = Vec::new();
    for path in cfg.weights.iter().chain(&cfg.bench.extra_weights) {
        learnt.push(cfg.load_weight_file(path)?);
    }
    let mut rows = Vec::new();
    let mut push = |codebook: &str, init, ordering, decoder: &str, m: (f64, f64, f64)| {
        rows.push(BenchRow {
            codebook: codebook.into(),
            init,
            ordering,
            decoder: decoder.into(),
            trials: samples.len(),
            frag_recovery: m.0,
            support_f1: m.1,
            ka_mae: m.2,
        })
    };
    for wf in &learnt {
        let c = wf.codebook()?;
        let params = wf.params();
        for ordering in [true, false] {
            let m = evaluate(cfg, &c, &params, &samples, ordering, true, exec);
            push("learnt", wf.header.init_scheme, ordering, "learnt", m);
        }
    }
    let calibration: Vec<Vec<f64>> = calibration
        .iter()
        .map(|s| s.x.iter().map(|&v| v as f64).collect())
        .collect();
    let baseline = DecoderParams::baseline(cfg.baseline_layers);
    for scheme in InitScheme::ALL {
        let base = init_base(cfg.feel.n, cfg.d, scheme, cfg.seed, Some(&calibration))?;
        let c = synthesize(&base, &ShearMatrix::identity(cfg.d))?;
        for ordering in [true, false] {
            let m = evaluate(cfg, &c, &baseline, &samples, ordering, false, exec);
            push("fixed", scheme, ordering, "baseline", m);
            if let Some(wf) = learnt.first() {
                let m = evaluate(cfg, &c, &wf.params(), &samples, ordering, true, exec);
                push("fixed", scheme, ordering, "learnt", m);
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.codebook,
            r.init.name(),
            if r.ordering { "popularity" } else { "none" },
            r.decoder,
            r.trials,
            r.frag_recovery,
            r.support_f1,
            r.ka_mae
        )?;
    }
    w.flush()?;
    Ok(())
}
