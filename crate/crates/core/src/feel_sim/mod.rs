//! The federated loop: partitioning, local SGD, BS-side codebook
//! construction, fragment transmission and decoding, and aggregation.
//!
//! One [`Simulation`] owns the global model, the per-device error-feedback
//! state and the data split for a single SNR point. Rounds are sequential;
//! devices and fragments inside a round are processed data-parallel, and all
//! randomness is keyed by `(seed, round, device | fragment)`, so the outcome
//! does not depend on the execution strategy.

pub mod data;
pub mod export;
mod local;
pub mod model;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{noise_variance, transmit, ActivityVector, ChannelConfig};
use crate::decoder::{decode, DecoderParams};
use crate::par::{self, Exec};
use crate::quantizer::{
    apply_error_feedback, build_codebook, fragment, fragment_count, popularity_order, ErrorAccumulator, QuantCodebook,
};
use crate::rng::{self, tag};
use crate::ura_codebook::UraCodebook;
use crate::{Error, Result};

pub use data::{partition_dataset, Dataset, DeviceShard, SyntheticTask};
pub use export::{collect_dataset, read_dataset, CollectSummary, DatasetHeader, DatasetSample, DATASET_VERSION};
pub use local::{local_train, LocalSgd};
pub use model::{Mlp, Objective};

/// How the base station learns the per-fragment activity vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Perfect aggregation: activity vectors arrive exactly.
    Pa,
    /// Fixed Gaussian codebook, un-learnt decoder, uniform prior.
    Baseline,
    /// Learnt codebook and decoder with the popularity prior.
    Learnt,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Pa => "pa",
            AggregationMode::Baseline => "baseline",
            AggregationMode::Learnt => "learnt",
        }
    }
}

/// Receiver used by a simulation.
#[derive(Debug, Clone)]
pub enum Receiver {
    Pa,
    Decoder {
        codebook: UraCodebook,
        params: DecoderParams,
        /// Feed the broadcast popularity as the decoder's prior instead of a
        /// uniform one.
        popularity_prior: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeelConfig {
    pub task: SyntheticTask,
    /// Hidden width of the global classifier.
    pub hidden: usize,
    /// Total devices `K_t` (the BS holds one extra shard).
    pub devices: usize,
    pub iid_fraction: f64,
    /// Label-sorted shards dealt to each device.
    pub shards_per_device: usize,
    pub local_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eta_global: f64,
    pub ka_min: u32,
    pub ka_max: u32,
    pub rounds: usize,
    /// Quantisation codebook size, equal to the number of URA codewords.
    pub n: usize,
    pub fragment_len: usize,
    pub kmeans_iters: usize,
    /// Independent local runs the BS pools for k-means.
    pub bs_local_runs: usize,
    /// The BS keeps its own error-feedback residual and adds it to the
    /// fragments it clusters.
    pub bs_error_feedback: bool,
    /// Bypass VQ and send raw updates (PA only).
    pub exact_updates: bool,
    /// Weight of the uniform component mixed into the popularity prior.
    pub prior_smoothing: f64,
    /// Keep the ordered codebook in every round record.
    pub keep_codebooks: bool,
}

impl Default for FeelConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::default(),
            hidden: 64,
            devices: 40,
            iid_fraction: 0.2,
            shards_per_device: 1,
            local_steps: 5,
            batch: 32,
            lr: 0.15,
            eta_global: 1.0,
            ka_min: 7,
            ka_max: 13,
            rounds: 80,
            n: 256,
            fragment_len: 20,
            kmeans_iters: 20,
            bs_local_runs: 4,
            bs_error_feedback: true,
            exact_updates: false,
            prior_smoothing: 0.05,
            keep_codebooks: false,
        }
    }
}

impl FeelConfig {
    pub fn model(&self) -> Mlp {
        Mlp {
            inputs: self.task.features,
            hidden: self.hidden,
            classes: self.task.classes,
        }
    }

    pub fn fragments(&self) -> usize {
        fragment_count(self.model().num_params(), self.fragment_len)
    }

    fn sgd(&self) -> LocalSgd {
        LocalSgd {
            steps: self.local_steps,
            batch: self.batch,
            lr: self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.ka_min == 0 || self.ka_min > self.ka_max {
            return bad("device count range must satisfy 1 <= ka_min <= ka_max");
        }
        if self.ka_max as usize > self.devices {
            return bad("ka_max exceeds the number of devices");
        }
        if self.n == 0 || self.fragment_len == 0 || self.hidden == 0 {
            return bad("n, fragment_len and hidden must be positive");
        }
        if self.bs_local_runs == 0 {
            return bad("bs_local_runs must be positive");
        }
        if !(self.eta_global.is_finite() && self.lr.is_finite()) {
            return bad("learning rates must be finite");
        }
        if !(0.0..=1.0).contains(&self.prior_smoothing) {
            return bad("prior_smoothing outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub arch: Mlp,
    pub w: Vec<f64>,
}

/// `(codeword, count)` pairs of a non-zero activity vector.
pub type SparseCounts = Vec<(u32, u32)>;

pub fn sparse(x: &ActivityVector) -> SparseCounts {
    x.counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i as u32, c))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Fraction of fragments whose decoded count vector equals the truth.
    pub frag_recovery: f64,
    pub support_f1: f64,
    /// Mean over fragments of `|K̂_a - K_a|`, unrounded.
    pub ka_mae: f64,
    /// Round-level device count used for the `1/K̂_a` scaling.
    pub k_hat: u32,
    pub sigma2_hat: f64,
    /// `‖ŝ - s‖ / ‖s‖` between the received and the exact aggregate.
    pub update_error: f64,
}

/// Transcript of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub k_a: u32,
    pub active: Vec<usize>,
    /// True activity vector per fragment position.
    pub x: Vec<SparseCounts>,
    /// Popularity of the ordered quantisation codebook.
    pub pi: Vec<f64>,
    pub codebook: Option<QuantCodebook>,
    pub channel_seed: u64,
    pub metrics: RecoveryMetrics,
    pub test_acc: f64,
    /// Set when decoding failed and the global update was skipped.
    pub failed: Option<String>,
}

/// Per-device running sums used to audit error feedback.
#[derive(Debug, Clone)]
struct FeedbackLedger {
    sent: Vec<f64>,
    delta: Vec<f64>,
}

pub struct Simulation {
    cfg: FeelConfig,
    receiver: Receiver,
    snr_db: f64,
    seed: u64,
    exec: Exec,
    train: Dataset,
    test: Dataset,
    shards: Vec<DeviceShard>,
    bs_shard: DeviceShard,
    bs_acc: ErrorAccumulator,
    model: GlobalModel,
    acc: Vec<ErrorAccumulator>,
    ledger: Vec<FeedbackLedger>,
    round: usize,
}

struct DeviceUpload {
    delta: Vec<f64>,
    indices: Vec<usize>,
    sent: Vec<f64>,
    acc: ErrorAccumulator,
}

impl Simulation {
    pub fn new(cfg: FeelConfig, receiver: Receiver, snr_db: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let Receiver::Decoder { codebook, .. } = &receiver {
            if codebook.n() != cfg.n {
                return Err(Error::shape("URA codebook rows", cfg.n, codebook.n()));
            }
            if cfg.exact_updates {
                return Err(Error::InvalidArgument("exact updates need the PA receiver".into()));
            }
        }
        let (train, test) = cfg.task.generate(seed);
        let mut shards = partition_dataset(
            &train.labels,
            cfg.devices + 1,
            cfg.iid_fraction,
            cfg.shards_per_device,
            seed,
        )?;
        let bs_shard = shards.pop().expect("devices + 1 shards");
        let arch = cfg.model();
        let w = arch.init(seed);
        let len = w.len();
        Ok(Self {
            receiver,
            snr_db,
            seed,
            exec: Exec::best(),
            train,
            test,
            shards,
            bs_acc: ErrorAccumulator::zeros(cfg.devices, len),
            bs_shard,
            model: GlobalModel { arch, w },
            acc: (0..cfg.devices).map(|k| ErrorAccumulator::zeros(k, len)).collect(),
            ledger: (0..cfg.devices)
                .map(|_| FeedbackLedger {
                    sent: vec![0.0; len],
                    delta: vec![0.0; len],
                })
                .collect(),
            round: 0,
            cfg,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn config(&self) -> &FeelConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn test_accuracy(&self) -> f64 {
        self.model.arch.accuracy(&self.model.w, &self.test)
    }

    pub fn error_accumulator(&self, device: usize) -> &ErrorAccumulator {
        &self.acc[device]
    }

    /// `max |Σ_t Q(s_k^t) - Σ_t Δw_k^t - e_k^0 + e_k^T|` for device `k`.
    pub fn telescoping_residual(&self, device: usize) -> f64 {
        let l = &self.ledger[device];
        let e = self.acc[device].residual();
        l.sent
            .iter()
            .zip(&l.delta)
            .zip(e)
            .map(|((q, d), e)| (q - d + e).abs())
            .fold(0.0, f64::max)
    }

    /// BS side: pooled local runs (plus the BS's own error-feedback residual,
    /// so the pool looks like what devices will quantise), k-means and
    /// popularity ordering. Returns the BS residual for the next round.
    fn quant_codebook(&self, t: usize) -> Result<(QuantCodebook, ErrorAccumulator)> {
        let arch = self.model.arch;
        let sgd = self.cfg.sgd();
        let runs = par::map_indexed(self.exec, self.cfg.bs_local_runs, |r| {
            let seed = rng::derive(self.seed, &[t as u64, 1 << 32 | r as u64]);
            local_train(&arch, &self.model.w, &self.train, &self.bs_shard, &sgd, seed)
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let mut pool = Vec::new();
        for dw in &runs {
            let s: Vec<f64> = dw.iter().zip(self.bs_acc.residual()).map(|(a, e)| a + e).collect();
            pool.extend(fragment(&s, self.cfg.fragment_len));
        }
        let q = build_codebook(
            &pool,
            self.cfg.fragment_len,
            self.cfg.n,
            rng::derive(self.seed, &[tag::KMEANS, t as u64]),
            self.cfg.kmeans_iters,
        )?;
        let q = popularity_order(&q, &pool)?;
        let bs_acc = if self.cfg.bs_error_feedback {
            apply_error_feedback(&runs[0], &self.bs_acc, &q)?.1
        } else {
            self.bs_acc.clone()
        };
        Ok((q, bs_acc))
    }

    fn decoder_prior(&self, q: Option<&QuantCodebook>, use_popularity: bool) -> Vec<f64> {
        let n = self.cfg.n;
        match q {
            Some(q) if use_popularity => smoothed_prior(q.popularity(), self.cfg.prior_smoothing),
            _ => vec![1.0 / n as f64; n],
        }
    }

    /// Runs one round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let cfg = &self.cfg;
        let arch = self.model.arch;
        let num_params = self.model.w.len();
        let q = if cfg.exact_updates {
            None
        } else {
            let (q, bs_acc) = self.quant_codebook(t)?;
            self.bs_acc = bs_acc;
            Some(q)
        };
        let cfg = &self.cfg;

        let mut g = rng::stream(self.seed, &[tag::ACTIVE_SET, t as u64]);
        let k_a = g.random_range(cfg.ka_min..=cfg.ka_max);
        let mut active = index::sample(&mut g, cfg.devices, k_a as usize).into_vec();
        active.sort_unstable();

        let sgd = cfg.sgd();
        let local_seed = rng::derive(self.seed, &[t as u64]);
        let uploads = par::try_map_indexed(self.exec, active.len(), |a| -> Result<DeviceUpload> {
            let k = active[a];
            let delta = local_train(&arch, &self.model.w, &self.train, &self.shards[k], &sgd, local_seed)?;
            match &q {
                Some(q) => {
                    let (indices, acc) = apply_error_feedback(&delta, &self.acc[k], q)?;
                    let mut sent = q.reconstruct(&indices);
                    sent.truncate(num_params);
                    Ok(DeviceUpload {
                        delta,
                        indices,
                        sent,
                        acc,
                    })
                }
                None => {
                    let sent: Vec<f64> = delta.iter().zip(self.acc[k].residual()).map(|(d, e)| d + e).collect();
                    Ok(DeviceUpload {
                        delta,
                        indices: Vec::new(),
                        sent,
                        acc: ErrorAccumulator::zeros(k, num_params),
                    })
                }
            }
        })?;

        let channel_seed = rng::derive(self.seed, &[tag::CHANNEL, t as u64]);
        let mut record = RoundRecord {
            round: t,
            k_a,
            active: active.clone(),
            x: Vec::new(),
            pi: q.as_ref().map(|q| q.popularity().to_vec()).unwrap_or_default(),
            codebook: q.clone().filter(|_| cfg.keep_codebooks),
            channel_seed,
            metrics: RecoveryMetrics {
                frag_recovery: 1.0,
                support_f1: 1.0,
                k_hat: k_a,
                ..Default::default()
            },
            test_acc: 0.0,
            failed: None,
        };

        let aggregate = match &q {
            None => {
                let mut s = vec![0.0; num_params];
                for up in &uploads {
                    for (a, b) in s.iter_mut().zip(&up.sent) {
                        *a += b;
                    }
                }
                s.iter_mut().for_each(|v| *v /= k_a as f64);
                Some(s)
            }
            Some(q) => {
                let frags = fragment_count(num_params, cfg.fragment_len);
                let truth: Vec<ActivityVector> = (0..frags)
                    .map(|j| ActivityVector::from_indices(cfg.n, uploads.iter().map(|u| u.indices[j])))
                    .collect();
                record.x = truth.iter().map(sparse).collect();
                self.receive(q, &truth, channel_seed, &mut record)
            }
        };

        for (up, &k) in uploads.into_iter().zip(&active) {
            let l = &mut self.ledger[k];
            for (a, b) in l.sent.iter_mut().zip(&up.sent) {
                *a += b;
            }
            for (a, b) in l.delta.iter_mut().zip(&up.delta) {
                *a += b;
            }
            self.acc[k] = up.acc;
        }
        if let Some(s) = aggregate {
            let eta = self.cfg.eta_global;
            for (w, v) in self.model.w.iter_mut().zip(&s) {
                *w += eta * v;
            }
        }
        record.test_acc = self.test_accuracy();
        self.round += 1;
        Ok(record)
    }

    /// Decodes every fragment and returns the de-quantised aggregate, or
    /// `None` (with `record.failed` set) if any fragment failed to decode.
    fn receive(
        &self,
        q: &QuantCodebook,
        truth: &[ActivityVector],
        channel_seed: u64,
        record: &mut RoundRecord,
    ) -> Option<Vec<f64>> {
        let num_params = self.model.w.len();
        let k_a = record.k_a;
        let decoded: Vec<(ActivityVector, f64, f64)> = match &self.receiver {
            Receiver::Pa => truth.iter().map(|x| (x.clone(), k_a as f64, 0.0)).collect(),
            Receiver::Decoder {
                codebook,
                params,
                popularity_prior,
            } => {
                let pi0 = self.decoder_prior(Some(q), *popularity_prior);
                let sigma2_0 = decoder_sigma2_init(self.snr_db, self.cfg.ka_min, self.cfg.ka_max, codebook.d());
                let results = par::map_indexed(self.exec, truth.len(), |j| -> Result<_> {
                    let ch = ChannelConfig {
                        snr_db: self.snr_db,
                        seed: rng::derive(channel_seed, &[j as u64]),
                    };
                    let y = transmit(&truth[j], codebook, &ch)?;
                    let out = decode(&y, codebook, &pi0, params, sigma2_0, None)?;
                    Ok((out.x, out.k_hat, out.sigma2))
                });
                let mut ok = Vec::with_capacity(results.len());
                for (j, r) in results.into_iter().enumerate() {
                    match r {
                        Ok(v) => ok.push(v),
                        Err(e) => {
                            record.failed = Some(format!("round {} fragment {j}: {e}", record.round));
                            record.metrics = RecoveryMetrics::default();
                            return None;
                        }
                    }
                }
                ok
            }
        };

        let frags = truth.len() as f64;
        let mut exact = 0usize;
        let mut f1 = 0.0;
        let mut mae = 0.0;
        let mut sigma2 = 0.0;
        let mut totals = 0.0;
        for (x, (xh, k_hat, s2)) in truth.iter().zip(&decoded) {
            exact += usize::from(x == xh);
            f1 += support_f1(x, xh);
            mae += (k_hat - k_a as f64).abs();
            sigma2 += s2;
            totals += xh.k_a() as f64;
        }
        let k_hat = ((totals / frags).round() as u32).max(1);

        let mut s = Vec::with_capacity(truth.len() * q.dim());
        let mut exact_s = Vec::with_capacity(truth.len() * q.dim());
        for ((xh, _, _), x) in decoded.iter().zip(truth) {
            s.extend(q.dequantize(xh));
            exact_s.extend(q.dequantize(x));
        }
        s.truncate(num_params);
        s.iter_mut().for_each(|v| *v /= k_hat as f64);
        let (mut err, mut norm) = (0.0, 0.0);
        for (a, b) in s.iter().zip(&exact_s) {
            let b = b / k_a as f64;
            err += (a - b) * (a - b);
            norm += b * b;
        }
        record.metrics = RecoveryMetrics {
            frag_recovery: exact as f64 / frags,
            support_f1: f1 / frags,
            ka_mae: mae / frags,
            k_hat,
            sigma2_hat: sigma2 / frags,
            update_error: if norm > 0.0 { (err / norm).sqrt() } else { err.sqrt() },
        };
        Some(s)
    }
}

/// `(1 - s) π + s / n`: keeps every codeword reachable under the prior.
pub fn smoothed_prior(pi: &[f64], smoothing: f64) -> Vec<f64> {
    let n = pi.len() as f64;
    pi.iter().map(|p| (1.0 - smoothing) * p + smoothing / n).collect()
}

/// Lower bound on the decoder's initial noise variance.
const SIGMA2_INIT_FLOOR: f64 = 1e-4;

/// Initial noise variance handed to the decoder: the nominal channel variance
/// at the midpoint of the `K_a` range, floored so noiseless runs start finite.
pub fn decoder_sigma2_init(snr_db: f64, ka_min: u32, ka_max: u32, d: usize) -> f64 {
    noise_variance(snr_db, (ka_min + ka_max) / 2, d).max(SIGMA2_INIT_FLOOR)
}

/// F1 score between the supports of two activity vectors (1 when both are
/// empty).
pub fn support_f1(truth: &ActivityVector, est: &ActivityVector) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&a, &b) in truth.counts().iter().zip(est.counts()) {
        match (a > 0, b > 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// One CSV row of the metrics series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub snr_db: f64,
    pub round: usize,
    pub test_acc: f64,
    pub ka_mae: f64,
    pub frag_recovery: f64,
    pub sigma2_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub snr_db: f64,
    pub rows: Vec<MetricsRow>,
    pub records: Vec<RoundRecord>,
}

impl RunResult {
    /// Mean test accuracy over the last 10% of rounds (at least one).
    pub fn final_accuracy(&self) -> f64 {
        tail_mean(self.rows.iter().map(|r| r.test_acc).collect::<Vec<_>>().as_slice())
    }

    /// `K̂_a` MAE of the last round.
    pub fn final_ka_mae(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.ka_mae)
    }

    pub fn failed_rounds(&self) -> usize {
        self.records.iter().filter(|r| r.failed.is_some()).count()
    }
}

pub fn tail_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let k = (v.len() / 10).max(1);
    v[v.len() - k..].iter().sum::<f64>() / k as f64
}

/// Runs `cfg.rounds` rounds.
pub fn run_single(cfg: &FeelConfig, receiver: Receiver, snr_db: f64, seed: u64, exec: Exec) -> Result<RunResult> {
    let mut sim = Simulation::new(cfg.clone(), receiver, snr_db, seed)?.with_exec(exec);
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let rec = sim.run_round()?;
        rows.push(MetricsRow {
            snr_db,
            round: rec.round,
            test_acc: rec.test_acc,
            ka_mae: rec.metrics.ka_mae,
            frag_recovery: rec.metrics.frag_recovery,
            sigma2_hat: rec.metrics.sigma2_hat,
        });
        records.push(rec);
    }
    Ok(RunResult { snr_db, rows, records })
}

/// Runs every SNR point; points are independent and run data-parallel.
pub fn run_experiment(
    cfg: &FeelConfig,
    receiver: &Receiver,
    snrs: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<Vec<RunResult>> {
    let runs = par::map_indexed(exec, snrs.len(), |i| {
        run_single(cfg, receiver.clone(), snrs[i], seed, exec)
    });
    runs.into_iter().collect()
}

#[cfg(test)]
mod tests;
