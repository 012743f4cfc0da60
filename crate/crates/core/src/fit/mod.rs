//! Lightweight offline fitting of the learnt codebook and decoder.
//!
//! A small stand-in for end-to-end training, used to produce the checked-in
//! fixture weights. The codebook is shaped by gradient descent on a
//! popularity-weighted coherence, the per-layer scalars by pattern search on
//! the reconstruction loss, and each layer's CNN by minibatch Adam on the
//! residual left by the Bayesian denoiser.

mod denoiser;

pub use denoiser::{fit_cnn_layers, squared_error_grad, CnnGrad};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit, ActivityVector, ChannelConfig};
use crate::decoder::{decode, run_layers, DecoderParams};
use crate::feel_sim::{decoder_sigma2_init, smoothed_prior, DatasetSample};
use crate::harness::weights::WeightFile;
use crate::par::{self, Exec};
use crate::rng::{self, tag};
use crate::ura_codebook::{init_base, synthesize, BaseMatrix, InitScheme, ShearMatrix, UraCodebook};
use crate::{Error, Result};

/// Loss charged to a trial whose decode fails.
const FAILED_TRIAL_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookFit {
    /// Adam iterations; zero keeps the initial codebook.
    pub iters: usize,
    pub lr: f64,
    pub lambda_w: f64,
    /// Weight of the uniform component mixed into the usage rates.
    pub uniform_mix: f64,
}

impl Default for CodebookFit {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 0.01,
            lambda_w: 1e-3,
            uniform_mix: 0.2,
        }
    }
}

/// What the scalar search and the CNN acceptance test minimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitObjective {
    /// Soft-output training loss (MSE, ℓ₁ and K̂_a terms).
    Reconstruction,
    /// Exact-recovery misses after post-processing plus a K̂_a term.
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderFit {
    pub objective: FitObjective,
    pub recovery_k_weight: f64,
    pub layers: usize,
    pub cnn_hidden: usize,
    pub cnn_kernel: usize,
    /// Training SNRs, assigned to trials round-robin.
    pub snr_db: Vec<f64>,
    pub batch: usize,
    pub sweeps: usize,
    /// Evolution-strategy iterations over linear layer schedules.
    pub schedule_iters: usize,
    /// Initial pattern-search step on the raw scalars, halved every sweep.
    pub step: f64,
    pub lambda_1: f64,
    pub lambda_k: f64,
    /// Adam steps per layer network.
    pub cnn_steps: usize,
    /// Trials per minibatch.
    pub cnn_batch: usize,
    pub cnn_lr: f64,
    pub prior_smoothing: f64,
    /// Feed the recorded popularity as the prior (otherwise uniform).
    pub popularity_prior: bool,
    pub ka_min: u32,
    pub ka_max: u32,
}

impl Default for DecoderFit {
    fn default() -> Self {
        Self {
            objective: FitObjective::Recovery,
            recovery_k_weight: 0.1,
            layers: crate::decoder::DEFAULT_LAYERS,
            cnn_hidden: 32,
            cnn_kernel: 3,
            snr_db: vec![0.0, 3.0, 5.0, 7.0, 10.0],
            batch: 600,
            sweeps: 1,
            schedule_iters: 300,
            step: 0.5,
            lambda_1: 0.01,
            lambda_k: 0.01,
            cnn_steps: 600,
            cnn_batch: 32,
            cnn_lr: 3e-3,
            prior_smoothing: 0.05,
            popularity_prior: true,
            ka_min: 7,
            ka_max: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub scheme: InitScheme,
    pub d: usize,
    pub seed: u64,
    /// Samples used for the data-driven initialisation.
    pub calibration_samples: usize,
    pub codebook: CodebookFit,
    pub decoder: DecoderFit,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            scheme: InitScheme::DataDrivenPinv,
            d: 64,
            seed: 0,
            calibration_samples: 4000,
            codebook: CodebookFit::default(),
            decoder: DecoderFit::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coherence_init: f64,
    pub coherence_fit: f64,
    pub loss_init: f64,
    pub loss_schedule: f64,
    pub loss_scalars: f64,
    pub loss_cnn: f64,
    pub loss_final: f64,
    /// Layers whose fitted CNN head was kept.
    pub cnn_layers: Vec<usize>,
}

/// Mean share of the active devices on each codeword, `E[x_i] / E[K_a]`.
pub fn usage_rates(samples: &[DatasetSample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or(Error::Empty("samples"))?;
    let n = first.x.len();
    let mut q = vec![0.0; n];
    for s in samples {
        if s.x.len() != n {
            return Err(Error::shape("sample x", n, s.x.len()));
        }
        for (a, &b) in q.iter_mut().zip(&s.x) {
            *a += b as f64;
        }
    }
    let total: f64 = q.iter().sum();
    if total <= 0.0 {
        return Err(Error::Empty("codeword usage"));
    }
    q.iter_mut().for_each(|v| *v /= total);
    Ok(q)
}

fn pair_weights(q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let s: f64 = q.iter().sum();
    let s2: f64 = q.iter().map(|v| v * v).sum();
    let z = (s * s - s2).max(f64::MIN_POSITIVE);
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { q[i] * q[j] / z })
}

/// `Σ_{i≠j} P_ij (c_i · c_j)²` with `P ∝ q qᵀ`, normalised to sum to one off
/// the diagonal.
pub fn weighted_coherence(c: &DMatrix<f64>, q: &[f64]) -> f64 {
    let g = c * c.transpose();
    pair_weights(q).component_mul(&g).dot(&g)
}

/// Objective and gradient of the codebook fit with respect to `D` and `W`.
fn codebook_objective(
    d: &DMatrix<f64>,
    w: &DMatrix<f64>,
    p: &DMatrix<f64>,
    lambda_w: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let a = d * w;
    let c = UraCodebook::from_unnormalised(a.clone())?;
    let c = c.matrix();
    let g = c * c.transpose();
    let m = p.component_mul(&g);
    let value = m.dot(&g);
    let grad_c = (&m * c) * 4.0;
    let mut grad_a = grad_c;
    for i in 0..a.nrows() {
        let norm = a.row(i).norm();
        let ci = c.row(i);
        let proj = grad_a.row(i).dot(&ci);
        let row = (grad_a.row(i) - ci * proj) / norm;
        grad_a.set_row(i, &row);
    }
    let gram = w.transpose() * w - DMatrix::identity(w.nrows(), w.ncols());
    let reg = lambda_w * gram.norm_squared();
    let grad_d = &grad_a * w.transpose();
    let grad_w = d.transpose() * &grad_a + w * &gram * (4.0 * lambda_w);
    Ok((value + reg, grad_d, grad_w))
}

struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            m: DMatrix::zeros(nrows, ncols),
            v: DMatrix::zeros(nrows, ncols),
            t: 0,
        }
    }

    fn step(&mut self, x: &mut DMatrix<f64>, g: &DMatrix<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = &self.m * B1 + g * (1.0 - B1);
        self.v = &self.v * B2 + g.map(|v| v * v) * (1.0 - B2);
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        x.zip_zip_apply(&self.m, &self.v, |xi, mi, vi| {
            *xi -= lr * (mi / c1) / ((vi / c2).sqrt() + 1e-12);
        });
    }
}

/// Shapes `D` and `W` so that frequently used codewords are close to
/// mutually orthogonal. Returns the fitted factors and the objective trace.
pub fn fit_codebook(
    base: &BaseMatrix,
    shear: &ShearMatrix,
    usage: &[f64],
    cfg: &CodebookFit,
) -> Result<(BaseMatrix, ShearMatrix, Vec<f64>)> {
    if usage.len() != base.n() {
        return Err(Error::shape("usage rates", base.n(), usage.len()));
    }
    if shear.d() != base.d() {
        return Err(Error::shape("W", base.d(), shear.d()));
    }
    let n = usage.len() as f64;
    let q: Vec<f64> = usage
        .iter()
        .map(|u| (1.0 - cfg.uniform_mix) * u + cfg.uniform_mix / n)
        .collect();
    let p = pair_weights(&q);
    // rows of D are rescaled to unit norm so the step size is scale free
    let mut d = synthesize(base, &ShearMatrix::identity(base.d()))?.matrix().clone();
    let mut w = shear.matrix().clone();
    let mut opt_d = Adam::new(d.nrows(), d.ncols());
    let mut opt_w = Adam::new(w.nrows(), w.ncols());
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for _ in 0..cfg.iters {
        let (value, gd, gw) = codebook_objective(&d, &w, &p, cfg.lambda_w)?;
        trace.push(value);
        opt_d.step(&mut d, &gd, cfg.lr);
        opt_w.step(&mut w, &gw, cfg.lr);
    }
    trace.push(codebook_objective(&d, &w, &p, cfg.lambda_w)?.0);
    Ok((
        BaseMatrix::from_matrix(d, base.scheme())?,
        ShearMatrix::from_matrix(w)?,
        trace,
    ))
}

/// One decoder training example with its channel realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub x: ActivityVector,
    pub prior: Vec<f64>,
    pub y: DVector<f64>,
    pub sigma2_0: f64,
}

/// Draws `cfg.batch` samples (without replacement when possible) and
/// transmits each at its assigned SNR through `c`.
pub fn make_trials(c: &UraCodebook, samples: &[DatasetSample], cfg: &DecoderFit, seed: u64) -> Result<Vec<Trial>> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if cfg.snr_db.is_empty() {
        return Err(Error::config("snr_db", "needs at least one training SNR"));
    }
    let mut rng = rng::stream(seed, &[tag::FIT, 0]);
    let picks: Vec<usize> = if cfg.batch <= samples.len() {
        index::sample(&mut rng, samples.len(), cfg.batch).into_vec()
    } else {
        (0..cfg.batch).map(|_| rng.random_range(0..samples.len())).collect()
    };
    picks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let s = &samples[k];
            let x = ActivityVector::new(s.x.clone());
            let snr_db = cfg.snr_db[i % cfg.snr_db.len()];
            let ch = ChannelConfig {
                snr_db,
                seed: rng::derive(seed, &[tag::FIT, 1, i as u64]),
            };
            let prior = if cfg.popularity_prior {
                smoothed_prior(&s.pi, cfg.prior_smoothing)
            } else {
                vec![1.0 / x.n() as f64; x.n()]
            };
            Ok(Trial {
                y: transmit(&x, c, &ch)?,
                sigma2_0: decoder_sigma2_init(snr_db, cfg.ka_min, cfg.ka_max, c.d()),
                x,
                prior,
            })
        })
        .collect()
}

/// `‖x̂ − x‖² + λ₁ ‖x̂‖₁ / ‖x‖₁ + λ_K (K̂_a − K_a)²` on the soft output.
pub fn trial_loss(c: &UraCodebook, params: &DecoderParams, t: &Trial, lambda_1: f64, lambda_k: f64) -> f64 {
    match run_layers(&t.y, c, &t.prior, params, t.sigma2_0, None, |_, _| {}) {
        Ok((state, _)) => {
            let x = t.x.counts();
            let mse: f64 = state.x_hat.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum();
            let l1 = state.x_hat.iter().map(|v| v.abs()).sum::<f64>() / t.x.k_a() as f64;
            let dk = state.k_hat - t.x.k_a() as f64;
            let loss = mse + lambda_1 * l1 + lambda_k * dk * dk;
            if loss.is_finite() {
                loss
            } else {
                FAILED_TRIAL_LOSS
            }
        }
        Err(_) => FAILED_TRIAL_LOSS,
    }
}

/// `1 − [x̂ = x] + w (K̂_a − K_a)²` on the post-processed output.
pub fn trial_miss(c: &UraCodebook, params: &DecoderParams, t: &Trial, k_weight: f64) -> f64 {
    match decode(&t.y, c, &t.prior, params, t.sigma2_0, None) {
        Ok(out) => {
            let dk = out.k_hat - t.x.k_a() as f64;
            let miss = if out.x == t.x { 0.0 } else { 1.0 };
            miss + k_weight * dk * dk
        }
        Err(_) => FAILED_TRIAL_LOSS,
    }
}

pub fn batch_loss(c: &UraCodebook, params: &DecoderParams, trials: &[Trial], cfg: &DecoderFit, exec: Exec) -> f64 {
    let losses = par::map_indexed(exec, trials.len(), |i| match cfg.objective {
        FitObjective::Reconstruction => trial_loss(c, params, &trials[i], cfg.lambda_1, cfg.lambda_k),
        FitObjective::Recovery => trial_miss(c, params, &trials[i], cfg.recovery_k_weight),
    });
    losses.iter().sum::<f64>() / trials.len().max(1) as f64
}

/// Sets every layer's raw scalars to the linear interpolation between
/// `start` (first layer) and `end` (last layer).
pub fn apply_schedule(params: &mut DecoderParams, start: &[f64; 8], end: &[f64; 8]) {
    let last = params.num_layers().saturating_sub(1).max(1) as f64;
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let f = l as f64 / last;
        let mut a = [0.0; 8];
        for k in 0..8 {
            a[k] = (1.0 - f) * start[k] + f * end[k];
        }
        layer.raw = crate::decoder::RawScalars::from_array(a);
    }
}

/// (1+1) evolution strategy over linear layer schedules of the raw scalars,
/// started from the current first and last layers. Returns the best loss.
pub fn tune_schedule(
    c: &UraCodebook,
    params: &mut DecoderParams,
    trials: &[Trial],
    cfg: &DecoderFit,
    seed: u64,
    exec: Exec,
) -> f64 {
    let layers = params.num_layers();
    let mut start = params.layers[0].raw.to_array();
    let mut end = params.layers[layers - 1].raw.to_array();
    apply_schedule(params, &start, &end);
    let mut best = batch_loss(c, params, trials, cfg, exec);
    let mut rng = rng::stream(seed, &[tag::FIT, 3]);
    let mut sigma = cfg.step;
    for _ in 0..cfg.schedule_iters {
        let mut s2 = start;
        let mut e2 = end;
        for k in (0..8).filter(|&k| k != RHO) {
            s2[k] += sigma * rng.sample::<f64, _>(StandardNormal);
            e2[k] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let mut cand = params.clone();
        apply_schedule(&mut cand, &s2, &e2);
        let loss = batch_loss(c, &cand, trials, cfg, exec);
        if loss <= best {
            if loss < best {
                sigma *= 1.2;
            }
            best = loss;
            (start, end) = (s2, e2);
            *params = cand;
        } else {
            sigma *= 0.97;
        }
    }
    best
}

/// Index of `rho` in [`crate::decoder::RawScalars::to_array`].
const RHO: usize = 4;

/// Coordinate pattern search over the raw scalars: shared moves across all
/// layers first, then per-layer moves; the step halves after every sweep.
pub fn tune_scalars(
    c: &UraCodebook,
    params: &mut DecoderParams,
    trials: &[Trial],
    cfg: &DecoderFit,
    sweeps: usize,
    step: f64,
    exec: Exec,
) -> f64 {
    let mut best = batch_loss(c, params, trials, cfg, exec);
    let tune_rho = params.layers.iter().any(|l| !l.cnn.is_null());
    let coords: Vec<usize> = (0..8).filter(|&k| k != RHO || tune_rho).collect();
    let layers = params.num_layers();
    let mut step = step;
    for _ in 0..sweeps {
        let groups = std::iter::once(None).chain((0..layers).map(Some));
        for group in groups {
            for &k in &coords {
                for dir in [1.0, -1.0] {
                    let mut cand = params.clone();
                    for (l, layer) in cand.layers.iter_mut().enumerate() {
                        if group.is_none_or(|g| g == l) {
                            let mut a = layer.raw.to_array();
                            a[k] += dir * step;
                            layer.raw = crate::decoder::RawScalars::from_array(a);
                        }
                    }
                    let loss = batch_loss(c, &cand, trials, cfg, exec);
                    if loss < best {
                        best = loss;
                        *params = cand;
                        break;
                    }
                }
            }
        }
        step *= 0.5;
    }
    best
}

/// Full fit: initial base, codebook shaping, scalar search, CNN heads and a
/// final short scalar search. `train` supplies usage rates, calibration data
/// and decoder trials.
pub fn fit_weights(train: &[DatasetSample], cfg: &FitConfig, exec: Exec) -> Result<(WeightFile, FitReport)> {
    let usage = usage_rates(train)?;
    let n = usage.len();
    let calibration: Vec<Vec<f64>> = train
        .iter()
        .take(cfg.calibration_samples.max(1))
        .map(|s| s.x.iter().map(|&v| v as f64).collect())
        .collect();
    let base = init_base(n, cfg.d, cfg.scheme, cfg.seed, Some(&calibration))?;
    let shear = ShearMatrix::identity(cfg.d);
    let c0 = synthesize(&base, &shear)?;
    let mut report = FitReport {
        coherence_init: weighted_coherence(c0.matrix(), &usage),
        ..Default::default()
    };
    let (base, shear) = if cfg.codebook.iters > 0 {
        let (b, w, _) = fit_codebook(&base, &shear, &usage, &cfg.codebook)?;
        (b, w)
    } else {
        (base, shear)
    };
    let c = synthesize(&base, &shear)?;
    report.coherence_fit = weighted_coherence(c.matrix(), &usage);

    let dcfg = &cfg.decoder;
    let trials = make_trials(&c, train, dcfg, cfg.seed)?;
    let mut params = DecoderParams::learnt_init(dcfg.layers, dcfg.cnn_hidden, dcfg.cnn_kernel);
    report.loss_init = batch_loss(&c, &params, &trials, dcfg, exec);
    report.loss_schedule = tune_schedule(&c, &mut params, &trials, dcfg, cfg.seed, exec);
    report.loss_scalars = tune_scalars(&c, &mut params, &trials, dcfg, dcfg.sweeps, dcfg.step, exec);
    let (loss, kept) = fit_cnn_layers(&c, &mut params, &trials, dcfg, cfg.seed, exec)?;
    report.loss_cnn = loss;
    report.cnn_layers = kept;
    report.loss_final = tune_scalars(&c, &mut params, &trials, dcfg, 1, dcfg.step / 4.0, exec);
    Ok((WeightFile::new(base, shear, &params)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_gradient_matches_finite_differences() {
        let base = init_base(6, 3, InitScheme::Gaussian, 5, None).unwrap();
        let d = base.matrix().clone();
        let w = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.1 } else { 0.05 * (i as f64 - j as f64) });
        let q = [0.4, 0.2, 0.15, 0.1, 0.1, 0.05];
        let p = pair_weights(&q);
        let (_, gd, gw) = codebook_objective(&d, &w, &p, 0.3).unwrap();
        let f = |d: &DMatrix<f64>, w: &DMatrix<f64>| codebook_objective(d, w, &p, 0.3).unwrap().0;
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 1), (5, 2)] {
            let (mut a, mut b) = (d.clone(), d.clone());
            a[(i, j)] += h;
            b[(i, j)] -= h;
            let fd = (f(&a, &w) - f(&b, &w)) / (2.0 * h);
            assert!((fd - gd[(i, j)]).abs() < 1e-7, "D {i},{j}: {fd} vs {}", gd[(i, j)]);
        }
        for (i, j) in [(0, 0), (1, 2), (2, 0)] {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[(i, j)] += h;
            b[(i, j)] -= h;
            let fd = (f(&d, &a) - f(&d, &b)) / (2.0 * h);
            assert!((fd - gw[(i, j)]).abs() < 1e-7, "W {i},{j}: {fd} vs {}", gw[(i, j)]);
        }
    }

    #[test]
    fn weighted_coherence_of_orthonormal_rows_is_zero() {
        let c = DMatrix::<f64>::identity(4, 4);
        assert_eq!(weighted_coherence(&c, &[0.4, 0.3, 0.2, 0.1]), 0.0);
    }

    #[test]
    fn codebook_fit_favours_popular_rows() {
        let n = 24;
        let usage: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|i| 0.8f64.powi(i as i32)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let base = init_base(n, 8, InitScheme::Gaussian, 2, None).unwrap();
        let cfg = CodebookFit {
            iters: 400,
            ..Default::default()
        };
        let (b, w, trace) = fit_codebook(&base, &ShearMatrix::identity(8), &usage, &cfg).unwrap();
        assert!(
            trace.last().unwrap() < &(0.5 * trace[0]),
            "{} -> {}",
            trace[0],
            trace.last().unwrap()
        );
        let before = crate::ura_codebook::coherence_stats(
            &synthesize(&base, &ShearMatrix::identity(8)).unwrap(),
            Some(&usage),
            0.25,
        )
        .unwrap();
        let after = crate::ura_codebook::coherence_stats(&synthesize(&b, &w).unwrap(), Some(&usage), 0.25).unwrap();
        assert!(after.popular_mean_abs_xcorr < before.popular_mean_abs_xcorr);
        assert!(after.popular_mean_abs_xcorr < after.mean_abs_xcorr);
    }
}
