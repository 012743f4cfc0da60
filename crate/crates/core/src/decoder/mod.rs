//! AMP-DA-Net: an unrolled, damped GAMP decoder for the integer activity
//! vector, with a Poisson spike-and-slab denoiser, an optional residual CNN
//! refinement, EM refinement of `K̂_a`, popularity and noise level, and an
//! integer post-processing stage.
//!
//! Each layer runs [`output_block`], [`input_block`] and [`em_update`] in
//! that order. In [`DecoderMode::Baseline`] every scalar is fixed and the CNN
//! is skipped, which gives the un-learnt AMP-DA comparator.

mod cnn;
mod params;
mod posterior;
mod postprocess;

use nalgebra::DVector;

pub use cnn::Cnn;
pub use params::{
    gamma_from_raw, gamma_to_raw, logit, sigmoid, softplus, softplus_inv, DecoderMode, DecoderParams, LayerParams,
    PostprocConfig, RawScalars, Scalars, TopKRule, BASELINE_LAYERS, DEFAULT_K_MAX_FLOOR, DEFAULT_LAYERS,
};
pub use posterior::spike_slab_posterior;
pub use postprocess::{greedy_round, postprocess, refit, top_k_support};

use crate::channel::ActivityVector;
use crate::ura_codebook::UraCodebook;
use crate::{Error, Result};

/// Channels of the denoiser feature map: `[R, sqrt(Σ_pc), m, sqrt(v), α, λ]`.
pub const FEATURE_CHANNELS: usize = 6;
pub const SIGMA2_FLOOR: f64 = 1e-8;
pub const PRECISION_FLOOR: f64 = 1e-12;
const L1_FLOOR: f64 = 1e-12;
const DIVERGENCE_RESIDUAL: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// Soft count estimate (length n).
    pub x_hat: DVector<f64>,
    /// Codeword-domain variance proxy (length n).
    pub nu: DVector<f64>,
    /// Measurement-domain estimate of `x C` (length d).
    pub z: DVector<f64>,
    /// Its variance proxy (length d).
    pub v: DVector<f64>,
    pub k_hat: f64,
    pub pi: DVector<f64>,
    pub sigma2: f64,
    pub layer: usize,
}

impl DecoderState {
    /// `x̂ = 0`, `ν = 1`, `Z = y`, `V = 1`.
    pub fn init(y: &DVector<f64>, n: usize, pi0: &[f64], sigma2: f64, k_hat: f64) -> Self {
        Self {
            x_hat: DVector::zeros(n),
            nu: DVector::from_element(n, 1.0),
            z: y.clone(),
            v: DVector::from_element(y.len(), 1.0),
            k_hat: k_hat.max(1.0),
            pi: DVector::from_column_slice(pi0),
            sigma2: sigma2.max(SIGMA2_FLOOR),
            layer: 0,
        }
    }
}

/// Measurement-domain update with learnt gain and damping.
pub fn output_block(state: &mut DecoderState, c: &UraCodebook, y: &DVector<f64>, s: &Scalars) -> Result<()> {
    let z_tmp = c.superpose(&state.x_hat);
    let v_new = c.squared().tr_mul(&state.nu);
    let mut z_next = z_tmp;
    for i in 0..y.len() {
        let corr = (y[i] - state.z[i]) * v_new[i] / (state.sigma2 + state.v[i]);
        let z_tilde = z_next[i] - s.gamma * corr;
        z_next[i] = s.eta * state.z[i] + (1.0 - s.eta) * z_tilde;
        state.v[i] = s.eta * state.v[i] + (1.0 - s.eta) * v_new[i];
    }
    state.z = z_next;
    if state.z.iter().chain(state.v.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DecoderNonFinite {
            layer: state.layer,
            what: "output block",
        });
    }
    Ok(())
}

/// Scalar pseudo-channel `R = x̂ + var2 / var1` seen by each codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoChannel {
    pub r: DVector<f64>,
    /// Pseudo-noise variance `1 / var1`.
    pub noise_var: DVector<f64>,
    /// How many precisions hit the floor.
    pub floored: usize,
}

pub fn pseudo_channel(state: &DecoderState, c: &UraCodebook, y: &DVector<f64>, s: &Scalars) -> PseudoChannel {
    let gamma_inv = state.v.map(|v| s.alpha / (state.sigma2 + v));
    let resid = (y - &state.z).component_mul(&gamma_inv);
    let mut var1 = c.squared() * &gamma_inv;
    let var2 = c.matrix() * resid;
    let mut floored = 0;
    for v in var1.iter_mut() {
        if !(*v >= PRECISION_FLOOR) {
            *v = PRECISION_FLOOR;
            floored += 1;
        }
    }
    let r = &state.x_hat + var2.component_div(&var1);
    let noise_var = var1.map(|v| 1.0 / v);
    PseudoChannel { r, noise_var, floored }
}

/// Output of [`input_block`]: the posterior means feed the EM step.
#[derive(Debug, Clone, PartialEq)]
pub struct InputOutcome {
    pub posterior_mean: DVector<f64>,
    pub floored: usize,
}

/// Builds the channel-major feature map for the denoiser.
pub fn feature_map(pc: &PseudoChannel, m: &[f64], v: &[f64], alpha: &[f64], lambda: &[f64]) -> Vec<f64> {
    let n = m.len();
    let mut phi = Vec::with_capacity(FEATURE_CHANNELS * n);
    phi.extend(pc.r.iter().copied());
    phi.extend(pc.noise_var.iter().map(|s| s.sqrt()));
    phi.extend_from_slice(m);
    phi.extend(v.iter().map(|s| s.sqrt()));
    phi.extend_from_slice(alpha);
    phi.extend_from_slice(lambda);
    phi
}

/// Bayesian half of the input block: pseudo-channel, prior rates and the
/// spike-and-slab posterior for every codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInputs {
    pub pc: PseudoChannel,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Poisson rates `K̂_a π`.
    pub lambda: Vec<f64>,
}

impl DenoiserInputs {
    /// Feature map `Φ` fed to the CNN.
    pub fn features(&self) -> Vec<f64> {
        let alpha: Vec<f64> = self.lambda.iter().map(|l| -(-l).exp_m1()).collect();
        feature_map(&self.pc, &self.m, &self.v, &alpha, &self.lambda)
    }
}

pub fn denoiser_inputs(
    state: &DecoderState,
    c: &UraCodebook,
    y: &DVector<f64>,
    params: &DecoderParams,
    s: &Scalars,
) -> DenoiserInputs {
    let pc = pseudo_channel(state, c, y, s);
    let n = c.n();
    let k_max = params.k_max(state.k_hat);
    let lambda: Vec<f64> = state.pi.iter().map(|p| state.k_hat * p.max(0.0)).collect();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for j in 0..n {
        let (mj, vj) = spike_slab_posterior(pc.r[j], pc.noise_var[j], lambda[j], s.tau, k_max);
        m[j] = mj;
        v[j] = vj;
    }
    DenoiserInputs { pc, m, v, lambda }
}

/// Codeword-domain denoising: spike-and-slab posterior, optional CNN blend.
pub fn input_block(
    state: &mut DecoderState,
    c: &UraCodebook,
    y: &DVector<f64>,
    params: &DecoderParams,
    s: &Scalars,
) -> Result<InputOutcome> {
    let inputs = denoiser_inputs(state, c, y, params, s);
    let n = c.n();
    let mut x_next = DVector::from_column_slice(&inputs.m);
    if params.mode == DecoderMode::Learnt && s.rho > 0.0 {
        let cnn = &params.layers[state.layer].cnn;
        if !cnn.is_null() {
            let delta = cnn.forward(&inputs.features(), n)?;
            // x̃ = m + cnn(Φ);  x̂ = (1 - ρ) m + ρ x̃
            for (x, d) in x_next.iter_mut().zip(&delta) {
                *x += s.rho * d;
            }
        }
    }
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::DecoderNonFinite {
            layer: state.layer,
            what: "input block",
        });
    }
    state.x_hat = x_next;
    state.nu = DVector::from_vec(inputs.v);
    Ok(InputOutcome {
        posterior_mean: DVector::from_vec(inputs.m),
        floored: inputs.pc.floored,
    })
}

/// EM refinement of `K̂_a`, the popularity prior and the noise variance.
pub fn em_update(state: &mut DecoderState, m: &DVector<f64>, c: &UraCodebook, y: &DVector<f64>, s: &Scalars) {
    let mass: f64 = m.iter().map(|v| v.max(0.0)).sum();
    state.k_hat = ((1.0 - s.step_k) * state.k_hat + s.step_k * mass).max(1.0);

    let l1 = m.iter().map(|v| v.abs()).sum::<f64>().max(L1_FLOOR);
    for (p, mj) in state.pi.iter_mut().zip(m.iter()) {
        *p = ((1.0 - s.step_pi) * *p + s.step_pi * mj / l1).max(0.0);
    }
    let total: f64 = state.pi.sum();
    if total > 0.0 {
        state.pi /= total;
    } else {
        state.pi.fill(1.0 / m.len() as f64);
    }

    let d = y.len() as f64;
    let energy = (y - c.superpose(&state.x_hat)).norm_squared() / d - state.v.mean();
    let log_s2 = (1.0 - s.step_sigma) * state.sigma2.ln() + s.step_sigma * energy.max(SIGMA2_FLOOR).ln();
    state.sigma2 = log_s2.exp().max(SIGMA2_FLOOR);
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// `‖y - x̂ C‖` after each layer.
    pub residual_norms: Vec<f64>,
    pub k_hat: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub floored_precisions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub x: ActivityVector,
    /// Final unrounded device-count estimate.
    pub k_hat: f64,
    /// Soft estimate before post-processing.
    pub x_soft: DVector<f64>,
    pub sigma2: f64,
    pub diagnostics: Diagnostics,
}

/// `K̂_a⁰ = max(1, ‖y‖² − d σ²₀)` under the unit-row-norm power convention.
pub fn initial_k_hat(y: &DVector<f64>, sigma2: f64) -> f64 {
    (y.norm_squared() - y.len() as f64 * sigma2).max(1.0)
}

/// Runs the soft layers only, returning the final state.
pub fn run_layers(
    y: &DVector<f64>,
    c: &UraCodebook,
    pi0: &[f64],
    params: &DecoderParams,
    sigma2_0: f64,
    k_hat_0: Option<f64>,
    mut observe: impl FnMut(&DecoderState, &InputOutcome),
) -> Result<(DecoderState, Diagnostics)> {
    check_shapes(y, c, pi0)?;
    let k0 = k_hat_0.unwrap_or_else(|| initial_k_hat(y, sigma2_0));
    let mut state = DecoderState::init(y, c.n(), pi0, sigma2_0, k0);
    let mut diag = Diagnostics::default();
    for layer in 0..params.num_layers() {
        state.layer = layer;
        let s = params.scalars(layer);
        output_block(&mut state, c, y, &s)?;
        let outcome = input_block(&mut state, c, y, params, &s)?;
        em_update(&mut state, &outcome.posterior_mean, c, y, &s);
        observe(&state, &outcome);

        let residual = (y - c.superpose(&state.x_hat)).norm();
        if !(residual <= DIVERGENCE_RESIDUAL) {
            return Err(Error::Diverged { layer, residual });
        }
        diag.residual_norms.push(residual);
        diag.k_hat.push(state.k_hat);
        diag.sigma2.push(state.sigma2);
        diag.floored_precisions += outcome.floored;
    }
    Ok((state, diag))
}

/// Full decode: unrolled layers followed by integer post-processing.
pub fn decode(
    y: &DVector<f64>,
    c: &UraCodebook,
    pi0: &[f64],
    params: &DecoderParams,
    sigma2_0: f64,
    k_hat_0: Option<f64>,
) -> Result<DecodeOutput> {
    let (state, diagnostics) = run_layers(y, c, pi0, params, sigma2_0, k_hat_0, |_, _| {})?;
    let x = postprocess(state.x_hat.as_slice(), state.k_hat, y, c, &params.postproc);
    Ok(DecodeOutput {
        x,
        k_hat: state.k_hat,
        x_soft: state.x_hat,
        sigma2: state.sigma2,
        diagnostics,
    })
}

fn check_shapes(y: &DVector<f64>, c: &UraCodebook, pi0: &[f64]) -> Result<()> {
    if y.len() != c.d() {
        return Err(Error::shape("received signal", c.d(), y.len()));
    }
    if pi0.len() != c.n() {
        return Err(Error::shape("popularity prior", c.n(), pi0.len()));
    }
    let sum: f64 = pi0.iter().sum();
    if pi0.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(
            "popularity prior must lie on the simplex".into(),
        ));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("received signal".into()));
    }
    Ok(())
}
