//! Per-layer parameters of the unrolled decoder.
//!
//! Learnt scalars are stored raw and mapped into their boxes by squashing
//! functions: a centred tanh for the gain, sigmoid for probabilities and step
//! sizes, softplus for positive scales.

use super::cnn::Cnn;

pub const GAMMA_MIN: f64 = 0.3;
pub const GAMMA_MAX: f64 = 2.0;
pub const DEFAULT_LAYERS: usize = 10;
/// Iterations of the un-learnt comparator, which has no per-layer weights
/// and is run closer to convergence.
pub const BASELINE_LAYERS: usize = 20;
pub const DEFAULT_K_MAX_FLOOR: usize = 32;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn gamma_from_raw(raw: f64) -> f64 {
    GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * (raw.tanh() + 1.0) / 2.0
}

pub fn gamma_to_raw(gamma: f64) -> f64 {
    (2.0 * (gamma - GAMMA_MIN) / (GAMMA_MAX - GAMMA_MIN) - 1.0).atanh()
}

/// Unconstrained per-layer scalars, as stored in the weight file.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScalars {
    pub gamma: f64,
    pub eta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub rho: f64,
    pub step_k: f64,
    pub step_pi: f64,
    pub step_sigma: f64,
}

/// Effective per-layer scalars after squashing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalars {
    /// Onsager/matched-filter gain, in `[0.3, 2]`.
    pub gamma: f64,
    /// Damping, in `(0, 1)`.
    pub eta: f64,
    /// Precision scale in the pseudo-channel.
    pub alpha: f64,
    /// Posterior temperature.
    pub tau: f64,
    /// CNN / Bayesian blend, in `[0, 1]`.
    pub rho: f64,
    pub step_k: f64,
    pub step_pi: f64,
    pub step_sigma: f64,
}

impl Scalars {
    /// The un-learnt AMP-DA comparator.
    pub const BASELINE: Scalars = Scalars {
        gamma: 1.0,
        eta: 0.5,
        alpha: 1.0,
        tau: 1.0,
        rho: 0.0,
        step_k: 0.5,
        step_pi: 0.5,
        step_sigma: 0.5,
    };

    pub fn to_raw(&self) -> RawScalars {
        RawScalars {
            gamma: gamma_to_raw(self.gamma),
            eta: logit(self.eta),
            alpha: softplus_inv(self.alpha),
            tau: softplus_inv(self.tau),
            rho: logit(self.rho),
            step_k: logit(self.step_k),
            step_pi: logit(self.step_pi),
            step_sigma: logit(self.step_sigma),
        }
    }
}

impl RawScalars {
    pub fn effective(&self) -> Scalars {
        Scalars {
            gamma: gamma_from_raw(self.gamma),
            eta: sigmoid(self.eta),
            alpha: softplus(self.alpha),
            tau: softplus(self.tau),
            rho: sigmoid(self.rho),
            step_k: sigmoid(self.step_k),
            step_pi: sigmoid(self.step_pi),
            step_sigma: sigmoid(self.step_sigma),
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.gamma,
            self.eta,
            self.alpha,
            self.tau,
            self.rho,
            self.step_k,
            self.step_pi,
            self.step_sigma,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            gamma: a[0],
            eta: a[1],
            alpha: a[2],
            tau: a[3],
            rho: a[4],
            step_k: a[5],
            step_pi: a[6],
            step_sigma: a[7],
        }
    }
}

impl Default for RawScalars {
    /// Starting point of a learnt decoder: γ_raw = 0, ρ = 0.85, moderate damping.
    fn default() -> Self {
        Scalars {
            gamma: gamma_from_raw(0.0),
            eta: 0.3,
            alpha: 1.0,
            tau: 1.0,
            rho: 0.85,
            step_k: 0.5,
            step_pi: 0.5,
            step_sigma: 0.5,
        }
        .to_raw()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub raw: RawScalars,
    pub cnn: Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    Learnt,
    Baseline,
}

/// Support size used by the top-K projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopKRule {
    /// `K = min(round(K̂_a), n)`.
    FromEstimate,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostprocConfig {
    pub top_k: TopKRule,
    /// Non-negative least-squares passes on the support (at least one).
    pub refit_iters: usize,
    /// Unit-move descent on the residual after rounding.
    pub local_search: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            top_k: TopKRule::FromEstimate,
            refit_iters: 3,
            local_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub mode: DecoderMode,
    pub layers: Vec<LayerParams>,
    pub postproc: PostprocConfig,
    /// Lower bound of the posterior truncation point.
    pub k_max_floor: usize,
}

impl DecoderParams {
    /// Un-learnt comparator: fixed scalars, no CNN.
    pub fn baseline(layers: usize) -> Self {
        Self {
            mode: DecoderMode::Baseline,
            layers: (0..layers)
                .map(|_| LayerParams {
                    raw: Scalars::BASELINE.to_raw(),
                    cnn: Cnn::zeros(0, 0, 1),
                })
                .collect(),
            postproc: PostprocConfig::default(),
            k_max_floor: DEFAULT_K_MAX_FLOOR,
        }
    }

    /// Learnt decoder at its initial point: default scalars and zero CNNs,
    /// which makes it a tuned Bayesian decoder.
    pub fn learnt_init(layers: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            mode: DecoderMode::Learnt,
            layers: (0..layers)
                .map(|_| LayerParams {
                    raw: RawScalars::default(),
                    cnn: Cnn::zeros(super::FEATURE_CHANNELS, hidden, kernel),
                })
                .collect(),
            postproc: PostprocConfig::default(),
            k_max_floor: DEFAULT_K_MAX_FLOOR,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn scalars(&self, layer: usize) -> Scalars {
        match self.mode {
            DecoderMode::Baseline => Scalars::BASELINE,
            DecoderMode::Learnt => self.layers[layer].raw.effective(),
        }
    }

    /// Posterior truncation `max(floor, ceil(K̂ + 10 sqrt(K̂ + 1)))`.
    pub fn k_max(&self, k_hat: f64) -> usize {
        let dynamic = (k_hat + 10.0 * (k_hat + 1.0).sqrt()).ceil() as usize;
        self.k_max_floor.max(dynamic)
    }
}
