//! Uplink model: every active device sends one unit-norm codeword, the
//! codewords add up in the air and the base station sees `y = x C + w` with
//! `w ~ N(0, σ² I_d)`. Real-valued, single antenna, no fading.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::ura_codebook::UraCodebook;
use crate::{Error, Result};

/// Per-codeword device counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityVector(Vec<u32>);

impl ActivityVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Counts how many of `indices` hit each of `n` codewords.
    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = vec![0; n];
        for i in indices {
            counts[i] += 1;
        }
        Self(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    /// Number of active devices, `Σ x_i`.
    pub fn k_a(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|&c| c as f64))
    }
}

/// Channel configuration. `snr_db = +inf` gives a noiseless channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub seed: u64,
}

/// `σ² = (K_a / d) / 10^(snr_db / 10)`: `K_a` unit-norm codewords put
/// `K_a / d` signal power on each of the `d` symbols.
pub fn noise_variance(snr_db: f64, k_a: u32, d: usize) -> f64 {
    (k_a as f64 / d as f64) / 10f64.powf(snr_db / 10.0)
}

/// `y = x C + w`, with σ² set from this round's true device count.
pub fn transmit(x: &ActivityVector, c: &UraCodebook, cfg: &ChannelConfig) -> Result<DVector<f64>> {
    if x.n() != c.n() {
        return Err(Error::shape("activity vector", c.n(), x.n()));
    }
    if cfg.snr_db.is_nan() || cfg.snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("snr {} dB", cfg.snr_db)));
    }
    let k_a = x.k_a();
    if k_a == 0 {
        return Err(Error::NoActiveDevices);
    }
    let mut y = c.superpose(&x.to_dvector());
    let sigma = noise_variance(cfg.snr_db, k_a, c.d()).sqrt();
    if sigma > 0.0 {
        let mut rng = rng::stream(cfg.seed, &[tag::CHANNEL]);
        for v in y.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}
