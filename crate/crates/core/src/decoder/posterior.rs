//! Scalar spike-and-slab (Poisson slab) posterior under a tempered Gaussian
//! pseudo-likelihood.
//!
//! Prior: `p(k) = (1 - a) δ_0(k) + a Pois(k; λ)` with `a = 1 - e^{-λ}`.
//! Likelihood of the pseudo-observation `r`: `exp(-(r - k)² / (2 τ s))`.

use std::sync::OnceLock;

const LN_FACT_TABLE: usize = 1024;
/// Terms below `max - CUTOFF` in log space are dropped (relative weight < 1e-26).
const CUTOFF: f64 = 60.0;

fn ln_factorial(k: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACT_TABLE);
        let mut acc = 0.0;
        t.push(0.0);
        for i in 1..LN_FACT_TABLE {
            acc += (i as f64).ln();
            t.push(acc);
        }
        t
    });
    if k < LN_FACT_TABLE {
        table[k]
    } else {
        table[LN_FACT_TABLE - 1] + (LN_FACT_TABLE..=k).map(|i| (i as f64).ln()).sum::<f64>()
    }
}

/// Posterior mean and variance of `x ∈ {0..=k_max}`.
pub fn spike_slab_posterior(r: f64, noise_var: f64, lambda: f64, tau: f64, k_max: usize) -> (f64, f64) {
    if !(lambda > 0.0) || k_max == 0 {
        return (0.0, 0.0);
    }
    let a = -(-lambda).exp_m1();
    let ln_a = a.ln();
    let ln_lambda = lambda.ln();
    let inv = 1.0 / (2.0 * tau * noise_var);

    let mut logw = [0.0f64; 256];
    let mut heap;
    let logw: &mut [f64] = if k_max < logw.len() {
        &mut logw[..=k_max]
    } else {
        heap = vec![0.0; k_max + 1];
        &mut heap
    };
    let p0 = (1.0 - a) + a * (-lambda).exp();
    logw[0] = p0.ln() - r * r * inv;
    let mut max = logw[0];
    // The slab log-weight is concave in k, so once it decreases and falls
    // below the cutoff every later term is negligible too.
    let mut len = logw.len();
    let mut prev = f64::NEG_INFINITY;
    for k in 1..logw.len() {
        let kf = k as f64;
        let l = ln_a + kf * ln_lambda - lambda - ln_factorial(k) - (r - kf) * (r - kf) * inv;
        logw[k] = l;
        if l > max {
            max = l;
        }
        if l < prev && l < max - CUTOFF {
            len = k + 1;
            break;
        }
        prev = l;
    }
    let logw = &mut logw[..len];
    let (mut z, mut s1) = (0.0, 0.0);
    for (k, l) in logw.iter_mut().enumerate() {
        let d = *l - max;
        let w = if d > -CUTOFF { d.exp() } else { 0.0 };
        *l = w;
        z += w;
        s1 += k as f64 * w;
    }
    let mean = s1 / z;
    let var = logw
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let e = k as f64 - mean;
            e * e * w
        })
        .sum::<f64>()
        / z;
    (mean, var.max(0.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Plain truncated sums with an iteratively built Poisson pmf.
    pub(crate) fn oracle(r: f64, s: f64, lambda: f64, tau: f64, k_max: usize) -> (f64, f64) {
        if lambda == 0.0 {
            return (0.0, 0.0);
        }
        let alpha = 1.0 - (-lambda).exp();
        let mut pmf = (-lambda).exp();
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..=k_max {
            if k > 0 {
                pmf *= lambda / k as f64;
            }
            let prior = if k == 0 {
                (1.0 - alpha) + alpha * pmf
            } else {
                alpha * pmf
            };
            let w = prior * (-(r - k as f64).powi(2) / (2.0 * tau * s)).exp();
            z += w;
            m1 += k as f64 * w;
            m2 += (k * k) as f64 * w;
        }
        let m = m1 / z;
        (m, m2 / z - m * m)
    }

    #[test]
    fn spike_only_prior() {
        assert_eq!(spike_slab_posterior(3.7, 0.4, 0.0, 1.0, 50), (0.0, 0.0));
    }

    #[test]
    fn unit_case_matches_oracle() {
        let (m, v) = spike_slab_posterior(1.0, 1.0, 1.0, 1.0, 50);
        let (mo, vo) = oracle(1.0, 1.0, 1.0, 1.0, 50);
        assert!((m - mo).abs() < 1e-12 && (v - vo).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_snaps_to_integer() {
        let (m, v) = spike_slab_posterior(2.0, 0.5, 6.0, 1e-6, 60);
        let (mo, _) = oracle(2.0, 0.5, 6.0, 1e-6, 60);
        assert!((m - 2.0).abs() < 1e-9 && (m - mo).abs() < 1e-9);
        assert!(v < 1e-9);
    }

    #[test]
    fn random_draws_match_oracle() {
        let mut g = rng::stream(99, &[0]);
        for _ in 0..1000 {
            let r = g.random_range(-1.0..8.0);
            let s = g.random_range(0.05..2.0);
            let lambda = g.random_range(0.0..6.0);
            let tau = g.random_range(0.2..3.0);
            let (m, v) = spike_slab_posterior(r, s, lambda, tau, 40);
            let (mo, vo) = oracle(r, s, lambda, tau, 40);
            assert!((m - mo).abs() < 1e-12, "{r} {s} {lambda} {tau}: {m} vs {mo}");
            assert!((v - vo).abs() < 1e-12);
        }
    }

    #[test]
    fn large_truncation_uses_heap_path() {
        let (m, _) = spike_slab_posterior(300.0, 1.0, 300.0, 1.0, 400);
        assert!((m - 300.0).abs() < 1.0);
    }
}
