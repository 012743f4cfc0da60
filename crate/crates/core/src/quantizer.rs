//! Device-side compression: the base station's k-means++ quantisation
//! codebook, popularity ordering, nearest-neighbour VQ and error feedback.
//!
//! Fragments are passed as one flat slice holding consecutive length-`dim`
//! vectors.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::ActivityVector;
use crate::rng::{self, tag};
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
const PAD_NOISE: f64 = 1e-6;

/// Centroids (row `i` = codeword `i`) plus the popularity distribution.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantCodebook {
    dim: usize,
    centroids: Vec<f64>,
    popularity: Vec<f64>,
}

impl QuantCodebook {
    /// Codebook with uniform popularity.
    pub fn from_centroids(centroids: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::shape(
                "centroids",
                format!("non-empty multiple of {dim}"),
                centroids.len(),
            ));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        let n = centroids.len() / dim;
        Ok(Self {
            dim,
            centroids,
            popularity: vec![1.0 / n as f64; n],
        })
    }

    pub fn n(&self) -> usize {
        self.popularity.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    /// Index of the nearest centroid; ties go to the smaller index.
    pub fn quantize(&self, u: &[f64]) -> usize {
        debug_assert_eq!(u.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(u, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// `Σ_i counts_i · Q_i`, not yet divided by the device count.
    pub fn dequantize(&self, counts: &ActivityVector) -> Vec<f64> {
        debug_assert_eq!(counts.n(), self.n());
        let mut out = vec![0.0; self.dim];
        for (i, &k) in counts.counts().iter().enumerate() {
            if k > 0 {
                for (o, c) in out.iter_mut().zip(self.centroid(i)) {
                    *o += k as f64 * c;
                }
            }
        }
        out
    }

    /// Concatenates the centroids selected by `indices`.
    pub fn reconstruct(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.centroid(i).iter().copied()).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Splits `v` into length-`dim` fragments, zero-padding the tail.
pub fn fragment(v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(fragment_count(v.len(), dim) * dim, 0.0);
    out
}

pub fn fragment_count(len: usize, dim: usize) -> usize {
    len.div_ceil(dim)
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Empty clusters are repaired by moving the point farthest from its centroid
/// within the highest-inertia cluster. With fewer distinct fragments than `n`
/// the missing rows are copies of the most populated centroid plus 1e-6
/// Gaussian noise, so the codebook always has `n` rows.
pub fn build_codebook(fragments: &[f64], dim: usize, n: usize, seed: u64, max_iters: usize) -> Result<QuantCodebook> {
    if dim == 0 || n == 0 {
        return Err(Error::InvalidArgument("k-means needs dim, n >= 1".into()));
    }
    if fragments.is_empty() {
        return Err(Error::Empty("fragments"));
    }
    if fragments.len() % dim != 0 {
        return Err(Error::shape("fragments", format!("multiple of {dim}"), fragments.len()));
    }
    if fragments.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fragments".into()));
    }
    let m = fragments.len() / dim;
    let point = |i: usize| &fragments[i * dim..(i + 1) * dim];

    let distinct = fragments
        .chunks_exact(dim)
        .map(|f| f.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len();
    let k = n.min(distinct);
    let mut rng = rng::stream(seed, &[tag::KMEANS]);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(n * dim);
    let first = rng.random_range(0..m);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(point(i), point(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = m - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
                pick = i;
            }
        }
        let c = point(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    let k = centroids.len() / dim;

    // Lloyd
    let mut assign = vec![usize::MAX; m];
    let mut sizes = vec![0usize; k];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..m {
            let p = point(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.chunks_exact(dim).enumerate() {
                let d = sq_dist(p, cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        sizes.iter_mut().for_each(|s| *s = 0);
        for i in 0..m {
            let c = assign[i];
            sizes[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut repaired = false;
        for c in 0..k {
            if sizes[c] > 0 {
                let inv = 1.0 / sizes[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if sizes[c] == 0 {
                if let Some(p) = split_point(fragments, dim, &centroids, &assign, &sizes) {
                    sizes[assign[p]] -= 1;
                    assign[p] = c;
                    sizes[c] = 1;
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(point(p));
                    repaired = true;
                }
            }
        }
        if !changed && !repaired {
            break;
        }
    }

    if k < n {
        let donor = (0..k)
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let base = centroids[donor * dim..(donor + 1) * dim].to_vec();
        let mut pad_rng = rng::stream(seed, &[tag::PAD]);
        for _ in k..n {
            for &b in &base {
                centroids.push(b + PAD_NOISE * pad_rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    QuantCodebook::from_centroids(centroids, dim)
}

/// Farthest point of the highest-inertia cluster that has more than one member.
fn split_point(fragments: &[f64], dim: usize, centroids: &[f64], assign: &[usize], sizes: &[usize]) -> Option<usize> {
    let k = sizes.len();
    let mut inertia = vec![0.0; k];
    for (i, &c) in assign.iter().enumerate() {
        inertia[c] += sq_dist(&fragments[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim]);
    }
    let target = (0..k)
        .filter(|&c| sizes[c] > 1)
        .max_by(|&a, &b| inertia[a].total_cmp(&inertia[b]))?;
    assign
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == target)
        .map(|(i, _)| {
            let d = sq_dist(
                &fragments[i * dim..(i + 1) * dim],
                &centroids[target * dim..(target + 1) * dim],
            );
            (i, d)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Usage counts of each centroid over `fragments`.
pub fn usage_counts(q: &QuantCodebook, fragments: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; q.n()];
    for f in fragments.chunks_exact(q.dim()) {
        counts[q.quantize(f)] += 1;
    }
    counts
}

/// Re-orders `q` from most to least used on `fragments` (stable on ties) and
/// stores the normalised usage as its popularity.
pub fn popularity_order(q: &QuantCodebook, fragments: &[f64]) -> Result<QuantCodebook> {
    if fragments.is_empty() {
        return Err(Error::Empty("fragments"));
    }
    if fragments.len() % q.dim() != 0 {
        return Err(Error::shape(
            "fragments",
            format!("multiple of {}", q.dim()),
            fragments.len(),
        ));
    }
    let counts = usage_counts(q, fragments);
    let total: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.n()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    let centroids = order.iter().flat_map(|&i| q.centroid(i).iter().copied()).collect();
    let popularity = order.iter().map(|&i| counts[i] as f64 / total as f64).collect();
    Ok(QuantCodebook {
        dim: q.dim,
        centroids,
        popularity,
    })
}

/// Per-device error-feedback residual `e_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAccumulator {
    pub device_id: usize,
    residual: Vec<f64>,
}

impl ErrorAccumulator {
    pub fn zeros(device_id: usize, len: usize) -> Self {
        Self {
            device_id,
            residual: vec![0.0; len],
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }
}

/// Quantises `delta_w + e` fragment by fragment and returns the chosen
/// indices with the updated residual `e' = s - Q(s)`.
///
/// The tail fragment is zero-padded; the padded coordinates are dropped from
/// the residual.
pub fn apply_error_feedback(
    delta_w: &[f64],
    acc: &ErrorAccumulator,
    q: &QuantCodebook,
) -> Result<(Vec<usize>, ErrorAccumulator)> {
    if delta_w.len() != acc.residual.len() {
        return Err(Error::shape("delta_w", acc.residual.len(), delta_w.len()));
    }
    if delta_w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model update".into()));
    }
    let s: Vec<f64> = delta_w.iter().zip(&acc.residual).map(|(a, b)| a + b).collect();
    let padded = fragment(&s, q.dim());
    let indices: Vec<usize> = padded.chunks_exact(q.dim()).map(|f| q.quantize(f)).collect();
    let quantised = q.reconstruct(&indices);
    let residual = s.iter().zip(&quantised).map(|(a, b)| a - b).collect();
    Ok((
        indices,
        ErrorAccumulator {
            device_id: acc.device_id,
            residual,
        },
    ))
}
