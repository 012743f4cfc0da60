//! Integer projection of a soft count estimate: non-negativity, top-K
//! support, non-negative least-squares refit on the support, and greedy
//! rounding to the estimated device count.

use nalgebra::{DMatrix, DVector};

use super::params::{PostprocConfig, TopKRule};
use crate::channel::ActivityVector;
use crate::ura_codebook::UraCodebook;

const MAX_LOCAL_MOVES: usize = 256;
/// Supports with at most this many count vectors of the target sum are
/// searched exhaustively instead of by unit moves.
const EXACT_SEARCH_LIMIT: u64 = 4096;

/// Support size and target sum for an estimate `k_hat`.
pub fn targets(k_hat: f64, n: usize, rule: TopKRule) -> (usize, u32) {
    let total = (k_hat.round().max(1.0)) as u32;
    let k = match rule {
        TopKRule::FromEstimate => total as usize,
        TopKRule::Fixed(k) => k.max(1),
    };
    (k.min(n), total)
}

/// Indices of the `k` largest entries (ties go to the smaller index).
pub fn top_k_support(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Non-negative least squares of `y ≈ Σ_{i∈support} x_i C_i` by repeated
/// unconstrained solves with negative entries dropped from the active set.
pub fn refit(y: &DVector<f64>, c: &UraCodebook, support: &[usize], iters: usize) -> Vec<f64> {
    let mut values = vec![0.0; support.len()];
    let mut active: Vec<usize> = (0..support.len()).collect();
    for _ in 0..iters.max(1) {
        if active.is_empty() {
            break;
        }
        let a = DMatrix::from_fn(c.d(), active.len(), |r, j| c.matrix()[(support[active[j]], r)]);
        let sol = match a.svd(true, true).solve(y, 1e-10) {
            Ok(s) => s,
            Err(_) => break,
        };
        values.iter_mut().for_each(|v| *v = 0.0);
        let mut next = Vec::with_capacity(active.len());
        for (j, &slot) in active.iter().enumerate() {
            if sol[j] > 0.0 {
                values[slot] = sol[j];
                next.push(slot);
            }
        }
        if next.len() == active.len() {
            break;
        }
        active = next;
    }
    values
}

/// Floors `values` then adds (or removes) units in order of fractional part
/// until the sum equals `total`. `tie` breaks equal fractions (larger first).
pub fn greedy_round(values: &[f64], tie: &[f64], total: u32) -> Vec<u32> {
    let mut out: Vec<u32> = values.iter().map(|v| v.max(0.0).floor() as u32).collect();
    if out.is_empty() {
        return out;
    }
    let frac: Vec<f64> = values.iter().zip(&out).map(|(v, &f)| v.max(0.0) - f as f64).collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        frac[b]
            .total_cmp(&frac[a])
            .then(tie[b].total_cmp(&tie[a]))
            .then(a.cmp(&b))
    });
    let mut sum: u32 = out.iter().sum();
    let mut cursor = 0;
    while sum < total {
        out[order[cursor % order.len()]] += 1;
        sum += 1;
        cursor += 1;
    }
    // Overshoot: remove from the smallest fractional parts first.
    let mut cursor = order.len();
    let mut stalled = 0;
    while sum > total && stalled < order.len() {
        cursor = if cursor == 0 { order.len() - 1 } else { cursor - 1 };
        let i = order[cursor];
        if out[i] > 0 {
            out[i] -= 1;
            sum -= 1;
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    out
}

/// Number of count vectors on `k` slots summing to `total`, saturating.
fn compositions(k: usize, total: u32) -> u64 {
    // C(total + k - 1, k - 1)
    let (top, r) = (total as u64 + k as u64 - 1, (k as u64 - 1).min(total as u64));
    let mut acc: u64 = 1;
    for i in 0..r {
        acc = match acc.checked_mul(top - i) {
            Some(v) => v / (i + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// Residual energy up to the constant `‖y‖²`: `xᵀ G x - 2 xᵀ b`.
fn energy(gram: &DMatrix<f64>, b: &[f64], x: &[u32]) -> f64 {
    let mut e = 0.0;
    for (a, &xa) in x.iter().enumerate() {
        if xa == 0 {
            continue;
        }
        let xa = xa as f64;
        e -= 2.0 * xa * b[a];
        for (c, &xc) in x.iter().enumerate() {
            e += xa * xc as f64 * gram[(a, c)];
        }
    }
    e
}

/// Exhaustive minimum of the residual over count vectors with the same sum.
fn exact_search(y: &DVector<f64>, c: &UraCodebook, support: &[usize], counts: &mut [u32]) {
    fn walk(i: usize, left: u32, cur: &mut [u32], f: &mut dyn FnMut(&[u32])) {
        if i + 1 == cur.len() {
            cur[i] = left;
            f(cur);
            return;
        }
        for v in 0..=left {
            cur[i] = v;
            walk(i + 1, left - v, cur, f);
        }
    }
    let k = support.len();
    let rows: Vec<DVector<f64>> = support.iter().map(|&i| c.matrix().row(i).transpose()).collect();
    let gram = DMatrix::from_fn(k, k, |a, b| rows[a].dot(&rows[b]));
    let b: Vec<f64> = rows.iter().map(|r| r.dot(y)).collect();
    let total: u32 = counts.iter().sum();
    let mut best = (energy(&gram, &b, counts), counts.to_vec());
    let mut cur = vec![0u32; k];
    walk(0, total, &mut cur, &mut |x| {
        let e = energy(&gram, &b, x);
        if e < best.0 - 1e-12 {
            best = (e, x.to_vec());
        }
    });
    counts.copy_from_slice(&best.1);
}

/// Best-improvement unit moves between support entries that keep the sum fixed.
fn local_search(y: &DVector<f64>, c: &UraCodebook, support: &[usize], counts: &mut [u32]) {
    let k = support.len();
    if k < 2 {
        return;
    }
    let rows: Vec<DVector<f64>> = support.iter().map(|&i| c.matrix().row(i).transpose()).collect();
    let gram = DMatrix::from_fn(k, k, |a, b| rows[a].dot(&rows[b]));
    let mut resid = y.clone();
    for (a, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            resid.axpy(-(cnt as f64), &rows[a], 1.0);
        }
    }
    let mut corr: Vec<f64> = rows.iter().map(|r| r.dot(&resid)).collect();
    for _ in 0..MAX_LOCAL_MOVES {
        // moving one unit from `from` to `to` changes ‖r‖² by
        // 2 r·(c_from - c_to) + ‖c_from - c_to‖²
        let mut best = (0.0, usize::MAX, usize::MAX);
        for from in 0..k {
            if counts[from] == 0 {
                continue;
            }
            for to in 0..k {
                if to == from {
                    continue;
                }
                let delta =
                    2.0 * (corr[from] - corr[to]) + gram[(from, from)] + gram[(to, to)] - 2.0 * gram[(from, to)];
                if delta < best.0 - 1e-12 {
                    best = (delta, from, to);
                }
            }
        }
        let (_, from, to) = best;
        if from == usize::MAX {
            break;
        }
        counts[from] -= 1;
        counts[to] += 1;
        for (a, cr) in corr.iter_mut().enumerate() {
            *cr += gram[(a, from)] - gram[(a, to)];
        }
    }
}

/// Integer activity vector with `Σ = max(1, round(k_hat))` supported on at
/// most `K` codewords. Small supports are searched exhaustively; larger ones
/// get unit-move descent from the rounded refit.
pub fn postprocess(
    x_hat: &[f64],
    k_hat: f64,
    y: &DVector<f64>,
    c: &UraCodebook,
    cfg: &PostprocConfig,
) -> ActivityVector {
    let n = x_hat.len();
    let clamped: Vec<f64> = x_hat
        .iter()
        .map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 })
        .collect();
    let (k, total) = targets(k_hat, n, cfg.top_k);
    let support = top_k_support(&clamped, k);
    let fitted = refit(y, c, &support, cfg.refit_iters);
    let tie: Vec<f64> = support.iter().map(|&i| clamped[i]).collect();
    let mut counts = greedy_round(&fitted, &tie, total);
    if cfg.local_search && !support.is_empty() {
        if compositions(support.len(), total) <= EXACT_SEARCH_LIMIT {
            exact_search(y, c, &support, &mut counts);
        } else {
            local_search(y, c, &support, &mut counts);
        }
    }
    let mut out = vec![0u32; n];
    for (&i, &cnt) in support.iter().zip(&counts) {
        out[i] = cnt;
    }
    ActivityVector::new(out)
}
