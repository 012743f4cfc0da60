//! Global model: a one-hidden-layer ReLU classifier with softmax
//! cross-entropy, flattened into a single parameter vector
//! `[W1 (in x hidden), b1, W2 (classes x hidden), b2]`.
//!
//! `W1` is stored input-major, so the weights fed by one input feature are
//! contiguous; features that are never active give all-zero gradient
//! fragments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::rng::{self, tag};

/// A differentiable empirical loss over a dataset.
pub trait Objective: Sync {
    fn num_params(&self) -> usize;

    /// Mean loss over `batch`; the gradient is written into `grad`.
    fn loss_grad(&self, w: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn num_params(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.classes * self.hidden + self.classes
    }

    /// He-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut g = rng::stream(seed, &[tag::MODEL_INIT]);
        let mut w = vec![0.0; self.num_params()];
        let (w1, rest) = w.split_at_mut(self.hidden * self.inputs);
        let a1 = (6.0 / self.inputs as f64).sqrt();
        w1.iter_mut().for_each(|v| *v = g.random_range(-a1..a1));
        let w2 = &mut rest[self.hidden..self.hidden + self.classes * self.hidden];
        let a2 = (6.0 / self.hidden as f64).sqrt();
        w2.iter_mut().for_each(|v| *v = g.random_range(-a2..a2));
        w
    }

    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = w.split_at(self.hidden * self.inputs);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (w1, b1, w2, b2) = self.split(w);
        hidden.copy_from_slice(b1);
        for (row, &xi) in w1.chunks_exact(self.hidden).zip(x) {
            if xi != 0.0 {
                for (h, p) in hidden.iter_mut().zip(row) {
                    *h += p * xi;
                }
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        for (o, (row, b)) in logits.iter_mut().zip(w2.chunks_exact(self.hidden).zip(b2)) {
            *o = b + row.iter().zip(hidden.iter()).map(|(p, q)| p * q).sum::<f64>();
        }
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward(w, x, &mut hidden, &mut logits);
        argmax(&logits)
    }

    pub fn accuracy(&self, w: &[f64], data: &Dataset) -> f64 {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let correct = (0..data.len())
            .filter(|&i| {
                self.forward(w, data.row(i), &mut hidden, &mut logits);
                argmax(&logits) == data.labels[i]
            })
            .count();
        correct as f64 / data.len().max(1) as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl Objective for Mlp {
    fn num_params(&self) -> usize {
        Mlp::num_params(self)
    }

    fn loss_grad(&self, w: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (_, _, w2, _) = self.split(w);
        let n1 = self.hidden * self.inputs;
        let n2 = n1 + self.hidden;
        let n3 = n2 + self.classes * self.hidden;
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let mut dh = vec![0.0; self.hidden];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            let y = data.labels[i];
            self.forward(w, x, &mut hidden, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            loss += (z.ln() + max - logits[y]) * scale;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..self.classes {
                let p = (logits[c] - max).exp() / z;
                let dlogit = (p - if c == y { 1.0 } else { 0.0 }) * scale;
                grad[n3 + c] += dlogit;
                let row = &mut grad[n2 + c * self.hidden..n2 + (c + 1) * self.hidden];
                for (gw, h) in row.iter_mut().zip(&hidden) {
                    *gw += dlogit * h;
                }
                for (d, wv) in dh.iter_mut().zip(&w2[c * self.hidden..(c + 1) * self.hidden]) {
                    *d += dlogit * wv;
                }
            }
            for j in 0..self.hidden {
                if hidden[j] <= 0.0 {
                    dh[j] = 0.0;
                } else {
                    grad[n1 + j] += dh[j];
                }
            }
            for (row, &xi) in grad[..n1].chunks_exact_mut(self.hidden).zip(x) {
                if xi != 0.0 {
                    for (gw, d) in row.iter_mut().zip(&dh) {
                        *gw += d * xi;
                    }
                }
            }
        }
        loss
    }
}
