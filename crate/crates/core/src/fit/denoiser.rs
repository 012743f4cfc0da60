//! Layer-wise training of the CNN denoisers.
//!
//! Each layer's network is fitted to the residual `x − m` left by the
//! spike-and-slab posterior, on feature maps produced by the already fitted
//! earlier layers. The first convolution is trained in standardised
//! coordinates: `w1 = u / std`, `b1 = ub − Σ u·mean / std`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{batch_loss, Adam, DecoderFit, Trial};
use crate::decoder::{denoiser_inputs, output_block, run_layers, Cnn, DecoderParams, FEATURE_CHANNELS};
use crate::par::{self, Exec};
use crate::rng::{self, tag};
use crate::ura_codebook::UraCodebook;
use crate::Result;

/// Gradients of a CNN in its stored layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl CnnGrad {
    fn zeros(cnn: &Cnn) -> Self {
        Self {
            w1: vec![0.0; cnn.w1().len()],
            b1: vec![0.0; cnn.b1().len()],
            w2: vec![0.0; cnn.w2().len()],
            b2: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        let pairs = [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.b2 += other.b2;
    }
}

/// Squared error `Σ_p (scale·cnn(Φ)_p − target_p)²` and its gradient.
pub fn squared_error_grad(cnn: &Cnn, phi: &[f64], target: &[f64], scale: f64) -> Result<(f64, CnnGrad)> {
    let n = target.len();
    let (cin, hidden, kernel) = (cnn.in_channels(), cnn.hidden(), cnn.kernel());
    let half = (kernel / 2) as isize;
    let h = cnn.hidden_features(phi, n);
    let out = cnn.output_from_hidden(&h, n);
    let mut g = CnnGrad::zeros(cnn);
    let mut loss = 0.0;
    let g_out: Vec<f64> = out
        .iter()
        .zip(target)
        .map(|(o, t)| {
            let e = scale * o - t;
            loss += e * e;
            2.0 * scale * e
        })
        .collect();
    g.b2 = g_out.iter().sum();
    let at = |p: isize| (p >= 0 && p < n as isize).then_some(p as usize);
    let mut g_a = vec![0.0; n];
    for o in 0..hidden {
        let hrow = &h[o * n..(o + 1) * n];
        g_a.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..kernel {
            let shift = k as isize - half;
            let w = cnn.w2()[o * kernel + k];
            let mut acc = 0.0;
            for p in 0..n {
                if let Some(q) = at(p as isize + shift) {
                    acc += g_out[p] * hrow[q];
                    g_a[q] += w * g_out[p];
                }
            }
            g.w2[o * kernel + k] = acc;
        }
        for (ga, hv) in g_a.iter_mut().zip(hrow) {
            if *hv <= 0.0 {
                *ga = 0.0;
            }
        }
        g.b1[o] = g_a.iter().sum();
        for c in 0..cin {
            let input = &phi[c * n..(c + 1) * n];
            for k in 0..kernel {
                let shift = k as isize - half;
                let mut acc = 0.0;
                for p in 0..n {
                    if let Some(q) = at(p as isize + shift) {
                        acc += g_a[p] * input[q];
                    }
                }
                g.w1[(o * cin + c) * kernel + k] = acc;
            }
        }
    }
    Ok((loss, g))
}

/// Per-channel mean and standard deviation of channel-major feature maps.
fn channel_moments(maps: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; FEATURE_CHANNELS];
    let mut sq = vec![0.0; FEATURE_CHANNELS];
    let count = (maps.len() * n) as f64;
    for phi in maps {
        for ch in 0..FEATURE_CHANNELS {
            for v in &phi[ch * n..(ch + 1) * n] {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
        })
        .collect();
    (mean, std)
}

/// Standardised parameters `[u, ub, w2, b2]` of one network.
struct Standardised {
    theta: DMatrix<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    hidden: usize,
    kernel: usize,
}

impl Standardised {
    fn init(mean: Vec<f64>, std: Vec<f64>, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let n_u = hidden * FEATURE_CHANNELS * kernel;
        let mut theta = DMatrix::zeros(n_u + hidden + hidden * kernel + 1, 1);
        let scale = (2.0 / (FEATURE_CHANNELS * kernel) as f64).sqrt();
        for i in 0..n_u {
            theta[i] = scale * rng.sample::<f64, _>(StandardNormal);
        }
        for o in 0..hidden {
            theta[n_u + o] = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Self {
            theta,
            mean,
            std,
            hidden,
            kernel,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let n_u = self.hidden * FEATURE_CHANNELS * self.kernel;
        (n_u, n_u + self.hidden, n_u + self.hidden + self.hidden * self.kernel)
    }

    fn cnn(&self) -> Result<Cnn> {
        let (ub_at, w2_at, b2_at) = self.offsets();
        let k = self.kernel;
        let mut w1 = vec![0.0; ub_at];
        let mut b1 = vec![0.0; self.hidden];
        for o in 0..self.hidden {
            let mut bias = self.theta[ub_at + o];
            for c in 0..FEATURE_CHANNELS {
                for t in 0..k {
                    let i = (o * FEATURE_CHANNELS + c) * k + t;
                    w1[i] = self.theta[i] / self.std[c];
                    bias -= w1[i] * self.mean[c];
                }
            }
            b1[o] = bias;
        }
        let w2 = self.theta.as_slice()[w2_at..b2_at].to_vec();
        Cnn::from_parts(FEATURE_CHANNELS, self.hidden, k, w1, b1, w2, self.theta[b2_at])
    }

    /// Chain rule from the stored layout back to `theta`.
    fn pull_back(&self, g: &CnnGrad) -> DMatrix<f64> {
        let (ub_at, w2_at, b2_at) = self.offsets();
        let k = self.kernel;
        let mut out = DMatrix::zeros(self.theta.nrows(), 1);
        for o in 0..self.hidden {
            out[ub_at + o] = g.b1[o];
            for c in 0..FEATURE_CHANNELS {
                for t in 0..k {
                    let i = (o * FEATURE_CHANNELS + c) * k + t;
                    out[i] = (g.w1[i] - g.b1[o] * self.mean[c]) / self.std[c];
                }
            }
        }
        out.as_mut_slice()[w2_at..b2_at].copy_from_slice(&g.w2);
        out[b2_at] = g.b2;
        out
    }
}

/// Feature maps and residual targets `(x − m) / ρ` entering `layer`.
fn layer_data(
    c: &UraCodebook,
    params: &DecoderParams,
    trials: &[Trial],
    layer: usize,
    exec: Exec,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut prefix = params.clone();
    prefix.layers.truncate(layer);
    let s = params.scalars(layer);
    let rho = s.rho.max(1e-6);
    let per_trial = par::map_indexed(exec, trials.len(), |i| -> Option<(Vec<f64>, Vec<f64>)> {
        let t = &trials[i];
        let (mut state, _) = run_layers(&t.y, c, &t.prior, &prefix, t.sigma2_0, None, |_, _| {}).ok()?;
        state.layer = layer;
        output_block(&mut state, c, &t.y, &s).ok()?;
        let inputs = denoiser_inputs(&state, c, &t.y, params, &s);
        let target =
            t.x.counts()
                .iter()
                .zip(&inputs.m)
                .map(|(&x, m)| (x as f64 - m) / rho)
                .collect();
        Some((inputs.features(), target))
    });
    per_trial.into_iter().flatten().collect()
}

/// Trains one network on `data` with minibatch Adam.
fn train_network(
    data: &[(Vec<f64>, Vec<f64>)],
    n: usize,
    cfg: &DecoderFit,
    seed: u64,
    layer: usize,
    exec: Exec,
) -> Result<Cnn> {
    let maps: Vec<Vec<f64>> = data.iter().map(|(phi, _)| phi.clone()).collect();
    let (mean, std) = channel_moments(&maps, n);
    let mut rng = rng::stream(seed, &[tag::FIT, 2, layer as u64]);
    let mut net = Standardised::init(mean, std, cfg.cnn_hidden, cfg.cnn_kernel, &mut rng);
    let mut opt = Adam::new(net.theta.nrows(), 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.cnn_batch.clamp(1, data.len());
    let mut step = 0;
    while step < cfg.cnn_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if step == cfg.cnn_steps {
                break;
            }
            let cnn = net.cnn()?;
            let grads = par::map_indexed(exec, chunk.len(), |i| {
                let (phi, target) = &data[chunk[i]];
                squared_error_grad(&cnn, phi, target, 1.0).map(|(_, g)| g)
            });
            let mut total = CnnGrad::zeros(&cnn);
            for g in grads {
                total.add(&g?);
            }
            let scale = 1.0 / (chunk.len() * n) as f64;
            let g = net.pull_back(&total) * scale;
            let lr = cfg.cnn_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.cnn_steps as f64).cos());
            opt.step(&mut net.theta, &g, lr);
            step += 1;
        }
    }
    net.cnn()
}

/// Trains every layer's CNN in turn. A network is kept only if it lowers
/// the batch loss; returns the final loss and the kept layers.
pub fn fit_cnn_layers(
    c: &UraCodebook,
    params: &mut DecoderParams,
    trials: &[Trial],
    cfg: &DecoderFit,
    seed: u64,
    exec: Exec,
) -> Result<(f64, Vec<usize>)> {
    let mut best = batch_loss(c, params, trials, cfg, exec);
    let mut kept = Vec::new();
    if cfg.cnn_steps == 0 {
        return Ok((best, kept));
    }
    for layer in 0..params.num_layers() {
        let data = layer_data(c, params, trials, layer, exec);
        if data.is_empty() {
            continue;
        }
        let cnn = train_network(&data, c.n(), cfg, seed, layer, exec)?;
        let mut cand = params.clone();
        cand.layers[layer].cnn = cnn;
        let loss = batch_loss(c, &cand, trials, cfg, exec);
        if loss < best {
            best = loss;
            *params = cand;
            kept.push(layer);
        }
    }
    Ok((best, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_cnn(rng: &mut impl Rng, cin: usize, hidden: usize, kernel: usize) -> Cnn {
        let mut draw = |len: usize| {
            (0..len)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        };
        let w1 = draw(hidden * cin * kernel);
        let b1 = draw(hidden);
        let w2 = draw(hidden * kernel);
        let b2 = draw(1)[0];
        Cnn::from_parts(cin, hidden, kernel, w1, b1, w2, b2).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (cin, hidden, kernel, n) = (2, 3, 3, 7);
        let cnn = random_cnn(&mut rng, cin, hidden, kernel);
        let phi: Vec<f64> = (0..cin * n).map(|_| rng.sample(StandardNormal)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let (_, g) = squared_error_grad(&cnn, &phi, &target, 0.7).unwrap();
        let loss = |w1: &[f64], b1: &[f64], w2: &[f64], b2: f64| {
            let c = Cnn::from_parts(cin, hidden, kernel, w1.to_vec(), b1.to_vec(), w2.to_vec(), b2).unwrap();
            squared_error_grad(&c, &phi, &target, 0.7).unwrap().0
        };
        let (w1, b1, w2, b2) = (cnn.w1().to_vec(), cnn.b1().to_vec(), cnn.w2().to_vec(), cnn.b2());
        let h = 1e-6;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-5 * (1.0 + an.abs());
        for i in 0..w1.len() {
            let (mut a, mut b) = (w1.clone(), w1.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a, &b1, &w2, b2) - loss(&b, &b1, &w2, b2)) / (2.0 * h);
            assert!(close(fd, g.w1[i]), "w1[{i}]: {fd} vs {}", g.w1[i]);
        }
        for i in 0..b1.len() {
            let (mut a, mut b) = (b1.clone(), b1.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&w1, &a, &w2, b2) - loss(&w1, &b, &w2, b2)) / (2.0 * h);
            assert!(close(fd, g.b1[i]), "b1[{i}]: {fd} vs {}", g.b1[i]);
        }
        for i in 0..w2.len() {
            let (mut a, mut b) = (w2.clone(), w2.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&w1, &b1, &a, b2) - loss(&w1, &b1, &b, b2)) / (2.0 * h);
            assert!(close(fd, g.w2[i]), "w2[{i}]: {fd} vs {}", g.w2[i]);
        }
        let fd = (loss(&w1, &b1, &w2, b2 + h) - loss(&w1, &b1, &w2, b2 - h)) / (2.0 * h);
        assert!(close(fd, g.b2));
    }

    #[test]
    fn standardised_parameters_fold_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 9;
        let mean: Vec<f64> = (0..FEATURE_CHANNELS).map(|c| c as f64 - 2.0).collect();
        let std: Vec<f64> = (0..FEATURE_CHANNELS).map(|c| 0.5 + c as f64).collect();
        let mut net = Standardised::init(mean.clone(), std.clone(), 4, 3, &mut rng);
        let (_, w2_at, _) = net.offsets();
        for i in w2_at..net.theta.nrows() {
            net.theta[i] = rng.sample(StandardNormal);
        }
        let phi: Vec<f64> = (0..FEATURE_CHANNELS * n).map(|_| rng.sample(StandardNormal)).collect();
        let target = vec![0.0; n];
        let (_, g) = squared_error_grad(&net.cnn().unwrap(), &phi, &target, 1.0).unwrap();
        let pulled = net.pull_back(&g);
        let h = 1e-6;
        for i in [0, 5, 40, w2_at - 1, w2_at + 2, net.theta.nrows() - 1] {
            let mut up = Standardised {
                theta: net.theta.clone(),
                mean: mean.clone(),
                std: std.clone(),
                hidden: 4,
                kernel: 3,
            };
            let mut dn = Standardised {
                theta: net.theta.clone(),
                mean: mean.clone(),
                std: std.clone(),
                hidden: 4,
                kernel: 3,
            };
            up.theta[i] += h;
            dn.theta[i] -= h;
            let f = |s: &Standardised| squared_error_grad(&s.cnn().unwrap(), &phi, &target, 1.0).unwrap().0;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - pulled[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "theta[{i}]: {fd} vs {}",
                pulled[i]
            );
        }
    }
}
