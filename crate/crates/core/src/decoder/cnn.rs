//! Two-layer 1D convolutional denoiser over the codeword axis:
//! conv(in -> hidden, kernel k, zero padding) -> ReLU -> conv(hidden -> 1).

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    in_channels: usize,
    hidden: usize,
    kernel: usize,
    /// `[hidden][in][kernel]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[hidden][kernel]`
    w2: Vec<f64>,
    b2: f64,
}

impl Cnn {
    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            hidden,
            kernel,
            w1: vec![0.0; hidden * in_channels * kernel],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * kernel],
            b2: 0.0,
        }
    }

    pub fn from_parts(
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {kernel} must be odd")));
        }
        let check = |field: &str, expected: usize, found: usize| {
            if expected != found {
                Err(Error::shape(field, expected, found))
            } else {
                Ok(())
            }
        };
        check("conv1_weight", hidden * in_channels * kernel, w1.len())?;
        check("conv1_bias", hidden, b1.len())?;
        check("conv2_weight", hidden * kernel, w2.len())?;
        if w1
            .iter()
            .chain(&b1)
            .chain(&w2)
            .chain(std::iter::once(&b2))
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("cnn weights".into()));
        }
        Ok(Self {
            in_channels,
            hidden,
            kernel,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    /// True when the output is identically zero.
    pub fn is_null(&self) -> bool {
        self.b2 == 0.0 && self.w2.iter().all(|&w| w == 0.0)
    }

    /// Hidden activations `[hidden][n]` after the ReLU.
    pub fn hidden_features(&self, phi: &[f64], n: usize) -> Vec<f64> {
        let half = (self.kernel / 2) as isize;
        let mut h = vec![0.0; self.hidden * n];
        for o in 0..self.hidden {
            let row = &mut h[o * n..(o + 1) * n];
            row.iter_mut().for_each(|v| *v = self.b1[o]);
            for c in 0..self.in_channels {
                let input = &phi[c * n..(c + 1) * n];
                for k in 0..self.kernel {
                    let w = self.w1[(o * self.in_channels + c) * self.kernel + k];
                    if w == 0.0 {
                        continue;
                    }
                    accumulate_shifted(row, input, w, k as isize - half);
                }
            }
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h
    }

    /// Denoiser output for the channel-major feature map `phi` (`in_channels x n`).
    pub fn forward(&self, phi: &[f64], n: usize) -> Result<Vec<f64>> {
        if phi.len() != self.in_channels * n {
            return Err(Error::shape("feature map", self.in_channels * n, phi.len()));
        }
        if self.is_null() {
            return Ok(vec![0.0; n]);
        }
        let h = self.hidden_features(phi, n);
        Ok(self.output_from_hidden(&h, n))
    }

    pub fn output_from_hidden(&self, h: &[f64], n: usize) -> Vec<f64> {
        let half = (self.kernel / 2) as isize;
        let mut out = vec![self.b2; n];
        for o in 0..self.hidden {
            let input = &h[o * n..(o + 1) * n];
            for k in 0..self.kernel {
                let w = self.w2[o * self.kernel + k];
                if w != 0.0 {
                    accumulate_shifted(&mut out, input, w, k as isize - half);
                }
            }
        }
        out
    }
}

/// `out[p] += w * input[p + shift]` with zero padding outside `input`.
fn accumulate_shifted(out: &mut [f64], input: &[f64], w: f64, shift: isize) {
    let n = out.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let src = &input[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
    for (o, s) in out[lo..hi].iter_mut().zip(src) {
        *o += w * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn zero_weights_give_zero() {
        let cnn = Cnn::zeros(6, 32, 3);
        let phi: Vec<f64> = (0..6 * 10).map(|i| i as f64).collect();
        assert_eq!(cnn.forward(&phi, 10).unwrap(), vec![0.0; 10]);
    }

    #[test]
    fn centre_tap_identity() {
        // one channel routed through a single hidden unit with centre taps 1
        let mut w1 = vec![0.0; 2 * 3 * 3];
        w1[1] = 1.0; // hidden 0, channel 0, centre
        let mut w2 = vec![0.0; 2 * 3];
        w2[1] = 1.0;
        let cnn = Cnn::from_parts(3, 2, 3, w1, vec![0.0; 2], w2, 0.0).unwrap();
        let mut phi = vec![0.0; 3 * 7];
        phi[3] = 2.5; // impulse in channel 0
        phi[7 + 3] = 9.0; // other channels ignored
        let out = cnn.forward(&phi, 7).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(Cnn::from_parts(6, 32, 3, vec![0.0; 10], vec![0.0; 32], vec![0.0; 96], 0.0).is_err());
        assert!(Cnn::from_parts(6, 32, 2, vec![0.0; 384], vec![0.0; 32], vec![0.0; 64], 0.0).is_err());
        let cnn = Cnn::zeros(6, 32, 3);
        assert!(cnn.forward(&[0.0; 5], 1).is_err());
    }

    /// Direct convolution loop, written independently of `accumulate_shifted`.
    pub(crate) fn naive_forward(cnn: &Cnn, phi: &[f64], n: usize) -> Vec<f64> {
        let (cin, hid, k) = (cnn.in_channels, cnn.hidden, cnn.kernel);
        let at = |ch: &[f64], p: isize| -> f64 {
            if p < 0 || p >= n as isize {
                0.0
            } else {
                ch[p as usize]
            }
        };
        let mut h = vec![vec![0.0; n]; hid];
        for o in 0..hid {
            for p in 0..n {
                let mut acc = cnn.b1[o];
                for c in 0..cin {
                    for t in 0..k {
                        let pos = p as isize + t as isize - (k / 2) as isize;
                        acc += cnn.w1[o * cin * k + c * k + t] * at(&phi[c * n..(c + 1) * n], pos);
                    }
                }
                h[o][p] = if acc > 0.0 { acc } else { 0.0 };
            }
        }
        (0..n)
            .map(|p| {
                let mut acc = cnn.b2;
                for o in 0..hid {
                    for t in 0..k {
                        let pos = p as isize + t as isize - (k / 2) as isize;
                        acc += cnn.w2[o * k + t] * at(&h[o], pos);
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn matches_naive_convolution() {
        let mut r = rng::stream(21, &[0]);
        let mut g = || r.random::<f64>() * 2.0 - 1.0;
        let n = 37;
        let w1: Vec<f64> = (0..32 * 6 * 3).map(|_| g()).collect();
        let b1: Vec<f64> = (0..32).map(|_| g()).collect();
        let w2: Vec<f64> = (0..32 * 3).map(|_| g()).collect();
        let b2 = g();
        let cnn = Cnn::from_parts(6, 32, 3, w1, b1, w2, b2).unwrap();
        let phi: Vec<f64> = (0..6 * n).map(|_| g() * 3.0).collect();
        let fast = cnn.forward(&phi, n).unwrap();
        let slow = naive_forward(&cnn, &phi, n);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
