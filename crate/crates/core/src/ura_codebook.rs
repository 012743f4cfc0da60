//! The shared URA transmit codebook.
//!
//! Codewords are the ROWS of an `n x d` matrix. The received superposition is
//! `y = x C` for an activity vector `x` (length `n`). The codebook is stored
//! in the two-matrix form `C = row_normalise(D W)`, with `D` the base
//! codeword matrix and `W` a `d x d` shear/rotation that starts at identity.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result};

/// Pre-normalisation row norms below this are rejected.
pub const DEGENERATE_ROW_NORM: f64 = 1e-12;
/// Ridge added to the projected second moment in the data-driven initialisation.
pub const PINV_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Gaussian,
    Bernoulli,
    #[serde(rename = "data_driven")]
    DataDrivenPinv,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::Gaussian, InitScheme::Bernoulli, InitScheme::DataDrivenPinv];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Gaussian => "gaussian",
            InitScheme::Bernoulli => "bernoulli",
            InitScheme::DataDrivenPinv => "data_driven",
        }
    }
}

/// Base codeword matrix `D` (`n x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMatrix {
    matrix: DMatrix<f64>,
    scheme: InitScheme,
}

impl BaseMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>, scheme: InitScheme) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Empty("base matrix"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base matrix".into()));
        }
        Ok(Self { matrix, scheme })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Shear/rotation `W` (`d x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ShearMatrix {
    matrix: DMatrix<f64>,
}

impl ShearMatrix {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::shape(
                "shear",
                "non-empty square matrix",
                format!("{}x{}", matrix.nrows(), matrix.ncols()),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shear matrix".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn d(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Unit-row-norm codebook `C` (`n x d`), immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct UraCodebook {
    c: DMatrix<f64>,
    c_sq: DMatrix<f64>,
}

impl UraCodebook {
    /// Row-normalises `m`; rows with norm below [`DEGENERATE_ROW_NORM`] are an error.
    pub fn from_unnormalised(mut m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::Empty("codebook"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        for i in 0..m.nrows() {
            let norm = m.row(i).norm();
            if norm < DEGENERATE_ROW_NORM {
                return Err(Error::DegenerateCodeword { row: i, norm });
            }
            m.row_mut(i).unscale_mut(norm);
        }
        let c_sq = m.map(|v| v * v);
        Ok(Self { c: m, c_sq })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn d(&self) -> usize {
        self.c.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Elementwise square `C ⊙ C`.
    pub fn squared(&self) -> &DMatrix<f64> {
        &self.c_sq
    }

    /// Noiseless superposition `x C` for a real-valued activity vector.
    pub fn superpose(&self, x: &DVector<f64>) -> DVector<f64> {
        self.c.tr_mul(x)
    }

    /// Same codebook with rows permuted: row `i` of the result is row `perm[i]`.
    pub fn permuted_rows(&self, perm: &[usize]) -> Self {
        let c = DMatrix::from_fn(self.n(), self.d(), |i, j| self.c[(perm[i], j)]);
        let c_sq = c.map(|v| v * v);
        Self { c, c_sq }
    }
}

/// Builds the base matrix `D`.
///
/// `calibration` holds activity vectors (length `n`) from a perfect-aggregation
/// run and is only read by [`InitScheme::DataDrivenPinv`]. With `S` their
/// second moment and `M` the Gaussian draw of the same seed, the data-driven
/// base is the least-squares inverse map of the random sensing `x -> x M`:
/// `D = S M (Mᵀ S M + εI)⁺`. Codewords that never occur in the calibration
/// set keep a small ridge so their rows stay well defined.
pub fn init_base(
    n: usize,
    d: usize,
    scheme: InitScheme,
    seed: u64,
    calibration: Option<&[Vec<f64>]>,
) -> Result<BaseMatrix> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "codebook needs n, d >= 1 (got {n}x{d})"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::CODEBOOK]);
    let matrix = match scheme {
        InitScheme::Gaussian => DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal)),
        // Row-major fill keeps the draw order independent of nalgebra's storage order.
        InitScheme::Bernoulli => {
            let signs: Vec<f64> = (0..n * d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            DMatrix::from_row_slice(n, d, &signs)
        }
        InitScheme::DataDrivenPinv => {
            let calibration = calibration.filter(|c| !c.is_empty()).ok_or(Error::MissingCalibration)?;
            let m = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            data_driven(&m, calibration)?
        }
    };
    BaseMatrix::from_matrix(matrix, scheme)
}

fn data_driven(m: &DMatrix<f64>, calibration: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let d = m.ncols();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for (k, v) in calibration.iter().enumerate() {
        if v.len() != n {
            return Err(Error::shape(format!("calibration[{k}]"), n, v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("calibration[{k}]")));
        }
        let v = DVector::from_column_slice(v);
        s.ger(1.0, &v, &v, 1.0);
    }
    s /= calibration.len() as f64;
    let ridge = 1e-3 * (s.trace() / n as f64).max(1e-12);
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    let sm = &s * m;
    let mut gram = m.tr_mul(&sm);
    for i in 0..d {
        gram[(i, i)] += PINV_RIDGE;
    }
    let pinv = gram
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    Ok(sm * pinv)
}

/// `C = row_normalise(D W)`.
pub fn synthesize(base: &BaseMatrix, shear: &ShearMatrix) -> Result<UraCodebook> {
    if base.d() != shear.d() {
        return Err(Error::shape("shear", base.d(), shear.d()));
    }
    UraCodebook::from_unnormalised(base.matrix() * shear.matrix())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub n: usize,
    pub d: usize,
    pub max_abs_xcorr: f64,
    pub mean_abs_xcorr: f64,
    /// Number of rows in the popular subset.
    pub popular_rows: usize,
    pub popular_max_abs_xcorr: f64,
    pub popular_mean_abs_xcorr: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition: f64,
}

/// Pairwise cross-correlation and singular-value spread of `c`.
///
/// The popular subset is the `ceil(top_fraction * n)` rows (at least two) with
/// the largest popularity; without `popularity` the leading rows are used,
/// which is the popular set for an ordered codebook.
pub fn coherence_stats(c: &UraCodebook, popularity: Option<&[f64]>, top_fraction: f64) -> Result<CoherenceReport> {
    let n = c.n();
    if n < 2 {
        return Err(Error::InvalidArgument("coherence needs at least two codewords".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top fraction {top_fraction} outside (0, 1]"
        )));
    }
    let popular: Vec<usize> = match popularity {
        Some(pi) => {
            if pi.len() != n {
                return Err(Error::shape("popularity", n, pi.len()));
            }
            let sum: f64 = pi.iter().sum();
            if pi.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("popularity must be a distribution".into()));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]));
            idx
        }
        None => (0..n).collect(),
    };
    let p = ((top_fraction * n as f64).ceil() as usize).clamp(2, n);
    let mut is_popular = vec![false; n];
    for &i in &popular[..p] {
        is_popular[i] = true;
    }

    let gram = c.matrix() * c.matrix().transpose();
    let (mut max_all, mut sum_all, mut max_pop, mut sum_pop) = (0.0f64, 0.0, 0.0f64, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let g = gram[(i, j)].abs();
            max_all = max_all.max(g);
            sum_all += g;
            if is_popular[i] && is_popular[j] {
                max_pop = max_pop.max(g);
                sum_pop += g;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let pop_pairs = (p * (p - 1) / 2) as f64;

    let sv = c.matrix().clone().singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    Ok(CoherenceReport {
        n,
        d: c.d(),
        max_abs_xcorr: max_all,
        mean_abs_xcorr: sum_all / pairs,
        popular_rows: p,
        popular_max_abs_xcorr: max_pop,
        popular_mean_abs_xcorr: sum_pop / pop_pairs,
        sigma_max,
        sigma_min,
        condition: if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_entries_are_signs() {
        let b = init_base(4, 4, InitScheme::Bernoulli, 7, None).unwrap();
        assert!(b.matrix().iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = init_base(2, 2, InitScheme::Gaussian, 3, None).unwrap();
        let b = init_base(2, 2, InitScheme::Gaussian, 3, None).unwrap();
        assert_eq!(a, b);
        let c = init_base(2, 2, InitScheme::Gaussian, 4, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn data_driven_requires_calibration() {
        let e = init_base(4, 2, InitScheme::DataDrivenPinv, 1, None).unwrap_err();
        assert_eq!(e.to_string(), "missing calibration data");
        let e = init_base(4, 2, InitScheme::DataDrivenPinv, 1, Some(&[])).unwrap_err();
        assert!(matches!(e, Error::MissingCalibration));
        let bad = vec![vec![0.0, f64::NAN, 0.0, 1.0]];
        assert!(matches!(
            init_base(4, 2, InitScheme::DataDrivenPinv, 1, Some(&bad)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn identity_shear_keeps_unit_rows() {
        let d = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 0.0, 1.0]);
        let base = BaseMatrix::from_matrix(d.clone(), InitScheme::Gaussian).unwrap();
        let c = synthesize(&base, &ShearMatrix::identity(2)).unwrap();
        assert_eq!(c.matrix(), &d);
    }

    #[test]
    fn synthesize_normalises_rows() {
        let base = BaseMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            InitScheme::Gaussian,
        )
        .unwrap();
        let c = synthesize(&base, &ShearMatrix::identity(2)).unwrap();
        assert_eq!(c.matrix(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn synthesize_rejects_degenerate_and_mismatched() {
        let base = BaseMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]),
            InitScheme::Gaussian,
        )
        .unwrap();
        let e = synthesize(&base, &ShearMatrix::identity(2)).unwrap_err();
        assert!(matches!(e, Error::DegenerateCodeword { row: 1, .. }));
        let e = synthesize(&base, &ShearMatrix::identity(3)).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn orthonormal_coherence() {
        let c = UraCodebook::from_unnormalised(DMatrix::identity(2, 2)).unwrap();
        let r = coherence_stats(&c, None, 0.1).unwrap();
        assert_eq!(r.max_abs_xcorr, 0.0);
        assert!((r.sigma_max - 1.0).abs() < 1e-12 && (r.sigma_min - 1.0).abs() < 1e-12);
        assert!((r.condition - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_fully_correlated() {
        let c = UraCodebook::from_unnormalised(DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let r = coherence_stats(&c, None, 0.1).unwrap();
        assert!((r.max_abs_xcorr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherence_needs_pairs_and_valid_popularity() {
        let c = UraCodebook::from_unnormalised(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert!(coherence_stats(&c, None, 0.1).is_err());
        let c = UraCodebook::from_unnormalised(DMatrix::identity(3, 3)).unwrap();
        assert!(coherence_stats(&c, Some(&[0.5, 0.5, 0.5]), 0.5).is_err());
        assert!(coherence_stats(&c, Some(&[0.5, 0.5]), 0.5).is_err());
    }

    #[test]
    fn popular_subset_follows_popularity() {
        // rows 1 and 2 are identical and the most popular
        let c =
            UraCodebook::from_unnormalised(DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]))
                .unwrap();
        let r = coherence_stats(&c, Some(&[0.1, 0.4, 0.4, 0.1]), 0.5).unwrap();
        assert_eq!(r.popular_rows, 2);
        assert!((r.popular_max_abs_xcorr - 1.0).abs() < 1e-12);
        let r = coherence_stats(&c, Some(&[0.4, 0.4, 0.1, 0.1]), 0.5).unwrap();
        assert!(r.popular_max_abs_xcorr.abs() < 1e-12);
    }

    /// Mean squared error of the best linear reconstruction `x ≈ (x C) G`
    /// fitted by least squares on the calibration set itself.
    fn linear_reconstruction_error(c: &DMatrix<f64>, xs: &[Vec<f64>]) -> f64 {
        let n = c.nrows();
        let x = DMatrix::from_fn(xs.len(), n, |i, j| xs[i][j]);
        let y = &x * c;
        let g = y.clone().pseudo_inverse(1e-10).unwrap() * &x;
        (&y * g - &x).norm_squared() / xs.len() as f64
    }

    fn skewed_counts(n: usize, samples: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::distr::{weighted::WeightedIndex, Distribution};
        let weights: Vec<f64> = (0..n).map(|i| 0.5f64.powi(i as i32)).collect();
        let pick = WeightedIndex::new(&weights).unwrap();
        let mut rng = rng::stream(seed, &[99]);
        (0..samples)
            .map(|_| {
                let mut x = vec![0.0; n];
                for _ in 0..5 {
                    x[pick.sample(&mut rng)] += 1.0;
                }
                x
            })
            .collect()
    }

    #[test]
    fn data_driven_reconstructs_no_worse_than_gaussian() {
        for seed in 0..10 {
            let xs = skewed_counts(8, 400, seed);
            let dd = init_base(8, 4, InitScheme::DataDrivenPinv, seed, Some(&xs)).unwrap();
            let g = init_base(8, 4, InitScheme::Gaussian, seed, None).unwrap();
            let id = ShearMatrix::identity(4);
            let e_dd = linear_reconstruction_error(synthesize(&dd, &id).unwrap().matrix(), &xs);
            let e_g = linear_reconstruction_error(synthesize(&g, &id).unwrap().matrix(), &xs);
            assert!(e_dd <= e_g + 1e-9, "seed {seed}: {e_dd} > {e_g}");
        }
    }

    #[test]
    fn coherence_matches_dense_oracle() {
        let base = init_base(64, 64, InitScheme::Gaussian, 11, None).unwrap();
        let c = synthesize(&base, &ShearMatrix::identity(64)).unwrap();
        let r = coherence_stats(&c, None, 0.1).unwrap();

        // independent path: explicit row dot products and eigenvalues of C Cᵀ
        let m = c.matrix();
        let (mut max, mut sum) = (0.0f64, 0.0);
        for i in 0..64 {
            for j in 0..i {
                let g: f64 = (0..64).map(|k| m[(i, k)] * m[(j, k)]).sum::<f64>().abs();
                max = max.max(g);
                sum += g;
            }
        }
        let eig = (m * m.transpose()).symmetric_eigenvalues();
        let smax = eig.max().max(0.0).sqrt();
        let smin = eig.min().max(0.0).sqrt();
        assert!((r.max_abs_xcorr - max).abs() < 1e-8);
        assert!((r.mean_abs_xcorr - sum / 2016.0).abs() < 1e-8);
        assert!((r.sigma_max - smax).abs() < 1e-8, "{} {}", r.sigma_max, smax);
        assert!((r.sigma_min - smin).abs() < 1e-6, "{} {}", r.sigma_min, smin);
        assert_eq!(r.popular_rows, 7);
    }
}
