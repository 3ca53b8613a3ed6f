//! Eigenvalue spectra of correlation matrices and random-matrix benchmarks.
//!
//! Two null models are provided: the Marchenko-Pastur law for uncorrelated
//! data with `Q = T/N` samples per variable, and a Monte Carlo ensemble of
//! sample correlation matrices drawn from Gaussian data whose population
//! correlation is constant off the diagonal.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{check_square, max_asymmetry};
use crate::returns::pearson;

/// Eigenvalues below zero but above `-NEGATIVE_EIGEN_TOL` are rounding noise.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-8;
const ASYMMETRY_TOL: f64 = 1e-9;

pub const DEFAULT_BINS_EMPIRICAL: usize = 32;
pub const DEFAULT_BINS_WISHART: usize = 24;
pub const DEFAULT_BINS_MP: [usize; 4] = [17, 8, 8, 5];
pub const DEFAULT_WISHART_SAMPLES: usize = 2000;

/// All eigenvalues of a symmetric matrix, ascending.
pub fn eigenvalues(matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_square(matrix)?;
    let asym = max_asymmetry(matrix);
    if asym > ASYMMETRY_TOL {
        return Err(Error::Shape(format!(
            "matrix is not symmetric (|Aij - Aji| = {asym:e})"
        )));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Mean of the `N(N−1)` off-diagonal entries.
pub fn mean_offdiag(matrix: &DMatrix<f64>) -> Result<f64> {
    let n = check_square(matrix)?;
    if n < 2 {
        return Err(Error::Shape("mean off-diagonal needs N ≥ 2".into()));
    }
    let total: f64 = matrix.iter().sum();
    let diag: f64 = matrix.diagonal().iter().sum();
    Ok((total - diag) / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpParams {
    /// Samples per variable, `T/N`.
    pub q: f64,
    pub sigma2: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl MpParams {
    pub fn new(q: f64, sigma2: f64) -> Result<Self> {
        if !(q.is_finite() && q > 0.0 && sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::Spec(format!(
                "Marchenko-Pastur needs Q > 0 and sigma2 > 0, got Q = {q}, sigma2 = {sigma2}"
            )));
        }
        let r = 1.0 / q.sqrt();
        Ok(Self {
            q,
            sigma2,
            lambda_minus: sigma2 * (1.0 - r) * (1.0 - r),
            lambda_plus: sigma2 * (1.0 + r) * (1.0 + r),
        })
    }

    /// `Q = T/N` with unit variance, as for correlation matrices.
    pub fn from_geometry(t: usize, n: usize) -> Result<Self> {
        Self::new(t as f64 / n as f64, 1.0)
    }

    /// Weight of the atom at zero when `Q < 1`.
    pub fn point_mass(&self) -> f64 {
        (1.0 - self.q).max(0.0)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lambda_minus, self.lambda_plus)
    }
}

/// Continuous part of the Marchenko-Pastur density.
pub fn mp_density(lambda: f64, params: &MpParams) -> f64 {
    let (lo, hi) = params.support();
    if !(lambda > lo && lambda < hi) {
        return 0.0;
    }
    params.q / (2.0 * std::f64::consts::PI * params.sigma2 * lambda)
        * ((hi - lambda) * (lambda - lo)).sqrt()
}

/// Panels for the θ-quadrature in [`mp_cdf`].
const MP_CDF_PANELS: usize = 8192;

/// `P(λ' ≤ λ)` including the atom at zero.
///
/// Integrates in `θ` with `λ = λ₋ + (λ₊ − λ₋)(1 − cos θ)/2`, which removes the
/// square-root endpoints and leaves a smooth integrand for Simpson's rule.
pub fn mp_cdf(lambda: f64, params: &MpParams) -> f64 {
    let atom = if lambda >= 0.0 {
        params.point_mass()
    } else {
        0.0
    };
    let (lo, hi) = params.support();
    if lambda <= lo {
        return atom;
    }
    if lambda >= hi {
        return 1.0;
    }
    let half = 0.5 * (hi - lo);
    let theta_max = (1.0 - (lambda - lo) / half).clamp(-1.0, 1.0).acos();
    let coef = params.q / (2.0 * std::f64::consts::PI * params.sigma2) * half * half;
    let f = |theta: f64| {
        let s = theta.sin();
        coef * s * s / (lo + half * (1.0 - theta.cos()))
    };
    let n = MP_CDF_PANELS;
    let h = theta_max / n as f64;
    let mut sum = f(0.0) + f(theta_max);
    for i in 1..n {
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    (atom + sum * h / 3.0).min(1.0)
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WishartEnsembleSpec {
    pub n: usize,
    pub t: usize,
    /// Constant off-diagonal population correlation.
    pub x_bar: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl WishartEnsembleSpec {
    /// Open interval of `x_bar` for which `(1−x̄)I + x̄J` is positive definite.
    pub fn x_bar_bounds(n: usize) -> (f64, f64) {
        (-1.0 / (n as f64 - 1.0), 1.0)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 || self.t < 2 {
            return Err(Error::Spec(format!(
                "ensemble needs N ≥ 2 and T ≥ 2, got N = {}, T = {}",
                self.n, self.t
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Spec("ensemble needs at least one sample".into()));
        }
        let (lo, hi) = Self::x_bar_bounds(self.n);
        if !(self.x_bar > lo && self.x_bar < hi) {
            return Err(Error::Spec(format!(
                "x_bar = {} outside ({lo}, {hi})",
                self.x_bar
            )));
        }
        Ok(())
    }
}

/// One sample correlation matrix of the ensemble. Sample `s` draws from its own
/// ChaCha stream, so samples can be generated in any order.
pub fn sample_wishart_correlation(
    spec: &WishartEnsembleSpec,
    sample: usize,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, t) = (spec.n, spec.t);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample as u64);

    // Square root of (1−x̄)I + x̄J is αI + βJ.
    let alpha = (1.0 - spec.x_bar).sqrt();
    let beta = ((1.0 + (n as f64 - 1.0) * spec.x_bar).sqrt() - alpha) / n as f64;

    let mut series = vec![vec![0.0; t]; n];
    let mut z = vec![0.0; n];
    for step in 0..t {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let common = beta * z.iter().sum::<f64>();
        for (row, &zi) in series.iter_mut().zip(&z) {
            row[step] = alpha * zi + common;
        }
    }
    let slices: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
    pearson(&slices, false)
        .map(|(c, _)| c)
        .map_err(|i| Error::Numeric(format!("ensemble sample {sample} has a flat series {i}")))
}

/// Eigenvalues of every ensemble sample, concatenated in sample order.
pub fn wishart_ensemble_spectrum(spec: &WishartEnsembleSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let per_sample = (0..spec.n_samples)
        .into_par_iter()
        .map(|s| eigenvalues(&sample_wishart_correlation(spec, s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// `Σ density × width`.
    pub fn total_mass(&self) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.densities)
            .map(|(e, d)| d * (e[1] - e[0]))
            .sum()
    }
}

fn equal_edges(bins: usize, hi: f64) -> Vec<f64> {
    (0..=bins).map(|i| hi * i as f64 / bins as f64).collect()
}

/// Density histogram (`count / (total × width)`) on `bins` equal bins over `[0, hi]`.
/// Values are clamped to `[0, hi]`.
pub fn density_histogram(values: &[f64], bins: usize, hi: f64) -> Result<Histogram> {
    if bins == 0 || hi.is_nan() || hi <= 0.0 || values.is_empty() {
        return Err(Error::Diagnostics(format!(
            "histogram needs bins > 0, hi > 0 and data (bins = {bins}, hi = {hi}, n = {})",
            values.len()
        )));
    }
    let width = hi / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let v = v.clamp(0.0, hi);
        let idx = ((v / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = values.len() as f64;
    Ok(Histogram {
        edges: equal_edges(bins, hi),
        densities: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
    })
}

/// Marchenko-Pastur law averaged over each bin, atom included in the first bin.
pub fn binned_mp(params: &MpParams, bins: usize, hi: f64) -> Result<Histogram> {
    if bins == 0 || hi < params.lambda_plus {
        return Err(Error::Diagnostics(format!(
            "MP binning range [0, {hi}] must cover λ₊ = {}",
            params.lambda_plus
        )));
    }
    let edges = equal_edges(bins, hi);
    let mass_below = |x: f64| if x > 0.0 { mp_cdf(x, params) } else { 0.0 };
    let densities = edges
        .windows(2)
        .map(|e| (mass_below(e[1]) - mass_below(e[0])) / (e[1] - e[0]))
        .collect();
    Ok(Histogram { edges, densities })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectraBins {
    pub empirical: usize,
    pub wishart: usize,
    /// Per cluster; the last entry repeats for higher cluster ids.
    pub mp: Vec<usize>,
}

impl Default for SpectraBins {
    fn default() -> Self {
        Self {
            empirical: DEFAULT_BINS_EMPIRICAL,
            wishart: DEFAULT_BINS_WISHART,
            mp: DEFAULT_BINS_MP.to_vec(),
        }
    }
}

impl SpectraBins {
    pub fn mp_for(&self, cluster: usize) -> usize {
        self.mp
            .get(cluster)
            .or(self.mp.last())
            .copied()
            .unwrap_or(DEFAULT_BINS_MP[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WishartSettings {
    /// Samples per variable-vector, normally the epoch window.
    pub t: usize,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpectrum {
    pub cluster_id: usize,
    pub n_matrices: usize,
    /// All member eigenvalues, ascending within each matrix, matrices in epoch order.
    pub eigenvalues: Vec<f64>,
    pub largest_eigenvalue: f64,
    pub empirical: Histogram,
    pub mp: MpParams,
    pub mp_histogram: Histogram,
    /// Mean off-diagonal correlation of the cluster centroid.
    pub centroid_mean_correlation: f64,
    /// Constant correlation used for the ensemble (clamped into the valid range).
    pub wishart_x_bar: f64,
    pub wishart_seed: u64,
    pub wishart_histogram: Histogram,
    /// Fraction of empirical eigenvalues above λ₊.
    pub fraction_above_mp: f64,
}

/// Margin kept from the open `x̄` bounds when a centroid sits on them.
const X_BAR_MARGIN: f64 = 1e-6;

/// Per-cluster empirical spectra against Marchenko-Pastur and the
/// constant-correlation ensemble, sharing one eigenvalue axis per cluster.
pub fn cluster_spectra(
    matrices: &[DMatrix<f64>],
    labels: &[usize],
    k: usize,
    bins: &SpectraBins,
    mp: &MpParams,
    wishart: &WishartSettings,
) -> Result<Vec<ClusterSpectrum>> {
    if matrices.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} matrices",
            labels.len(),
            matrices.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} with k = {k}")));
    }
    let n = matrices
        .first()
        .map(|m| m.nrows())
        .ok_or_else(|| Error::Diagnostics("no matrices".into()))?;

    let spectra = matrices
        .par_iter()
        .map(eigenvalues)
        .collect::<Result<Vec<_>>>()?;

    (0..k)
        .map(|cluster| {
            let members: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == cluster)
                .collect();
            if members.is_empty() {
                return Err(Error::Diagnostics(format!("cluster {cluster} is empty")));
            }
            let eigen: Vec<f64> = members
                .iter()
                .flat_map(|&i| {
                    spectra[i].iter().map(|&v| {
                        if (-NEGATIVE_EIGEN_TOL..0.0).contains(&v) {
                            0.0
                        } else {
                            v
                        }
                    })
                })
                .collect();
            let centroid = members
                .iter()
                .fold(DMatrix::<f64>::zeros(n, n), |acc, &i| acc + &matrices[i])
                / members.len() as f64;
            let centroid_mean_correlation = mean_offdiag(&centroid)?;
            let (lo, hi) = WishartEnsembleSpec::x_bar_bounds(n);
            let x_bar = centroid_mean_correlation.clamp(lo + X_BAR_MARGIN, hi - X_BAR_MARGIN);
            let seed = wishart.seed.wrapping_add(cluster as u64);
            let ensemble = wishart_ensemble_spectrum(&WishartEnsembleSpec {
                n,
                t: wishart.t,
                x_bar,
                n_samples: wishart.n_samples,
                seed,
            })?;

            let largest = eigen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ensemble_max = ensemble.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let axis_max = largest.max(ensemble_max).max(mp.lambda_plus);
            let above = eigen.iter().filter(|&&v| v > mp.lambda_plus).count();

            Ok(ClusterSpectrum {
                cluster_id: cluster,
                n_matrices: members.len(),
                largest_eigenvalue: largest,
                empirical: density_histogram(&eigen, bins.empirical, axis_max)?,
                mp: *mp,
                mp_histogram: binned_mp(mp, bins.mp_for(cluster), axis_max)?,
                centroid_mean_correlation,
                wishart_x_bar: x_bar,
                wishart_seed: seed,
                wishart_histogram: density_histogram(&ensemble, bins.wishart, axis_max)?,
                fraction_above_mp: above as f64 / eigen.len() as f64,
                eigenvalues: eigen,
            })
        })
        .collect()
}
