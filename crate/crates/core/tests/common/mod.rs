//! Independent reference implementations shared by the integration tests.
//! They favour obviousness over speed and share no code with the library.

#![allow(dead_code)]

use std::f64::consts::PI;

use epicorr::returns::ReturnsPanel;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// O(n²) DFT power, one-sided, mean removed, with the unit-sinusoid-has-power-1
/// normalisation.
pub fn naive_power(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += (v - mean) * ang.cos();
                im += (v - mean) * ang.sin();
            }
            let scale = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            (scale * (re * re + im * im).sqrt() / n as f64).powi(2)
        })
        .collect()
}

/// Textbook two-pass Pearson coefficient with population moments.
pub fn two_pass_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    cov / (va.sqrt() * vb.sqrt())
}

pub fn two_pass_matrix(series: &[Vec<f64>]) -> DMatrix<f64> {
    let n = series.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            two_pass_pearson(&series[i], &series[j])
        }
    })
}

/// Adaptive Simpson quadrature with a per-interval error target.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 60)
}

/// Marchenko-Pastur density written out directly from its closed form.
pub fn mp_density_oracle(lambda: f64, q: f64) -> f64 {
    let lo = (1.0 - 1.0 / q.sqrt()).powi(2);
    let hi = (1.0 + 1.0 / q.sqrt()).powi(2);
    if lambda <= lo || lambda >= hi {
        return 0.0;
    }
    q / (2.0 * PI) * ((hi - lambda) * (lambda - lo)).sqrt() / lambda
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` series of `len` i.i.d. standard normals.
pub fn gaussian_series(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

/// Gaussian series whose population correlation is `x̄` between every pair,
/// built from one shared factor.
pub fn common_factor_series(
    rng: &mut ChaCha8Rng,
    n: usize,
    len: usize,
    x_bar: f64,
) -> Vec<Vec<f64>> {
    let common: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
    (0..n)
        .map(|_| {
            common
                .iter()
                .map(|&c| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    x_bar.sqrt() * c + (1.0 - x_bar).sqrt() * e
                })
                .collect()
        })
        .collect()
}

pub fn returns_from(series: Vec<Vec<f64>>) -> ReturnsPanel {
    let n = series.len();
    let len = series[0].len();
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let dates = (0..len as u64)
        .map(|d| start + chrono::Days::new(d))
        .collect();
    let regions = (0..n).map(|i| format!("r{i}")).collect();
    ReturnsPanel::new(regions, dates, series).unwrap()
}

/// Adjusted Rand index from the pair-counting contingency table.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1.0;
    }
    let sum_ij: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = sum_a * sum_b / choose2(n as f64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
