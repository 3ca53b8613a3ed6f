//! k-means in the space of correlation matrices.
//!
//! Matrices are compared with the Frobenius distance over all `N²` entries.
//! A single run is Lloyd's algorithm started from `k` distinct data matrices;
//! [`kmeans_multi`] repeats it over consecutive seeds and keeps the run with
//! the lowest inertia, which makes the result independent of how the restarts
//! are scheduled across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::returns::EpochPlan;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_RESTARTS: usize = 1000;

/// Relative slack for the per-iteration inertia check.
const INERTIA_SLACK: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(sq_dist(a.as_slice(), b.as_slice()).sqrt())
}

fn check_shapes(matrices: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::K("no matrices to cluster".into()))?;
    let shape = first.shape();
    if let Some(m) = matrices.iter().find(|m| m.shape() != shape) {
        return Err(Error::Shape(format!(
            "mixed matrix shapes {:?} and {:?}",
            shape,
            m.shape()
        )));
    }
    Ok(shape)
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::K("k must be at least 1".into()));
    }
    if k > m {
        return Err(Error::K(format!("k = {k} exceeds the {m} matrices")));
    }
    Ok(())
}

/// Outcome of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub seed: u64,
    pub centroids: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Inertia after each assign/update pair.
    pub inertia_history: Vec<f64>,
    /// Number of empty-cluster reseeds performed.
    pub repairs: usize,
}

pub fn kmeans(
    matrices: &[DMatrix<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansRun> {
    let shape = check_shapes(matrices)?;
    check_k(k, matrices.len())?;
    Ok(lloyd(matrices, shape, k, seed, max_iter, tol))
}

fn lloyd(
    matrices: &[DMatrix<f64>],
    shape: (usize, usize),
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> KMeansRun {
    let data: Vec<&[f64]> = matrices.iter().map(|m| m.as_slice()).collect();
    let m = data.len();
    let dim = shape.0 * shape.1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, m, k)
        .into_iter()
        .map(|i| data[i].to_vec())
        .collect();

    let mut labels = vec![0usize; m];
    let mut history = Vec::new();
    let mut repairs = 0;
    let mut converged = false;
    let mut n_iterations = 0;

    while n_iterations < max_iter.max(1) {
        n_iterations += 1;

        let mut counts = vec![0usize; k];
        for (label, x) in labels.iter_mut().zip(&data) {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(x, centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            *label = best.1;
            counts[best.1] += 1;
        }

        // Reseed empty clusters with the matrix farthest from its own centroid,
        // never taking the last member of a cluster.
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut far = (f64::NEG_INFINITY, usize::MAX);
            for (l, x) in data.iter().enumerate() {
                if counts[labels[l]] > 1 {
                    let d = sq_dist(x, &centroids[labels[l]]);
                    if d > far.0 {
                        far = (d, l);
                    }
                }
            }
            let l = far.1;
            counts[labels[l]] -= 1;
            labels[l] = empty;
            counts[empty] = 1;
            repairs += 1;
        }

        let mut updated = vec![vec![0.0; dim]; k];
        for (x, &label) in data.iter().zip(&labels) {
            for (acc, v) in updated[label].iter_mut().zip(x.iter()) {
                *acc += v;
            }
        }
        for (c, count) in updated.iter_mut().zip(&counts) {
            let inv = 1.0 / *count as f64;
            for v in c.iter_mut() {
                *v *= inv;
            }
        }

        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(old, new)| sq_dist(old, new).sqrt())
            .fold(0.0, f64::max);
        let inertia: f64 = data
            .iter()
            .zip(&labels)
            .map(|(x, &label)| sq_dist(x, &updated[label]))
            .sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev + INERTIA_SLACK * (1.0 + prev),
                "inertia rose from {prev} to {inertia}"
            );
        }
        history.push(inertia);
        centroids = updated;

        if shift <= tol {
            converged = true;
            break;
        }
    }

    KMeansRun {
        seed,
        centroids: centroids
            .into_iter()
            .map(|c| DMatrix::from_vec(shape.0, shape.1, c))
            .collect(),
        labels,
        inertia: *history.last().unwrap_or(&0.0),
        n_iterations,
        converged,
        inertia_history: history,
        repairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub cluster_id: usize,
    #[serde(with = "crate::matrix::rows")]
    pub entries: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    /// Base seed; restart `r` used `seed + r`.
    pub seed: u64,
    pub n_restarts: usize,
    pub restart_index_of_best: usize,
    pub centroids: Vec<Centroid>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub n_iterations: usize,
    pub converged: bool,
}

impl ClusteringResult {
    fn from_run(run: KMeansRun, k: usize, seed: u64, n_restarts: usize, restart: usize) -> Self {
        Self {
            k,
            seed,
            n_restarts,
            restart_index_of_best: restart,
            centroids: run
                .centroids
                .into_iter()
                .enumerate()
                .map(|(cluster_id, entries)| Centroid {
                    cluster_id,
                    entries,
                })
                .collect(),
            labels: run.labels,
            inertia: run.inertia,
            n_iterations: run.n_iterations,
            converged: run.converged,
        }
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Best of `n_restarts` runs seeded `base_seed, base_seed + 1, …`; ties go to
/// the lowest restart index.
pub fn kmeans_multi(
    matrices: &[DMatrix<f64>],
    k: usize,
    n_restarts: usize,
    base_seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<ClusteringResult> {
    let shape = check_shapes(matrices)?;
    check_k(k, matrices.len())?;
    if n_restarts == 0 {
        return Err(Error::K("n_restarts must be at least 1".into()));
    }
    let (restart, run) = (0..n_restarts)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed.wrapping_add(r as u64);
            (r, lloyd(matrices, shape, k, seed, max_iter, tol))
        })
        .reduce_with(
            |a, b| match a.1.inertia.total_cmp(&b.1.inertia).then(a.0.cmp(&b.0)) {
                std::cmp::Ordering::Greater => b,
                _ => a,
            },
        )
        .expect("at least one restart");
    Ok(ClusteringResult::from_run(
        run, k, base_seed, n_restarts, restart,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub values: Vec<f64>,
    pub mean: f64,
}

pub fn silhouette(matrices: &[DMatrix<f64>], labels: &[usize]) -> Result<Silhouette> {
    check_shapes(matrices)?;
    if labels.len() != matrices.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} matrices",
            labels.len(),
            matrices.len()
        )));
    }
    let n_labels = labels.iter().max().map_or(0, |&l| l + 1);
    let mut sizes = vec![0usize; n_labels];
    for &l in labels {
        sizes[l] += 1;
    }
    let present: Vec<usize> = (0..n_labels).filter(|&c| sizes[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Diagnostics(
            "silhouette needs at least two non-empty clusters".into(),
        ));
    }

    let m = matrices.len();
    let dist: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| sq_dist(matrices[i].as_slice(), matrices[j].as_slice()).sqrt())
                .collect()
        })
        .collect();

    let values: Vec<f64> = (0..m)
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; n_labels];
            for j in 0..m {
                if j != i {
                    sums[labels[j]] += dist[i][j];
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = present
                .iter()
                .filter(|&&c| c != own)
                .map(|&c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    let mean = values.iter().sum::<f64>() / m as f64;
    Ok(Silhouette { values, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRecord {
    pub k: usize,
    pub best_inertia: f64,
    /// `None` for `k = 1`.
    pub mean_silhouette: Option<f64>,
    /// Set when inertia rose relative to the previous k (too few restarts).
    pub inertia_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDiagnostics {
    pub records: Vec<KRecord>,
}

impl KDiagnostics {
    pub fn best_k_by_silhouette(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| r.mean_silhouette.map(|s| (r.k, s)))
            .fold(None, |best: Option<(usize, f64)>, (k, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((k, s)),
            })
            .map(|(k, _)| k)
    }
}

pub fn scan_k(
    matrices: &[DMatrix<f64>],
    k_range: impl IntoIterator<Item = usize>,
    n_restarts: usize,
    base_seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<KDiagnostics> {
    let mut ks: Vec<usize> = k_range.into_iter().collect();
    ks.sort_unstable();
    ks.dedup();
    let mut records: Vec<KRecord> = Vec::with_capacity(ks.len());
    for k in ks {
        let result = kmeans_multi(matrices, k, n_restarts, base_seed, tol, max_iter)?;
        let mean_silhouette = if k >= 2 {
            Some(silhouette(matrices, &result.labels)?.mean)
        } else {
            None
        };
        let inertia_warning = records.last().is_some_and(|prev| {
            result.inertia > prev.best_inertia + INERTIA_SLACK * (1.0 + prev.best_inertia)
        });
        if inertia_warning {
            log::warn!("inertia increased at k = {k}; consider more restarts");
        }
        records.push(KRecord {
            k,
            best_inertia: result.inertia,
            mean_silhouette,
            inertia_warning,
        });
    }
    Ok(KDiagnostics { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolRow {
    pub epoch_index: usize,
    #[serde(rename = "start_day")]
    pub epoch_start_day: usize,
    #[serde(rename = "cluster")]
    pub cluster_id: usize,
}

/// Cluster label sequence joined with epoch start days.
pub fn symbolic_dynamics(result: &ClusteringResult, plan: &EpochPlan) -> Result<Vec<SymbolRow>> {
    if result.labels.len() != plan.epoch_count() {
        return Err(Error::Shape(format!(
            "{} labels for {} epochs",
            result.labels.len(),
            plan.epoch_count()
        )));
    }
    Ok(result
        .labels
        .iter()
        .zip(&plan.starts)
        .enumerate()
        .map(|(epoch_index, (&cluster_id, &epoch_start_day))| SymbolRow {
            epoch_index,
            epoch_start_day,
            cluster_id,
        })
        .collect())
}

/// Table with one row per epoch (`t=a-b days`) and one column per cluster;
/// the epoch's matrix name `C(l)` sits in the column of its cluster.
pub fn write_symbolic_csv<W: Write>(
    rows: &[SymbolRow],
    plan: &EpochPlan,
    k: usize,
    writer: W,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["Epoch".to_owned()];
    header.extend((1..=k).map(|c| format!("Cluster {c}")));
    wtr.write_record(&header)?;
    for row in rows {
        if row.cluster_id >= k {
            return Err(Error::Shape(format!(
                "label {} with k = {k}",
                row.cluster_id
            )));
        }
        let mut record = vec![String::new(); k + 1];
        record[0] = format!("{} days", plan.stride_label(row.epoch_index));
        record[row.cluster_id + 1] = format!("C({})", row.epoch_index);
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("<symbolic writer>", e))?;
    Ok(())
}

/// JSON document describing a clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub k: usize,
    pub seed: u64,
    pub n_restarts: usize,
    pub restart_index_of_best: usize,
    pub n_iterations: usize,
    pub converged: bool,
    pub inertia: f64,
    pub centroids: Vec<Centroid>,
    pub labels: Vec<usize>,
    pub per_epoch: Vec<SymbolRow>,
}

impl ClusteringReport {
    pub fn new(result: &ClusteringResult, plan: &EpochPlan) -> Result<Self> {
        Ok(Self {
            k: result.k,
            seed: result.seed,
            n_restarts: result.n_restarts,
            restart_index_of_best: result.restart_index_of_best,
            n_iterations: result.n_iterations,
            converged: result.converged,
            inertia: result.inertia,
            centroids: result.centroids.clone(),
            labels: result.labels.clone(),
            per_epoch: symbolic_dynamics(result, plan)?,
        })
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |&x| x + 1);
    let kb = b.iter().max().map_or(0, |&x| x + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max_index = 0.5 * (rows + cols);
    if max_index == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Largest number of positions on which `a` and a relabelling of `b` agree,
/// found by trying every permutation of `0..k`.
pub fn permutation_agreement(a: &[usize], b: &[usize], k: usize) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    if k > 8 {
        return Err(Error::K(format!(
            "exhaustive matching limited to k ≤ 8, got {k}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = a
            .iter()
            .zip(b)
            .filter(|(&x, &y)| y < k && p[y] == x)
            .count();
        best = best.max(hits);
    });
    Ok(best)
}

fn permute(p: &mut [usize], i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::constant_correlation;

    #[test]
    fn distance_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(frobenius_distance(&id, &id).unwrap(), 0.0);
        assert!((frobenius_distance(&id, &ones).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            frobenius_distance(&id, &DMatrix::identity(3, 3)),
            Err(Error::Shape(_))
        ));
    }

    fn toy() -> Vec<DMatrix<f64>> {
        [0.1, 0.12, 0.5, 0.52, 0.9]
            .iter()
            .map(|&x| constant_correlation(3, x))
            .collect()
    }

    #[test]
    fn k_equals_m() {
        let ms = toy();
        let run = kmeans(&ms, 5, 3, 300, 1e-6).unwrap();
        assert_eq!(run.inertia, 0.0);
        assert!(run.n_iterations <= 2);
        let mut labels = run.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_one_is_the_mean() {
        let ms = toy();
        let run = kmeans(&ms, 1, 9, 300, 1e-6).unwrap();
        let mean = ms.iter().fold(DMatrix::zeros(3, 3), |acc, m| acc + m) / 5.0;
        assert!((&run.centroids[0] - &mean).abs().max() < 1e-15);
        let expected: f64 = ms
            .iter()
            .map(|m| frobenius_distance(m, &mean).unwrap().powi(2))
            .sum();
        assert!((run.inertia - expected).abs() < 1e-12);
    }

    #[test]
    fn bad_k() {
        let ms = toy();
        assert!(matches!(kmeans(&ms, 0, 0, 10, 1e-6), Err(Error::K(_))));
        assert!(matches!(kmeans(&ms, 6, 0, 10, 1e-6), Err(Error::K(_))));
        assert!(matches!(
            kmeans_multi(&ms, 2, 0, 0, 1e-6, 10),
            Err(Error::K(_))
        ));
    }

    #[test]
    fn identical_matrices_repair_empty_cluster() {
        let ms = vec![constant_correlation(3, 0.3); 6];
        let run = kmeans(&ms, 2, 1, 300, 1e-6).unwrap();
        assert!(run.repairs >= 1);
        assert!(run.inertia < 1e-24);
        assert!(run.labels.contains(&0) && run.labels.contains(&1));
        let res = kmeans_multi(&ms, 2, 4, 1, 1e-6, 300).unwrap();
        assert!(res.inertia < 1e-24);
    }

    #[test]
    fn single_restart_equals_single_run() {
        let ms = toy();
        let run = kmeans(&ms, 2, 42, 300, 1e-6).unwrap();
        let multi = kmeans_multi(&ms, 2, 1, 42, 1e-6, 300).unwrap();
        assert_eq!(multi.labels, run.labels);
        assert_eq!(multi.inertia, run.inertia);
        assert_eq!(multi.restart_index_of_best, 0);
        for (c, m) in multi.centroids.iter().zip(&run.centroids) {
            assert_eq!(&c.entries, m);
        }
    }

    #[test]
    fn silhouette_conventions() {
        let ms = vec![constant_correlation(3, 0.2); 4];
        let s = silhouette(&ms, &[0, 0, 1, 1]).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));

        let ms = toy();
        let s = silhouette(&ms, &[0, 0, 1, 1, 2]).unwrap();
        assert_eq!(s.values[4], 0.0);
        assert!(s.mean > 0.5);
        assert!(s.values.iter().all(|v| (-1.0..=1.0).contains(v)));

        assert!(matches!(
            silhouette(&ms, &[1, 1, 1, 1, 1]),
            Err(Error::Diagnostics(_))
        ));
    }

    #[test]
    fn scan_single_matrix() {
        let ms = vec![constant_correlation(3, 0.2)];
        assert!(scan_k(&ms, 1..=1, 2, 0, 1e-6, 50).is_ok());
        assert!(matches!(
            scan_k(&ms, 2..=3, 2, 0, 1e-6, 50),
            Err(Error::K(_))
        ));
    }

    #[test]
    fn symbolic_rows_and_table() {
        let plan = crate::returns::plan_epochs(1020, 33, 17).unwrap();
        let labels: Vec<usize> = (0..62).map(|e| e % 2).collect();
        let result = ClusteringResult {
            k: 2,
            seed: 0,
            n_restarts: 1,
            restart_index_of_best: 0,
            centroids: vec![],
            labels: labels.clone(),
            inertia: 0.0,
            n_iterations: 1,
            converged: true,
        };
        let rows = symbolic_dynamics(&result, &plan).unwrap();
        assert_eq!(rows.len(), 62);
        assert_eq!(
            rows.iter().map(|r| r.cluster_id).collect::<Vec<_>>(),
            labels
        );
        let mut buf = Vec::new();
        write_symbolic_csv(&rows, &plan, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 63);
        assert_eq!(lines[0], "Epoch,Cluster 1,Cluster 2");
        assert_eq!(lines[1], "t=0-15 days,C(0),");
        assert_eq!(lines[2], "t=16-31 days,,C(1)");
        assert_eq!(lines[62], "t=976-991 days,,C(61)");

        let short = crate::returns::plan_epochs(100, 33, 17).unwrap();
        assert!(matches!(
            symbolic_dynamics(&result, &short),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ari_values() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        // Hand-computed contingency example: n=6, ARI = 0.24242424…
        let ari = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((ari - 8.0 / 33.0).abs() < 1e-12, "{ari}");
        assert_eq!(
            permutation_agreement(&[0, 0, 1, 2], &[2, 2, 0, 1], 3).unwrap(),
            4
        );
    }
}
