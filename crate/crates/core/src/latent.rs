//! Latent feature vectors and k-means clustering on them.
//!
//! Features either come from an external extractor (loaded from `ATL1`
//! files) or from [`FeatureBank`], a fixed bank of seeded random
//! convolution kernels that stands in for a pre-trained network.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, ClusterReport};
use crate::par;
use crate::pipeline::ImageGrid;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    pub rows: usize,
    pub dim: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl LatentMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::contract(format!("latent matrix must be non-empty, got {rows}x{dim}")));
        }
        if values.len() != rows * dim {
            return Err(Error::contract(format!(
                "latent matrix {rows}x{dim} needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("latent value {i} is not finite")));
        }
        Ok(LatentMatrix { rows, dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("latent rows differ in length"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<LatentMatrix> {
        let values = idx.iter().flat_map(|i| self.row(*i).iter().copied()).collect();
        LatentMatrix::new(idx.len(), self.dim, values)
    }

    /// Fraction of exactly-zero entries.
    pub fn sparsity(&self) -> f64 {
        self.values.iter().filter(|v| **v == 0.0).count() as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureBankConfig {
    pub kernels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// Responses are average-pooled over this many concentric rings around
    /// the image centre (the beam axis), which makes the features invariant
    /// to the azimuth of a track.
    pub rings: usize,
}

impl Default for FeatureBankConfig {
    fn default() -> Self {
        FeatureBankConfig { kernels: 16, kernel_size: 5, stride: 2, rings: 8 }
    }
}

/// Seeded random convolution bank: valid strided correlation, rectification,
/// ring pooling, then a fixed non-negative routing of the pooled vector onto
/// `out_dim` coordinates. No biases anywhere, so a blank image maps to the
/// zero vector.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub config: FeatureBankConfig,
    kernels: Vec<Vec<f64>>,
    seed: u64,
}

impl FeatureBank {
    pub fn new(config: FeatureBankConfig, seed: u64) -> Result<Self> {
        if config.kernels == 0 || config.kernel_size == 0 || config.stride == 0 || config.rings == 0 {
            return Err(Error::contract("feature bank sizes must all be >= 1"));
        }
        let mut rng = seed::rng_for(seed, "latent/kernels", &[]);
        let area = config.kernel_size * config.kernel_size;
        let kernels = (0..config.kernels)
            .map(|_| {
                let mut k: Vec<f64> = (0..area).map(|_| StandardNormal.sample(&mut rng)).collect();
                // Zero-mean kernels respond to structure, not to flat regions.
                let mean = k.iter().sum::<f64>() / area as f64;
                k.iter_mut().for_each(|v| *v = (*v - mean) / area as f64);
                k
            })
            .collect();
        Ok(FeatureBank { config, kernels, seed })
    }

    pub fn pooled_len(&self) -> usize {
        self.config.kernels * self.config.rings
    }

    fn ring_of(&self, oy: usize, ox: usize, oh: usize, ow: usize) -> usize {
        let dy = (oy as f64 + 0.5) / oh as f64 - 0.5;
        let dx = (ox as f64 + 0.5) / ow as f64 - 0.5;
        let r = (dx * dx + dy * dy).sqrt() / 0.5;
        ((r * self.config.rings as f64) as usize).min(self.config.rings - 1)
    }

    fn pooled(&self, image: &ImageGrid) -> Vec<f64> {
        let c = &self.config;
        let ks = c.kernel_size;
        let mut out = vec![0.0; self.pooled_len()];
        if image.height < ks || image.width < ks {
            return out;
        }
        let oh = (image.height - ks) / c.stride + 1;
        let ow = (image.width - ks) / c.stride + 1;
        let ring: Vec<usize> = (0..oh * ow).map(|i| self.ring_of(i / ow, i % ow, oh, ow)).collect();
        let mut counts = vec![0usize; c.rings];
        ring.iter().for_each(|r| counts[*r] += 1);
        for (ki, kernel) in self.kernels.iter().enumerate() {
            let pooled = &mut out[ki * c.rings..(ki + 1) * c.rings];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * c.stride, ox * c.stride);
                    let mut acc = 0.0;
                    for ky in 0..ks {
                        let row = &image.values[(y0 + ky) * image.width + x0..][..ks];
                        let krow = &kernel[ky * ks..(ky + 1) * ks];
                        acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if acc > 0.0 {
                        pooled[ring[oy * ow + ox]] += acc;
                    }
                }
            }
            for (p, n) in pooled.iter_mut().zip(&counts) {
                *p /= (*n).max(1) as f64;
            }
        }
        out
    }

    /// Fixed routing of pooled coordinates onto `out_dim` buckets.
    fn routing(&self, out_dim: usize) -> Vec<usize> {
        let len = self.pooled_len();
        let mut rng = seed::rng_for(self.seed, "latent/routing", &[out_dim as u64]);
        if out_dim >= len {
            let mut slots: Vec<usize> = (0..out_dim).collect();
            // Partial Fisher-Yates: distinct target slots.
            for i in 0..len {
                let j = rng.gen_range(i..out_dim);
                slots.swap(i, j);
            }
            slots.truncate(len);
            slots
        } else {
            (0..len).map(|_| rng.gen_range(0..out_dim)).collect()
        }
    }

    pub fn features(&self, images: &[ImageGrid], out_dim: usize) -> Result<LatentMatrix> {
        if out_dim == 0 {
            return Err(Error::contract("out_dim must be >= 1"));
        }
        if images.is_empty() {
            return Err(Error::contract("no images to featurize"));
        }
        let routing = self.routing(out_dim);
        let rows = par::map(images.iter().collect(), |img| {
            let pooled = self.pooled(img);
            let mut row = vec![0.0; out_dim];
            for (v, slot) in pooled.iter().zip(&routing) {
                row[*slot] += v;
            }
            row
        });
        LatentMatrix::new(images.len(), out_dim, rows.concat())
    }
}

/// Deterministic stand-in features with the default bank.
pub fn standin_features(images: &[ImageGrid], out_dim: usize, seed: u64) -> Result<LatentMatrix> {
    FeatureBank::new(FeatureBankConfig::default(), seed)?.features(images, out_dim)
}

#[derive(Clone, Debug)]
pub struct PcaResult {
    pub projected: LatentMatrix,
    /// Unit-norm principal axes, one per row, by descending variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projection onto the top principal axes of the sample covariance.
///
/// Uses the covariance eigenproblem when `dim <= rows` and the Gram-matrix
/// route otherwise. Each axis is signed so its largest-magnitude loading is
/// positive.
pub fn pca(latents: &LatentMatrix, n_components: usize) -> Result<PcaResult> {
    let (n, d) = (latents.rows, latents.dim);
    if n < 2 || n_components == 0 || n_components > (n - 1).min(d) {
        return Err(Error::contract(format!(
            "n_components must lie in [1, min(rows-1, dim)] = [1, {}], got {n_components}",
            (n.max(1) - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(latents.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| latents.values[i * d + j] - mean[j]);
    let denom = (n - 1) as f64;

    let (eigvals, axes): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        let vals = order.iter().map(|i| eig.eigenvalues[*i].max(0.0)).collect();
        let vecs = order.iter().map(|i| eig.eigenvectors.column(*i).iter().copied().collect()).collect();
        (vals, vecs)
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for i in order {
            let lambda = eig.eigenvalues[i].max(0.0);
            let u = eig.eigenvectors.column(i);
            let mut axis: Vec<f64> = (centered.transpose() * u).iter().copied().collect();
            let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                axis.iter_mut().for_each(|a| *a /= norm);
            }
            vals.push(lambda / denom);
            vecs.push(axis);
        }
        (vals, vecs)
    };

    let total: f64 = eigvals.iter().sum();
    let mut components = Vec::with_capacity(n_components);
    for mut axis in axes.into_iter().take(n_components) {
        let pivot = axis.iter().fold(0.0f64, |best, a| if a.abs() > best.abs() { *a } else { best });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        components.push(axis);
    }
    let mut projected = Vec::with_capacity(n * n_components);
    for i in 0..n {
        let row = centered.row(i);
        for c in &components {
            projected.push(row.iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    let explained_variance: Vec<f64> = eigvals[..n_components].to_vec();
    let explained_ratio = explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(PcaResult {
        projected: LatentMatrix::new(n, n_components, projected)?,
        components,
        explained_variance,
        explained_ratio,
        mean,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub m_inits: usize,
    pub n_runs: usize,
    pub max_iter: usize,
    /// Lloyd iterations stop once the relative inertia change drops below this.
    pub tol: f64,
    pub rng_seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { k: 2, m_inits: 10, n_runs: 100, max_iter: 300, tol: 1e-6, rng_seed: 0 }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m_inits == 0 || self.n_runs == 0 || self.max_iter == 0 {
            return Err(Error::contract("k, m_inits, n_runs and max_iter must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::contract("tol must be >= 0"));
        }
        Ok(())
    }

    /// Seed of restart `restart` within run `run`.
    pub fn restart_seed(&self, run: usize, restart: usize) -> u64 {
        seed::derive_seed(self.rng_seed, "latent/kmeans", &[run as u64, restart as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    /// k × dim, row-major.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every row (ties to the lowest index) and the inertia.
pub fn assign(data: &LatentMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = (0..data.rows)
        .map(|i| {
            let row = data.row(i);
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, centroid)| (c, sq_dist(row, centroid)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn plus_plus_init(data: &LatentMatrix, k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data.row(rng.gen_range(0..data.rows)).to_vec()];
    let mut nearest: Vec<f64> = (0..data.rows).map(|i| sq_dist(data.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = data.rows - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..data.rows)
        };
        let c = data.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Recomputes centroids as cluster means; an empty cluster takes the point
/// farthest from its current centroid.
fn update_centroids(data: &LatentMatrix, labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sums = vec![vec![0.0; data.dim]; k];
    let mut counts = vec![0usize; k];
    for (i, l) in labels.iter().enumerate() {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..data.rows)
            .filter(|i| counts[labels[*i]] > 1)
            .map(|i| (i, sq_dist(data.row(i), &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        if let Some((i, _)) = far {
            let old = labels[i];
            counts[old] -= 1;
            for (s, v) in sums[old].iter_mut().zip(data.row(i)) {
                *s -= v;
            }
            labels[i] = c;
            counts[c] = 1;
            sums[c] = data.row(i).to_vec();
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_single(data: &LatentMatrix, k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<ClusteringResult> {
    if k == 0 || k > data.rows {
        return Err(Error::contract(format!("k must lie in [1, rows = {}], got {k}", data.rows)));
    }
    let mut rng = seed::Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let (mut labels, mut inertia) = assign(data, &centroids);
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        update_centroids(data, &mut labels, &mut centroids);
        let (next, next_inertia) = assign(data, &centroids);
        let changed = next != labels;
        let rel = (inertia - next_inertia).abs() / inertia.max(f64::MIN_POSITIVE);
        labels = next;
        inertia = next_inertia;
        iterations = it;
        if !changed || rel < tol {
            break;
        }
    }
    Ok(ClusteringResult { assignments: labels, centroids, inertia, iterations })
}

/// Best of `m_inits` restarts by inertia alone. Labels are never consulted.
pub fn kmeans_best_of_run(data: &LatentMatrix, config: &KMeansConfig, run: usize) -> Result<ClusteringResult> {
    config.validate()?;
    let mut best: Option<ClusteringResult> = None;
    for restart in 0..config.m_inits {
        let r = kmeans_single(data, config.k, config.max_iter, config.tol, config.restart_seed(run, restart))?;
        if best.as_ref().map_or(true, |b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("m_inits >= 1"))
}

pub fn kmeans_best_of(data: &LatentMatrix, config: &KMeansConfig) -> Result<ClusteringResult> {
    kmeans_best_of_run(data, config, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub inertia: f64,
    pub ari: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStats {
    pub runs: Vec<RunRecord>,
    /// Run with the highest ARI against the labels.
    pub top1_run: usize,
    pub top1: ClusterReport,
    pub mean_ari: f64,
    pub std_ari: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `n_runs` independent best-of-`m_inits` clusterings, each scored on the
/// labelled rows only.
pub fn kmeans_experiment(
    data: &LatentMatrix,
    labels: &[Option<usize>],
    config: &KMeansConfig,
) -> Result<ExperimentStats> {
    config.validate()?;
    if labels.len() != data.rows {
        return Err(Error::contract(format!("{} labels for {} latent rows", labels.len(), data.rows)));
    }
    let labelled: Vec<usize> = (0..data.rows).filter(|i| labels[*i].is_some()).collect();
    if labelled.len() < 2 {
        return Err(Error::contract("at least two labelled rows are needed for evaluation"));
    }
    let truth: Vec<usize> = labelled.iter().map(|i| labels[*i].unwrap()).collect();

    let results = par::map_range(config.n_runs, |run| -> Result<(f64, ClusterReport)> {
        let clustering = kmeans_best_of_run(data, config, run)?;
        let pred: Vec<usize> = labelled.iter().map(|i| clustering.assignments[*i]).collect();
        Ok((clustering.inertia, metrics::evaluate(&truth, &pred)?))
    });
    let mut runs = Vec::with_capacity(config.n_runs);
    let mut reports = Vec::with_capacity(config.n_runs);
    for (run, r) in results.into_iter().enumerate() {
        let (inertia, report) = r?;
        runs.push(RunRecord { run, inertia, ari: report.ari, accuracy: report.accuracy });
        reports.push(report);
    }
    let top1_run = runs.iter().fold(0, |best, r| if r.ari > runs[best].ari { r.run } else { best });
    let (mean_ari, std_ari) = mean_std(&runs.iter().map(|r| r.ari).collect::<Vec<_>>());
    let (mean_accuracy, std_accuracy) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(ExperimentStats {
        top1: reports.swap_remove(top1_run),
        top1_run,
        runs,
        mean_ari,
        std_ari,
        mean_accuracy,
        std_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> LatentMatrix {
        LatentMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matrix_validation() {
        assert!(LatentMatrix::new(0, 3, vec![]).is_err());
        assert!(LatentMatrix::new(1, 2, vec![1.0]).is_err());
        assert!(LatentMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let data = m(&[&[0.0, 0.0], &[2.0, 0.0], &[4.0, 3.0]]);
        let r = kmeans_single(&data, 1, 100, 0.0, 1).unwrap();
        assert_eq!(r.centroids[0], vec![2.0, 1.0]);
        // total variance * n = sum of squared deviations
        assert!((r.inertia - (4.0 + 0.0 + 4.0 + 1.0 + 1.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_large_k() {
        let data = m(&[&[0.0], &[1.0]]);
        assert!(matches!(kmeans_single(&data, 3, 10, 0.0, 0), Err(Error::Contract(_))));
        assert!(kmeans_single(&data, 0, 10, 0.0, 0).is_err());
    }

    #[test]
    fn kmeans_two_pairs() {
        let data = m(&[&[10.0, 10.0], &[10.0, 11.0], &[-10.0, -10.0], &[-10.0, -11.0]]);
        let r = kmeans_single(&data, 2, 100, 0.0, 5).unwrap();
        let mut cents = r.centroids.clone();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![-10.0, -10.5], vec![10.0, 10.5]]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cluster_reseeded() {
        // Identical points force empty clusters during seeding.
        let data = m(&[&[1.0], &[1.0], &[1.0], &[5.0]]);
        let r = kmeans_single(&data, 3, 20, 0.0, 0).unwrap();
        assert_eq!(r.centroids.len(), 3);
        assert!(r.inertia.abs() < 1e-12);
    }

    #[test]
    fn best_of_one_equals_single() {
        let data = m(&[&[0.0], &[0.2], &[5.0], &[5.1], &[9.0]]);
        let cfg = KMeansConfig { k: 2, m_inits: 1, n_runs: 1, rng_seed: 11, ..Default::default() };
        let best = kmeans_best_of(&data, &cfg).unwrap();
        let single = kmeans_single(&data, 2, cfg.max_iter, cfg.tol, cfg.restart_seed(0, 0)).unwrap();
        assert_eq!(best, single);
    }

    #[test]
    fn pca_rank_one() {
        let data = m(&[&[0.0, 0.0], &[1.0, 2.0], &[2.0, 4.0], &[-1.0, -2.0]]);
        let p = pca(&data, 1).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-10);
        let c = &p.components[0];
        assert!((c[1] / c[0] - 2.0).abs() < 1e-10);
        assert!(c[1] > 0.0);
        assert!(pca(&data, 2).is_ok());
        assert!(pca(&data, 3).is_err());
        assert!(pca(&data, 0).is_err());
    }

    #[test]
    fn pca_gram_route_matches_covariance_route() {
        // 4 rows, 6 dims forces the Gram route; compare distances in the
        // projected space against the original (rank <= 3 after centring).
        let data = m(&[
            &[1.0, 0.0, 2.0, 0.5, 0.0, 1.0],
            &[0.0, 1.0, 0.0, 1.5, 2.0, 0.0],
            &[3.0, 1.0, 1.0, 0.0, 1.0, 2.0],
            &[0.5, 2.0, 1.0, 1.0, 0.0, 0.0],
        ]);
        let p = pca(&data, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let a = sq_dist(data.row(i), data.row(j));
                let b = sq_dist(p.projected.row(i), p.projected.row(j));
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn standin_zero_image_and_determinism() {
        let blank = ImageGrid::zeros(32, 32);
        let mut lit = ImageGrid::zeros(32, 32);
        for i in 5..20 {
            lit.values[i * 32 + i] = 1.0;
        }
        let f = standin_features(&[blank.clone(), lit.clone()], 64, 3).unwrap();
        assert!(f.row(0).iter().all(|v| *v == 0.0));
        assert!(f.row(1).iter().any(|v| *v > 0.0));
        let g = standin_features(&[blank, lit], 64, 3).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
