//! Latent-space structure analytics: Calinski-Harabasz, silhouette,
//! scene-centroid distances, and PCA projection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

/// Embedding matrix with one integer label per row.
#[derive(Clone, Debug)]
pub struct LabeledEmbeddings {
    pub x: DenseArray,
    pub labels: Vec<u64>,
}

impl LabeledEmbeddings {
    pub fn new(x: DenseArray, labels: Vec<u64>) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != labels.len() {
            return Err(Error::Dimension(format!(
                "{n} rows but {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("no embeddings".into()));
        }
        Ok(LabeledEmbeddings { x, labels })
    }

    /// Sorted distinct labels with their member row indices.
    pub fn clusters(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn k(&self) -> usize {
        self.clusters().len()
    }
}

/// CH / silhouette / centroid-distance bundle for one labeling.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub ch: f64,
    pub silhouette_mean: f64,
    pub per_point: Vec<f64>,
    /// Sorted distinct labels indexing the distance matrix.
    pub labels: Vec<u64>,
    /// `[k x k]` symmetric centroid distances, zero diagonal.
    pub centroid_distances: DenseArray,
}

fn centroid(x: &DenseArray, members: &[usize]) -> Vec<f64> {
    let d = x.shape()[1];
    let mut c = vec![0.0; d];
    for &i in members {
        for (acc, v) in c.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Between-cluster over within-cluster dispersion, scaled by
/// `(n - k) / (k - 1)`.
pub fn calinski_harabasz(data: &LabeledEmbeddings) -> Result<f64> {
    let clusters = data.clusters();
    let k = clusters.len();
    let n = data.labels.len();
    if k < 2 {
        return Err(Error::ClusterCount(format!(
            "Calinski-Harabasz needs k >= 2, got {k}"
        )));
    }
    let overall = centroid(&data.x, &(0..n).collect::<Vec<_>>());
    let mut between = 0.0;
    let mut within = 0.0;
    for members in clusters.values() {
        let c = centroid(&data.x, members);
        between += members.len() as f64 * sq_dist(&c, &overall);
        for &i in members {
            within += sq_dist(data.x.row(i), &c);
        }
    }
    if within <= 0.0 {
        return Err(Error::DegenerateDispersion);
    }
    Ok(between / within * (n - k) as f64 / (k - 1) as f64)
}

/// Per-point `s(i) = (b - a) / max(a, b)` and its mean. Singleton
/// clusters and `max(a, b) = 0` take `s = 0`.
pub fn silhouette(data: &LabeledEmbeddings) -> Result<(f64, Vec<f64>)> {
    let clusters = data.clusters();
    let k = clusters.len();
    let n = data.labels.len();
    if k < 2 {
        return Err(Error::ClusterCount(format!(
            "silhouette needs k >= 2, got {k}"
        )));
    }
    let mut scores = vec![0.0; n];
    for (label, members) in &clusters {
        for &i in members {
            if members.len() == 1 {
                scores[i] = 0.0;
                continue;
            }
            let a = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| sq_dist(data.x.row(i), data.x.row(j)).sqrt())
                .sum::<f64>()
                / (members.len() - 1) as f64;
            let b = clusters
                .iter()
                .filter(|(other, _)| *other != label)
                .map(|(_, other_members)| {
                    other_members
                        .iter()
                        .map(|&j| sq_dist(data.x.row(i), data.x.row(j)).sqrt())
                        .sum::<f64>()
                        / other_members.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            scores[i] = if denom == 0.0 { 0.0 } else { (b - a) / denom };
        }
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    Ok((mean, scores))
}

/// Pairwise Euclidean distances between per-label centroids; defined
/// for any k >= 1.
pub fn centroid_distances(data: &LabeledEmbeddings) -> Result<(Vec<u64>, DenseArray)> {
    let clusters = data.clusters();
    let labels: Vec<u64> = clusters.keys().copied().collect();
    let cents: Vec<Vec<f64>> = clusters.values().map(|m| centroid(&data.x, m)).collect();
    let k = labels.len();
    let mut m = DenseArray::zeros(vec![k, k]);
    for i in 0..k {
        for j in 0..k {
            m.set2(i, j, sq_dist(&cents[i], &cents[j]).sqrt());
        }
    }
    Ok((labels, m))
}

/// All three metrics for one labeling; needs k >= 2.
pub fn metric_report(data: &LabeledEmbeddings) -> Result<MetricReport> {
    let ch = calinski_harabasz(data)?;
    let (silhouette_mean, per_point) = silhouette(data)?;
    let (labels, centroid_distances) = self::centroid_distances(data)?;
    Ok(MetricReport {
        ch,
        silhouette_mean,
        per_point,
        labels,
        centroid_distances,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors)` with eigenvectors in columns.
fn jacobi_eigh(a: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(Error::Dimension("eigendecomposition needs a square matrix".into()));
    }
    let mut m = a.clone();
    let mut v = DenseArray::zeros(vec![n, n]);
    for i in 0..n {
        v.set2(i, i, 1.0);
    }
    let scale: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-30_f64.max(scale * 1e-15);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get2(p, q).abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get2(p, q);
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = m.get2(p, p);
                let aqq = m.get2(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.get2(i, p);
                    let miq = m.get2(i, q);
                    m.set2(i, p, c * mip - s * miq);
                    m.set2(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get2(p, j);
                    let mqj = m.get2(q, j);
                    m.set2(p, j, c * mpj - s * mqj);
                    m.set2(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get2(i, p);
                    let viq = v.get2(i, q);
                    v.set2(i, p, c * vip - s * viq);
                    v.set2(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| m.get2(i, i)).collect();
    Ok((eigenvalues, v))
}

/// PCA projection output: coordinates plus explained-variance
/// fractions per kept component.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    pub coordinates: DenseArray,
    pub explained: Vec<f64>,
}

/// Projects `x` onto its top principal components via covariance
/// eigendecomposition. Components are sign-fixed so each one's
/// largest-magnitude loading is positive, keeping scatter output
/// reproducible.
pub fn pca_project(x: &DenseArray, out_dims: usize) -> Result<PcaProjection> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(Error::Value(format!("PCA needs n >= 2, got {n}")));
    }
    if out_dims > (n - 1).min(d) || out_dims == 0 {
        return Err(Error::Value(format!(
            "out_dims must lie in 1..=min(n - 1, D) = {}, got {out_dims}",
            (n - 1).min(d)
        )));
    }
    let mean: Vec<f64> = {
        let mut m = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in m.iter_mut().zip(x.row(i)) {
                *acc += v / n as f64;
            }
        }
        m
    };
    let mut centered = x.clone();
    for i in 0..n {
        for j in 0..d {
            let v = centered.get2(i, j) - mean[j];
            centered.set2(i, j, v);
        }
    }
    let cov = centered
        .transposed()?
        .matmul(&centered)?
        .scale(1.0 / (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov.get2(i, i)).sum();
    if trace <= 1e-300 {
        return Err(Error::DegenerateVariance(format!("covariance trace {trace:e}")));
    }
    let (eigenvalues, vectors) = jacobi_eigh(&cov)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut basis = DenseArray::zeros(vec![d, out_dims]);
    let mut explained = Vec::with_capacity(out_dims);
    for (col, &src) in order.iter().take(out_dims).enumerate() {
        let mut column: Vec<f64> = (0..d).map(|r| vectors.get2(r, src)).collect();
        let lead = column
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .expect("finite loadings")
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("non-empty column");
        if column[lead] < 0.0 {
            column.iter_mut().for_each(|v| *v = -*v);
        }
        for r in 0..d {
            basis.set2(r, col, column[r]);
        }
        explained.push(eigenvalues[src].max(0.0) / trace);
    }
    let coordinates = centered.matmul(&basis)?;
    Ok(PcaProjection {
        coordinates,
        explained,
    })
}
