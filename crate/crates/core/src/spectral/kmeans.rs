//! Lloyd's K-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use super::SpectralError;
use crate::seed;

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Array2<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Nearest centroid by Euclidean distance; ties go to the smaller index.
    pub fn assign(&self, point: ArrayView1<f64>) -> usize {
        nearest(&self.centroids, point).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn cost(&self) -> f64 {
        *self.cost_trace.last().expect("at least one assignment")
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Array2<f64>, point: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let dist = squared_distance(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn assign_all(points: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points.rows().into_iter().map(|p| nearest(centroids, p)).unzip()
}

fn plus_plus_seeding<R: Rng + ?Sized>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut closest: Vec<f64> = points.rows().into_iter().map(|p| squared_distance(p, points.row(first))).collect();
    for j in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding leaving target past the last positive weight
            if closest[chosen] == 0.0 {
                chosen = closest.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            closest[i] = closest[i].min(squared_distance(p, points.row(pick)));
        }
    }
    centroids
}

/// Fits `k` clusters; deterministic in `seed`.
///
/// Stops when assignments no longer change or after
/// [`MAX_LLOYD_ITERATIONS`] updates. A cluster that empties is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans_fit(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansFit, SpectralError> {
    let n = points.nrows();
    if k == 0 {
        return Err(SpectralError::InvalidArgument("k must be >= 1".into()));
    }
    if n < k {
        return Err(SpectralError::TooFewPoints { points: n, k });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidArgument("points contain non-finite values".into()));
    }
    let mut rng = seed::stage_rng(seed, "kmeans", 0);
    let mut centroids = plus_plus_seeding(points, k, &mut rng);
    let (mut labels, mut dists) = assign_all(points, &centroids);
    let mut cost_trace = vec![dists.iter().sum::<f64>()];
    let mut converged = false;

    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &p);
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for j in empty {
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None, |best: Option<(usize, f64)>, i| match best {
                    Some((_, d)) if d >= dists[i] => best,
                    _ => Some((i, dists[i])),
                });
            if let Some((i, d)) = far {
                if d > 0.0 {
                    centroids.row_mut(j).assign(&points.row(i));
                    counts[labels[i]] -= 1;
                    counts[j] += 1;
                    dists[i] = 0.0;
                }
            }
        }
        let (next, next_dists) = assign_all(points, &centroids);
        cost_trace.push(next_dists.iter().sum());
        let unchanged = next == labels;
        labels = next;
        dists = next_dists;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(KMeansFit { model: ClusterModel { centroids, seed }, labels, cost_trace, converged })
}

/// Mean of all points; the K=1 closed form.
pub fn centroid_of(points: &Array2<f64>) -> ndarray::Array1<f64> {
    points.mean_axis(Axis(0)).expect("non-empty")
}
