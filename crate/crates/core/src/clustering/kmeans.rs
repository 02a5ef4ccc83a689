use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ClusterAssignment};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{sq_euclidean, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit<T> {
    pub assignment: ClusterAssignment,
    /// Row `c` is the centroid of cluster `c` (canonical ids).
    pub centroids: Matrix<T>,
    pub inertia: T,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<T>,
    pub iterations: usize,
}

/// D²-weighted draw; points already at distance zero are never picked.
fn weighted_pick(d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    let mut pick = None;
    for (i, &w) in d2.iter().enumerate() {
        if w > 0.0 {
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
    }
    pick.unwrap()
}

/// Greedy k-means++: each step draws `2 + ln k` D²-weighted candidates and
/// keeps the one giving the lowest potential (ties: first drawn).
fn plus_plus<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.nrows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let dist_to = |c: usize| -> Vec<f64> {
        (0..n)
            .map(|i| sq_euclidean(points.row(i), points.row(c)).as_f64())
            .collect()
    };
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2 = dist_to(chosen[0]);
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if total > 0.0 {
            let mut best: Option<(f64, usize, Vec<f64>)> = None;
            for _ in 0..trials {
                let c = weighted_pick(&d2, total, rng);
                let merged: Vec<f64> = d2.iter().zip(dist_to(c)).map(|(&a, b)| a.min(b)).collect();
                let potential: f64 = merged.iter().sum();
                if best.as_ref().is_none_or(|b| potential < b.0) {
                    best = Some((potential, c, merged));
                }
            }
            let (_, c, merged) = best.unwrap();
            chosen.push(c);
            d2 = merged;
        } else {
            let c = (0..n).find(|i| !chosen.contains(i)).unwrap();
            chosen.push(c);
            d2 = d2.iter().zip(dist_to(c)).map(|(&a, b)| a.min(b)).collect();
        }
    }
    chosen
}

/// Nearest centroid by squared distance; ties go to the lowest centroid index.
fn nearest<T: Scalar>(x: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, sq_euclidean(x, centroids.row(0)));
    for c in 1..centroids.nrows() {
        let d = sq_euclidean(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign<T: Scalar>(points: &Matrix<T>, centroids: &mut Matrix<T>, labels: &mut [usize]) -> T {
    let k = centroids.nrows();
    let mut dist = vec![T::zero(); points.nrows()];
    let mut counts = vec![0usize; k];
    for (i, x) in points.rows_iter().enumerate() {
        let (c, d) = nearest(x, centroids);
        labels[i] = c;
        dist[i] = d;
        counts[c] += 1;
    }
    // Repair empty clusters with the point farthest from its centroid,
    // taken from a cluster that can spare it (ties: lowest index).
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let i = far.expect("k <= n leaves a donor");
        counts[labels[i]] -= 1;
        counts[empty] = 1;
        labels[i] = empty;
        dist[i] = T::zero();
        centroids.row_mut(empty).copy_from_slice(points.row(i));
    }
    dist.into_iter().sum()
}

fn update<T: Scalar>(points: &Matrix<T>, labels: &[usize], k: usize) -> Matrix<T> {
    let p = points.ncols();
    let mut sums = Matrix::zeros(k, p);
    let mut counts = vec![0usize; k];
    for (x, &c) in points.rows_iter().zip(labels) {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(x) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let m = T::of_usize(count);
        sums.row_mut(c).iter_mut().for_each(|s| *s /= m);
    }
    sums
}

/// Lloyd's algorithm from k-means++ seeds.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64, options: KMeansOptions) -> Result<KMeansFit<T>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k-means k must be in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus(points, k, &mut rng);
    let mut centroids = points.select_rows(&seeds);
    let mut labels = vec![0usize; n];
    let mut trace = Vec::new();
    let tol = T::of(options.tol);
    let mut iterations = 0;
    while iterations < options.max_iter.max(1) {
        iterations += 1;
        trace.push(assign(points, &mut centroids, &mut labels));
        let next = update(points, &labels, k);
        let shift = (0..k)
            .map(|c| sq_euclidean(next.row(c), centroids.row(c)).sqrt())
            .fold(T::zero(), T::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let inertia = points
        .rows_iter()
        .zip(&labels)
        .map(|(x, &c)| sq_euclidean(x, centroids.row(c)))
        .sum();

    let raw: Vec<i64> = labels.iter().map(|&c| c as i64).collect();
    let assignment = ClusterAssignment::from_raw(&raw, Algorithm::Kmeans);
    let mut ordered = Matrix::zeros(k, points.ncols());
    for (i, &c) in labels.iter().enumerate() {
        ordered.row_mut(assignment.labels[i] as usize).copy_from_slice(centroids.row(c));
    }
    Ok(KMeansFit {
        assignment,
        centroids: ordered,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}
