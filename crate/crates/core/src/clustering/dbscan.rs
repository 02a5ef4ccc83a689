use std::collections::VecDeque;

use super::{Algorithm, ClusterAssignment};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, PairwiseDistances};
use crate::scalar::Scalar;

pub const DEFAULT_MIN_SAMPLES: usize = 5;

pub fn dbscan<T: Scalar>(points: &Matrix<T>, epsilon: T, min_samples: usize) -> Result<ClusterAssignment> {
    dbscan_with_distances(&PairwiseDistances::new(points), epsilon, min_samples)
}

/// Density clustering on precomputed Euclidean distances.
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `epsilon`. Core points reachable from each other through chains of
/// `epsilon`-close core points share a cluster. A non-core point joins the
/// cluster of its lowest-index core neighbor, or is noise.
pub fn dbscan_with_distances<T: Scalar>(
    dist: &PairwiseDistances<T>,
    epsilon: T,
    min_samples: usize,
) -> Result<ClusterAssignment> {
    if !(epsilon > T::zero()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = dist.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            dist.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= epsilon)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut raw = vec![-1i64; n];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || raw[start] >= 0 {
            continue;
        }
        raw[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && raw[q] < 0 {
                    raw[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
                raw[i] = raw[c];
            }
        }
    }
    Ok(ClusterAssignment::from_raw(&raw, Algorithm::Dbscan))
}
