use serde::{Deserialize, Serialize};

use super::{Algorithm, ClusterAssignment};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{sq_euclidean, Scalar};

/// One Ward merge. Clusters are named by slot: initially slot `i` holds point
/// `i`, and merging slots `a < b` keeps the result in `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge<T> {
    pub a: usize,
    pub b: usize,
    pub distance: T,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram<T> {
    pub n_points: usize,
    pub merges: Vec<Merge<T>>,
}

impl<T: Scalar> Dendrogram<T> {
    /// Ward linkage with Lance–Williams updates on squared Euclidean distances.
    /// The closest pair merges first; ties go to the lexicographically smallest `(a, b)`.
    pub fn ward(points: &Matrix<T>) -> Self {
        let n = points.nrows();
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = sq_euclidean(points.row(i), points.row(j));
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let mut active = vec![true; n];
        let mut size = vec![1usize; n];
        // nearest[i]: best partner j > i by (distance, j)
        let mut nearest: Vec<Option<(T, usize)>> = vec![None; n];
        let scan = |d: &[T], active: &[bool], i: usize| -> Option<(T, usize)> {
            let mut best: Option<(T, usize)> = None;
            for j in i + 1..n {
                if active[j] && best.is_none_or(|(bd, _)| d[i * n + j] < bd) {
                    best = Some((d[i * n + j], j));
                }
            }
            best
        };
        for i in 0..n {
            nearest[i] = scan(&d, &active, i);
        }

        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        for _ in 1..n {
            let mut pick: Option<(T, usize, usize)> = None;
            for i in 0..n {
                if let (true, Some((dist, j))) = (active[i], nearest[i]) {
                    if pick.is_none_or(|(pd, _, _)| dist < pd) {
                        pick = Some((dist, i, j));
                    }
                }
            }
            let (dist, a, b) = pick.expect("at least two active clusters");
            let (na, nb) = (T::of_usize(size[a]), T::of_usize(size[b]));
            for k in 0..n {
                if !active[k] || k == a || k == b {
                    continue;
                }
                let nk = T::of_usize(size[k]);
                let v = ((na + nk) * d[a * n + k] + (nb + nk) * d[b * n + k] - nk * dist) / (na + nb + nk);
                d[a * n + k] = v;
                d[k * n + a] = v;
            }
            active[b] = false;
            size[a] += size[b];
            merges.push(Merge {
                a,
                b,
                distance: dist,
                size: size[a],
            });

            nearest[b] = None;
            nearest[a] = scan(&d, &active, a);
            for k in 0..n {
                if !active[k] || k == a {
                    continue;
                }
                match nearest[k] {
                    Some((_, j)) if j == a || j == b => nearest[k] = scan(&d, &active, k),
                    Some((bd, bj)) if k < a => {
                        let v = d[k * n + a];
                        if v < bd || (v == bd && a < bj) {
                            nearest[k] = Some((v, a));
                        }
                    }
                    None if k < a => nearest[k] = Some((d[k * n + a], a)),
                    _ => {}
                }
            }
        }
        Dendrogram { n_points: n, merges }
    }

    /// Flat clustering with `k` clusters (the first `n - k` merges applied).
    pub fn cut(&self, k: usize) -> Result<ClusterAssignment> {
        let n = self.n_points;
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!("agglomerative k must be in 1..={n}, got {k}")));
        }
        let mut owner: Vec<usize> = (0..n).collect();
        for m in &self.merges[..n - k] {
            for o in owner.iter_mut() {
                if *o == m.b {
                    *o = m.a;
                }
            }
        }
        let raw: Vec<i64> = owner.iter().map(|&o| o as i64).collect();
        Ok(ClusterAssignment::from_raw(&raw, Algorithm::Agglomerative))
    }
}

pub fn agglomerative<T: Scalar>(points: &Matrix<T>, k: usize) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("agglomerative k must be in 1..={n}, got {k}")));
    }
    Dendrogram::ward(points).cut(k)
}
