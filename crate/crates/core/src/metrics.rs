//! External (label-based) and internal (geometric) cluster-validity metrics
//! and the composite score used for ranking.
//!
//! Noise points form one extra predicted cluster for the external metrics and
//! are ignored by silhouette and Davies–Bouldin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, NOISE};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, PairwiseDistances};
use crate::scalar::{euclidean, Scalar};

/// Counts of points per (true class, predicted cluster). Rows and columns
/// follow the sorted order of the distinct label values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

fn dense_index<V: Ord + Clone>(values: &[V]) -> BTreeMap<V, usize> {
    let mut m: BTreeMap<V, usize> = values.iter().map(|v| (v.clone(), 0)).collect();
    for (i, slot) in m.values_mut().enumerate() {
        *slot = i;
    }
    m
}

impl ContingencyTable {
    pub fn from_labels<A: Ord + Clone, B: Ord + Clone>(truth: &[A], predicted: &[B]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let rows = dense_index(truth);
        let cols = dense_index(predicted);
        let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
        for (t, p) in truth.iter().zip(predicted) {
            counts[rows[t]][cols[p]] += 1;
        }
        Ok(Self {
            counts,
            n: truth.len() as u64,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let c = self.counts.first().map_or(0, Vec::len);
        (0..c).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalScores<T> {
    pub homogeneity: T,
    pub completeness: T,
    pub v_measure: T,
    pub ari: T,
    pub ami: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle<T> {
    pub homogeneity: T,
    pub completeness: T,
    pub v_measure: T,
    pub ari: T,
    pub ami: T,
    /// NaN when the bundle is invalid.
    pub silhouette: T,
    /// NaN when the bundle is invalid.
    pub davies_bouldin: T,
    /// NaN when the bundle is invalid.
    pub composite: T,
    pub valid: bool,
    /// Non-noise clusters found.
    pub n_clusters: usize,
}

impl<T: Scalar> MetricsBundle<T> {
    /// A bundle for a run that produced no assignment at all.
    pub fn failed() -> Self {
        let nan = T::nan();
        Self {
            homogeneity: nan,
            completeness: nan,
            v_measure: nan,
            ari: nan,
            ami: nan,
            silhouette: nan,
            davies_bouldin: nan,
            composite: nan,
            valid: false,
            n_clusters: 0,
        }
    }
}

fn entropy<T: Scalar>(sums: &[u64], n: u64) -> T {
    let n = T::of_usize(n as usize);
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = T::of_usize(c as usize) / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information<T: Scalar>(table: &ContingencyTable) -> T {
    let (a, b) = (table.row_sums(), table.col_sums());
    let n = T::of_usize(table.n as usize);
    let mut mi = T::zero();
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij_t = T::of_usize(nij as usize);
            let ratio = n * nij_t / (T::of_usize(a[i] as usize) * T::of_usize(b[j] as usize));
            mi += nij_t / n * ratio.ln();
        }
    }
    mi.max(T::zero())
}

fn ln_factorials<T: Scalar>(n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = T::zero();
    out.push(acc);
    for k in 1..=n {
        acc += T::of_usize(k).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information between two partitions with the given
/// marginals, under the hypergeometric (permutation) model.
pub fn expected_mutual_information<T: Scalar>(a: &[u64], b: &[u64], n: u64) -> T {
    let n_us = n as usize;
    let lf = ln_factorials::<T>(n_us);
    let n_t = T::of_usize(n_us);
    let mut emi = T::zero();
    for &ai in a {
        for &bj in b {
            let (ai, bj) = (ai as usize, bj as usize);
            let lo = (ai + bj).saturating_sub(n_us).max(1);
            let hi = ai.min(bj);
            let fixed = lf[ai] + lf[bj] + lf[n_us - ai] + lf[n_us - bj] - lf[n_us];
            for nij in lo..=hi {
                let nij_t = T::of_usize(nij);
                let log_p = fixed - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n_us + nij - ai - bj];
                let term = nij_t / n_t * (n_t * nij_t / (T::of_usize(ai) * T::of_usize(bj))).ln();
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn choose2(x: u64) -> u128 {
    let x = x as u128;
    x * x.saturating_sub(1) / 2
}

fn adjusted_rand<T: Scalar>(table: &ContingencyTable) -> T {
    let index: u128 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: u128 = table.row_sums().into_iter().map(choose2).sum();
    let sb: u128 = table.col_sums().into_iter().map(choose2).sum();
    let total = choose2(table.n);
    if total == 0 {
        return T::one();
    }
    let to_t = |x: u128| T::of(x as f64);
    let expected = to_t(sa) * to_t(sb) / to_t(total);
    let max = (to_t(sa) + to_t(sb)) / T::of(2.0);
    let denom = max - expected;
    if denom == T::zero() {
        T::one()
    } else {
        (to_t(index) - expected) / denom
    }
}

fn unit_clamp<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

pub fn external_scores_from_table<T: Scalar>(table: &ContingencyTable) -> ExternalScores<T> {
    let (a, b) = (table.row_sums(), table.col_sums());
    let h_true: T = entropy(&a, table.n);
    let h_pred: T = entropy(&b, table.n);
    let mi: T = mutual_information(table);
    let homogeneity = if h_true == T::zero() { T::one() } else { unit_clamp(mi / h_true) };
    let completeness = if h_pred == T::zero() { T::one() } else { unit_clamp(mi / h_pred) };
    let v_measure = if homogeneity + completeness == T::zero() {
        T::zero()
    } else {
        T::of(2.0) * homogeneity * completeness / (homogeneity + completeness)
    };

    let ami = if h_true == T::zero() && h_pred == T::zero() {
        T::one()
    } else {
        let emi: T = expected_mutual_information(&a, &b, table.n);
        let denom = (h_true + h_pred) / T::of(2.0) - emi;
        let numer = mi - emi;
        let eps = T::epsilon() * T::of(64.0) * (T::one() + h_true.max(h_pred));
        if denom.abs() <= eps {
            if numer.abs() <= eps {
                T::one()
            } else {
                numer / denom.signum() / eps
            }
        } else {
            numer / denom
        }
    };
    ExternalScores {
        homogeneity,
        completeness,
        v_measure,
        ari: adjusted_rand(table),
        ami,
    }
}

/// Homogeneity, completeness, V-measure, ARI and AMI of `predicted` against class labels.
pub fn external_metrics<T: Scalar, L: Ord + Clone>(truth: &[L], predicted: &ClusterAssignment) -> Result<ExternalScores<T>> {
    if truth.is_empty() {
        return Err(Error::InvalidParameter("external metrics need at least one point".into()));
    }
    let table = ContingencyTable::from_labels(truth, &predicted.labels)?;
    Ok(external_scores_from_table(&table))
}

fn silhouette_by<T: Scalar>(assignment: &ClusterAssignment, dist: impl Fn(usize, usize) -> T) -> Option<T> {
    let k = assignment.n_clusters;
    if k < 2 {
        return None;
    }
    let labels = &assignment.labels;
    let mut sizes = vec![0usize; k];
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        sizes[l as usize] += 1;
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != NOISE).collect();
    let mut sums = vec![T::zero(); k];
    let mut total = T::zero();
    for &i in &members {
        sums.iter_mut().for_each(|s| *s = T::zero());
        for &j in &members {
            if i != j {
                sums[labels[j] as usize] += dist(i, j);
            }
        }
        let own = labels[i] as usize;
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / T::of_usize(sizes[own] - 1);
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / T::of_usize(sizes[c]))
            .fold(T::infinity(), T::min);
        let m = a.max(b);
        if m > T::zero() {
            total += (b - a) / m;
        }
    }
    Some(total / T::of_usize(members.len()))
}

/// Mean silhouette over non-noise points; `None` with fewer than two clusters.
pub fn silhouette<T: Scalar>(points: &Matrix<T>, assignment: &ClusterAssignment) -> Option<T> {
    silhouette_by(assignment, |i, j| euclidean(points.row(i), points.row(j)))
}

pub fn silhouette_with_distances<T: Scalar>(dist: &PairwiseDistances<T>, assignment: &ClusterAssignment) -> Option<T> {
    silhouette_by(assignment, |i, j| dist.get(i, j))
}

/// Davies–Bouldin index over non-noise clusters; `None` with fewer than two
/// clusters. Coincident centroids make that pair's ratio infinite.
pub fn davies_bouldin<T: Scalar>(points: &Matrix<T>, assignment: &ClusterAssignment) -> Option<T> {
    let k = assignment.n_clusters;
    if k < 2 {
        return None;
    }
    let members = assignment.members();
    let centroids: Vec<Matrix<T>> = members
        .iter()
        .map(|m| {
            let sub = points.select_rows(m);
            Matrix::from_vec(1, points.ncols(), sub.column_means())
        })
        .collect();
    let scatter: Vec<T> = members
        .iter()
        .zip(&centroids)
        .map(|(m, c)| {
            m.iter().map(|&i| euclidean(points.row(i), c.row(0))).sum::<T>() / T::of_usize(m.len())
        })
        .collect();
    let mut total = T::zero();
    for i in 0..k {
        let mut worst = T::neg_infinity();
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = euclidean(centroids[i].row(0), centroids[j].row(0));
            let r = if d == T::zero() { T::infinity() } else { (scatter[i] + scatter[j]) / d };
            worst = worst.max(r);
        }
        total += worst;
    }
    Some(total / T::of_usize(k))
}

/// `1/(1+DB)` plus the sum of the six bounded scores.
pub fn composite_score<T: Scalar>(external: &ExternalScores<T>, silhouette: T, davies_bouldin: T) -> T {
    T::one() / (T::one() + davies_bouldin)
        + external.homogeneity
        + external.completeness
        + external.v_measure
        + external.ari
        + external.ami
        + silhouette
}

/// Full bundle for one clustering. Internal metrics use the space the
/// clustering ran in; pass precomputed distances to avoid recomputing them.
pub fn evaluate<T: Scalar, L: Ord + Clone>(
    points: &Matrix<T>,
    distances: Option<&PairwiseDistances<T>>,
    truth: &[L],
    assignment: &ClusterAssignment,
) -> Result<MetricsBundle<T>> {
    if points.nrows() != assignment.len() {
        return Err(Error::LengthMismatch {
            expected: points.nrows(),
            found: assignment.len(),
        });
    }
    let ext = external_metrics::<T, L>(truth, assignment)?;
    let sil = match distances {
        Some(d) => silhouette_with_distances(d, assignment),
        None => silhouette(points, assignment),
    };
    let db = davies_bouldin(points, assignment);
    let nan = T::nan();
    let (silhouette, davies_bouldin, composite, valid) = match (sil, db) {
        (Some(s), Some(d)) => (s, d, composite_score(&ext, s, d), true),
        _ => (nan, nan, nan, false),
    };
    Ok(MetricsBundle {
        homogeneity: ext.homogeneity,
        completeness: ext.completeness,
        v_measure: ext.v_measure,
        ari: ext.ari,
        ami: ext.ami,
        silhouette,
        davies_bouldin,
        composite,
        valid,
        n_clusters: assignment.n_clusters,
    })
}
