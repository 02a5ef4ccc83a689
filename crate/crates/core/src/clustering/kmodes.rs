use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ClusterAssignment};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Position of a normalized lab value relative to its reference range.
///
/// Ordered by name (`HIGH < LOW < NORMAL`) so mode ties resolve to the
/// lexicographically smallest category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabCategory {
    Low,
    Normal,
    High,
}

impl LabCategory {
    pub fn of<T: Scalar>(value: T) -> Self {
        if value < T::zero() {
            LabCategory::Low
        } else if value <= T::one() {
            LabCategory::Normal
        } else {
            LabCategory::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabCategory::Low => "LOW",
            LabCategory::Normal => "NORMAL",
            LabCategory::High => "HIGH",
        }
    }
}

impl fmt::Display for LabCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Ord for LabCategory {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl PartialOrd for LabCategory {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn discretize_for_kmodes<T: Scalar>(points: &Matrix<T>) -> Vec<Vec<LabCategory>> {
    points
        .rows_iter()
        .map(|r| r.iter().map(|&v| LabCategory::of(v)).collect())
        .collect()
}

/// Linear-interpolated quantile of sorted data.
fn quantile<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bins each column into three categories at its empirical 1/3 and 2/3
/// quantiles: `0` for `v <= q1`, `1` for `v <= q2`, `2` otherwise.
pub fn tercile_bins<T: Scalar>(points: &Matrix<T>) -> Vec<Vec<u8>> {
    let n = points.nrows();
    let mut out = vec![vec![0u8; points.ncols()]; n];
    if n == 0 {
        return out;
    }
    for j in 0..points.ncols() {
        let mut col = points.column(j);
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q1 = quantile(&col, 1.0 / 3.0);
        let q2 = quantile(&col, 2.0 / 3.0);
        for (i, row) in out.iter_mut().enumerate() {
            let v = points.get(i, j);
            row[j] = if v <= q1 {
                0
            } else if v <= q2 {
                1
            } else {
                2
            };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KModesFit<C> {
    pub assignment: ClusterAssignment,
    /// Mode of each cluster (canonical ids).
    pub modes: Vec<Vec<C>>,
    pub cost: usize,
    /// Total mismatch cost after every assignment step.
    pub cost_trace: Vec<usize>,
    pub iterations: usize,
}

fn mismatches<C: PartialEq>(a: &[C], b: &[C]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn assign<C: Ord + Copy>(rows: &[Vec<C>], modes: &mut [Vec<C>], labels: &mut [usize]) -> usize {
    let k = modes.len();
    let mut cost = vec![0usize; rows.len()];
    let mut counts = vec![0usize; k];
    for (i, r) in rows.iter().enumerate() {
        let (c, d) = (0..k)
            .map(|c| (c, mismatches(r, &modes[c])))
            .min_by_key(|&(c, d)| (d, c))
            .unwrap();
        labels[i] = c;
        cost[i] = d;
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..rows.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| cost[i] > cost[f]) {
                far = Some(i);
            }
        }
        let i = far.expect("k <= n leaves a donor");
        counts[labels[i]] -= 1;
        counts[empty] = 1;
        labels[i] = empty;
        cost[i] = 0;
        modes[empty] = rows[i].clone();
    }
    cost.into_iter().sum()
}

fn update<C: Ord + Copy>(rows: &[Vec<C>], labels: &[usize], modes: &mut [Vec<C>]) {
    let p = rows[0].len();
    for (c, mode) in modes.iter_mut().enumerate() {
        for (j, slot) in mode.iter_mut().enumerate().take(p) {
            let mut tally: BTreeMap<C, usize> = BTreeMap::new();
            for (r, _) in rows.iter().zip(labels).filter(|(_, &l)| l == c) {
                *tally.entry(r[j]).or_default() += 1;
            }
            // BTreeMap iterates ascending, so the first maximum is the smallest category.
            if let Some((&cat, _)) = tally.iter().fold(None, |best: Option<(&C, &usize)>, (cat, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((cat, n)),
            }) {
                *slot = cat;
            }
        }
    }
}

/// Huang-style k-modes with simple matching dissimilarity.
pub fn kmodes<C: Ord + Copy + Hash>(rows: &[Vec<C>], k: usize, seed: u64, max_iter: usize) -> Result<KModesFit<C>> {
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k-modes k must be in 1..={n}, got {k}")));
    }
    let distinct: HashSet<&Vec<C>> = rows.iter().collect();
    if k > distinct.len() {
        return Err(Error::InvalidParameter(format!(
            "k-modes k={k} exceeds the {} distinct rows",
            distinct.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut modes: Vec<Vec<C>> = Vec::with_capacity(k);
    for i in order {
        if !modes.contains(&rows[i]) {
            modes.push(rows[i].clone());
            if modes.len() == k {
                break;
            }
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let before = labels.clone();
        trace.push(assign(rows, &mut modes, &mut labels));
        if labels == before {
            break;
        }
        update(rows, &labels, &mut modes);
    }
    let cost = rows.iter().zip(&labels).map(|(r, &c)| mismatches(r, &modes[c])).sum();

    let raw: Vec<i64> = labels.iter().map(|&c| c as i64).collect();
    let assignment = ClusterAssignment::from_raw(&raw, Algorithm::Kmodes);
    let mut ordered = vec![Vec::new(); assignment.n_clusters];
    for (i, &c) in labels.iter().enumerate() {
        ordered[assignment.labels[i] as usize] = modes[c].clone();
    }
    Ok(KModesFit {
        assignment,
        modes: ordered,
        cost,
        cost_trace: trace,
        iterations,
    })
}
