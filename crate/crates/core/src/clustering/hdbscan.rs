//! Hierarchical density clustering.
//!
//! Build: core distances, a minimum spanning tree over mutual-reachability
//! distances, the single-linkage hierarchy and its condensed form. Selection:
//! excess-of-mass stability, then clusters split below the selection epsilon
//! are merged upward to the ancestor that exists at that distance.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Algorithm, ClusterAssignment};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, PairwiseDistances};
use crate::scalar::Scalar;

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 5;

/// One edge of the condensed tree. `child < n` is a point, otherwise a cluster.
/// `lambda` is the inverse distance at which the child leaves the parent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge<T> {
    pub parent: usize,
    pub child: usize,
    pub lambda: T,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree<T> {
    pub n_points: usize,
    pub edges: Vec<CondensedEdge<T>>,
}

impl<T: Scalar> CondensedTree<T> {
    /// Root cluster label.
    pub fn root(&self) -> usize {
        self.n_points
    }

    /// Number of cluster nodes, root included.
    pub fn n_cluster_nodes(&self) -> usize {
        1 + self.edges.iter().filter(|e| e.child >= self.n_points).count()
    }
}

#[derive(Debug, Clone)]
pub struct HdbscanHierarchy<T> {
    tree: CondensedTree<T>,
    /// Parent of each cluster node, indexed by `label - n`; root maps to itself.
    cluster_parent: Vec<usize>,
    /// Birth lambda of each cluster node, indexed by `label - n`.
    birth: Vec<T>,
    /// Condensed parent and exit lambda of every point.
    point_exit: Vec<(usize, T)>,
    trivial: bool,
}

#[derive(Debug, Clone, Copy)]
struct SltNode<T> {
    left: usize,
    right: usize,
    dist: T,
    size: usize,
}

fn core_distances<T: Scalar>(dist: &PairwiseDistances<T>, min_samples: usize) -> Vec<T> {
    let n = dist.len();
    let k = min_samples.clamp(1, n.max(1));
    let mut buf = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend_from_slice(dist.row(i));
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
            *kth
        })
        .collect()
}

/// Prim's algorithm on the dense mutual-reachability graph; ties go to the lowest index.
fn mutual_reachability_mst<T: Scalar>(dist: &PairwiseDistances<T>, core: &[T]) -> Vec<(usize, usize, T)> {
    let n = dist.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![T::infinity(); n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = dist.get(current, j).max(core[current]).max(core[j]);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, best[next]));
        current = next;
    }
    edges
}

fn single_linkage<T: Scalar>(n: usize, mut edges: Vec<(usize, usize, T)>) -> Vec<SltNode<T>> {
    edges.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for (k, (a, b, d)) in edges.into_iter().enumerate() {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + k;
        out.push(SltNode {
            left: ra,
            right: rb,
            dist: d,
            size: size[ra] + size[rb],
        });
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
    }
    out
}

fn condense<T: Scalar>(n: usize, slt: &[SltNode<T>], min_cluster_size: usize) -> CondensedTree<T> {
    let root = 2 * n - 2;
    let node_size = |x: usize| if x < n { 1 } else { slt[x - n].size };
    let leaves_under = |x: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![x];
        while let Some(v) = stack.pop() {
            if v < n {
                out.push(v);
            } else {
                stack.push(slt[v - n].right);
                stack.push(slt[v - n].left);
            }
        }
        out.sort_unstable();
        out
    };
    let mut relabel = vec![0usize; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let SltNode { left, right, dist, .. } = slt[node - n];
        let lambda = if dist > T::zero() { T::one() / dist } else { T::infinity() };
        let (lc, rc) = (node_size(left), node_size(right));
        let parent = relabel[node];
        let spill = |child: usize, edges: &mut Vec<CondensedEdge<T>>| {
            for p in leaves_under(child) {
                edges.push(CondensedEdge { parent, child: p, lambda, size: 1 });
            }
        };
        match (lc >= min_cluster_size, rc >= min_cluster_size) {
            (true, true) => {
                for (child, count) in [(left, lc), (right, rc)] {
                    relabel[child] = next_label;
                    edges.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: count,
                    });
                    next_label += 1;
                    queue.push_back(child);
                }
            }
            (false, false) => {
                spill(left, &mut edges);
                spill(right, &mut edges);
            }
            (false, true) => {
                relabel[right] = parent;
                spill(left, &mut edges);
                queue.push_back(right);
            }
            (true, false) => {
                relabel[left] = parent;
                spill(right, &mut edges);
                queue.push_back(left);
            }
        }
    }
    CondensedTree { n_points: n, edges }
}

/// `(lambda - birth) * size`, where an infinite exit from an infinite birth counts zero.
fn persistence<T: Scalar>(lambda: T, birth: T, size: usize) -> T {
    if lambda.is_infinite() && birth.is_infinite() {
        T::zero()
    } else {
        (lambda - birth) * T::of_usize(size)
    }
}

impl<T: Scalar> HdbscanHierarchy<T> {
    pub fn build(points: &Matrix<T>, min_cluster_size: usize, min_samples: usize) -> Result<Self> {
        Self::build_with_distances(&PairwiseDistances::new(points), min_cluster_size, min_samples)
    }

    pub fn build_with_distances(
        dist: &PairwiseDistances<T>,
        min_cluster_size: usize,
        min_samples: usize,
    ) -> Result<Self> {
        let n = dist.len();
        if min_cluster_size == 0 || min_samples == 0 {
            return Err(Error::InvalidParameter(
                "min_cluster_size and min_samples must be positive".into(),
            ));
        }
        if n < min_cluster_size {
            return Err(Error::InvalidParameter(format!(
                "HDBSCAN needs at least min_cluster_size={min_cluster_size} points, got {n}"
            )));
        }
        if n < 2 {
            return Ok(Self {
                tree: CondensedTree { n_points: n, edges: Vec::new() },
                cluster_parent: vec![n],
                birth: vec![T::zero()],
                point_exit: Vec::new(),
                trivial: true,
            });
        }
        let core = core_distances(dist, min_samples);
        let mst = mutual_reachability_mst(dist, &core);
        let slt = single_linkage(n, mst);
        let tree = condense(n, &slt, min_cluster_size);

        let n_nodes = tree.n_cluster_nodes();
        let mut cluster_parent = vec![n; n_nodes];
        let mut birth = vec![T::zero(); n_nodes];
        let mut point_exit = vec![(n, T::zero()); n];
        for e in &tree.edges {
            if e.child >= n {
                cluster_parent[e.child - n] = e.parent;
                birth[e.child - n] = e.lambda;
            } else {
                point_exit[e.child] = (e.parent, e.lambda);
            }
        }
        Ok(Self {
            tree,
            cluster_parent,
            birth,
            point_exit,
            trivial: false,
        })
    }

    pub fn condensed_tree(&self) -> &CondensedTree<T> {
        &self.tree
    }

    fn stabilities(&self) -> Vec<T> {
        let n = self.tree.n_points;
        let mut s = vec![T::zero(); self.birth.len()];
        for e in &self.tree.edges {
            s[e.parent - n] += persistence(e.lambda, self.birth[e.parent - n], e.size);
        }
        s
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let n = self.tree.n_points;
        let mut ch = vec![Vec::new(); self.birth.len()];
        for e in &self.tree.edges {
            if e.child >= n {
                ch[e.parent - n].push(e.child);
            }
        }
        ch
    }

    /// Excess-of-mass selection over non-root clusters.
    fn eom_selection(&self) -> BTreeSet<usize> {
        let n = self.tree.n_points;
        let children = self.children();
        let mut stability = self.stabilities();
        let mut selected = vec![true; self.birth.len()];
        selected[0] = false;
        for c in (1..self.birth.len()).rev() {
            let subtree: T = children[c].iter().map(|&k| stability[k - n]).sum();
            if subtree > stability[c] {
                selected[c] = false;
                stability[c] = subtree;
            } else {
                let mut stack: Vec<usize> = children[c].clone();
                while let Some(d) = stack.pop() {
                    selected[d - n] = false;
                    stack.extend(&children[d - n]);
                }
            }
        }
        (1..self.birth.len()).filter(|&c| selected[c]).map(|c| c + n).collect()
    }

    fn birth_distance(&self, cluster: usize) -> T {
        T::one() / self.birth[cluster - self.tree.n_points]
    }

    fn merge_below_epsilon(&self, eom: BTreeSet<usize>, epsilon: T) -> BTreeSet<usize> {
        let n = self.tree.n_points;
        let root = self.tree.root();
        let children = self.children();
        let mut processed = BTreeSet::new();
        let mut out = BTreeSet::new();
        for leaf in eom {
            if self.birth_distance(leaf) >= epsilon {
                out.insert(leaf);
                continue;
            }
            if processed.contains(&leaf) {
                continue;
            }
            let mut x = leaf;
            let chosen = loop {
                if x == root {
                    break root;
                }
                let parent = self.cluster_parent[x - n];
                if self.birth_distance(parent) > epsilon {
                    break parent;
                }
                x = parent;
            };
            out.insert(chosen);
            let mut stack = children[chosen - n].clone();
            while let Some(d) = stack.pop() {
                processed.insert(d);
                stack.extend(&children[d - n]);
            }
        }
        out
    }

    /// Flat clustering at the given selection epsilon (0 disables merging).
    pub fn select(&self, selection_epsilon: T) -> ClusterAssignment {
        let n = self.tree.n_points;
        if self.trivial {
            return ClusterAssignment::from_raw(&vec![0; n], Algorithm::Hdbscan);
        }
        let root = self.tree.root();
        let mut selected = self.eom_selection();
        if selection_epsilon > T::zero() && !selected.is_empty() {
            selected = self.merge_below_epsilon(selected, selection_epsilon);
        }
        let root_threshold = if selected.is_empty() {
            // No split ever produced two large-enough children: the root is the only cluster.
            selected.insert(root);
            if selection_epsilon > T::zero() {
                T::one() / selection_epsilon
            } else {
                self.point_exit
                    .iter()
                    .filter(|(p, _)| *p == root)
                    .map(|&(_, l)| l)
                    .fold(T::neg_infinity(), T::max)
            }
        } else {
            T::one() / selection_epsilon
        };
        let raw: Vec<i64> = self
            .point_exit
            .iter()
            .map(|&(parent, lambda)| {
                let mut x = parent;
                while x != root && !selected.contains(&x) {
                    x = self.cluster_parent[x - n];
                }
                if x != root {
                    x as i64
                } else if selected.contains(&root) && lambda >= root_threshold {
                    root as i64
                } else {
                    -1
                }
            })
            .collect();
        ClusterAssignment::from_raw(&raw, Algorithm::Hdbscan)
    }
}

pub fn hdbscan<T: Scalar>(
    points: &Matrix<T>,
    min_cluster_size: usize,
    min_samples: usize,
    selection_epsilon: T,
) -> Result<ClusterAssignment> {
    Ok(HdbscanHierarchy::build(points, min_cluster_size, min_samples)?.select(selection_epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, sd).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(vec![ctr[0] + nrm.sample(&mut rng), ctr[1] + nrm.sample(&mut rng)]);
                truth.push(c);
            }
        }
        (Matrix::from_rows(&rows, 2), truth)
    }

    #[test]
    fn two_separated_blobs() {
        let (m, truth) = blobs(&[[0.0, 0.0], [5.0, 5.0]], 50, 0.3, 1);
        let a = hdbscan(&m, 5, 5, 0.0).unwrap();
        assert_eq!(a.n_clusters, 2);
        // exact agreement with ground truth up to relabeling, noise aside
        for i in 0..100 {
            for j in 0..100 {
                if a.labels[i] >= 0 && a.labels[j] >= 0 {
                    assert_eq!(a.labels[i] == a.labels[j], truth[i] == truth[j]);
                }
            }
        }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let m = Matrix::from_rows(&vec![vec![0.3, 0.3]; 20], 2);
        let a = hdbscan(&m, 5, 5, 0.0).unwrap();
        assert_eq!(a.n_clusters, 1);
        assert_eq!(a.noise_count(), 0);
    }

    #[test]
    fn huge_epsilon_collapses_to_one_cluster() {
        let (m, _) = blobs(&[[0.0, 0.0], [5.0, 5.0], [0.0, 5.0]], 30, 0.3, 2);
        assert_eq!(hdbscan(&m, 5, 5, 0.0).unwrap().n_clusters, 3);
        let a = hdbscan(&m, 5, 5, 100.0).unwrap();
        assert_eq!(a.n_clusters, 1);
        assert_eq!(a.noise_count(), 0);
    }

    #[test]
    fn moderate_epsilon_merges_close_siblings() {
        // two blobs close together, one far away
        let (m, truth) = blobs(&[[0.0, 0.0], [1.5, 0.0], [20.0, 0.0]], 40, 0.15, 3);
        let fine = hdbscan(&m, 5, 5, 0.0).unwrap();
        assert_eq!(fine.n_clusters, 3);
        let coarse = hdbscan(&m, 5, 5, 3.0).unwrap();
        assert_eq!(coarse.n_clusters, 2);
        let near: BTreeSet<i32> = (0..80).map(|i| coarse.labels[i]).filter(|&l| l >= 0).collect();
        assert_eq!(near.len(), 1);
        assert!(truth[100] == 2 && coarse.labels[100] != *near.iter().next().unwrap());
    }

    #[test]
    fn too_few_points() {
        let m = Matrix::from_rows(&[vec![0.0], vec![1.0]], 1);
        assert!(hdbscan(&m, 5, 5, 0.0).is_err());
    }

    #[test]
    fn condensed_tree_accounts_for_every_point() {
        let (m, _) = blobs(&[[0.0, 0.0], [3.0, 0.0]], 25, 0.4, 9);
        let h = HdbscanHierarchy::build(&m, 5, 5).unwrap();
        let t = h.condensed_tree();
        let pts: BTreeSet<usize> = t.edges.iter().filter(|e| e.child < 50).map(|e| e.child).collect();
        assert_eq!(pts.len(), 50);
        // cluster sizes never shrink below min_cluster_size
        assert!(t.edges.iter().filter(|e| e.child >= 50).all(|e| e.size >= 5));
    }
}
