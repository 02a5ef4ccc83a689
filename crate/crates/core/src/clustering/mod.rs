//! PCA and the five clustering algorithms.
//!
//! Every algorithm reports labels in canonical form: cluster ids are assigned
//! in order of each cluster's lowest member index and `-1` marks noise.

mod agglomerative;
mod dbscan;
mod hdbscan;
mod kmeans;
mod kmodes;
mod pca;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use agglomerative::{agglomerative, Dendrogram, Merge};
pub use dbscan::{dbscan, dbscan_with_distances, DEFAULT_MIN_SAMPLES};
pub use hdbscan::{hdbscan, CondensedTree, HdbscanHierarchy, DEFAULT_MIN_CLUSTER_SIZE};
pub use kmeans::{kmeans, KMeansFit, KMeansOptions};
pub use kmodes::{discretize_for_kmodes, kmodes, tercile_bins, KModesFit, LabCategory};
pub use pca::{pca_fit_transform, PcaModel};

/// Label reserved for points outside every cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dbscan,
    Hdbscan,
    Kmeans,
    #[serde(rename = "agglom")]
    Agglomerative,
    Kmodes,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Dbscan,
        Algorithm::Hdbscan,
        Algorithm::Kmeans,
        Algorithm::Agglomerative,
        Algorithm::Kmodes,
    ];

    /// Density algorithms are tuned over epsilon; the others over a cluster count.
    pub fn is_density(self) -> bool {
        matches!(self, Algorithm::Dbscan | Algorithm::Hdbscan)
    }

    pub fn slug(self) -> &'static str {
        match self {
            Algorithm::Dbscan => "dbscan",
            Algorithm::Hdbscan => "hdbscan",
            Algorithm::Kmeans => "kmeans",
            Algorithm::Agglomerative => "agglom",
            Algorithm::Kmodes => "kmodes",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Algorithm::Dbscan => "DBSCAN",
            Algorithm::Hdbscan => "HDBSCAN",
            Algorithm::Kmeans => "K-Means",
            Algorithm::Agglomerative => "Agglom",
            Algorithm::Kmodes => "K-Modes",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dbscan" => Ok(Algorithm::Dbscan),
            "hdbscan" => Ok(Algorithm::Hdbscan),
            "kmeans" | "k-means" => Ok(Algorithm::Kmeans),
            "agglom" | "agglomerative" | "hierarchical" => Ok(Algorithm::Agglomerative),
            "kmodes" | "k-modes" => Ok(Algorithm::Kmodes),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
    pub algorithm: Algorithm,
}

impl ClusterAssignment {
    /// Canonicalizes arbitrary labels (any negative value is noise).
    pub fn from_raw(raw: &[i64], algorithm: Algorithm) -> Self {
        let (labels, n_clusters) = canonical_labels(raw);
        Self {
            labels,
            n_clusters,
            algorithm,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Member row indices of every cluster, by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

/// Relabels so cluster ids follow first appearance; negatives become [`NOISE`].
pub fn canonical_labels(raw: &[i64]) -> (Vec<i32>, usize) {
    let mut map = std::collections::HashMap::new();
    let labels = raw
        .iter()
        .map(|&r| {
            if r < 0 {
                NOISE
            } else {
                let next = map.len() as i32;
                *map.entry(r).or_insert(next)
            }
        })
        .collect();
    (labels, map.len())
}
