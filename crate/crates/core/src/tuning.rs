//! Hyperparameter grid, per-age-group experiment runner, ranking and the
//! median-of-top-five selection rule.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    dbscan_with_distances, kmeans, kmodes, pca_fit_transform, tercile_bins, Algorithm, ClusterAssignment,
    Dendrogram, HdbscanHierarchy, KMeansOptions, DEFAULT_MIN_CLUSTER_SIZE, DEFAULT_MIN_SAMPLES,
};
use crate::error::{Error, Result};
use crate::imputation::SubgroupDataset;
use crate::matrix::{Matrix, PairwiseDistances};
use crate::metrics::{evaluate, MetricsBundle};
use crate::normalization::AgeGroup;
use crate::scalar::Scalar;
use crate::seed::mix_seed;

/// Number of top-ranked rows feeding the median rule.
pub const TOP_K: usize = 5;

pub fn default_epsilons() -> Vec<f64> {
    (1..=40).map(|i| i as f64 / 200.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub pca_components: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub n_clusters: Vec<usize>,
    pub min_samples: usize,
    pub min_cluster_size: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmodes_max_iter: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            pca_components: (2..=5).collect(),
            epsilons: default_epsilons(),
            n_clusters: (2..=18).collect(),
            min_samples: DEFAULT_MIN_SAMPLES,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-6,
            kmodes_max_iter: 100,
        }
    }
}

impl GridConfig {
    pub fn is_default_grid(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pca_components.is_empty() || self.pca_components.iter().any(|&p| !(1..=5).contains(&p)) {
            return bad("pca_components must be a non-empty list within 1..=5");
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("epsilons must be a non-empty list of positive numbers");
        }
        if self.n_clusters.is_empty() || self.n_clusters.contains(&0) {
            return bad("n_clusters must be a non-empty list of positive integers");
        }
        if self.min_samples == 0 || self.min_cluster_size == 0 {
            return bad("min_samples and min_cluster_size must be positive");
        }
        if self.kmeans_max_iter == 0 || self.kmodes_max_iter == 0 || !(self.kmeans_tol >= 0.0) {
            return bad("iteration limits must be positive and kmeans_tol non-negative");
        }
        Ok(())
    }

    /// Combos for one algorithm, PCA ascending then knob ascending. Seeds are
    /// filled in by the runner.
    pub fn enumerate(&self, algorithm: Algorithm) -> Vec<HyperparamCombo> {
        let mut pcas = self.pca_components.clone();
        pcas.sort_unstable();
        let mut out = Vec::new();
        for pca in pcas {
            if algorithm.is_density() {
                let mut eps = self.epsilons.clone();
                eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.extend(eps.into_iter().map(|e| HyperparamCombo::density(algorithm, pca, e)));
            } else {
                let mut ks = self.n_clusters.clone();
                ks.sort_unstable();
                out.extend(ks.into_iter().map(|k| HyperparamCombo::fixed_k(algorithm, pca, k)));
            }
        }
        out
    }
}

/// Default-grid combos for one algorithm.
pub fn enumerate_grid(algorithm: Algorithm) -> Vec<HyperparamCombo> {
    GridConfig::default().enumerate(algorithm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparamCombo {
    pub algorithm: Algorithm,
    pub pca_components: usize,
    pub epsilon: Option<f64>,
    pub n_clusters: Option<usize>,
    pub seed: u64,
}

impl HyperparamCombo {
    pub fn density(algorithm: Algorithm, pca_components: usize, epsilon: f64) -> Self {
        Self {
            algorithm,
            pca_components,
            epsilon: Some(epsilon),
            n_clusters: None,
            seed: 0,
        }
    }

    pub fn fixed_k(algorithm: Algorithm, pca_components: usize, n_clusters: usize) -> Self {
        Self {
            algorithm,
            pca_components,
            epsilon: None,
            n_clusters: Some(n_clusters),
            seed: 0,
        }
    }

    /// Epsilon or cluster count, whichever the algorithm uses.
    pub fn knob(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| self.n_clusters.unwrap_or(0) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult<T> {
    pub age_group: AgeGroup,
    /// Position of the combo in the enumeration order.
    pub combo_index: usize,
    pub combo: HyperparamCombo,
    /// Empty when the algorithm could not run.
    pub assignment: ClusterAssignment,
    pub bundle: MetricsBundle<T>,
    /// Why the run failed, if it did.
    pub note: Option<String>,
}

/// PCA scores for one `(age group, pca)` pair with lazily built per-algorithm structures.
struct Space<T> {
    scores: Matrix<T>,
    dist: PairwiseDistances<T>,
    hdbscan: OnceLock<std::result::Result<HdbscanHierarchy<T>, String>>,
    ward: OnceLock<Dendrogram<T>>,
    terciles: OnceLock<Vec<Vec<u8>>>,
}

impl<T: Scalar> Space<T> {
    fn new(data: &Matrix<T>, pca: usize) -> Result<Self> {
        let (_, scores) = pca_fit_transform(data, pca)?;
        let dist = PairwiseDistances::new(&scores);
        Ok(Self {
            scores,
            dist,
            hdbscan: OnceLock::new(),
            ward: OnceLock::new(),
            terciles: OnceLock::new(),
        })
    }

    fn cluster(&self, combo: &HyperparamCombo, grid: &GridConfig) -> Result<ClusterAssignment> {
        let n = self.scores.nrows();
        let k = combo.n_clusters.unwrap_or(0);
        if !combo.algorithm.is_density() && (k == 0 || k > n) {
            return Err(Error::InvalidParameter(format!("n_clusters={k} outside 1..={n}")));
        }
        let eps = combo.epsilon.unwrap_or(0.0);
        match combo.algorithm {
            Algorithm::Dbscan => dbscan_with_distances(&self.dist, T::of(eps), grid.min_samples),
            Algorithm::Hdbscan => {
                let h = self.hdbscan.get_or_init(|| {
                    HdbscanHierarchy::build_with_distances(&self.dist, grid.min_cluster_size, grid.min_samples)
                        .map_err(|e| e.to_string())
                });
                match h {
                    Ok(h) => Ok(h.select(T::of(eps))),
                    Err(e) => Err(Error::InvalidParameter(e.clone())),
                }
            }
            Algorithm::Kmeans => {
                let options = KMeansOptions {
                    max_iter: grid.kmeans_max_iter,
                    tol: grid.kmeans_tol,
                };
                Ok(kmeans(&self.scores, k, combo.seed, options)?.assignment)
            }
            Algorithm::Agglomerative => self.ward.get_or_init(|| Dendrogram::ward(&self.scores)).cut(k),
            Algorithm::Kmodes => {
                let cats = self.terciles.get_or_init(|| tercile_bins(&self.scores));
                Ok(kmodes(cats, k, combo.seed, grid.kmodes_max_iter)?.assignment)
            }
        }
    }

    fn run(
        &self,
        dataset: &SubgroupDataset<T>,
        combo_index: usize,
        combo: HyperparamCombo,
        grid: &GridConfig,
    ) -> ExperimentResult<T> {
        let outcome = self
            .cluster(&combo, grid)
            .and_then(|a| Ok((evaluate(&self.scores, Some(&self.dist), &dataset.labels, &a)?, a)));
        match outcome {
            Ok((bundle, assignment)) => ExperimentResult {
                age_group: dataset.age_group,
                combo_index,
                combo,
                assignment,
                bundle,
                note: (!bundle.valid).then(|| format!("{} clusters found; need at least 2", bundle.n_clusters)),
            },
            Err(e) => failed(dataset.age_group, combo_index, combo, e.to_string()),
        }
    }
}

fn failed<T: Scalar>(age_group: AgeGroup, combo_index: usize, combo: HyperparamCombo, note: String) -> ExperimentResult<T> {
    ExperimentResult {
        age_group,
        combo_index,
        combo,
        assignment: ClusterAssignment::from_raw(&[], combo.algorithm),
        bundle: MetricsBundle::failed(),
        note: Some(note),
    }
}

/// PCA, clustering and metrics for one combo on one age group.
pub fn run_experiment<T: Scalar>(
    dataset: &SubgroupDataset<T>,
    combo: &HyperparamCombo,
    grid: &GridConfig,
) -> ExperimentResult<T> {
    match Space::new(&dataset.rows, combo.pca_components) {
        Ok(space) => space.run(dataset, 0, *combo, grid),
        Err(e) => failed(dataset.age_group, 0, *combo, e.to_string()),
    }
}

pub fn combo_seed(master: u64, age: AgeGroup, algorithm: Algorithm, combo_index: usize) -> u64 {
    mix_seed(&[master, age.index() as u64, algorithm.index() as u64, combo_index as u64])
}

/// All experiments of one algorithm on one age group, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmTable<T> {
    pub age_group: AgeGroup,
    pub algorithm: Algorithm,
    pub results: Vec<ExperimentResult<T>>,
}

/// Runs the full grid. Work is split per `(age group, algorithm, pca)` and
/// spread over `jobs` threads; output order and content do not depend on `jobs`.
pub fn run_grid<T: Scalar>(
    datasets: &[SubgroupDataset<T>],
    algorithms: &[Algorithm],
    grid: &GridConfig,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<AlgorithmTable<T>>> {
    grid.validate()?;
    struct Task<'a, T> {
        table: usize,
        dataset: &'a SubgroupDataset<T>,
        pca: usize,
        combos: Vec<(usize, HyperparamCombo)>,
    }
    let mut tables = Vec::new();
    let mut tasks = Vec::new();
    for dataset in datasets {
        for &algorithm in algorithms {
            let combos: Vec<(usize, HyperparamCombo)> = grid
                .enumerate(algorithm)
                .into_iter()
                .enumerate()
                .map(|(i, mut c)| {
                    c.seed = combo_seed(master_seed, dataset.age_group, algorithm, i);
                    (i, c)
                })
                .collect();
            let mut pcas: Vec<usize> = combos.iter().map(|(_, c)| c.pca_components).collect();
            pcas.dedup();
            for pca in pcas {
                tasks.push(Task {
                    table: tables.len(),
                    dataset,
                    pca,
                    combos: combos.iter().filter(|(_, c)| c.pca_components == pca).copied().collect(),
                });
            }
            tables.push(AlgorithmTable {
                age_group: dataset.age_group,
                algorithm,
                results: Vec::with_capacity(combos.len()),
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let chunks: Vec<(usize, Vec<ExperimentResult<T>>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let results = match Space::new(&task.dataset.rows, task.pca) {
                    Ok(space) => task
                        .combos
                        .iter()
                        .map(|&(i, c)| space.run(task.dataset, i, c, grid))
                        .collect(),
                    Err(e) => {
                        let note = if task.dataset.is_empty() {
                            "age group has no samples".to_string()
                        } else {
                            e.to_string()
                        };
                        task.combos
                            .iter()
                            .map(|&(i, c)| failed(task.dataset.age_group, i, c, note.clone()))
                            .collect()
                    }
                };
                (task.table, results)
            })
            .collect()
    });
    for (table, results) in chunks {
        tables[table].results.extend(results);
    }
    for t in &mut tables {
        t.results.sort_by_key(|r| r.combo_index);
        log::info!(
            "{} {}: {} of {} combos valid",
            t.age_group,
            t.algorithm.display_name(),
            t.results.iter().filter(|r| r.bundle.valid).count(),
            t.results.len()
        );
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedTable<T> {
    /// Valid rows by descending composite score, then invalid rows in enumeration order.
    pub rows: Vec<ExperimentResult<T>>,
    pub n_valid: usize,
}

impl<T> RankedTable<T> {
    pub fn valid(&self) -> &[ExperimentResult<T>] {
        &self.rows[..self.n_valid]
    }

    pub fn invalid(&self) -> &[ExperimentResult<T>] {
        &self.rows[self.n_valid..]
    }
}

pub fn rank_results<T: Scalar>(results: &[ExperimentResult<T>]) -> RankedTable<T> {
    let (mut valid, mut invalid): (Vec<_>, Vec<_>) = results.iter().cloned().partition(|r| r.bundle.valid);
    valid.sort_by(|a, b| {
        b.bundle
            .composite
            .partial_cmp(&a.bundle.composite)
            .unwrap()
            .then(a.combo.pca_components.cmp(&b.combo.pca_components))
            .then(a.combo.knob().partial_cmp(&b.combo.knob()).unwrap())
            .then(a.combo_index.cmp(&b.combo_index))
    });
    invalid.sort_by_key(|r| r.combo_index);
    let n_valid = valid.len();
    valid.extend(invalid);
    RankedTable { rows: valid, n_valid }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Median of each hyperparameter over the top five valid rows; integer
/// parameters are rounded up. The seed is the top row's.
pub fn select_hyperparameters<T: Scalar>(ranked: &RankedTable<T>) -> Result<HyperparamCombo> {
    let top = &ranked.valid()[..ranked.n_valid.min(TOP_K)];
    let Some(first) = top.first() else {
        let (age_group, algorithm) = ranked
            .rows
            .first()
            .map(|r| (r.age_group.to_string(), r.combo.algorithm.display_name().to_string()))
            .unwrap_or_default();
        return Err(Error::NoValidResults { age_group, algorithm });
    };
    let pca = median(top.iter().map(|r| r.combo.pca_components as f64).collect()).ceil() as usize;
    let mut combo = HyperparamCombo {
        algorithm: first.combo.algorithm,
        pca_components: pca,
        epsilon: None,
        n_clusters: None,
        seed: first.combo.seed,
    };
    if first.combo.algorithm.is_density() {
        combo.epsilon = Some(median(top.iter().filter_map(|r| r.combo.epsilon).collect()));
    } else {
        combo.n_clusters = Some(median(top.iter().filter_map(|r| r.combo.n_clusters.map(|k| k as f64)).collect()).ceil() as usize);
    }
    Ok(combo)
}

/// Outcome of the selection rule for one age group and algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection<T> {
    pub age_group: AgeGroup,
    pub algorithm: Algorithm,
    /// `None` when no combo was valid.
    pub combo: Option<HyperparamCombo>,
    /// The selected combo re-run on the age group.
    pub result: Option<ExperimentResult<T>>,
}

impl<T: Scalar> Selection<T> {
    pub fn is_available(&self) -> bool {
        self.combo.is_some()
    }
}

/// Ranks every table, applies the selection rule and re-runs the chosen combos.
pub fn select_all<T: Scalar>(
    tables: &[AlgorithmTable<T>],
    datasets: &[SubgroupDataset<T>],
    grid: &GridConfig,
) -> Vec<Selection<T>> {
    tables
        .iter()
        .map(|t| {
            let ranked = rank_results(&t.results);
            match select_hyperparameters(&ranked) {
                Ok(combo) => {
                    let dataset = datasets.iter().find(|d| d.age_group == t.age_group);
                    Selection {
                        age_group: t.age_group,
                        algorithm: t.algorithm,
                        combo: Some(combo),
                        result: dataset.map(|d| run_experiment(d, &combo, grid)),
                    }
                }
                Err(e) => {
                    log::warn!("{e}");
                    Selection {
                        age_group: t.age_group,
                        algorithm: t.algorithm,
                        combo: None,
                        result: None,
                    }
                }
            }
        })
        .collect()
}
