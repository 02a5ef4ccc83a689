//! Chained-equation imputation with predictive mean matching, run per
//! (disease, age group) stratum.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::DiseaseLabel;
use crate::linalg::{cholesky_psd, invert};
use crate::matrix::Matrix;
use crate::normalization::{AgeGroup, LabVector, PANEL_DIM};
use crate::scalar::Scalar;
use crate::seed::mix_seed;

/// Fill value for degenerate strata: the middle of the reference range.
pub const MID_NORMAL: f64 = 0.5;

/// Strata with fewer rows than this skip regression entirely.
pub const MIN_STRATUM_ROWS: usize = 3;

const RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    /// Number of independent chains averaged into the final matrix.
    pub chains: usize,
    /// Full sweeps over the incomplete columns per chain.
    pub iterations: usize,
    pub pmm_donors: usize,
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            chains: 5,
            iterations: 10,
            pmm_donors: 5,
            seed: 0,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 || self.pmm_donors == 0 {
            return Err(Error::Config(
                "impute chains, iterations and pmm_donors must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major matrix with optional cells.
pub type IncompleteRows<T> = [Vec<Option<T>>];

fn check_shape<T>(rows: &IncompleteRows<T>) -> Result<usize> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::LengthMismatch {
            expected: cols,
            found: bad.len(),
        });
    }
    Ok(cols)
}

/// Observed values needed in an incomplete column: the regression has an
/// intercept plus `cols - 1` predictors and keeps at least one residual degree of freedom.
pub fn required_observed(cols: usize) -> usize {
    (cols + 1).max(2)
}

fn check_preconditions<T>(rows: &IncompleteRows<T>, cols: usize) -> Result<()> {
    let required = required_observed(cols);
    for j in 0..cols {
        let observed = rows.iter().filter(|r| r[j].is_some()).count();
        if observed < rows.len() && observed < required {
            return Err(Error::ImputePrecondition {
                column: j,
                observed,
                required,
            });
        }
    }
    Ok(())
}

/// Runs every chain and returns each completed matrix separately.
pub fn mice_impute_chains<T: Scalar>(rows: &IncompleteRows<T>, config: &ImputeConfig) -> Result<Vec<Matrix<T>>> {
    config.validate()?;
    let cols = check_shape(rows)?;
    check_preconditions(rows, cols)?;
    Ok((0..config.chains)
        .map(|c| run_chain(rows, cols, config, config.seed.wrapping_add(c as u64)))
        .collect())
}

/// Completes the matrix: observed cells are copied bit-for-bit, missing cells
/// receive the mean of the per-chain PMM imputations.
pub fn mice_impute<T: Scalar>(rows: &IncompleteRows<T>, config: &ImputeConfig) -> Result<Matrix<T>> {
    let cols = check_shape(rows)?;
    let n = rows.len();
    if rows.iter().flatten().all(Option::is_some) {
        let data = rows.iter().flatten().map(|c| c.unwrap()).collect();
        return Ok(Matrix::from_vec(n, cols, data));
    }
    let chains = mice_impute_chains(rows, config)?;
    let m = T::of_usize(chains.len());
    let mut out = Matrix::zeros(n, cols);
    for i in 0..n {
        for j in 0..cols {
            let v = match rows[i][j] {
                Some(v) => v,
                None => chains.iter().map(|c| c.get(i, j)).sum::<T>() / m,
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

fn run_chain<T: Scalar>(rows: &IncompleteRows<T>, cols: usize, config: &ImputeConfig, seed: u64) -> Matrix<T> {
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, cols);
    let mut targets = Vec::new();
    for j in 0..cols {
        let observed: Vec<T> = rows.iter().filter_map(|r| r[j]).collect();
        let mean = observed.iter().copied().sum::<T>() / T::of_usize(observed.len().max(1));
        for (i, r) in rows.iter().enumerate() {
            x.set(i, j, r[j].unwrap_or(mean));
        }
        if observed.len() < n {
            targets.push(j);
        }
    }
    for _sweep in 0..config.iterations {
        for &j in &targets {
            impute_column(rows, &mut x, j, config.pmm_donors, &mut rng);
        }
    }
    x
}

/// One chained-equation step: regress column `j` on the others, draw coefficients
/// from their posterior, then replace each missing cell by a random donor among
/// the `donors` observed rows whose predictions are closest.
fn impute_column<T: Scalar>(rows: &IncompleteRows<T>, x: &mut Matrix<T>, j: usize, donors: usize, rng: &mut ChaCha8Rng) {
    let cols = x.ncols();
    let p = cols; // intercept + (cols - 1) predictors
    let design = |i: usize, x: &Matrix<T>| -> Vec<T> {
        let mut d = Vec::with_capacity(p);
        d.push(T::one());
        d.extend((0..cols).filter(|&k| k != j).map(|k| x.get(i, k)));
        d
    };
    let (obs, mis): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i][j].is_some());

    let mut xtx = vec![T::zero(); p * p];
    let mut xty = vec![T::zero(); p];
    let obs_design: Vec<Vec<T>> = obs.iter().map(|&i| design(i, x)).collect();
    for (d, &i) in obs_design.iter().zip(&obs) {
        let y = rows[i][j].unwrap();
        for a in 0..p {
            xty[a] += d[a] * y;
            for b in 0..p {
                xtx[a * p + b] += d[a] * d[b];
            }
        }
    }
    let ridge = T::of(RIDGE) * (T::one() + (0..p).map(|a| xtx[a * p + a]).fold(T::zero(), T::max));
    for a in 1..p {
        xtx[a * p + a] += ridge;
    }
    let inv = match invert(&xtx, p) {
        Some(v) => v,
        None => {
            for a in 0..p {
                xtx[a * p + a] += ridge;
            }
            invert(&xtx, p).expect("ridge-regularized normal equations are invertible")
        }
    };
    let beta: Vec<T> = (0..p)
        .map(|a| (0..p).map(|b| inv[a * p + b] * xty[b]).sum())
        .collect();

    let dot = |d: &[T], b: &[T]| d.iter().zip(b).map(|(&u, &v)| u * v).sum::<T>();
    let fitted: Vec<T> = obs_design.iter().map(|d| dot(d, &beta)).collect();
    let rss: T = obs
        .iter()
        .zip(&fitted)
        .map(|(&i, &f)| {
            let r = rows[i][j].unwrap() - f;
            r * r
        })
        .sum();
    let dof = obs.len().saturating_sub(p).max(1);
    let sigma = if rss > T::zero() {
        let chi: f64 = ChiSquared::new(dof as f64).expect("dof > 0").sample(rng);
        (rss / T::of(chi.max(f64::MIN_POSITIVE))).sqrt()
    } else {
        T::zero()
    };
    let chol = cholesky_psd(&inv, p);
    let z: Vec<T> = (0..p).map(|_| T::of(StandardNormal.sample(rng))).collect();
    let beta_draw: Vec<T> = (0..p)
        .map(|a| beta[a] + sigma * (0..=a).map(|b| chol[a * p + b] * z[b]).sum::<T>())
        .collect();

    let k = donors.min(obs.len());
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(obs.len());
    let mut updates = Vec::with_capacity(mis.len());
    for &m in &mis {
        let target = dot(&design(m, x), &beta_draw);
        scratch.clear();
        scratch.extend(fitted.iter().enumerate().map(|(o, &f)| ((f - target).abs(), o)));
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(obs[a.1].cmp(&obs[b.1]))
        };
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_by(cmp);
        let pick = scratch[rng.random_range(0..k)].1;
        updates.push((m, rows[obs[pick]][j].unwrap()));
    }
    for (m, v) in updates {
        x.set(m, j, v);
    }
}

/// Imputed, complete data for one age group. Rows keep the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupDataset<T> {
    pub age_group: AgeGroup,
    pub rows: Matrix<T>,
    pub labels: Vec<DiseaseLabel>,
    /// `(patient_id, encounter_id)` per row.
    pub ids: Vec<(String, String)>,
    pub imputed_mask: Vec<[bool; PANEL_DIM]>,
}

impl<T: Scalar> SubgroupDataset<T> {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FallbackNote {
    /// Too few rows for regression; missing cells set to mid-normal.
    SmallStratum { age_group: AgeGroup, disease: DiseaseLabel, rows: usize },
    /// Column missing across the whole stratum; filled with the age-group mean.
    MissingColumn { age_group: AgeGroup, disease: DiseaseLabel, column: usize },
    /// Column too sparse for regression; filled with the stratum mean.
    SparseColumn { age_group: AgeGroup, disease: DiseaseLabel, column: usize, observed: usize },
}

#[derive(Debug, Clone)]
pub struct ImputationOutcome<T> {
    pub datasets: Vec<SubgroupDataset<T>>,
    pub notes: Vec<FallbackNote>,
}

fn stratum_seed(base: u64, age: AgeGroup, disease: DiseaseLabel) -> u64 {
    mix_seed(&[base, age.index() as u64, disease.index() as u64])
}

fn impute_stratum<T: Scalar>(
    age: AgeGroup,
    disease: DiseaseLabel,
    mut rows: Vec<Vec<Option<T>>>,
    age_means: &[Option<T>; PANEL_DIM],
    config: &ImputeConfig,
) -> Result<(Matrix<T>, Vec<FallbackNote>)> {
    let n = rows.len();
    let mut notes = Vec::new();
    let mid = T::of(MID_NORMAL);
    if n < MIN_STRATUM_ROWS {
        if rows.iter().flatten().any(Option::is_none) {
            log::warn!("{age}/{disease}: {n} rows, filling missing cells with {MID_NORMAL}");
            notes.push(FallbackNote::SmallStratum { age_group: age, disease, rows: n });
        }
        let data = rows.iter().flatten().map(|c| c.unwrap_or(mid)).collect();
        return Ok((Matrix::from_vec(n, PANEL_DIM, data), notes));
    }
    let required = required_observed(PANEL_DIM);
    for j in 0..PANEL_DIM {
        let observed: Vec<T> = rows.iter().filter_map(|r| r[j]).collect();
        let fill = if observed.is_empty() {
            log::warn!("{age}/{disease}: column {j} entirely missing, using age-group mean");
            notes.push(FallbackNote::MissingColumn { age_group: age, disease, column: j });
            Some(age_means[j].unwrap_or(mid))
        } else if observed.len() < n && observed.len() < required {
            log::warn!("{age}/{disease}: column {j} has {} observed values, using stratum mean", observed.len());
            notes.push(FallbackNote::SparseColumn {
                age_group: age,
                disease,
                column: j,
                observed: observed.len(),
            });
            Some(observed.iter().copied().sum::<T>() / T::of_usize(observed.len()))
        } else {
            None
        };
        if let Some(v) = fill {
            for r in rows.iter_mut() {
                r[j].get_or_insert(v);
            }
        }
    }
    let cfg = ImputeConfig {
        seed: stratum_seed(config.seed, age, disease),
        ..config.clone()
    };
    Ok((mice_impute(&rows, &cfg)?, notes))
}

/// Imputes each (disease, age group) stratum independently and reassembles one
/// dataset per age group in the original row order. Every group in the input
/// map yields a dataset, including empty ones.
pub fn impute_subgroups<T: Scalar>(
    groups: &BTreeMap<AgeGroup, Vec<LabVector<T>>>,
    config: &ImputeConfig,
) -> Result<ImputationOutcome<T>> {
    config.validate()?;
    let mut tasks = Vec::new();
    let mut age_means = BTreeMap::new();
    for (&age, vectors) in groups {
        let mut means = [None; PANEL_DIM];
        for (j, m) in means.iter_mut().enumerate() {
            let obs: Vec<T> = vectors.iter().filter_map(|v| v.components[j]).collect();
            if !obs.is_empty() {
                *m = Some(obs.iter().copied().sum::<T>() / T::of_usize(obs.len()));
            }
        }
        age_means.insert(age, means);
        let mut by_disease: BTreeMap<DiseaseLabel, Vec<usize>> = BTreeMap::new();
        for (i, v) in vectors.iter().enumerate() {
            by_disease.entry(v.disease).or_default().push(i);
        }
        for (disease, idx) in by_disease {
            tasks.push((age, disease, idx));
        }
    }
    let done: Vec<Result<(Matrix<T>, Vec<FallbackNote>)>> = tasks
        .par_iter()
        .map(|(age, disease, idx)| {
            let rows = idx.iter().map(|&i| groups[age][i].components.to_vec()).collect();
            impute_stratum(*age, *disease, rows, &age_means[age], config)
        })
        .collect();

    let mut filled: BTreeMap<AgeGroup, Vec<Option<Vec<T>>>> = groups
        .iter()
        .map(|(&g, v)| (g, vec![None; v.len()]))
        .collect();
    let mut notes = Vec::new();
    for ((age, _, idx), res) in tasks.iter().zip(done) {
        let (m, n) = res?;
        notes.extend(n);
        let slot = filled.get_mut(age).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            slot[i] = Some(m.row(k).to_vec());
        }
    }
    let datasets = groups
        .iter()
        .map(|(&age, vectors)| {
            let rows: Vec<Vec<T>> = filled
                .remove(&age)
                .unwrap()
                .into_iter()
                .map(|r| r.expect("every row belongs to a stratum"))
                .collect();
            SubgroupDataset {
                age_group: age,
                rows: Matrix::from_rows(&rows, PANEL_DIM),
                labels: vectors.iter().map(|v| v.disease).collect(),
                ids: vectors
                    .iter()
                    .map(|v| (v.patient_id.clone(), v.encounter_id.clone()))
                    .collect(),
                imputed_mask: vectors.iter().map(|v| v.components.map(|c| c.is_none())).collect(),
            }
        })
        .collect();
    Ok(ImputationOutcome { datasets, notes })
}
