//! Cluster composition, per-cluster ICD code profiles and the summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::clustering::{Algorithm, ClusterAssignment, NOISE};
use crate::error::{Error, Result};
use crate::imputation::SubgroupDataset;
use crate::ingestion::{DiagnosisEvent, DiseaseLabel, QUALIFYING_GAP_DAYS};
use crate::normalization::AgeGroup;
use crate::scalar::Scalar;
use crate::tuning::{HyperparamCombo, Selection};

/// Rows kept in each ICD table.
pub const ICD_TOP_N: usize = 20;
pub const UNAVAILABLE: &str = "UNAVAILABLE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    /// Cluster id, or `-1` for the noise row.
    pub cluster: i32,
    pub dominant: DiseaseLabel,
    pub fraction: f64,
    /// Members of the cluster.
    pub count: usize,
    pub disease_counts: BTreeMap<DiseaseLabel, usize>,
}

impl ClusterComposition {
    pub fn is_noise(&self) -> bool {
        self.cluster == NOISE
    }

    /// `"0"`, `"1"`, ... or `"NOISE"`.
    pub fn name(&self) -> String {
        if self.is_noise() {
            "NOISE".to_string()
        } else {
            self.cluster.to_string()
        }
    }

    /// Annotation text such as `DGS 0.90 (10)`.
    pub fn annotation(&self) -> String {
        format!("{} {:.2} ({})", self.dominant, self.fraction, self.count)
    }
}

/// Modal disease per cluster (ties: declaration order), its share and the
/// cluster size. Noise, if any, comes last.
pub fn cluster_composition(assignment: &ClusterAssignment, diseases: &[DiseaseLabel]) -> Result<Vec<ClusterComposition>> {
    if assignment.len() != diseases.len() {
        return Err(Error::LengthMismatch {
            expected: assignment.len(),
            found: diseases.len(),
        });
    }
    let mut tallies: BTreeMap<i32, BTreeMap<DiseaseLabel, usize>> = BTreeMap::new();
    for (&l, &d) in assignment.labels.iter().zip(diseases) {
        *tallies.entry(l).or_default().entry(d).or_default() += 1;
    }
    let mut out: Vec<ClusterComposition> = tallies
        .into_iter()
        .map(|(cluster, disease_counts)| {
            let count: usize = disease_counts.values().sum();
            let (&dominant, &top) = disease_counts
                .iter()
                .fold(None, |best: Option<(&DiseaseLabel, &usize)>, (d, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((d, c)),
                })
                .expect("non-empty cluster");
            ClusterComposition {
                cluster,
                dominant,
                fraction: top as f64 / count as f64,
                count,
                disease_counts,
            }
        })
        .collect();
    out.sort_by_key(|c| if c.is_noise() { i32::MAX } else { c.cluster });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcdCount {
    pub code: String,
    /// Distinct patients carrying the code.
    pub patients: usize,
}

fn recurs(dates: &[NaiveDate]) -> bool {
    match (dates.iter().min(), dates.iter().max()) {
        (Some(a), Some(b)) => (*b - *a).num_days() >= QUALIFYING_GAP_DAYS,
        _ => false,
    }
}

/// Top codes by distinct-patient count among `patients`, skipping `exclude`.
/// With `repeat_filter`, a patient counts for a code only when it was recorded
/// at least twice, 90 or more days apart. Ties go to the smaller code.
pub fn icd_frequency_report<'a>(
    patients: impl IntoIterator<Item = &'a str>,
    diagnoses: &[DiagnosisEvent],
    exclude: &BTreeSet<String>,
    repeat_filter: bool,
) -> Vec<IcdCount> {
    let members: BTreeSet<&str> = patients.into_iter().collect();
    let mut dates: BTreeMap<(&str, &str), Vec<NaiveDate>> = BTreeMap::new();
    for e in diagnoses {
        if members.contains(e.patient_id.as_str()) && !exclude.contains(&e.icd_code) {
            dates
                .entry((e.icd_code.as_str(), e.patient_id.as_str()))
                .or_default()
                .push(e.recorded_date);
        }
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ((code, _), d) in &dates {
        if !repeat_filter || recurs(d) {
            *counts.entry(code).or_default() += 1;
        }
    }
    let mut out: Vec<IcdCount> = counts
        .into_iter()
        .map(|(code, patients)| IcdCount {
            code: code.to_string(),
            patients,
        })
        .collect();
    out.sort_by(|a, b| b.patients.cmp(&a.patients).then_with(|| a.code.cmp(&b.code)));
    out.truncate(ICD_TOP_N);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile<T> {
    #[serde(flatten)]
    pub composition: ClusterComposition,
    /// Mean normalized lab vector of the members.
    pub mean_vector: Vec<T>,
    /// Codes across dominant-disease members.
    pub icd_all: Vec<IcdCount>,
    /// Codes recorded repeatedly (>= 90 days apart) in dominant-disease members.
    pub icd_recurring: Vec<IcdCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport<T> {
    pub age_group: AgeGroup,
    pub algorithm: Algorithm,
    pub combo: HyperparamCombo,
    pub composite: T,
    pub silhouette: T,
    pub n_clusters: usize,
    pub clusters: Vec<ClusterProfile<T>>,
}

pub fn cluster_report<T: Scalar>(
    dataset: &SubgroupDataset<T>,
    combo: &HyperparamCombo,
    assignment: &ClusterAssignment,
    composite: T,
    silhouette: T,
    diagnoses: &[DiagnosisEvent],
    exclude: &BTreeSet<String>,
) -> Result<ClusterReport<T>> {
    let composition = cluster_composition(assignment, &dataset.labels)?;
    let clusters = composition
        .into_iter()
        .map(|c| {
            let rows: Vec<usize> = (0..dataset.len()).filter(|&i| assignment.labels[i] == c.cluster).collect();
            let mut mean_vector = vec![T::zero(); dataset.rows.ncols()];
            for &i in &rows {
                for (m, &v) in mean_vector.iter_mut().zip(dataset.rows.row(i)) {
                    *m += v;
                }
            }
            mean_vector.iter_mut().for_each(|m| *m /= T::of_usize(rows.len()));
            let dominant_patients: Vec<&str> = rows
                .iter()
                .filter(|&&i| dataset.labels[i] == c.dominant)
                .map(|&i| dataset.ids[i].0.as_str())
                .collect();
            ClusterProfile {
                icd_all: icd_frequency_report(dominant_patients.iter().copied(), diagnoses, exclude, false),
                icd_recurring: icd_frequency_report(dominant_patients.iter().copied(), diagnoses, exclude, true),
                composition: c,
                mean_vector,
            }
        })
        .collect();
    Ok(ClusterReport {
        age_group: dataset.age_group,
        algorithm: combo.algorithm,
        combo: *combo,
        composite,
        silhouette,
        n_clusters: assignment.n_clusters,
        clusters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryStatus {
    Ok,
    /// No valid combo in the grid.
    Unavailable,
    /// The selected median combo produced fewer than two clusters when re-run.
    RerunInvalid,
}

impl SummaryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SummaryStatus::Ok => "ok",
            SummaryStatus::Unavailable => "unavailable",
            SummaryStatus::RerunInvalid => "rerun_invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub age_group: AgeGroup,
    pub algorithm: Algorithm,
    pub pca: Option<usize>,
    pub epsilon: Option<f64>,
    pub n_clusters: Option<usize>,
    pub cs: Option<f64>,
    pub sc: Option<f64>,
    pub status: SummaryStatus,
}

impl SummaryRow {
    /// Table-style cells: pca, ED/NC, CS, SC.
    pub fn cells(&self) -> [String; 4] {
        let or_na = |v: Option<String>| v.unwrap_or_else(|| UNAVAILABLE.to_string());
        [
            or_na(self.pca.map(|p| p.to_string())),
            or_na(self.epsilon.map(|e| e.to_string()).or(self.n_clusters.map(|k| k.to_string()))),
            or_na(self.cs.map(|v| format!("{v:.2}"))),
            or_na(self.sc.map(|v| format!("{v:.2}"))),
        ]
    }
}

/// One row per (age group, algorithm) from the selections, in the given order.
pub fn summary_table<T: Scalar>(selections: &[Selection<T>]) -> Vec<SummaryRow> {
    selections
        .iter()
        .map(|s| {
            let (cs, sc, status) = match (&s.combo, &s.result) {
                (None, _) | (_, None) => (None, None, SummaryStatus::Unavailable),
                (Some(_), Some(r)) if r.bundle.valid => (
                    Some(r.bundle.composite.as_f64()),
                    Some(r.bundle.silhouette.as_f64()),
                    SummaryStatus::Ok,
                ),
                (Some(_), Some(_)) => (None, None, SummaryStatus::RerunInvalid),
            };
            SummaryRow {
                age_group: s.age_group,
                algorithm: s.algorithm,
                pca: s.combo.map(|c| c.pca_components),
                epsilon: s.combo.and_then(|c| c.epsilon),
                n_clusters: s.combo.and_then(|c| c.n_clusters),
                cs,
                sc,
                status,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub summary: Vec<SummaryRow>,
    pub clusters: Vec<ClusterReport<T>>,
    pub excluded_codes: Vec<String>,
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Markdown rendering of the report.
pub fn render_markdown<T: Scalar>(report: &Report<T>) -> String {
    let mut out = String::new();
    out.push_str("# Clustering report\n\n## Selected hyperparameters\n\n");
    out.push_str("| Age group | Algorithm | PCA | ED/NC | CS | SC | Status |\n|---|---|---|---|---|---|---|\n");
    for r in &report.summary {
        let [pca, knob, cs, sc] = r.cells();
        let _ = writeln!(
            out,
            "| {} | {} | {pca} | {knob} | {cs} | {sc} | {} |",
            r.age_group,
            r.algorithm.display_name(),
            r.status.as_str()
        );
    }
    for c in &report.clusters {
        let knob = c
            .combo
            .epsilon
            .map(|e| format!("ED {e}"))
            .or(c.combo.n_clusters.map(|k| format!("NC {k}")))
            .unwrap_or_default();
        let _ = write!(
            out,
            "\n## {} / {}\n\nPCA {}, {knob}, {} clusters, CS {:.2}, SC {:.2}\n\n",
            c.age_group,
            c.algorithm.display_name(),
            c.combo.pca_components,
            c.n_clusters,
            c.composite.as_f64(),
            c.silhouette.as_f64()
        );
        out.push_str("| Cluster | Size | Dominant | Fraction | Top ICD codes | Recurring codes |\n|---|---|---|---|---|---|\n");
        for p in &c.clusters {
            let codes = |t: &[IcdCount]| {
                t.iter()
                    .take(5)
                    .map(|x| format!("{} ({})", md_escape(&x.code), x.patients))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.2} | {} | {} |",
                p.composition.name(),
                p.composition.count,
                p.composition.dominant,
                p.composition.fraction,
                codes(&p.icd_all),
                codes(&p.icd_recurring)
            );
        }
    }
    out
}
