//! Reference-range normalization, vector assembly and age bucketing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{DiseaseLabel, EncounterSample};
use crate::scalar::Scalar;

pub const PANEL_DIM: usize = 5;
pub const DAYS_PER_YEAR: u32 = 365;

/// Maps an absolute lab value onto its site reference range: `ref_low -> 0`,
/// `ref_high -> 1`. Values outside the range are kept as-is (no clamping).
pub fn normalize_lab<T: Scalar>(value_abs: T, ref_low: T, ref_high: T) -> Result<T> {
    if !(ref_high > ref_low) {
        return Err(Error::InvalidReferenceRange {
            low: ref_low.as_f64(),
            high: ref_high.as_f64(),
        });
    }
    Ok((value_abs - ref_low) / (ref_high - ref_low))
}

/// Inverse of [`normalize_lab`].
pub fn denormalize_lab<T: Scalar>(normalized: T, ref_low: T, ref_high: T) -> T {
    ref_low + normalized * (ref_high - ref_low)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-1y")]
    Y0To1,
    #[serde(rename = "1-2y")]
    Y1To2,
    #[serde(rename = "2-5y")]
    Y2To5,
    #[serde(rename = "5-10y")]
    Y5To10,
    #[serde(rename = "10-16y")]
    Y10To16,
    #[serde(rename = "16+y")]
    Y16Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 6] = [
        AgeGroup::Y0To1,
        AgeGroup::Y1To2,
        AgeGroup::Y2To5,
        AgeGroup::Y5To10,
        AgeGroup::Y10To16,
        AgeGroup::Y16Plus,
    ];

    /// Lower bound in days (inclusive); the upper bound is the next group's lower bound.
    pub fn lower_days(self) -> u32 {
        let years = match self {
            AgeGroup::Y0To1 => 0,
            AgeGroup::Y1To2 => 1,
            AgeGroup::Y2To5 => 2,
            AgeGroup::Y5To10 => 5,
            AgeGroup::Y10To16 => 10,
            AgeGroup::Y16Plus => 16,
        };
        years * DAYS_PER_YEAR
    }

    /// Exclusive upper bound in days; `None` for the open-ended group.
    pub fn upper_days(self) -> Option<u32> {
        let i = self.index();
        AgeGroup::ALL.get(i + 1).map(|g| g.lower_days())
    }

    pub fn from_age_days(days: u32) -> Self {
        AgeGroup::ALL
            .into_iter()
            .rev()
            .find(|g| days >= g.lower_days())
            .expect("group 0 starts at day 0")
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeGroup::Y0To1 => "0-1y",
            AgeGroup::Y1To2 => "1-2y",
            AgeGroup::Y2To5 => "2-5y",
            AgeGroup::Y5To10 => "5-10y",
            AgeGroup::Y10To16 => "10-16y",
            AgeGroup::Y16Plus => "16+y",
        }
    }

    /// Filesystem-friendly name, e.g. `y0_1`, `y16_plus`.
    pub fn slug(self) -> &'static str {
        match self {
            AgeGroup::Y0To1 => "y0_1",
            AgeGroup::Y1To2 => "y1_2",
            AgeGroup::Y2To5 => "y2_5",
            AgeGroup::Y5To10 => "y5_10",
            AgeGroup::Y10To16 => "y10_16",
            AgeGroup::Y16Plus => "y16_plus",
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgeGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s || g.slug() == s)
            .ok_or_else(|| format!("unknown age group {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorAssemblyConfig {
    pub weights: [f64; PANEL_DIM],
    pub unit_normalize: bool,
}

impl Default for VectorAssemblyConfig {
    fn default() -> Self {
        Self {
            weights: [1.0; PANEL_DIM],
            unit_normalize: false,
        }
    }
}

impl VectorAssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!(
                "assembly weights must be positive, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }
}

/// Normalized panel vector of one encounter. The disease label travels with the
/// vector but is never read by the clustering code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabVector<T> {
    pub components: [Option<T>; PANEL_DIM],
    pub disease: DiseaseLabel,
    pub age_group: AgeGroup,
    pub patient_id: String,
    pub encounter_id: String,
}

impl<T: Scalar> LabVector<T> {
    pub fn is_complete(&self) -> bool {
        self.components.iter().all(Option::is_some)
    }
}

pub fn assemble_vector<T: Scalar>(sample: &EncounterSample, config: &VectorAssemblyConfig) -> Result<LabVector<T>> {
    let mut components = [None; PANEL_DIM];
    for (slot, (lab, &w)) in components.iter_mut().zip(sample.labs.iter().zip(&config.weights)) {
        if let Some(l) = lab {
            let v = normalize_lab(T::of(l.value_abs), T::of(l.ref_low), T::of(l.ref_high))?;
            *slot = Some(if w == 1.0 { v } else { T::of(w) * v });
        }
    }
    if config.unit_normalize && components.iter().all(Option::is_some) {
        let norm = components
            .iter()
            .map(|c| c.unwrap() * c.unwrap())
            .sum::<T>()
            .sqrt();
        if norm > T::zero() {
            for c in components.iter_mut() {
                *c = c.map(|v| v / norm);
            }
        }
    }
    Ok(LabVector {
        components,
        disease: sample.disease,
        age_group: AgeGroup::from_age_days(sample.age_days),
        patient_id: sample.patient_id.clone(),
        encounter_id: sample.encounter_id.clone(),
    })
}

/// Buckets vectors by age group, keeping input order inside each bucket.
/// All six groups are present in the result, possibly empty.
pub fn partition_by_age<T: Scalar>(vectors: Vec<LabVector<T>>) -> BTreeMap<AgeGroup, Vec<LabVector<T>>> {
    let mut out: BTreeMap<AgeGroup, Vec<LabVector<T>>> =
        AgeGroup::ALL.into_iter().map(|g| (g, Vec::new())).collect();
    for v in vectors {
        out.get_mut(&v.age_group).expect("all groups pre-seeded").push(v);
    }
    out
}
