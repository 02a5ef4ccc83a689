//! Synthetic lab and diagnosis files with planted disease archetypes and
//! subphenotypes, in the exact formats read by [`crate::ingestion`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{format_timestamp, DiseaseLabel, TestCode, DIAGNOSIS_HEADER, LAB_HEADER};
use crate::linalg::{cholesky_psd, symmetric_eigen};
use crate::normalization::{denormalize_lab, AgeGroup, PANEL_DIM};

pub const GROUND_TRUTH_HEADER: [&str; 4] = ["patient_id", "encounter_id", "disease", "subphenotype"];

/// Upper age used when sampling the open-ended 16+ group.
const OLDEST_DAYS: u32 = 40 * 365;
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubphenotypeSpec {
    pub name: String,
    /// Share of the disease's patients.
    pub weight: f64,
    /// Normalized-space mean, replacing the disease archetype mean.
    pub mean: [f64; PANEL_DIM],
    pub icd_signature: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseSpec {
    pub disease: DiseaseLabel,
    pub patients: usize,
    /// Mean encounters per patient; each patient gets `1 + Poisson(mean - 1)`.
    pub encounters_mean: f64,
    /// Archetype mean in normalized space, panel component order.
    pub mean: [f64; PANEL_DIM],
    pub covariance: [[f64; PANEL_DIM]; PANEL_DIM],
    /// Patients not covered by the subphenotype weights use the archetype mean.
    #[serde(default)]
    pub subphenotypes: Vec<SubphenotypeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: String,
    /// `[ref_low, ref_high]` per panel component.
    pub ranges: [[f64; 2]; PANEL_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub diseases: Vec<DiseaseSpec>,
    /// Per-component probability that a lab is absent from an encounter.
    pub missingness: [f64; PANEL_DIM],
    /// Relative weights of the six age groups.
    pub age_weights: [f64; 6],
    pub sites: Vec<SiteSpec>,
    pub disease_codes: BTreeMap<DiseaseLabel, Vec<String>>,
    #[serde(default)]
    pub noise_codes: Vec<String>,
    #[serde(default)]
    pub noise_codes_per_patient: usize,
    /// Chance that a subphenotype member carries each of its signature codes.
    #[serde(default = "one")]
    pub signature_rate: f64,
    /// Extra patients whose diagnoses fail the cohort rule.
    #[serde(default)]
    pub negative_controls: usize,
    /// Chance of a later repeat draw of a lab within the same encounter.
    #[serde(default)]
    pub repeat_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn unit_interval(name: &str, v: f64, open_top: bool) -> Result<()> {
    let ok = v >= 0.0 && if open_top { v < 1.0 } else { v <= 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} = {v} is outside the allowed range")))
    }
}

fn check_covariance(d: DiseaseLabel, cov: &[[f64; PANEL_DIM]; PANEL_DIM]) -> Result<()> {
    let flat: Vec<f64> = cov.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec(format!("{d}: covariance has non-finite entries")));
    }
    for i in 0..PANEL_DIM {
        for j in 0..i {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("{d}: covariance is not symmetric")));
            }
        }
    }
    let (vals, _) = symmetric_eigen(&flat, PANEL_DIM);
    let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if vals.iter().any(|&v| v < -1e-10 * scale) {
        return Err(Error::InvalidSpec(format!("{d}: covariance is not positive semidefinite")));
    }
    Ok(())
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.diseases {
            if !seen.insert(d.disease) {
                return Err(Error::InvalidSpec(format!("{} listed twice", d.disease)));
            }
            if !(d.encounters_mean >= 1.0 && d.encounters_mean.is_finite()) {
                return Err(Error::InvalidSpec(format!("{}: encounters_mean must be >= 1", d.disease)));
            }
            if d.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{}: non-finite mean", d.disease)));
            }
            check_covariance(d.disease, &d.covariance)?;
            let mut total = 0.0;
            for s in &d.subphenotypes {
                unit_interval(&format!("{}/{} weight", d.disease, s.name), s.weight, false)?;
                if s.name.is_empty() || s.mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec(format!("{}: subphenotype needs a name and finite mean", d.disease)));
                }
                total += s.weight;
            }
            if total > 1.0 + 1e-9 {
                return Err(Error::InvalidSpec(format!("{}: subphenotype weights sum to {total}", d.disease)));
            }
        }
        for (j, &m) in self.missingness.iter().enumerate() {
            unit_interval(&format!("missingness[{j}]"), m, true)?;
        }
        if self.age_weights.iter().any(|w| !(*w >= 0.0)) || self.age_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidSpec("age_weights must be non-negative with a positive sum".into()));
        }
        if self.sites.is_empty() {
            return Err(Error::InvalidSpec("at least one site is required".into()));
        }
        for s in &self.sites {
            if s.ranges.iter().any(|[lo, hi]| !(hi > lo) || *lo < 0.0) {
                return Err(Error::InvalidSpec(format!("site {}: every range needs 0 <= low < high", s.site_id)));
            }
        }
        for d in DiseaseLabel::ALL {
            match self.disease_codes.get(&d) {
                Some(codes) if !codes.is_empty() && codes.iter().all(|c| !c.trim().is_empty()) => {}
                _ => return Err(Error::InvalidSpec(format!("disease_codes needs non-empty codes for {d}"))),
            }
        }
        if self.noise_codes_per_patient > self.noise_codes.len() {
            return Err(Error::InvalidSpec("noise_codes_per_patient exceeds the noise code pool".into()));
        }
        unit_interval("signature_rate", self.signature_rate, false)?;
        unit_interval("repeat_rate", self.repeat_rate, true)?;
        if self.negative_controls > 0 && self.diseases.is_empty() {
            return Err(Error::InvalidSpec("negative controls need at least one disease".into()));
        }
        Ok(())
    }
}

/// Isotropic spread `sd` with correlation `t_corr` among the three T-cell markers.
pub fn panel_covariance(sd: f64, t_corr: f64) -> [[f64; PANEL_DIM]; PANEL_DIM] {
    let mut c = [[0.0; PANEL_DIM]; PANEL_DIM];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j {
                sd * sd
            } else if i < 3 && j < 3 {
                t_corr * sd * sd
            } else {
                0.0
            };
        }
    }
    c
}

/// Table 1 population: (disease, encounters, patients).
const TABLE1: [(DiseaseLabel, usize, usize); 7] = [
    (DiseaseLabel::Cgd, 314, 102),
    (DiseaseLabel::Comb, 664, 157),
    (DiseaseLabel::Cvid, 305, 189),
    (DiseaseLabel::Dgs, 1237, 753),
    (DiseaseLabel::Lad, 30, 9),
    (DiseaseLabel::Agamma, 3256, 930),
    (DiseaseLabel::Was, 138, 34),
];

pub fn demo_disease_codes() -> BTreeMap<DiseaseLabel, Vec<String>> {
    [
        (DiseaseLabel::Cgd, "D71"),
        (DiseaseLabel::Comb, "D81.9"),
        (DiseaseLabel::Cvid, "D83.9"),
        (DiseaseLabel::Dgs, "D82.1"),
        (DiseaseLabel::Lad, "D84.0"),
        (DiseaseLabel::Agamma, "D80.0"),
        (DiseaseLabel::Was, "D82.0"),
    ]
    .into_iter()
    .map(|(d, c)| (d, vec![c.to_string()]))
    .collect()
}

fn demo_sites() -> Vec<SiteSpec> {
    let site = |id: &str, ranges| SiteSpec {
        site_id: id.to_string(),
        ranges,
    };
    vec![
        site("SITE_A", [[700.0, 2100.0], [200.0, 900.0], [300.0, 1400.0], [100.0, 500.0], [90.0, 600.0]]),
        site("SITE_B", [[800.0, 2500.0], [250.0, 1000.0], [400.0, 1600.0], [150.0, 650.0], [100.0, 700.0]]),
        site("SITE_C", [[650.0, 2000.0], [180.0, 850.0], [350.0, 1300.0], [90.0, 450.0], [70.0, 550.0]]),
    ]
}

const DEMO_NOISE_CODES: [&str; 20] = [
    "A09", "B34.9", "B37.0", "D64.9", "E86.0", "H66.90", "J02.9", "J06.9", "J18.9", "J20.9", "J45.909", "K52.9",
    "L20.9", "L30.9", "N39.0", "R05", "R11.10", "R50.9", "R62.50", "Z23",
];

/// Seven diseases with patient counts and encounters per patient taken from
/// Table 1, patient counts multiplied by `scale`. DGS carries three planted
/// subphenotypes (gastrointestinal, airway, cardiac).
pub fn demo_spec(scale: f64, seed: u64) -> CohortSpec {
    let archetype = |d: DiseaseLabel| -> [f64; PANEL_DIM] {
        match d {
            DiseaseLabel::Cgd => [0.55, 0.5, 0.55, 0.5, 0.5],
            DiseaseLabel::Comb => [-0.2, -0.1, -0.25, 0.3, 0.4],
            DiseaseLabel::Cvid => [0.4, 0.5, 0.35, 0.1, 0.4],
            DiseaseLabel::Dgs => [0.05, 0.15, 0.05, 0.6, 0.6],
            DiseaseLabel::Lad => [1.4, 1.3, 1.4, 1.5, 1.2],
            DiseaseLabel::Agamma => [0.6, 0.6, 0.6, -0.2, 0.5],
            DiseaseLabel::Was => [0.2, 0.25, 0.2, 0.45, 0.9],
        }
    };
    let sub = |name: &str, weight, mean, codes: [&str; 2]| SubphenotypeSpec {
        name: name.to_string(),
        weight,
        mean,
        icd_signature: codes.iter().map(|c| c.to_string()).collect(),
    };
    let diseases = TABLE1
        .iter()
        .map(|&(d, encounters, patients)| DiseaseSpec {
            disease: d,
            patients: (patients as f64 * scale).round() as usize,
            encounters_mean: encounters as f64 / patients as f64,
            mean: archetype(d),
            covariance: panel_covariance(0.12, 0.5),
            subphenotypes: if d == DiseaseLabel::Dgs {
                vec![
                    sub("gastrointestinal", 0.35, [0.35, 0.3, 0.3, 0.55, 0.45], ["K21.9", "R63.3"]),
                    sub("airway", 0.35, [-0.15, 0.0, -0.2, 0.75, 0.75], ["J38.5", "J35.1"]),
                    sub("cardiac", 0.3, [0.05, 0.25, -0.05, 0.35, 0.95], ["Q21.0", "Q25.4"]),
                ]
            } else {
                Vec::new()
            },
        })
        .collect();
    CohortSpec {
        seed,
        diseases,
        missingness: [0.05, 0.15, 0.15, 0.2, 0.25],
        age_weights: [0.15, 0.15, 0.2, 0.2, 0.15, 0.15],
        sites: demo_sites(),
        disease_codes: demo_disease_codes(),
        noise_codes: DEMO_NOISE_CODES.iter().map(|c| c.to_string()).collect(),
        noise_codes_per_patient: 4,
        signature_rate: 0.9,
        negative_controls: ((40.0 * scale).round() as usize).max(2),
        repeat_rate: 0.05,
    }
}

/// Generated file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCohort {
    pub labs_csv: String,
    pub diagnoses_csv: String,
    pub ground_truth_csv: String,
    pub disease_codes_json: String,
    /// Patients planted to fail the cohort rule; absent from the ground truth.
    pub negative_controls: Vec<String>,
}

pub const LABS_FILE: &str = "labs.csv";
pub const DIAGNOSES_FILE: &str = "diagnoses.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const DISEASE_CODES_FILE: &str = "disease_codes.json";

impl SyntheticCohort {
    /// Writes the four files into `dir` and returns their paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            (LABS_FILE, &self.labs_csv),
            (DIAGNOSES_FILE, &self.diagnoses_csv),
            (GROUND_TRUTH_FILE, &self.ground_truth_csv),
            (DISEASE_CODES_FILE, &self.disease_codes_json),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            out.push(path);
        }
        Ok(out)
    }
}

struct Writers {
    labs: csv::Writer<Vec<u8>>,
    diagnoses: csv::Writer<Vec<u8>>,
    truth: csv::Writer<Vec<u8>>,
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

struct Generator<'a> {
    spec: &'a CohortSpec,
    rng: ChaCha8Rng,
    out: Writers,
    epoch: NaiveDate,
}

impl Generator<'_> {
    fn age_group(&mut self) -> AgeGroup {
        let total: f64 = self.spec.age_weights.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        for (g, &w) in AgeGroup::ALL.iter().zip(&self.spec.age_weights) {
            if u < w {
                return *g;
            }
            u -= w;
        }
        *AgeGroup::ALL.iter().zip(&self.spec.age_weights).rev().find(|(_, w)| **w > 0.0).unwrap().0
    }

    fn subphenotype<'s>(&mut self, d: &'s DiseaseSpec) -> Option<&'s SubphenotypeSpec> {
        let mut u = self.rng.random::<f64>();
        for s in &d.subphenotypes {
            if u < s.weight {
                return Some(s);
            }
            u -= s.weight;
        }
        None
    }

    fn diagnosis(&mut self, patient: &str, code: &str, date: NaiveDate) -> Result<()> {
        self.out.diagnoses.write_record([patient, code, &date.to_string()])?;
        Ok(())
    }

    /// Two codes of `disease` with the given gap.
    fn code_pair(&mut self, patient: &str, disease: DiseaseLabel, first: NaiveDate, gap: i64) -> Result<()> {
        let codes = &self.spec.disease_codes[&disease];
        let a = codes.choose(&mut self.rng).unwrap().clone();
        let b = codes.choose(&mut self.rng).unwrap().clone();
        self.diagnosis(patient, &a, first)?;
        self.diagnosis(patient, &b, first + Duration::days(gap))
    }

    fn background_codes(&mut self, patient: &str, start: NaiveDate) -> Result<()> {
        let picks: Vec<String> = self
            .spec
            .noise_codes
            .choose_multiple(&mut self.rng, self.spec.noise_codes_per_patient)
            .cloned()
            .collect();
        for code in picks {
            let date = start + Duration::days(self.rng.random_range(0..720));
            self.diagnosis(patient, &code, date)?;
        }
        Ok(())
    }

    /// One normalized draw; redrawn until every absolute value is non-negative,
    /// then clamped as a last resort.
    fn draw(&mut self, mean: &[f64; PANEL_DIM], chol: &[f64], site: &SiteSpec) -> [f64; PANEL_DIM] {
        let mut x = [0.0; PANEL_DIM];
        for attempt in 0..MAX_REDRAWS {
            let z: [f64; PANEL_DIM] = std::array::from_fn(|_| self.rng.sample(StandardNormal));
            for i in 0..PANEL_DIM {
                x[i] = mean[i] + (0..=i).map(|k| chol[i * PANEL_DIM + k] * z[k]).sum::<f64>();
            }
            let ok = (0..PANEL_DIM).all(|j| denormalize_lab(x[j], site.ranges[j][0], site.ranges[j][1]) >= 0.0);
            if ok || attempt + 1 == MAX_REDRAWS {
                break;
            }
        }
        for (j, v) in x.iter_mut().enumerate() {
            let [lo, hi] = site.ranges[j];
            if denormalize_lab(*v, lo, hi) < 0.0 {
                *v = -lo / (hi - lo);
            }
        }
        x
    }

    #[allow(clippy::too_many_arguments)]
    fn encounters(
        &mut self,
        patient: &str,
        count: usize,
        mean: &[f64; PANEL_DIM],
        chol: &[f64],
        site: &SiteSpec,
        first: NaiveDate,
        truth: Option<(DiseaseLabel, &str)>,
    ) -> Result<()> {
        let group = self.age_group();
        let lo = group.lower_days();
        let hi = group.upper_days().unwrap_or(OLDEST_DAYS);
        let base_age = self.rng.random_range(lo..hi);
        let mut date = first;
        for e in 0..count {
            if e > 0 {
                date += Duration::days(self.rng.random_range(7..120));
            }
            let encounter = format!("{patient}-E{:02}", e + 1);
            let age = base_age + (date - first).num_days() as u32;
            let x = self.draw(mean, chol, site);
            let mut present: [bool; PANEL_DIM] =
                std::array::from_fn(|j| self.rng.random::<f64>() >= self.spec.missingness[j]);
            if !present.iter().any(|&p| p) {
                present[self.rng.random_range(0..PANEL_DIM)] = true;
            }
            let start = Utc.from_utc_datetime(&date.and_hms_opt(8, 0, 0).unwrap());
            let mut rows = Vec::new();
            for (j, code) in TestCode::PANEL.iter().enumerate().filter(|(j, _)| present[*j]) {
                let [rlo, rhi] = site.ranges[j];
                let t = start + Duration::minutes(self.rng.random_range(0..240));
                rows.push((t, *code, denormalize_lab(x[j], rlo, rhi)));
                if self.rng.random::<f64>() < self.spec.repeat_rate {
                    let again = self.draw(mean, chol, site);
                    rows.push((t + Duration::hours(6), *code, denormalize_lab(again[j], rlo, rhi)));
                }
            }
            rows.shuffle(&mut self.rng);
            for (t, code, value) in rows {
                let [rlo, rhi] = site.ranges[code.component_index()];
                self.out.labs.write_record([
                    patient,
                    &encounter,
                    &format_timestamp(&t),
                    code.as_str(),
                    &value.to_string(),
                    &rlo.to_string(),
                    &rhi.to_string(),
                    &site.site_id,
                    &age.to_string(),
                ])?;
            }
            if let Some((disease, sub)) = truth {
                self.out.truth.write_record([patient, &encounter, disease.as_str(), sub])?;
            }
        }
        Ok(())
    }
}

fn encounter_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let extra: f64 = Poisson::new(mean - 1.0).expect("positive rate").sample(rng);
    1 + extra as usize
}

/// Generates labs, diagnoses and ground truth for `spec`. Deterministic in `spec.seed`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let writer = |header: &[&str]| -> Result<csv::Writer<Vec<u8>>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(w)
    };
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        out: Writers {
            labs: writer(&LAB_HEADER)?,
            diagnoses: writer(&DIAGNOSIS_HEADER)?,
            truth: writer(&GROUND_TRUTH_HEADER)?,
        },
        epoch: NaiveDate::from_ymd_opt(2012, 1, 1).unwrap(),
    };
    let chols: BTreeMap<DiseaseLabel, Vec<f64>> = spec
        .diseases
        .iter()
        .map(|d| (d.disease, cholesky_psd(&d.covariance.concat(), PANEL_DIM)))
        .collect();

    let mut serial = 0usize;
    for d in &spec.diseases {
        for _ in 0..d.patients {
            serial += 1;
            let patient = format!("P{serial:06}");
            let sub = g.subphenotype(d);
            let mean = sub.map_or(d.mean, |s| s.mean);
            let site = spec.sites.choose(&mut g.rng).unwrap();
            let first = g.epoch + Duration::days(g.rng.random_range(0..2000));
            let count = encounter_count(&mut g.rng, d.encounters_mean);
            let gap = 90 + g.rng.random_range(0..400);
            let dx = first - Duration::days(g.rng.random_range(0..60));
            g.code_pair(&patient, d.disease, dx, gap)?;
            if let Some(s) = sub {
                for code in &s.icd_signature {
                    if g.rng.random::<f64>() < spec.signature_rate {
                        let when = first + Duration::days(g.rng.random_range(0..180));
                        let gap = 90 + g.rng.random_range(0..365);
                        g.diagnosis(&patient, code, when)?;
                        g.diagnosis(&patient, code, when + Duration::days(gap))?;
                    }
                }
            }
            g.background_codes(&patient, first)?;
            let name = sub.map_or("", |s| s.name.as_str());
            g.encounters(&patient, count, &mean, &chols[&d.disease], site, first, Some((d.disease, name)))?;
        }
    }

    let mut negative_controls = Vec::new();
    for k in 0..spec.negative_controls {
        let d = &spec.diseases[k % spec.diseases.len()];
        let patient = format!("N{:06}", k + 1);
        let site = spec.sites.choose(&mut g.rng).unwrap();
        let first = g.epoch + Duration::days(g.rng.random_range(0..2000));
        if k % 2 == 0 {
            let gap = g.rng.random_range(0..90);
            g.code_pair(&patient, d.disease, first, gap)?;
        } else {
            let gap = 90 + g.rng.random_range(0..400);
            g.code_pair(&patient, d.disease, first, gap)?;
            let other = DiseaseLabel::ALL[(d.disease.index() + 1 + g.rng.random_range(0..6)) % 7];
            let code = spec.disease_codes[&other].choose(&mut g.rng).unwrap().clone();
            let when = first + Duration::days(g.rng.random_range(0..365));
            g.diagnosis(&patient, &code, when)?;
        }
        g.background_codes(&patient, first)?;
        g.encounters(&patient, 1, &d.mean, &chols[&d.disease], site, first, None)?;
        negative_controls.push(patient);
    }

    Ok(SyntheticCohort {
        labs_csv: finish(g.out.labs)?,
        diagnoses_csv: finish(g.out.diagnoses)?,
        ground_truth_csv: finish(g.out.truth)?,
        disease_codes_json: serde_json::to_string_pretty(&spec.disease_codes)? + "\n",
        negative_controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{flatten_encounters, parse_diagnoses, parse_disease_codes, parse_lab_records, select_cohort, ParseMode};
    use crate::normalization::{assemble_vector, normalize_lab, LabVector, VectorAssemblyConfig};

    fn single(disease: DiseaseLabel, patients: usize, mean: [f64; PANEL_DIM], sd: f64) -> DiseaseSpec {
        DiseaseSpec {
            disease,
            patients,
            encounters_mean: 1.0,
            mean,
            covariance: panel_covariance(sd, 0.0),
            subphenotypes: Vec::new(),
        }
    }

    fn base(diseases: Vec<DiseaseSpec>) -> CohortSpec {
        CohortSpec {
            seed: 7,
            diseases,
            missingness: [0.0; PANEL_DIM],
            age_weights: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            sites: demo_sites(),
            disease_codes: demo_disease_codes(),
            noise_codes: Vec::new(),
            noise_codes_per_patient: 0,
            signature_rate: 1.0,
            negative_controls: 0,
            repeat_rate: 0.0,
        }
    }

    fn vectors(c: &SyntheticCohort) -> Vec<LabVector<f64>> {
        let labs = parse_lab_records(c.labs_csv.as_bytes(), ParseMode::Strict).unwrap().records;
        let dx = parse_diagnoses(c.diagnoses_csv.as_bytes(), ParseMode::Strict).unwrap().records;
        let codes = parse_disease_codes(c.disease_codes_json.as_bytes()).unwrap();
        let cohort = select_cohort(&dx, &codes);
        flatten_encounters(&labs, &cohort)
            .iter()
            .map(|s| assemble_vector(s, &VectorAssemblyConfig::default()).unwrap())
            .collect()
    }

    #[test]
    fn complete_single_subtype_cohort() {
        let mut d = single(DiseaseLabel::Cvid, 40, [0.4, 0.5, 0.35, 0.3, 0.4], 0.05);
        d.subphenotypes.push(SubphenotypeSpec {
            name: "only".into(),
            weight: 1.0,
            mean: [0.4, 0.5, 0.35, 0.3, 0.4],
            icd_signature: vec!["R63.3".into()],
        });
        let c = generate_cohort(&base(vec![d])).unwrap();
        let v = vectors(&c);
        assert_eq!(v.len(), 40);
        assert!(v.iter().all(LabVector::is_complete));
        let patients: BTreeSet<&str> = v.iter().map(|x| x.patient_id.as_str()).collect();
        assert_eq!(patients.len(), 40);
        assert!(c.ground_truth_csv.lines().skip(1).all(|l| l.ends_with(",CVID,only")));
    }

    #[test]
    fn planted_means_recovered() {
        let means = [[0.2, 0.3, 0.4, 0.5, 0.6], [0.9, 0.8, 0.7, 0.1, 0.0]];
        let sd = 0.1;
        let spec = base(vec![
            single(DiseaseLabel::Dgs, 300, means[0], sd),
            single(DiseaseLabel::Agamma, 300, means[1], sd),
        ]);
        let v = vectors(&generate_cohort(&spec).unwrap());
        for (k, d) in [DiseaseLabel::Dgs, DiseaseLabel::Agamma].into_iter().enumerate() {
            let rows: Vec<_> = v.iter().filter(|x| x.disease == d).collect();
            assert_eq!(rows.len(), 300);
            for j in 0..PANEL_DIM {
                let m = rows.iter().map(|x| x.components[j].unwrap()).sum::<f64>() / rows.len() as f64;
                assert!((m - means[k][j]).abs() < 3.0 * sd / (rows.len() as f64).sqrt(), "{d} {j}: {m}");
            }
        }
    }

    #[test]
    fn inversion_is_exact_through_csv() {
        let spec = base(vec![single(DiseaseLabel::Was, 50, [0.2, 0.25, 0.2, 0.45, 0.9], 0.2)]);
        let c = generate_cohort(&spec).unwrap();
        let labs = parse_lab_records(c.labs_csv.as_bytes(), ParseMode::Strict).unwrap().records;
        for site in &spec.sites {
            for j in 0..PANEL_DIM {
                let [lo, hi] = site.ranges[j];
                for x in [-0.3, 0.0, 0.37, 1.0, 1.9] {
                    let back = normalize_lab(denormalize_lab(x, lo, hi), lo, hi).unwrap();
                    assert!((back - x).abs() < 1e-10);
                }
            }
        }
        for o in &labs {
            let reparsed: f64 = o.value_abs.to_string().parse().unwrap();
            assert_eq!(reparsed, o.value_abs);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = demo_spec(0.05, 3);
        assert_eq!(generate_cohort(&spec).unwrap(), generate_cohort(&spec).unwrap());
        let other = CohortSpec { seed: 4, ..spec.clone() };
        assert_ne!(generate_cohort(&spec).unwrap().labs_csv, generate_cohort(&other).unwrap().labs_csv);
    }

    #[test]
    fn negative_controls_fail_the_rule() {
        let mut spec = demo_spec(0.1, 11);
        spec.negative_controls = 30;
        let c = generate_cohort(&spec).unwrap();
        let dx = parse_diagnoses(c.diagnoses_csv.as_bytes(), ParseMode::Strict).unwrap().records;
        let codes = parse_disease_codes(c.disease_codes_json.as_bytes()).unwrap();
        let cohort = select_cohort(&dx, &codes);
        assert_eq!(c.negative_controls.len(), 30);
        assert!(c.negative_controls.iter().all(|p| !cohort.contains_key(p)));
        let truth: BTreeSet<&str> = c.ground_truth_csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(cohort.len(), truth.len());
        assert!(truth.iter().all(|p| cohort.contains_key(*p)));
    }

    #[test]
    fn demo_spec_follows_table_one() {
        let spec = demo_spec(1.0, 0);
        assert_eq!(spec.diseases.iter().map(|d| d.patients).sum::<usize>(), 2174);
        let expected: f64 = spec.diseases.iter().map(|d| d.patients as f64 * d.encounters_mean).sum();
        assert!((expected - 5944.0).abs() < 1e-6);
        let half = demo_spec(0.5, 0);
        assert_eq!(half.diseases[0].patients, 51);
        spec.validate().unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        let ok = base(vec![single(DiseaseLabel::Cgd, 5, [0.5; PANEL_DIM], 0.1)]);
        let mut s = ok.clone();
        s.missingness[2] = 1.0;
        assert!(matches!(generate_cohort(&s), Err(Error::InvalidSpec(_))));
        let mut s = ok.clone();
        s.diseases[0].covariance[0][0] = -1.0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.diseases[0].covariance[0][1] = 0.5;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.disease_codes.remove(&DiseaseLabel::Lad);
        assert!(s.validate().is_err());
        let mut s = ok;
        s.sites[0].ranges[1] = [5.0, 5.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = demo_spec(0.2, 9);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<CohortSpec>(&text).unwrap(), spec);
    }
}
