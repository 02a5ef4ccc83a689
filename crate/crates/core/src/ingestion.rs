//! Lab and diagnosis file parsing, cohort selection and encounter flattening.
//!
//! A sample is one hospital encounter. Within an encounter every panel test
//! contributes its earliest observation; later repeats are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum calendar-day gap between two disease codes for a patient to qualify.
pub const QUALIFYING_GAP_DAYS: i64 = 90;

pub const LAB_HEADER: [&str; 9] = [
    "patient_id",
    "encounter_id",
    "collection_time",
    "test_code",
    "value_abs",
    "ref_low",
    "ref_high",
    "site_id",
    "age_at_collection_days",
];

pub const DIAGNOSIS_HEADER: [&str; 3] = ["patient_id", "icd_code", "recorded_date"];

/// The five lymphocyte panel tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestCode {
    #[serde(rename = "CD3")]
    Cd3,
    #[serde(rename = "CD3CD4")]
    Cd3Cd4,
    #[serde(rename = "CD3CD8")]
    Cd3Cd8,
    #[serde(rename = "CD19")]
    Cd19,
    #[serde(rename = "CD16CD56")]
    Cd16Cd56,
}

impl TestCode {
    /// Vector component order: CD3, CD3CD8, CD3CD4, CD19, CD16CD56.
    pub const PANEL: [TestCode; 5] = [
        TestCode::Cd3,
        TestCode::Cd3Cd8,
        TestCode::Cd3Cd4,
        TestCode::Cd19,
        TestCode::Cd16Cd56,
    ];

    pub fn component_index(self) -> usize {
        match self {
            TestCode::Cd3 => 0,
            TestCode::Cd3Cd8 => 1,
            TestCode::Cd3Cd4 => 2,
            TestCode::Cd19 => 3,
            TestCode::Cd16Cd56 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TestCode::Cd3 => "CD3",
            TestCode::Cd3Cd4 => "CD3CD4",
            TestCode::Cd3Cd8 => "CD3CD8",
            TestCode::Cd19 => "CD19",
            TestCode::Cd16Cd56 => "CD16CD56",
        }
    }
}

impl fmt::Display for TestCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestCode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "CD3" => Ok(TestCode::Cd3),
            "CD3CD4" => Ok(TestCode::Cd3Cd4),
            "CD3CD8" => Ok(TestCode::Cd3Cd8),
            "CD19" => Ok(TestCode::Cd19),
            "CD16CD56" => Ok(TestCode::Cd16Cd56),
            other => Err(format!("unknown test_code {other:?}")),
        }
    }
}

/// Inborn-error-of-immunity label. Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiseaseLabel {
    Cgd,
    Comb,
    Cvid,
    Dgs,
    Lad,
    Agamma,
    Was,
}

impl DiseaseLabel {
    pub const ALL: [DiseaseLabel; 7] = [
        DiseaseLabel::Cgd,
        DiseaseLabel::Comb,
        DiseaseLabel::Cvid,
        DiseaseLabel::Dgs,
        DiseaseLabel::Lad,
        DiseaseLabel::Agamma,
        DiseaseLabel::Was,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DiseaseLabel::Cgd => "CGD",
            DiseaseLabel::Comb => "COMB",
            DiseaseLabel::Cvid => "CVID",
            DiseaseLabel::Dgs => "DGS",
            DiseaseLabel::Lad => "LAD",
            DiseaseLabel::Agamma => "AGAMMA",
            DiseaseLabel::Was => "WAS",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiseaseLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DiseaseLabel::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown disease label {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabObservation {
    pub patient_id: String,
    pub encounter_id: String,
    pub collection_time: DateTime<Utc>,
    pub test_code: TestCode,
    /// Absolute count, cells/µL.
    pub value_abs: f64,
    pub ref_low: f64,
    pub ref_high: f64,
    pub site_id: String,
    pub age_at_collection_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisEvent {
    pub patient_id: String,
    pub icd_code: String,
    pub recorded_date: NaiveDate,
}

/// A kept lab value together with the reference range of the site that measured it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabReading {
    pub value_abs: f64,
    pub ref_low: f64,
    pub ref_high: f64,
}

/// One flattened encounter. `labs` is indexed by [`TestCode::component_index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterSample {
    pub patient_id: String,
    pub encounter_id: String,
    pub disease: DiseaseLabel,
    pub age_days: u32,
    pub labs: [Option<LabReading>; 5],
}

impl EncounterSample {
    pub fn present_count(&self) -> usize {
        self.labs.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ParseMode {
    /// Bad rows are collected and skipped.
    #[default]
    Lenient,
    /// The first bad row aborts parsing.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<RecordError>,
}

/// Column positions resolved from a header row.
struct Columns(Vec<usize>);

impl Columns {
    fn resolve(headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let mut idx = Vec::with_capacity(required.len());
        for name in required {
            let pos = headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Record {
                    line: 1,
                    message: format!("missing column {name:?} in header"),
                })?;
            idx.push(pos);
        }
        Ok(Columns(idx))
    }

    fn field<'r>(&self, rec: &'r csv::StringRecord, k: usize, name: &str) -> std::result::Result<&'r str, String> {
        rec.get(self.0[k])
            .map(str::trim)
            .ok_or_else(|| format!("missing field {name}"))
    }
}

fn parse_f64(s: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{name}: not a number: {s:?}"))?;
    if !v.is_finite() {
        return Err(format!("{name}: not finite: {s:?}"));
    }
    Ok(v)
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(format!("collection_time: not an ISO-8601 timestamp: {s:?}"))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_lab_row(cols: &Columns, rec: &csv::StringRecord) -> std::result::Result<LabObservation, String> {
    let f = |k: usize| cols.field(rec, k, LAB_HEADER[k]);
    let patient_id = f(0)?.to_string();
    let encounter_id = f(1)?.to_string();
    if patient_id.is_empty() || encounter_id.is_empty() {
        return Err("patient_id and encounter_id must be non-empty".into());
    }
    let collection_time = parse_timestamp(f(2)?)?;
    let test_code: TestCode = f(3)?.parse()?;
    let value_abs = parse_f64(f(4)?, "value_abs")?;
    let ref_low = parse_f64(f(5)?, "ref_low")?;
    let ref_high = parse_f64(f(6)?, "ref_high")?;
    if value_abs < 0.0 {
        return Err(format!("value_abs must be non-negative, got {value_abs}"));
    }
    if ref_high <= ref_low {
        return Err(format!(
            "ref_high must exceed ref_low (ref_low={ref_low}, ref_high={ref_high})"
        ));
    }
    let site_id = f(7)?.to_string();
    let age_raw = f(8)?;
    let age_at_collection_days: u32 = age_raw
        .parse()
        .map_err(|_| format!("age_at_collection_days: not a non-negative integer: {age_raw:?}"))?;
    Ok(LabObservation {
        patient_id,
        encounter_id,
        collection_time,
        test_code,
        value_abs,
        ref_low,
        ref_high,
        site_id,
        age_at_collection_days,
    })
}

fn parse_diagnosis_row(cols: &Columns, rec: &csv::StringRecord) -> std::result::Result<DiagnosisEvent, String> {
    let f = |k: usize| cols.field(rec, k, DIAGNOSIS_HEADER[k]);
    let patient_id = f(0)?.to_string();
    let icd_code = f(1)?.to_string();
    if patient_id.is_empty() {
        return Err("patient_id must be non-empty".into());
    }
    if icd_code.is_empty() {
        return Err("icd_code must be non-empty".into());
    }
    let raw = f(2)?;
    let recorded_date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|_| format!("recorded_date: not an ISO-8601 date: {raw:?}"))?;
    Ok(DiagnosisEvent {
        patient_id,
        icd_code,
        recorded_date,
    })
}

fn parse_csv<T, R: Read>(
    input: R,
    header: &[&str],
    mode: ParseMode,
    row: impl Fn(&Columns, &csv::StringRecord) -> std::result::Result<T, String>,
) -> Result<Parsed<T>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let cols = Columns::resolve(rdr.headers()?, header)?;
    let mut out = Parsed {
        records: Vec::new(),
        errors: Vec::new(),
    };
    for rec in rdr.records() {
        let (line, result) = match rec {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line());
                (line, row(&cols, &rec))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                (line, Err(e.to_string()))
            }
        };
        match result {
            Ok(v) => out.records.push(v),
            Err(message) => {
                if mode == ParseMode::Strict {
                    return Err(Error::Record { line, message });
                }
                out.errors.push(RecordError { line, message });
            }
        }
    }
    Ok(out)
}

/// Parses a labs CSV. Row order is preserved.
pub fn parse_lab_records<R: Read>(input: R, mode: ParseMode) -> Result<Parsed<LabObservation>> {
    parse_csv(input, &LAB_HEADER, mode, parse_lab_row)
}

pub fn parse_diagnoses<R: Read>(input: R, mode: ParseMode) -> Result<Parsed<DiagnosisEvent>> {
    parse_csv(input, &DIAGNOSIS_HEADER, mode, parse_diagnosis_row)
}

/// Disease label to the ICD codes that define it.
pub type DiseaseCodeMap = BTreeMap<DiseaseLabel, BTreeSet<String>>;

/// Reads `disease_codes.json`; every one of the seven labels must be present.
pub fn parse_disease_codes<R: Read>(input: R) -> Result<DiseaseCodeMap> {
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_reader(input)?;
    let mut map = DiseaseCodeMap::new();
    for (k, codes) in raw {
        let label: DiseaseLabel = k.parse().map_err(Error::Config)?;
        let set: BTreeSet<String> = codes.into_iter().map(|c| c.trim().to_string()).collect();
        if set.iter().any(String::is_empty) {
            return Err(Error::Config(format!("empty ICD code listed for {label}")));
        }
        map.insert(label, set);
    }
    if let Some(missing) = DiseaseLabel::ALL.iter().find(|d| !map.contains_key(d)) {
        return Err(Error::Config(format!("disease_codes.json lacks {missing}")));
    }
    Ok(map)
}

/// Union of all disease-defining codes.
pub fn defining_codes(map: &DiseaseCodeMap) -> BTreeSet<String> {
    map.values().flatten().cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    /// Codes for one disease only, but no pair at least 90 days apart.
    GapTooShort,
    /// Codes for more than one disease.
    OverlappingDiseases,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortSelection {
    pub cohort: BTreeMap<String, DiseaseLabel>,
    pub excluded: BTreeMap<String, Exclusion>,
}

/// Applies the two-code / 90-day rule with single-code exclusivity.
pub fn select_cohort_detailed(diagnoses: &[DiagnosisEvent], codes: &DiseaseCodeMap) -> CohortSelection {
    let mut code_owner: BTreeMap<&str, Vec<DiseaseLabel>> = BTreeMap::new();
    for (&d, set) in codes {
        for c in set {
            code_owner.entry(c.as_str()).or_default().push(d);
        }
    }
    // patient -> disease -> (earliest, latest) matching date
    let mut spans: BTreeMap<&str, BTreeMap<DiseaseLabel, (NaiveDate, NaiveDate)>> = BTreeMap::new();
    for ev in diagnoses {
        let Some(owners) = code_owner.get(ev.icd_code.as_str()) else {
            continue;
        };
        let per = spans.entry(ev.patient_id.as_str()).or_default();
        for &d in owners {
            per.entry(d)
                .and_modify(|(lo, hi)| {
                    *lo = (*lo).min(ev.recorded_date);
                    *hi = (*hi).max(ev.recorded_date);
                })
                .or_insert((ev.recorded_date, ev.recorded_date));
        }
    }
    let mut out = CohortSelection::default();
    for (patient, per) in spans {
        if per.len() > 1 {
            out.excluded.insert(patient.to_string(), Exclusion::OverlappingDiseases);
            continue;
        }
        let (&disease, &(lo, hi)) = per.iter().next().expect("non-empty span map");
        if (hi - lo).num_days() >= QUALIFYING_GAP_DAYS {
            out.cohort.insert(patient.to_string(), disease);
        } else {
            out.excluded.insert(patient.to_string(), Exclusion::GapTooShort);
        }
    }
    out
}

pub fn select_cohort(diagnoses: &[DiagnosisEvent], codes: &DiseaseCodeMap) -> BTreeMap<String, DiseaseLabel> {
    select_cohort_detailed(diagnoses, codes).cohort
}

/// One sample per (patient, encounter) of a cohort patient, keeping the earliest
/// observation of each test (ties: earliest input row). Output is sorted by
/// (patient_id, encounter_id).
pub fn flatten_encounters(
    observations: &[LabObservation],
    cohort: &BTreeMap<String, DiseaseLabel>,
) -> Vec<EncounterSample> {
    let mut kept: BTreeMap<(&str, &str), [Option<usize>; 5]> = BTreeMap::new();
    for (row, obs) in observations.iter().enumerate() {
        if !cohort.contains_key(&obs.patient_id) {
            continue;
        }
        let slot = &mut kept
            .entry((obs.patient_id.as_str(), obs.encounter_id.as_str()))
            .or_default()[obs.test_code.component_index()];
        match *slot {
            Some(prev) if observations[prev].collection_time <= obs.collection_time => {}
            _ => *slot = Some(row),
        }
    }
    kept.into_iter()
        .map(|((patient, encounter), rows)| {
            let age_days = rows
                .iter()
                .flatten()
                .map(|&r| observations[r].age_at_collection_days)
                .min()
                .expect("encounter has at least one kept observation");
            let labs = rows.map(|r| {
                r.map(|r| {
                    let o = &observations[r];
                    LabReading {
                        value_abs: o.value_abs,
                        ref_low: o.ref_low,
                        ref_high: o.ref_high,
                    }
                })
            });
            EncounterSample {
                patient_id: patient.to_string(),
                encounter_id: encounter.to_string(),
                disease: cohort[patient],
                age_days,
                labs,
            }
        })
        .collect()
}
