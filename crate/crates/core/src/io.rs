//! CSV artifacts exchanged between pipeline stages.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back yields bit-identical values. NaN is written as an empty field.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imputation::SubgroupDataset;
use crate::ingestion::DiseaseLabel;
use crate::matrix::Matrix;
use crate::normalization::{AgeGroup, LabVector, PANEL_DIM};
use crate::reporting::SummaryRow;
use crate::scalar::Scalar;
use crate::tuning::AlgorithmTable;

pub const VECTOR_HEADER: [&str; 9] = [
    "patient_id",
    "encounter_id",
    "disease",
    "age_group",
    "cd3",
    "cd3cd8",
    "cd3cd4",
    "cd19",
    "cd16cd56",
];

pub const IMPUTED_FLAGS: [&str; PANEL_DIM] =
    ["cd3_imputed", "cd3cd8_imputed", "cd3cd4_imputed", "cd19_imputed", "cd16cd56_imputed"];

pub const RESULTS_HEADER: [&str; 18] = [
    "combo_index",
    "algorithm",
    "pca",
    "epsilon",
    "n_clusters",
    "seed",
    "clusters_found",
    "noise",
    "homogeneity",
    "completeness",
    "v_measure",
    "ari",
    "ami",
    "silhouette",
    "davies_bouldin",
    "composite",
    "valid",
    "note",
];

pub const SUMMARY_HEADER: [&str; 7] = ["age_group", "algorithm", "pca", "ed_nc", "cs", "sc", "status"];

pub fn fmt_scalar<T: Scalar>(v: T) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn fmt_opt<T: Scalar>(v: Option<T>) -> String {
    v.map(fmt_scalar).unwrap_or_default()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(File::create(path)?))
}

struct Reader {
    inner: csv::Reader<File>,
    columns: Vec<usize>,
}

impl Reader {
    fn new(path: &Path, required: &[&str]) -> Result<Self> {
        let mut inner = csv::Reader::from_reader(open(path)?);
        let headers = inner.headers()?.clone();
        let columns = required
            .iter()
            .map(|name| {
                headers.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Record {
                    line: 1,
                    message: format!("{}: missing column {name}", path.display()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { inner, columns })
    }

    /// Records as `(line, fields in required order)`.
    fn rows(&mut self) -> impl Iterator<Item = Result<(u64, Vec<String>)>> + '_ {
        let columns = self.columns.clone();
        self.inner.records().map(move |r| {
            let r = r?;
            let line = r.position().map_or(0, |p| p.line());
            let fields = columns.iter().map(|&c| r.get(c).unwrap_or("").trim().to_string()).collect();
            Ok((line, fields))
        })
    }
}

fn field<V: std::str::FromStr>(line: u64, name: &str, s: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Error::Record {
        line,
        message: format!("{name}: {e}"),
    })
}

fn opt_scalar<T: Scalar>(line: u64, name: &str, s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = field(line, name, s)?;
    if !v.is_finite() {
        return Err(Error::Record {
            line,
            message: format!("{name}: non-finite value {s}"),
        });
    }
    Ok(Some(T::of(v)))
}

fn vector_fields<T: Scalar>(v: &LabVector<T>) -> Vec<String> {
    let mut rec = vec![
        v.patient_id.clone(),
        v.encounter_id.clone(),
        v.disease.to_string(),
        v.age_group.to_string(),
    ];
    rec.extend(v.components.iter().map(|c| fmt_opt(*c)));
    rec
}

pub fn write_vectors<T: Scalar>(path: &Path, vectors: &[LabVector<T>]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(VECTOR_HEADER)?;
    for v in vectors {
        w.write_record(vector_fields(v))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vectors<T: Scalar>(path: &Path) -> Result<Vec<LabVector<T>>> {
    let mut r = Reader::new(path, &VECTOR_HEADER)?;
    let mut out = Vec::new();
    for row in r.rows() {
        let (line, f) = row?;
        let mut components = [None; PANEL_DIM];
        for (j, c) in components.iter_mut().enumerate() {
            *c = opt_scalar(line, VECTOR_HEADER[4 + j], &f[4 + j])?;
        }
        if components.iter().all(Option::is_none) {
            return Err(Error::Record {
                line,
                message: "vector has no lab values".into(),
            });
        }
        out.push(LabVector {
            patient_id: f[0].clone(),
            encounter_id: f[1].clone(),
            disease: field::<DiseaseLabel>(line, "disease", &f[2])?,
            age_group: field::<AgeGroup>(line, "age_group", &f[3])?,
            components,
        });
    }
    Ok(out)
}

/// `imputed.csv`: the vectors.csv columns, completed, plus one 0/1 flag per lab.
pub fn write_imputed<T: Scalar>(path: &Path, datasets: &[SubgroupDataset<T>]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(VECTOR_HEADER.iter().chain(&IMPUTED_FLAGS))?;
    for d in datasets {
        for i in 0..d.len() {
            let mut rec = vec![
                d.ids[i].0.clone(),
                d.ids[i].1.clone(),
                d.labels[i].to_string(),
                d.age_group.to_string(),
            ];
            rec.extend(d.rows.row(i).iter().map(|&v| fmt_scalar(v)));
            rec.extend(d.imputed_mask[i].iter().map(|&m| if m { "1" } else { "0" }.to_string()));
            w.write_record(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `imputed.csv` into one dataset per age group, all six groups present
/// in age order, rows in file order.
pub fn read_imputed<T: Scalar>(path: &Path) -> Result<Vec<SubgroupDataset<T>>> {
    let required: Vec<&str> = VECTOR_HEADER.iter().chain(&IMPUTED_FLAGS).copied().collect();
    let mut r = Reader::new(path, &required)?;
    let mut groups: Vec<(Vec<Vec<T>>, SubgroupDataset<T>)> = AgeGroup::ALL
        .iter()
        .map(|&g| {
            (
                Vec::new(),
                SubgroupDataset {
                    age_group: g,
                    rows: Matrix::zeros(0, PANEL_DIM),
                    labels: Vec::new(),
                    ids: Vec::new(),
                    imputed_mask: Vec::new(),
                },
            )
        })
        .collect();
    for row in r.rows() {
        let (line, f) = row?;
        let age: AgeGroup = field(line, "age_group", &f[3])?;
        let mut values = Vec::with_capacity(PANEL_DIM);
        let mut mask = [false; PANEL_DIM];
        for j in 0..PANEL_DIM {
            let v = opt_scalar(line, VECTOR_HEADER[4 + j], &f[4 + j])?.ok_or_else(|| Error::Record {
                line,
                message: format!("{} is empty in an imputed file", VECTOR_HEADER[4 + j]),
            })?;
            values.push(v);
            mask[j] = match f[9 + j].as_str() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Record {
                        line,
                        message: format!("{}: expected 0 or 1, got {other:?}", IMPUTED_FLAGS[j]),
                    })
                }
            };
        }
        let (rows, d) = &mut groups[age.index()];
        rows.push(values);
        d.labels.push(field(line, "disease", &f[2])?);
        d.ids.push((f[0].clone(), f[1].clone()));
        d.imputed_mask.push(mask);
    }
    Ok(groups
        .into_iter()
        .map(|(rows, mut d)| {
            d.rows = Matrix::from_rows(&rows, PANEL_DIM);
            d
        })
        .collect())
}

pub fn results_file_name(age: AgeGroup, table: &str) -> String {
    format!("results_{}_{}.csv", age.slug(), table)
}

/// One row per experiment in enumeration order; invalid metrics are empty fields.
pub fn write_results<T: Scalar>(path: &Path, table: &AlgorithmTable<T>) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in &table.results {
        let b = &r.bundle;
        let ran = !r.assignment.is_empty();
        w.write_record([
            r.combo_index.to_string(),
            r.combo.algorithm.slug().to_string(),
            r.combo.pca_components.to_string(),
            r.combo.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            r.combo.n_clusters.map(|k| k.to_string()).unwrap_or_default(),
            r.combo.seed.to_string(),
            if ran { r.assignment.n_clusters.to_string() } else { String::new() },
            if ran { r.assignment.noise_count().to_string() } else { String::new() },
            fmt_scalar(b.homogeneity),
            fmt_scalar(b.completeness),
            fmt_scalar(b.v_measure),
            fmt_scalar(b.ari),
            fmt_scalar(b.ami),
            fmt_scalar(b.silhouette),
            fmt_scalar(b.davies_bouldin),
            fmt_scalar(b.composite),
            u8::from(b.valid).to_string(),
            r.note.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Table-style summary, missing values as `UNAVAILABLE`.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let [pca, knob, cs, sc] = r.cells();
        w.write_record([
            r.age_group.as_str(),
            r.algorithm.display_name(),
            &pca,
            &knob,
            &cs,
            &sc,
            r.status.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}
