//! Stage runners behind the command-line subcommands. Every stage reads its
//! inputs from files and writes its outputs under one directory, so any stage
//! can be re-run on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{pca_fit_transform, Algorithm, NOISE};
use crate::error::{Error, Result};
use crate::imputation::{impute_subgroups, FallbackNote, ImputeConfig, SubgroupDataset};
use crate::ingestion::{
    defining_codes, flatten_encounters, parse_diagnoses, parse_disease_codes, parse_lab_records,
    select_cohort_detailed, DiagnosisEvent, DiseaseCodeMap, DiseaseLabel, Exclusion, ParseMode, RecordError,
};
use crate::io::{read_imputed, read_json, read_vectors, results_file_name, write_imputed, write_json, write_results, write_summary, write_vectors};
use crate::matrix::Matrix;
use crate::normalization::{assemble_vector, partition_by_age, AgeGroup, VectorAssemblyConfig};
use crate::projection::{emit_scatter, stratified_subsample, tsne_embed, TsneOptions};
use crate::reporting::{cluster_report, render_markdown, summary_table, Report, SummaryRow};
use crate::seed::mix_seed;
use crate::synthgen::{demo_spec, generate_cohort, CohortSpec, DIAGNOSES_FILE, DISEASE_CODES_FILE, LABS_FILE};
use crate::tuning::{run_experiment, run_grid, select_all, GridConfig, HyperparamCombo, Selection};

pub const VECTORS_FILE: &str = "vectors.csv";
pub const COHORT_FILE: &str = "cohort.json";
pub const IMPUTED_FILE: &str = "imputed.csv";
pub const IMPUTATION_NOTES_FILE: &str = "imputation_notes.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SELECTED_FILE: &str = "selected.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const COHORT_SPEC_FILE: &str = "cohort_spec.json";

const STAGE_SYNTH: u64 = 0;
const STAGE_IMPUTE: u64 = 1;
const STAGE_TUNE: u64 = 2;
const STAGE_PROJECT: u64 = 3;

pub fn stage_seed(master: u64, stage: u64) -> u64 {
    mix_seed(&[master, stage])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    fn values(&self, name: &str) -> Result<Vec<usize>> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!("{name} range needs 1 <= min <= max")));
        }
        Ok((self.min..=self.max).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl EpsilonRange {
    /// `min, min + step, ...` up to `max`, rounded to 12 decimals.
    pub fn values(&self) -> Result<Vec<f64>> {
        let finite = self.min.is_finite() && self.max.is_finite() && self.step.is_finite();
        if !finite || self.min <= 0.0 || self.step <= 0.0 || self.max < self.min {
            return Err(Error::Config("epsilon range needs 0 < min <= max and step > 0".into()));
        }
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|i| ((self.min + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

/// Optional replacements for parts of the default grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOverrides {
    pub pca: Option<IntRange>,
    pub epsilon: Option<EpsilonRange>,
    pub n_clusters: Option<IntRange>,
    pub min_samples: Option<usize>,
    pub min_cluster_size: Option<usize>,
}

impl GridOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, mut grid: GridConfig) -> Result<GridConfig> {
        if let Some(r) = &self.pca {
            grid.pca_components = r.values("pca")?;
        }
        if let Some(r) = &self.epsilon {
            grid.epsilons = r.values()?;
        }
        if let Some(r) = &self.n_clusters {
            grid.n_clusters = r.values("n_clusters")?;
        }
        if let Some(v) = self.min_samples {
            grid.min_samples = v;
        }
        if let Some(v) = self.min_cluster_size {
            grid.min_cluster_size = v;
        }
        grid.validate()?;
        Ok(grid)
    }
}

/// Contents of the `--config` JSON file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub labs: Option<PathBuf>,
    pub diagnoses: Option<PathBuf>,
    pub disease_codes: Option<PathBuf>,
    /// Cohort spec for `synth`; without one the demo spec is used.
    pub synth_spec: Option<PathBuf>,
    /// Patient-count multiplier for the demo spec.
    pub synth_scale: f64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub grid: GridOverrides,
    /// `impute.seed` is ignored; the stage seed derives from `seed`.
    pub impute: ImputeConfig,
    pub vectors: VectorAssemblyConfig,
    pub tsne: TsneOptions,
    pub strict_parse: bool,
    /// Locks the grid to its defaults; any override is an error.
    pub paper_mode: bool,
    /// Codes left out of the ICD tables. Default: every disease-defining code.
    pub exclude_codes: Option<Vec<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            labs: None,
            diagnoses: None,
            disease_codes: None,
            synth_spec: None,
            synth_scale: 1.0,
            out: PathBuf::from("out"),
            seed: 0,
            algorithms: Algorithm::ALL.to_vec(),
            grid: GridOverrides::default(),
            impute: ImputeConfig::default(),
            vectors: VectorAssemblyConfig::default(),
            tsne: TsneOptions::default(),
            strict_parse: false,
            paper_mode: false,
            exclude_codes: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.algorithms.iter().collect();
        if unique.len() != self.algorithms.len() {
            return Err(Error::Config("algorithms lists an algorithm twice".into()));
        }
        if !(self.synth_scale > 0.0 && self.synth_scale.is_finite()) {
            return Err(Error::Config("synth_scale must be positive".into()));
        }
        if self.paper_mode && !self.grid.is_empty() {
            return Err(Error::Config("paper_mode locks the grid; remove the grid overrides".into()));
        }
        self.grid()?;
        self.impute.validate()?;
        self.vectors.validate()?;
        self.tsne.validate()
    }

    /// The effective hyperparameter grid.
    pub fn grid(&self) -> Result<GridConfig> {
        self.grid.apply(GridConfig::default())
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.strict_parse {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    /// Algorithms in canonical order.
    pub fn algorithm_order(&self) -> Vec<Algorithm> {
        Algorithm::ALL.into_iter().filter(|a| self.algorithms.contains(a)).collect()
    }

    fn input(&self, value: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("no {name} path given")))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Writes the synthetic cohort files plus the spec that produced them.
pub fn cmd_synth(config: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = match &config.synth_spec {
        Some(path) => serde_json::from_reader(open(path)?)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?,
        None => demo_spec(config.synth_scale, stage_seed(config.seed, STAGE_SYNTH)),
    };
    synth_from_spec(&spec, out)
}

pub fn synth_from_spec(spec: &CohortSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let cohort = generate_cohort(spec)?;
    let mut files = cohort.write_to(out)?;
    let spec_path = out.join(COHORT_SPEC_FILE);
    write_json(&spec_path, spec)?;
    files.push(spec_path);
    log::info!("synthetic cohort written to {}", out.display());
    Ok(files)
}

/// Cohort and flattening statistics written to `cohort.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lab_rows: usize,
    pub lab_errors: Vec<RecordError>,
    pub diagnosis_rows: usize,
    pub diagnosis_errors: Vec<RecordError>,
    pub patients: BTreeMap<DiseaseLabel, usize>,
    pub excluded: BTreeMap<Exclusion, usize>,
    pub samples: BTreeMap<DiseaseLabel, usize>,
    pub samples_by_age_group: BTreeMap<AgeGroup, usize>,
    pub total_samples: usize,
}

pub fn load_diagnoses(path: &Path, mode: ParseMode) -> Result<(Vec<DiagnosisEvent>, Vec<RecordError>)> {
    let parsed = parse_diagnoses(open(path)?, mode)?;
    Ok((parsed.records, parsed.errors))
}

pub fn load_disease_codes(path: &Path) -> Result<DiseaseCodeMap> {
    parse_disease_codes(open(path)?)
}

/// Parses labs and diagnoses, selects the cohort, flattens encounters and
/// writes `vectors.csv` and `cohort.json`.
pub fn cmd_ingest(config: &PipelineConfig, labs: &Path, diagnoses: &Path, codes: &Path, out: &Path) -> Result<IngestReport> {
    let mode = config.parse_mode();
    let parsed_labs = parse_lab_records(open(labs)?, mode)?;
    let (events, diagnosis_errors) = load_diagnoses(diagnoses, mode)?;
    let code_map = load_disease_codes(codes)?;
    for e in parsed_labs.errors.iter().chain(&diagnosis_errors) {
        log::warn!("skipped row: {e}");
    }
    let selection = select_cohort_detailed(&events, &code_map);
    if selection.cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let samples = flatten_encounters(&parsed_labs.records, &selection.cohort);
    let vectors = samples
        .iter()
        .map(|s| assemble_vector::<f64>(s, &config.vectors))
        .collect::<Result<Vec<_>>>()?;
    if vectors.is_empty() {
        return Err(Error::EmptyCohort);
    }
    write_vectors(&out.join(VECTORS_FILE), &vectors)?;

    let mut report = IngestReport {
        lab_rows: parsed_labs.records.len(),
        lab_errors: parsed_labs.errors,
        diagnosis_rows: events.len(),
        diagnosis_errors,
        total_samples: vectors.len(),
        ..Default::default()
    };
    for d in selection.cohort.values() {
        *report.patients.entry(*d).or_default() += 1;
    }
    for e in selection.excluded.values() {
        *report.excluded.entry(*e).or_default() += 1;
    }
    for v in &vectors {
        *report.samples.entry(v.disease).or_default() += 1;
        *report.samples_by_age_group.entry(v.age_group).or_default() += 1;
    }
    write_json(&out.join(COHORT_FILE), &report)?;
    log::info!("{} cohort patients, {} samples", selection.cohort.len(), vectors.len());
    Ok(report)
}

/// Imputes `vectors.csv` per (disease, age group) and writes `imputed.csv`
/// and the fallback notes.
pub fn cmd_impute(config: &PipelineConfig, vectors: &Path, jobs: usize, out: &Path) -> Result<Vec<FallbackNote>> {
    let vectors = read_vectors::<f64>(vectors)?;
    if vectors.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let impute = ImputeConfig {
        seed: stage_seed(config.seed, STAGE_IMPUTE),
        ..config.impute.clone()
    };
    let groups = partition_by_age(vectors);
    let outcome = pool(jobs)?.install(|| impute_subgroups(&groups, &impute))?;
    write_imputed(&out.join(IMPUTED_FILE), &outcome.datasets)?;
    write_json(&out.join(IMPUTATION_NOTES_FILE), &outcome.notes)?;
    Ok(outcome.notes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub age_group: AgeGroup,
    pub algorithm: Algorithm,
    /// `None` when the algorithm had no valid combo.
    pub combo: Option<HyperparamCombo>,
}

/// `selected.json`: the chosen combos and the grid settings needed to re-run them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedFile {
    pub grid: GridConfig,
    pub selections: Vec<SelectedEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    /// Experiments registered across all tables.
    pub experiments: usize,
    pub summary: Vec<SummaryRow>,
}

/// Runs the grid on `imputed.csv`; writes one results table per (age group,
/// algorithm), `summary.csv` and `selected.json`.
pub fn cmd_tune(config: &PipelineConfig, imputed: &Path, jobs: usize, out: &Path) -> Result<TuneOutcome> {
    let datasets = read_imputed::<f64>(imputed)?;
    let grid = config.grid()?;
    let algorithms = config.algorithm_order();
    let tables = run_grid(&datasets, &algorithms, &grid, stage_seed(config.seed, STAGE_TUNE), jobs)?;
    let experiments = tables.iter().map(|t| t.results.len()).sum();
    for t in &tables {
        write_results(&out.join(results_file_name(t.age_group, t.algorithm.slug())), t)?;
    }
    let selections = pool(jobs)?.install(|| select_all(&tables, &datasets, &grid));
    let summary = summary_table(&selections);
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    let file = SelectedFile {
        grid,
        selections: selections
            .iter()
            .map(|s| SelectedEntry {
                age_group: s.age_group,
                algorithm: s.algorithm,
                combo: s.combo,
            })
            .collect(),
    };
    write_json(&out.join(SELECTED_FILE), &file)?;
    log::info!("{experiments} experiments registered");
    Ok(TuneOutcome { experiments, summary })
}

/// Metadata of one age group's projection, recorded in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMeta {
    pub age_group: AgeGroup,
    /// Selection whose clusters color the plot; `None` plots every point as noise.
    pub algorithm: Option<Algorithm>,
    pub combo: Option<HyperparamCombo>,
    pub svg: String,
    pub csv: String,
    /// Points plotted, after stratified subsampling.
    pub points: usize,
    pub samples: usize,
    pub perplexity: Option<f64>,
    pub seed: u64,
    pub final_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReportDocument<'a> {
    #[serde(flatten)]
    report: &'a Report<f64>,
    tsne: &'a TsneOptions,
    projections: &'a [ProjectionMeta],
}

/// The valid selection with the highest composite score (ties: algorithm order).
fn best_selection(selections: &[Selection<f64>], age: AgeGroup) -> Option<&Selection<f64>> {
    selections
        .iter()
        .filter(|s| s.age_group == age)
        .filter(|s| s.result.as_ref().is_some_and(|r| r.bundle.valid))
        .fold(None, |best: Option<&Selection<f64>>, s| {
            let cs = s.result.as_ref().unwrap().bundle.composite;
            match best {
                Some(b) if b.result.as_ref().unwrap().bundle.composite >= cs => Some(b),
                _ => Some(s),
            }
        })
}

fn project(
    dataset: &SubgroupDataset<f64>,
    best: Option<&Selection<f64>>,
    tsne: &TsneOptions,
    seed: u64,
    out: &Path,
) -> Result<ProjectionMeta> {
    let age = dataset.age_group;
    let svg = format!("projection_{}.svg", age.slug());
    let csv = format!("projection_{}.csv", age.slug());
    let chosen = best.and_then(|s| Some((s.combo?, s.result.as_ref()?)));
    let (points, labels, title) = match chosen {
        Some((combo, result)) => {
            let (_, scores) = pca_fit_transform(&dataset.rows, combo.pca_components)?;
            let knob = match (combo.epsilon, combo.n_clusters) {
                (Some(e), _) => format!("ED {e}"),
                (None, Some(k)) => format!("NC {k}"),
                _ => String::new(),
            };
            let title = format!("{age}: {} (PCA {}, {knob})", combo.algorithm, combo.pca_components);
            (scores, result.assignment.labels.clone(), title)
        }
        None => (dataset.rows.clone(), vec![NOISE; dataset.len()], format!("{age}: no valid clustering")),
    };
    let idx = stratified_subsample(&dataset.labels, tsne.max_points, seed);
    let diseases: Vec<DiseaseLabel> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let labels: Vec<i32> = idx.iter().map(|&i| labels[i]).collect();
    let points = points.select_rows(&idx);
    let mut meta = ProjectionMeta {
        age_group: age,
        algorithm: chosen.map(|(c, _)| c.algorithm),
        combo: chosen.map(|(c, _)| c),
        svg: svg.clone(),
        csv: csv.clone(),
        points: idx.len(),
        samples: dataset.len(),
        perplexity: None,
        seed,
        final_kl: None,
    };
    if idx.len() < 4 {
        let empty = Matrix::<f64>::zeros(0, 2);
        emit_scatter(&empty, &[], &[], &format!("{age}: too few samples to project"), &out.join(&svg), &out.join(&csv))?;
        meta.points = 0;
        return Ok(meta);
    }
    let embedding = tsne_embed(&points, tsne, seed)?;
    meta.perplexity = Some(embedding.perplexity);
    meta.final_kl = embedding.kl_trace.last().map(|&(_, kl)| kl);
    emit_scatter(&embedding.coords, &labels, &diseases, &title, &out.join(&svg), &out.join(&csv))?;
    Ok(meta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub report: Report<f64>,
    pub projections: Vec<ProjectionMeta>,
}

/// Re-runs the selected combos, builds cluster reports and projections and
/// writes `report.json`, `report.md` and one SVG/CSV pair per age group.
pub fn cmd_report(
    config: &PipelineConfig,
    imputed: &Path,
    selected: &Path,
    diagnoses: &Path,
    codes: &Path,
    jobs: usize,
    out: &Path,
) -> Result<ReportOutcome> {
    let datasets = read_imputed::<f64>(imputed)?;
    let selected: SelectedFile = read_json(selected)?;
    selected.grid.validate()?;
    let (events, _) = load_diagnoses(diagnoses, config.parse_mode())?;
    let exclude: BTreeSet<String> = match &config.exclude_codes {
        Some(list) => list.iter().cloned().collect(),
        None => defining_codes(&load_disease_codes(codes)?),
    };
    let dataset = |age: AgeGroup| datasets.iter().find(|d| d.age_group == age).expect("all age groups present");
    let workers = pool(jobs)?;

    let selections: Vec<Selection<f64>> = workers.install(|| {
        selected
            .selections
            .par_iter()
            .map(|e| Selection {
                age_group: e.age_group,
                algorithm: e.algorithm,
                combo: e.combo,
                result: e.combo.map(|c| run_experiment(dataset(e.age_group), &c, &selected.grid)),
            })
            .collect()
    });
    let summary = summary_table(&selections);
    let mut clusters = Vec::new();
    for s in &selections {
        if let (Some(combo), Some(r)) = (&s.combo, &s.result) {
            if r.bundle.valid {
                clusters.push(cluster_report(
                    dataset(s.age_group),
                    combo,
                    &r.assignment,
                    r.bundle.composite,
                    r.bundle.silhouette,
                    &events,
                    &exclude,
                )?);
            }
        }
    }
    let report = Report {
        summary,
        clusters,
        excluded_codes: exclude.into_iter().collect(),
    };

    std::fs::create_dir_all(out)?;
    let projections = workers.install(|| {
        datasets
            .par_iter()
            .map(|d| {
                let seed = mix_seed(&[stage_seed(config.seed, STAGE_PROJECT), d.age_group.index() as u64]);
                project(d, best_selection(&selections, d.age_group), &config.tsne, seed, out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let doc = ReportDocument {
        report: &report,
        tsne: &config.tsne,
        projections: &projections,
    };
    write_json(&out.join(REPORT_JSON_FILE), &doc)?;
    let mut md = render_markdown(&report);
    md.push_str("\n## Projections\n\n| Age group | Colored by | Points | File |\n|---|---|---|---|\n");
    for p in &projections {
        let by = p.algorithm.map_or("none".to_string(), |a| a.display_name().to_string());
        md.push_str(&format!("| {} | {} | {} / {} | {} |\n", p.age_group, by, p.points, p.samples, p.svg));
    }
    std::fs::write(out.join(REPORT_MD_FILE), md)?;
    Ok(ReportOutcome { report, projections })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut data = Vec::new();
    std::io::Read::read_to_end(&mut open(path)?, &mut data)?;
    Ok(FileDigest {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bytes: data.len() as u64,
        sha256: hex::encode(Sha256::digest(&data)),
    })
}

/// `run_manifest.json`. Holds nothing that varies between identical runs
/// (no timestamps, no output directory, no thread count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub grid: GridConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Digests the given inputs and every file in `out`, then writes the manifest.
pub fn write_manifest(config: &PipelineConfig, command: &str, inputs: &[PathBuf], out: &Path) -> Result<Manifest> {
    let mut outputs = Vec::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for path in names {
        if path.is_file() && path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            outputs.push(digest_file(&path)?);
        }
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: config.seed,
        config: config.clone(),
        grid: config.grid()?,
        inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
        outputs,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub ingest: IngestReport,
    pub tune: TuneOutcome,
    pub report: ReportOutcome,
    pub manifest: Manifest,
}

/// Every stage in order. Without a `labs` path, a synthetic cohort is
/// generated into `out` first.
pub fn cmd_pipeline(config: &PipelineConfig, jobs: usize) -> Result<PipelineOutcome> {
    config.validate()?;
    let out = config.out.as_path();
    std::fs::create_dir_all(out)?;
    let mut inputs = Vec::new();
    let (labs, diagnoses, codes) = match &config.labs {
        Some(labs) => {
            let diagnoses = config.input(&config.diagnoses, "diagnoses")?;
            let codes = config.input(&config.disease_codes, "disease_codes")?;
            inputs.extend([labs.clone(), diagnoses.clone(), codes.clone()]);
            (labs.clone(), diagnoses, codes)
        }
        None => {
            inputs.extend(config.synth_spec.clone());
            cmd_synth(config, out)?;
            (out.join(LABS_FILE), out.join(DIAGNOSES_FILE), out.join(DISEASE_CODES_FILE))
        }
    };
    let ingest = cmd_ingest(config, &labs, &diagnoses, &codes, out)?;
    cmd_impute(config, &out.join(VECTORS_FILE), jobs, out)?;
    let tune = cmd_tune(config, &out.join(IMPUTED_FILE), jobs, out)?;
    let report = cmd_report(config, &out.join(IMPUTED_FILE), &out.join(SELECTED_FILE), &diagnoses, &codes, jobs, out)?;
    let manifest = write_manifest(config, "pipeline", &inputs, out)?;
    Ok(PipelineOutcome {
        ingest,
        tune,
        report,
        manifest,
    })
}

/// Resolved input for a stage: the explicit argument, else the config value.
pub fn resolve(arg: Option<PathBuf>, config_value: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    arg.or_else(|| config_value.clone())
        .ok_or_else(|| Error::Config(format!("no {name} path given (flag or config)")))
}
