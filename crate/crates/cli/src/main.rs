use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lymphoclust::clustering::Algorithm;
use lymphoclust::pipeline::{
    cmd_impute, cmd_ingest, cmd_pipeline, cmd_report, cmd_synth, cmd_tune, resolve, write_manifest, PipelineConfig,
    IMPUTED_FILE, SELECTED_FILE, VECTORS_FILE,
};
use lymphoclust::Error;

/// Lymphocyte-panel clustering pipeline.
///
/// Exit codes: 0 success, 2 usage error, 3 missing file, 4 invalid config,
/// 5 malformed input data, 6 empty cohort, 7 no valid results, 8 I/O failure,
/// 1 anything else. Failures print one JSON line on stderr.
#[derive(Debug, Parser)]
#[command(name = "lymphoclust", version, about, long_about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Never changes the output.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Abort on the first malformed input row.
    #[arg(long, global = true)]
    strict_parse: bool,
    /// Lock the hyperparameter grid to its defaults.
    #[arg(long, global = true)]
    paper_mode: bool,
}

#[derive(Debug, Args)]
struct Inputs {
    #[arg(long)]
    labs: Option<PathBuf>,
    #[arg(long)]
    diagnoses: Option<PathBuf>,
    /// disease_codes.json
    #[arg(long)]
    codes: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (labs.csv, diagnoses.csv, disease_codes.json, ground_truth.csv).
    Synth {
        /// Cohort spec JSON; the demo spec is used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Patient-count multiplier for the demo spec.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Select the cohort and flatten encounters into vectors.csv.
    Ingest {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Impute missing labs per disease and age group into imputed.csv.
    Impute {
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Run the hyperparameter grid; writes results tables, summary.csv and selected.json.
    Tune {
        #[arg(long)]
        imputed: Option<PathBuf>,
        /// Comma-separated subset, e.g. kmeans,agglom.
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<Algorithm>>,
    },
    /// Cluster reports and projections for the selected combos.
    Report {
        #[arg(long)]
        imputed: Option<PathBuf>,
        #[arg(long)]
        selected: Option<PathBuf>,
        #[arg(long)]
        diagnoses: Option<PathBuf>,
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// All stages in order; synthesizes a cohort when no labs are given.
    Pipeline {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<Algorithm>>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "missing_file" => 3,
        "invalid_config" => 4,
        "malformed_input" => 5,
        "empty_cohort" => 6,
        "no_valid_results" => 7,
        "io" => 8,
        _ => 1,
    }
}

fn run(cli: Cli) -> lymphoclust::Result<()> {
    let g = cli.global;
    let mut config = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(out) = g.out {
        config.out = out;
    }
    config.strict_parse |= g.strict_parse;
    config.paper_mode |= g.paper_mode;
    let jobs = g
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let out = config.out.clone();
    let mut inputs_of = |labs: Option<PathBuf>, diagnoses: Option<PathBuf>, codes: Option<PathBuf>| {
        config.labs = labs.or(config.labs.take());
        config.diagnoses = diagnoses.or(config.diagnoses.take());
        config.disease_codes = codes.or(config.disease_codes.take());
    };

    match cli.command {
        Command::Synth { spec, scale } => {
            config.synth_spec = spec.or(config.synth_spec);
            config.synth_scale = scale.unwrap_or(config.synth_scale);
            config.validate()?;
            cmd_synth(&config, &out)?;
            write_manifest(&config, "synth", &config.synth_spec.iter().cloned().collect::<Vec<_>>(), &out)?;
        }
        Command::Ingest { inputs } => {
            inputs_of(inputs.labs, inputs.diagnoses, inputs.codes);
            config.validate()?;
            let labs = resolve(None, &config.labs, "labs")?;
            let diagnoses = resolve(None, &config.diagnoses, "diagnoses")?;
            let codes = resolve(None, &config.disease_codes, "disease_codes")?;
            std::fs::create_dir_all(&out)?;
            cmd_ingest(&config, &labs, &diagnoses, &codes, &out)?;
            write_manifest(&config, "ingest", &[labs, diagnoses, codes], &out)?;
        }
        Command::Impute { vectors } => {
            config.validate()?;
            let vectors = vectors.unwrap_or_else(|| out.join(VECTORS_FILE));
            cmd_impute(&config, &vectors, jobs, &out)?;
            write_manifest(&config, "impute", &[vectors], &out)?;
        }
        Command::Tune { imputed, algorithms } => {
            if let Some(a) = algorithms {
                config.algorithms = a;
            }
            config.validate()?;
            let imputed = imputed.unwrap_or_else(|| out.join(IMPUTED_FILE));
            cmd_tune(&config, &imputed, jobs, &out)?;
            write_manifest(&config, "tune", &[imputed], &out)?;
        }
        Command::Report {
            imputed,
            selected,
            diagnoses,
            codes,
        } => {
            inputs_of(None, diagnoses, codes);
            config.validate()?;
            let imputed = imputed.unwrap_or_else(|| out.join(IMPUTED_FILE));
            let selected = selected.unwrap_or_else(|| out.join(SELECTED_FILE));
            let diagnoses = resolve(None, &config.diagnoses, "diagnoses")?;
            let codes = resolve(None, &config.disease_codes, "disease_codes")?;
            cmd_report(&config, &imputed, &selected, &diagnoses, &codes, jobs, &out)?;
            write_manifest(&config, "report", &[imputed, selected, diagnoses, codes], &out)?;
        }
        Command::Pipeline {
            inputs,
            spec,
            scale,
            algorithms,
        } => {
            inputs_of(inputs.labs, inputs.diagnoses, inputs.codes);
            config.synth_spec = spec.or(config.synth_spec);
            config.synth_scale = scale.unwrap_or(config.synth_scale);
            if let Some(a) = algorithms {
                config.algorithms = a;
            }
            let outcome = cmd_pipeline(&config, jobs)?;
            log::info!(
                "{} experiments, {} summary rows written to {}",
                outcome.tune.experiments,
                outcome.tune.summary.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({
                "error": e.kind(),
                "exit_code": code,
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
