//! Clustering pipeline for lymphocyte-panel lab data from inborn errors of immunity.
//!
//! Lab records are flattened per encounter, normalized against site reference
//! ranges, imputed per disease/age stratum, clustered by five algorithms under an
//! exhaustive hyperparameter grid and summarized per cluster.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the pipeline uses.

pub mod clustering;
pub mod error;
pub mod imputation;
pub mod io;
pub mod ingestion;
mod linalg;
pub mod metrics;
pub mod matrix;
pub mod normalization;
pub mod pipeline;
pub mod projection;
pub mod reporting;
pub mod scalar;
pub mod seed;
pub mod synthgen;
pub mod tuning;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type LabVector64 = normalization::LabVector<f64>;
pub type SubgroupDataset64 = imputation::SubgroupDataset<f64>;
pub type PcaModel64 = clustering::PcaModel<f64>;
pub type MetricsBundle64 = metrics::MetricsBundle<f64>;
pub type ExperimentResult64 = tuning::ExperimentResult<f64>;
pub type Selection64 = tuning::Selection<f64>;
pub type ClusterReport64 = reporting::ClusterReport<f64>;
pub type Report64 = reporting::Report<f64>;
pub type Embedding2D64 = projection::Embedding2D<f64>;
