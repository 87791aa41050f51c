//! Masked conditional density estimation for mixed-type tabular data.
//!
//! Continuous columns are mapped through their empirical CDF onto a bin grid
//! and every column becomes a classification target. A transformer encoder is
//! trained to predict randomly masked cells from the visible ones, which gives
//! it every conditional `p(x_j | x_S)`. Synthesis fills an all-masked row one
//! column at a time in random order; imputation fills only the missing cells.

pub mod cdf;
pub mod checkpoint;
pub mod dataset;
pub mod discretize;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod masking;
pub mod model;
pub mod oracle;
pub mod rng;

pub use cdf::EmpiricalCdf;
pub use dataset::{ColumnKind, ColumnSpec, Schema, Table};
pub use discretize::{BinGrid, LabelMatrix, Marginals};
pub use error::{Error, Result};
pub use masking::{MaskVector, Mechanism};
pub use model::{FittedModel, ModelConfig, ModelParams};
pub use generate::{ImputationPool, RubinResult, SynthesisConfig};
pub use metrics::MetricsReport;
