//! Cluster-anchor metric learning on synthetic clustered data.
//!
//! The library trains a small fully-connected encoder in two stages. Stage I
//! shapes the embedding with a classification loss and a batch-hard triplet
//! loss. Stage II replaces the pairwise term with an anchor loss: every class
//! gets a non-parametric anchor aggregated from the whole training set, and
//! each feature is pulled toward the anchor of its class. Anchors are
//! constants at gradient time, so the pull never drags the cluster centers
//! around the way a jointly optimized center does.
//!
//! Modules follow the pipeline:
//!
//! - [`data`]: synthetic clustered datasets, query/gallery splits, text I/O.
//! - [`encoder`]: the f64 MLP encoder with analytic backprop and checkpoints.
//! - [`losses`]: classification, triplet, anchor, and center losses.
//! - [`anchors`]: anchor aggregation (average, confidence-weighted), the
//!   streaming EMA update, and the update schedules.
//! - [`sampler`]: identity-balanced PK batches and plain shuffled batches.
//! - [`trainer`]: the two-stage loop, momentum SGD, warmup + step decay,
//!   checkpoint resume, and the line-delimited JSON train log.
//! - [`eval`]: rank@k / mAP retrieval evaluation, cluster compactness stats,
//!   and the multi-seed variance experiment.
//! - [`cli`]: the `anchorset` binary (gen-data, train, eval, export-anchors,
//!   ablate, variance).
//!
//! Each capability has a runnable example:
//!
//! ```text
//! cargo run --example generate_data
//! cargo run --example gradient_check
//! cargo run --example anchor_updates
//! cargo run --example train_two_stage
//! cargo run --example evaluate_retrieval
//! cargo run --example export_anchors
//! cargo run --example ablation_e_start
//! cargo run --example seed_variance
//! ```

pub mod anchors;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod sampler;
pub mod trainer;
pub(crate) mod util;

/// Errors shared across the toolkit. Variants map onto the CLI exit codes:
/// `Config` is a usage error (1), `Parse`/`Data`/`Shape`/`DegenerateBatch`
/// are data errors (2), `TrainingAbort` is a training abort (3), and
/// `Io`/`Json` are I/O errors (4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("training aborted at epoch {epoch}, iteration {iteration}: {msg}")]
    TrainingAbort {
        epoch: usize,
        iteration: usize,
        msg: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Shape(_)
            | Error::DegenerateBatch(_) => 2,
            Error::TrainingAbort { .. } => 3,
            Error::Io(_) | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
