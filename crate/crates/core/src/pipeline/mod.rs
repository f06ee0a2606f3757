//! End-to-end orchestration: corpus, configuration, training, synthesis,
//! stitching and file formats.

pub mod config;
pub mod corpus;
pub mod run;
pub mod stitch;
pub mod train;
pub mod trajfile;

pub use config::{PipelineConfig, TrainConfig, SEED_ENV};
pub use corpus::{generate_synthetic_corpus, Corpus, CorpusSpec, Piece, Split};
pub use run::{evaluate_output, evaluate_pieces, run_pipeline, run_pipeline_partial, CorpusReport, Models, PipelineOutput, Stage};
pub use stitch::{stitch_windows, StitchConfig};
pub use train::{build_priors, train_all, train_stage, StageReport};
pub use trajfile::TrajectoryFile;
