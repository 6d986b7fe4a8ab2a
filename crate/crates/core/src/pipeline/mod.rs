//! Self-supervised training-pair construction and the end-to-end run.

mod blocks;
mod build;
mod pairs;
mod run;
mod standardize;

pub use blocks::{augment_flip, block_corners, extract_blocks, extract_blocks_with, flip_pair, DEFAULT_MIN_COVERAGE};
pub use build::{all_data_target, average_denoised, build_selfsup_pairs, build_supervised_pairs, pair_scheme};
pub use pairs::TrainingPair;
pub use run::{
    designed_scheme, evaluate, load_subject, make_blocks, max_pair_gap, obtain_model, output_scheme, resolve_plan, run_pipeline,
    standardize_pair, PipelineOutput, Subject, Truth,
};
pub use standardize::{destandardize, standardize, standardize_with, StandardizationParams};
