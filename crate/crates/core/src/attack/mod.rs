//! Profiled label recovery from timing features, and membership inference.

mod dataset;
mod mia;
mod mlp;

pub use dataset::{build_attack_dataset, split_dataset, split_indices, AttackDataset, AttackHeader};
pub use mia::{
    default_ratios, fit_s1, mia_evaluate, mia_run, overlap_evaluate, overlap_models, overlap_subset,
    overlap_sweep, retrain, score_model, train_mia_models, MIAResult, MiaConfig, MiaOutcome,
    OverlapSweepResult, RetrainMode, S1Stage,
};
pub use mlp::{
    evaluate, grid_search, mlp_train, stratified_folds, Activation, ConfusionMatrix, GridResult,
    MLPSpec, Mlp, Standardizer,
};
