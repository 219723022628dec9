//! End-to-end steps behind the command-line tool: feature extraction into a
//! content-addressed cache, per-fold training, evaluation and retrieval.

mod data;
mod evaluate;
mod extract;
mod retrieve;
mod train;

pub use data::{audio_batch, load_clips, movement_batch, segment_refs, ClipFeatures};
pub use evaluate::{check_fold, embed_objects, evaluate, AUDIO_TO_MOVEMENT, MOVEMENT_TO_AUDIO};
pub use extract::{
    audio_features, extract, load_target, movement_features, select_target, stack_segments, target_path,
    CachePaths, ExtractSummary, TargetFrame,
};
pub use retrieve::{embed_query, retrieve, Direction, Hit};
pub use train::{branch_outputs, build_branches, mix_seed, train_model, untrained_model};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{stratified_folds, DatasetManifest, FoldAssignment};
use crate::report::RetrievalReport;

fn check_fold_index(cfg: &RunConfig, fold: usize) -> Result<()> {
    if fold >= cfg.eval.folds {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} does not exist ({} folds)",
            cfg.eval.folds
        )));
    }
    Ok(())
}

pub fn folds_for(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<FoldAssignment> {
    stratified_folds(manifest, cfg.eval.folds, cfg.eval.fold_seed)
}

/// Trains run `run` of `fold` from the cache. With `untrained`, builds the
/// chance-level reference model instead.
pub fn train_fold(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    fold: usize,
    run: usize,
    untrained: bool,
) -> Result<Checkpoint> {
    check_fold_index(cfg, fold)?;
    let folds = folds_for(cfg, manifest)?;
    let target = load_target(&cfg.paths.cache_dir)?;
    let clips = load_clips(cfg, manifest, &folds.train_ids(fold))?;
    if untrained {
        untrained_model(cfg, &clips, fold, run, &target)
    } else {
        train_model(cfg, &clips, fold, run, &target)
    }
}

/// Evaluates the checkpoints of one fold on its held-out clips.
pub fn evaluate_fold(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    checkpoints: &[Checkpoint],
    fold: usize,
) -> Result<RetrievalReport> {
    check_fold_index(cfg, fold)?;
    let folds = folds_for(cfg, manifest)?;
    let test = load_clips(cfg, manifest, &folds.test_ids(fold))?;
    evaluate(cfg, checkpoints, &test, &folds, fold)
}
