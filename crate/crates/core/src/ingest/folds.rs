use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DanceStyle, DatasetManifest};
use crate::error::{Error, Result};

/// Style-stratified assignment of clips to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold(&self, clip_id: &str) -> Option<usize> {
        self.fold_of.get(clip_id).copied()
    }

    /// Clip ids held out when evaluating `fold`, sorted.
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Clip ids used for training when `fold` is held out, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_of.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles each style's clips with `seed` and deals them round-robin.
///
/// The dealing position carries over from one style to the next so overall
/// fold sizes also differ by at most one.
pub fn stratified_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut by_style: BTreeMap<DanceStyle, Vec<&str>> = BTreeMap::new();
    for e in manifest.entries() {
        by_style.entry(e.style).or_default().push(&e.clip_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut next = 0usize;
    for (style, ids) in &mut by_style {
        if ids.len() < k {
            return Err(Error::InvalidArgument(format!(
                "style {style} has {} clip(s), fewer than {k} folds",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            fold_of.insert((*id).to_string(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, seed, fold_of })
}
