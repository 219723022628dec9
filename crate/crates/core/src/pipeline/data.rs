use crate::config::{RunConfig, SegmentConfig};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ingest::DatasetManifest;
use crate::nnet::Tensor;

use super::extract::CachePaths;

/// Cached, segmented features of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub label: usize,
    /// `(segments · audio_frames) × n_mels`
    pub audio: FeatureMatrix,
    /// `(segments · movement_frames) × 119`
    pub movement: FeatureMatrix,
}

impl ClipFeatures {
    /// Number of paired segments; extra segments of the longer modality are ignored.
    pub fn segments(&self, seg: &SegmentConfig) -> usize {
        (self.audio.rows() / seg.audio_frames).min(self.movement.rows() / seg.movement_frames)
    }
}

/// Loads the cached features of `ids`, in that order.
pub fn load_clips(cfg: &RunConfig, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<ClipFeatures>> {
    ids.iter()
        .map(|id| {
            let entry = manifest
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("clip `{id}` is not in the manifest")))?;
            let paths = CachePaths::new(&cfg.paths.cache_dir, id);
            if !paths.key.exists() {
                return Err(Error::Cache(format!(
                    "no cached features for clip `{id}` in {}; run `extract` first",
                    cfg.paths.cache_dir.display()
                )));
            }
            let clip = ClipFeatures {
                clip_id: id.clone(),
                label: entry.style.index(),
                audio: FeatureMatrix::load(&paths.audio)?,
                movement: FeatureMatrix::load(&paths.movement)?,
            };
            if clip.segments(&cfg.segments) == 0 {
                return Err(Error::Cache(format!("clip `{id}` has no complete segment")));
            }
            Ok(clip)
        })
        .collect()
}

/// `(clip index, segment index)` for every paired segment of `clips`.
pub fn segment_refs(clips: &[ClipFeatures], seg: &SegmentConfig) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.segments(seg)).map(move |s| (c, s)))
        .collect()
}

/// Audio segments as a `[batch, frames, n_mels, 1]` tensor.
pub fn audio_batch(clips: &[ClipFeatures], refs: &[(usize, usize)], seg: &SegmentConfig) -> Tensor {
    let cols = clips[refs[0].0].audio.cols();
    let len = seg.audio_frames * cols;
    let mut data = Vec::with_capacity(refs.len() * len);
    for &(c, s) in refs {
        data.extend(clips[c].audio.data()[s * len..(s + 1) * len].iter().map(|&v| v as f64));
    }
    Tensor::new(vec![refs.len(), seg.audio_frames, cols, 1], data)
}

/// Movement segments as a `[batch, frames, features]` tensor.
pub fn movement_batch(clips: &[ClipFeatures], refs: &[(usize, usize)], seg: &SegmentConfig) -> Tensor {
    let cols = clips[refs[0].0].movement.cols();
    let len = seg.movement_frames * cols;
    let mut data = Vec::with_capacity(refs.len() * len);
    for &(c, s) in refs {
        data.extend(clips[c].movement.data()[s * len..(s + 1) * len].iter().map(|&v| v as f64));
    }
    Tensor::new(vec![refs.len(), seg.movement_frames, cols], data)
}
