use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;

use crate::audiofeat::MelExtractor;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dcca::View;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ingest::{load_audio, load_pose_track, DatasetManifest};
use crate::nnet::{Branch, Mode, Tensor};
use crate::posefeat::NormalizationParams;
use crate::retrieval::{object_embedding, rank_order, similarity_matrix};

use super::data::load_clips;
use super::evaluate::embed_objects;
use super::extract::{audio_features, movement_features, CachePaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Audio query, ranked dance (pose) candidates.
    AudioToMovement,
    /// Pose query, ranked audio candidates.
    MovementToAudio,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio-to-movement" | "a2m" => Ok(Direction::AudioToMovement),
            "movement-to-audio" | "m2a" => Ok(Direction::MovementToAudio),
            _ => Err(Error::InvalidArgument(format!(
                "unknown direction `{s}` (expected audio-to-movement or movement-to-audio)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AudioToMovement => "audio-to-movement",
            Direction::MovementToAudio => "movement-to-audio",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub rank: usize,
    pub clip_id: String,
    pub score: f64,
}

/// Runs a stacked segment matrix through one branch and its CCA view.
fn embed_segments(branch: &Branch, ckpt: &Checkpoint, view: View, m: &FeatureMatrix, frames: usize) -> Result<Vec<f64>> {
    let n = m.rows() / frames;
    if n == 0 {
        return Err(Error::InvalidArgument("query is shorter than one segment".into()));
    }
    let mut shape = vec![n, frames, m.cols()];
    if view == View::X {
        shape.push(1);
    }
    let data = m.data()[..n * frames * m.cols()].iter().map(|&v| v as f64).collect();
    let out = branch.forward(&Tensor::new(shape, data), Mode::Eval)?.output;
    let rows = DMatrix::from_row_slice(out.shape[0], out.shape[1], &out.data);
    object_embedding(&ckpt.cca.project(&rows, view)?)
}

/// Embeds one query file of the direction's query modality.
pub fn embed_query(cfg: &RunConfig, ckpt: &Checkpoint, query: &Path, direction: Direction) -> Result<Vec<f64>> {
    match direction {
        Direction::AudioToMovement => {
            let mel = MelExtractor::new(&cfg.mel)?;
            let m = audio_features(&load_audio(query)?, &mel, &cfg.segments)?;
            embed_segments(&ckpt.audio, ckpt, View::X, &m, cfg.segments.audio_frames)
        }
        Direction::MovementToAudio => {
            let params = NormalizationParams {
                tolerance: cfg.pose.tolerance(),
                target: ckpt.meta.target,
            };
            let m = movement_features(&load_pose_track(query, cfg.pose.frames)?, &params, &cfg.segments)?;
            embed_segments(&ckpt.movement, ckpt, View::Y, &m, cfg.segments.movement_frames)
        }
    }
}

/// Ranks every cached clip of the manifest against one query file.
pub fn retrieve(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    query: &Path,
    direction: Direction,
) -> Result<Vec<Hit>> {
    let ids: Vec<String> = manifest
        .entries()
        .iter()
        .map(|e| e.clip_id.clone())
        .filter(|id| {
            let cached = CachePaths::new(&cfg.paths.cache_dir, id).key.exists();
            if !cached {
                warn!("clip {id} has no cached features and is not indexed");
            }
            cached
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "the index is empty: no cached features in {}",
            cfg.paths.cache_dir.display()
        )));
    }
    let q = embed_query(cfg, ckpt, query, direction)?;
    let clips = load_clips(cfg, manifest, &ids)?;
    let (audio, movement) = embed_objects(cfg, ckpt, &clips)?;
    let candidates = match direction {
        Direction::AudioToMovement => movement,
        Direction::MovementToAudio => audio,
    };
    let scores = similarity_matrix(&[q], &candidates).remove(0);
    Ok(rank_order(&scores, &ids)
        .into_iter()
        .enumerate()
        .map(|(r, c)| Hit {
            rank: r + 1,
            clip_id: ids[c].clone(),
            score: scores[c],
        })
        .collect())
}
