use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::MelExtractor;
use crate::config::{hex, RunConfig, SegmentConfig};
use crate::error::{Error, Result};
use crate::features::{segment_features, FeatureMatrix};
use crate::ingest::{load_audio, load_pose_track, stratified_folds, AudioClip, DatasetManifest, ManifestEntry, PoseTrack};
use crate::posefeat::{derive_movement_features, normalize_track, NormalizationParams, TargetFrameStats};

/// Bumped whenever the cached representation changes.
const CACHE_FORMAT: &str = "dancecca-features-v1";

/// The clip whose geometry every pose track is normalized against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFrame {
    pub clip_id: String,
    pub stats: TargetFrameStats,
}

/// Cache file locations of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CachePaths {
    pub audio: PathBuf,
    pub movement: PathBuf,
    pub key: PathBuf,
}

impl CachePaths {
    pub fn new(cache_dir: &Path, clip_id: &str) -> Self {
        CachePaths {
            audio: cache_dir.join("audio").join(format!("{clip_id}.bin")),
            movement: cache_dir.join("movement").join(format!("{clip_id}.bin")),
            key: cache_dir.join("keys").join(format!("{clip_id}.sha256")),
        }
    }
}

pub fn target_path(cache_dir: &Path) -> PathBuf {
    cache_dir.join("target.toml")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractSummary {
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
    /// `(clip_id, error)` for every clip that could not be processed.
    pub failures: Vec<(String, String)>,
    pub target: Option<TargetFrame>,
}

/// Stacks the overlapping segments of `m` into one `(count · len) × cols` matrix.
pub fn stack_segments(m: &FeatureMatrix, len: usize, hop: usize) -> Result<FeatureMatrix> {
    let batch = segment_features(m, len, hop)?;
    let mut data = Vec::with_capacity(batch.len() * len * m.cols());
    for seg in batch.iter() {
        data.extend_from_slice(seg.data);
    }
    FeatureMatrix::new(batch.len() * len, m.cols(), data)
}

/// Segmented log-mel features of one clip.
pub fn audio_features(clip: &AudioClip, mel: &MelExtractor, seg: &SegmentConfig) -> Result<FeatureMatrix> {
    stack_segments(&mel.compute(clip)?, seg.audio_frames, seg.audio_hop)
}

/// Segmented movement features of one pose track.
pub fn movement_features(track: &PoseTrack, params: &NormalizationParams, seg: &SegmentConfig) -> Result<FeatureMatrix> {
    let norm = normalize_track(track, params)?;
    stack_segments(&derive_movement_features(&norm.track), seg.movement_frames, seg.movement_hop)
}

/// Picks the target clip: the configured one, or the lexicographically first
/// training clip of fold 0 whose geometry is usable.
pub fn select_target(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<TargetFrame> {
    let tol = cfg.pose.tolerance();
    let stats_of = |id: &str| -> Result<TargetFrameStats> {
        let entry = manifest
            .get(id)
            .ok_or_else(|| Error::Config(format!("target clip `{id}` is not in the manifest")))?;
        let track = load_pose_track(&entry.pose_path, cfg.pose.frames)?;
        TargetFrameStats::from_track(&track, &tol)
    };
    if let Some(id) = &cfg.pose.target_clip_id {
        let stats = stats_of(id).map_err(|e| Error::Config(format!("target clip `{id}`: {e}")))?;
        return Ok(TargetFrame { clip_id: id.clone(), stats });
    }
    let folds = stratified_folds(manifest, cfg.eval.folds, cfg.eval.fold_seed)?;
    for id in folds.train_ids(0) {
        match stats_of(&id) {
            Ok(stats) => return Ok(TargetFrame { clip_id: id, stats }),
            Err(e) => warn!("clip {id} cannot serve as target frame: {e}"),
        }
    }
    Err(Error::DegenerateGeometry("no training clip of fold 0 has usable target geometry".into()))
}

fn cache_key(cfg: &RunConfig, target: &TargetFrame, entry: &ManifestEntry) -> Result<String> {
    #[derive(Serialize)]
    struct KeyInputs<'a> {
        format: &'a str,
        mel: &'a crate::audiofeat::MelConfig,
        segments: &'a SegmentConfig,
        alpha: f64,
        epsilon: f64,
        frames: usize,
        target: &'a TargetFrame,
    }
    let inputs = KeyInputs {
        format: CACHE_FORMAT,
        mel: &cfg.mel,
        segments: &cfg.segments,
        alpha: cfg.pose.alpha,
        epsilon: cfg.pose.epsilon,
        frames: cfg.pose.frames,
        target,
    };
    let mut h = Sha256::new();
    h.update(toml::to_string(&inputs).expect("key inputs serialize").as_bytes());
    for path in [&entry.audio_path, &entry.pose_path] {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

enum Outcome {
    Computed,
    Skipped,
}

fn extract_clip(
    cfg: &RunConfig,
    target: &TargetFrame,
    params: &NormalizationParams,
    mel: &MelExtractor,
    entry: &ManifestEntry,
) -> Result<Outcome> {
    let paths = CachePaths::new(&cfg.paths.cache_dir, &entry.clip_id);
    let key = cache_key(cfg, target, entry)?;
    let fresh = fs::read_to_string(&paths.key).is_ok_and(|k| k.trim() == key)
        && paths.audio.exists()
        && paths.movement.exists();
    if fresh {
        return Ok(Outcome::Skipped);
    }
    let audio = audio_features(&load_audio(&entry.audio_path)?, mel, &cfg.segments)?;
    let track = load_pose_track(&entry.pose_path, cfg.pose.frames)?;
    let movement = movement_features(&track, params, &cfg.segments)?;
    write_atomic(&paths.audio, &audio.to_bytes())?;
    write_atomic(&paths.movement, &movement.to_bytes())?;
    // Written last so an interrupted run never leaves a valid key behind.
    write_atomic(&paths.key, key.as_bytes())?;
    Ok(Outcome::Computed)
}

/// Computes segmented features for every manifest clip, skipping clips
/// whose cached features already match their inputs. Per-clip failures are
/// collected rather than aborting the run.
pub fn extract(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<ExtractSummary> {
    let cache = &cfg.paths.cache_dir;
    for sub in ["audio", "movement", "keys"] {
        let d = cache.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let target = select_target(cfg, manifest)?;
    info!("target frame: clip {}", target.clip_id);
    write_atomic(&target_path(cache), toml::to_string(&target).expect("target serializes").as_bytes())?;
    let params = NormalizationParams {
        tolerance: cfg.pose.tolerance(),
        target: target.stats,
    };
    let mel = MelExtractor::new(&cfg.mel)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(String, Result<Outcome>)> = pool.install(|| {
        manifest
            .entries()
            .par_iter()
            .map(|e| (e.clip_id.clone(), extract_clip(cfg, &target, &params, &mel, e)))
            .collect()
    });
    let mut summary = ExtractSummary {
        target: Some(target),
        ..Default::default()
    };
    for (id, r) in results {
        match r {
            Ok(Outcome::Computed) => summary.computed.push(id),
            Ok(Outcome::Skipped) => summary.skipped.push(id),
            Err(e) => {
                warn!("clip {id}: {e}");
                summary.failures.push((id, e.to_string()));
            }
        }
    }
    Ok(summary)
}

/// Reads the target frame chosen by the last extraction.
pub fn load_target(cache_dir: &Path) -> Result<TargetFrame> {
    let path = target_path(cache_dir);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Cache(format!("{} not found; run `extract` first", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))
}
