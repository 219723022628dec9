//! Dataset ingestion: manifests, WAV audio, pose tracks and fold assignment.
//!
//! All loaders are pure functions of file content.

pub mod audio;
pub mod folds;
pub mod manifest;
pub mod pose;

pub use audio::{load_audio, resample, write_wav, AudioClip, TARGET_SAMPLE_RATE};
pub use folds::{stratified_folds, FoldAssignment};
pub use manifest::{load_manifest, parse_manifest, write_manifest, DanceStyle, DatasetManifest, ManifestEntry};
pub use pose::{
    format_pose_track, load_pose_track, parse_pose_track, write_pose_track, Keypoint, Point, PoseTrack,
    SkeletonFrame, DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_HEIGHT, DEFAULT_WIDTH, NUM_COORDS, NUM_KEYPOINTS,
};
