//! Pose normalization into a shared target frame space and the 119-column
//! movement features (28 coordinates plus 91 pairwise joint distances).
//!
//! Image y grows downward, so the ankle nearest the camera has the largest y.
//! Normalization scales y only, interpolating between the height ratios of
//! the near and far ankle clusters, then translates the track so the median
//! mean-ankle position is the origin.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ingest::{Keypoint, Point, PoseTrack, NUM_COORDS, NUM_KEYPOINTS};

pub const NUM_DISTANCES: usize = NUM_KEYPOINTS * (NUM_KEYPOINTS - 1) / 2;
pub const NUM_MOVEMENT_FEATURES: usize = NUM_COORDS + NUM_DISTANCES;

/// Tolerances of the far-ankle search: a candidate must sit about as far
/// above the median as the nearest ankle sits below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnkleTolerance {
    pub alpha: f64,
    /// In the pose files' pixel units.
    pub epsilon: f64,
}

impl Default for AnkleTolerance {
    fn default() -> Self {
        AnkleTolerance {
            alpha: 1.0,
            epsilon: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnkleStats {
    pub clo: f64,
    pub med: f64,
    pub far: f64,
    pub avg: f64,
}

/// Reference geometry every clip is projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetFrameStats {
    pub heig_clo: f64,
    pub heig_far: f64,
    pub ankle: AnkleStats,
}

impl TargetFrameStats {
    pub fn from_track(track: &PoseTrack, tol: &AnkleTolerance) -> Result<Self> {
        let ankle = ankle_statistics(track, tol)?;
        let (heig_clo, heig_far) = cluster_heights(track, &ankle)?;
        if !(heig_clo > 0.0 && heig_far > 0.0) {
            return Err(Error::DegenerateGeometry(
                "target heights must be positive".into(),
            ));
        }
        Ok(TargetFrameStats {
            heig_clo,
            heig_far,
            ankle,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub tolerance: AnkleTolerance,
    pub target: TargetFrameStats,
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn pooled_ankle_y(track: &PoseTrack) -> Vec<f64> {
    track
        .frames
        .iter()
        .flat_map(|f| [f.get(Keypoint::LeftAnkle).y, f.get(Keypoint::RightAnkle).y])
        .collect()
}

/// Near, median, far and mean ankle y over both ankles in all frames.
///
/// The far ankle is the largest y above the median whose distance to the
/// median matches `alpha` times the near-to-median distance within `epsilon`:
/// `| |y − med| − α·|clo − med| | < ε`.
pub fn ankle_statistics(track: &PoseTrack, tol: &AnkleTolerance) -> Result<AnkleStats> {
    if track.is_empty() {
        return Err(Error::IncompleteTrack("no frames".into()));
    }
    let ys = pooled_ankle_y(track);
    let clo = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let med = median(&ys);
    let avg = ys.iter().sum::<f64>() / ys.len() as f64;
    let reach = tol.alpha * (clo - med).abs();
    let far = ys
        .iter()
        .copied()
        .filter(|&y| y < med && ((y - med).abs() - reach).abs() < tol.epsilon)
        .fold(None, |best: Option<f64>, y| Some(best.map_or(y, |b| b.max(y))))
        .ok_or(Error::NoFarAnkle)?;
    Ok(AnkleStats { clo, med, far, avg })
}

/// Maximum head-to-ankle heights of the frames nearer the close ankle level
/// and of those nearer the far level. Equidistant frames join neither.
pub fn cluster_heights(track: &PoseTrack, stats: &AnkleStats) -> Result<(f64, f64)> {
    let mut clo: Option<f64> = None;
    let mut far: Option<f64> = None;
    for f in &track.frames {
        let ankle = f.mean_ankle().y;
        let height = (f.get(Keypoint::Head).y - ankle).abs();
        let d_clo = (ankle - stats.clo).abs();
        let d_far = (ankle - stats.far).abs();
        let slot = if d_clo < d_far {
            &mut clo
        } else if d_clo > d_far {
            &mut far
        } else {
            continue;
        };
        *slot = Some(slot.map_or(height, |h| h.max(height)));
    }
    Ok((
        clo.ok_or(Error::EmptyHeightCluster("clo"))?,
        far.ok_or(Error::EmptyHeightCluster("far"))?,
    ))
}

/// Interpolated y scale between the far-cluster and close-cluster height
/// ratios, weighted by where the mean ankle sits between far and close.
pub fn compute_scale(src: &AnkleStats, src_heights: (f64, f64), tgt: &TargetFrameStats) -> Result<f64> {
    let (heig_clo, heig_far) = src_heights;
    if !(heig_clo > 0.0 && heig_far > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "source heights ({heig_clo}, {heig_far}) must be positive"
        )));
    }
    let span = src.clo - src.far;
    if span == 0.0 {
        return Err(Error::DegenerateGeometry(
            "close and far ankle levels coincide".into(),
        ));
    }
    let far_ratio = tgt.heig_far / heig_far;
    let clo_ratio = tgt.heig_clo / heig_clo;
    let weight = (src.avg - src.far) / span;
    let s = far_ratio + weight * (clo_ratio - far_ratio);
    if !s.is_finite() {
        return Err(Error::DegenerateGeometry(format!("scale {s}")));
    }
    Ok(s)
}

/// Scale applied to a track and whether degenerate geometry forced a fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutcome {
    pub scale: f64,
    pub fallback: Option<String>,
}

fn max_height(track: &PoseTrack) -> f64 {
    track
        .frames
        .iter()
        .map(|f| (f.get(Keypoint::Head).y - f.mean_ankle().y).abs())
        .fold(0.0, f64::max)
}

/// [`compute_scale`] with fallbacks: when only the far side is degenerate the
/// close-cluster ratio is used; otherwise the scale is 1.
pub fn scale_for_track(track: &PoseTrack, params: &NormalizationParams) -> Result<ScaleOutcome> {
    let tgt = &params.target;
    let close_only = |heig_clo: f64, why: String| {
        if heig_clo > 0.0 {
            ScaleOutcome {
                scale: tgt.heig_clo / heig_clo,
                fallback: Some(why),
            }
        } else {
            ScaleOutcome {
                scale: 1.0,
                fallback: Some(format!("{why}; zero close height, scale 1")),
            }
        }
    };
    let stats = match ankle_statistics(track, &params.tolerance) {
        Ok(s) => s,
        Err(Error::NoFarAnkle) => {
            // Without a far level every frame belongs to the close cluster.
            return Ok(close_only(max_height(track), "no far ankle".into()));
        }
        Err(e) => return Err(e),
    };
    let heights = match cluster_heights(track, &stats) {
        Ok(h) => h,
        Err(Error::EmptyHeightCluster("far")) => {
            return Ok(close_only(max_height(track), "empty far cluster".into()));
        }
        Err(Error::EmptyHeightCluster(which)) => {
            return Ok(ScaleOutcome {
                scale: 1.0,
                fallback: Some(format!("empty {which} cluster")),
            });
        }
        Err(e) => return Err(e),
    };
    match compute_scale(&stats, heights, tgt) {
        Ok(scale) => Ok(ScaleOutcome {
            scale,
            fallback: None,
        }),
        Err(Error::DegenerateGeometry(why)) if heights.0 > 0.0 && !(heights.1 > 0.0) => {
            Ok(close_only(heights.0, why))
        }
        Err(Error::DegenerateGeometry(why)) => Ok(ScaleOutcome {
            scale: 1.0,
            fallback: Some(why),
        }),
        Err(e) => Err(e),
    }
}

fn translate(track: &mut PoseTrack, dx: f64, dy: f64) {
    for f in &mut track.frames {
        for p in &mut f.points {
            p.x -= dx;
            p.y -= dy;
        }
    }
}

fn median_mean_ankle(track: &PoseTrack) -> Point {
    let (xs, ys): (Vec<f64>, Vec<f64>) = track
        .frames
        .iter()
        .map(|f| {
            let a = f.mean_ankle();
            (a.x, a.y)
        })
        .unzip();
    Point::new(median(&xs), median(&ys))
}

/// Translates the track so its median mean-ankle position is exactly (0, 0).
pub fn center_track(track: &mut PoseTrack) {
    // A single subtraction can leave a residue of one rounding error in the
    // midpoint sum; a second pass on the small centered values clears it.
    for _ in 0..4 {
        let m = median_mean_ankle(track);
        if m.x == 0.0 && m.y == 0.0 {
            break;
        }
        translate(track, m.x, m.y);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrack {
    pub track: PoseTrack,
    pub scale: ScaleOutcome,
}

/// Scales y by the interpolated factor, then centers the median mean-ankle
/// position at the origin.
pub fn normalize_track(track: &PoseTrack, params: &NormalizationParams) -> Result<NormalizedTrack> {
    let scale = scale_for_track(track, params)?;
    if let Some(why) = &scale.fallback {
        warn!("pose normalization fallback ({why}); scale {}", scale.scale);
    }
    let mut out = track.clone();
    for f in &mut out.frames {
        for p in &mut f.points {
            p.y *= scale.scale;
        }
    }
    center_track(&mut out);
    Ok(NormalizedTrack { track: out, scale })
}

/// Lexicographic `(i, j)`, `i < j` keypoint pairs.
pub fn keypoint_pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..NUM_KEYPOINTS).flat_map(|i| (i + 1..NUM_KEYPOINTS).map(move |j| (i, j)))
}

/// Per frame: 28 coordinates in keypoint order, then the 91 pairwise
/// Euclidean distances in lexicographic pair order.
pub fn derive_movement_features(track: &PoseTrack) -> FeatureMatrix {
    let mut data = Vec::with_capacity(track.len() * NUM_MOVEMENT_FEATURES);
    for f in &track.frames {
        data.extend(f.coords().iter().map(|&c| c as f32));
        data.extend(keypoint_pairs().map(|(i, j)| {
            let (a, b) = (f.points[i], f.points[j]);
            (a.x - b.x).hypot(a.y - b.y) as f32
        }));
    }
    FeatureMatrix::new(track.len(), NUM_MOVEMENT_FEATURES, data)
        .expect("row width is fixed")
}
