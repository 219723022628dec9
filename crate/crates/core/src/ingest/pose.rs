use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 14;
pub const NUM_COORDS: usize = 2 * NUM_KEYPOINTS;
pub const DEFAULT_FPS: u32 = 30;
pub const DEFAULT_FRAMES: usize = 300;
pub const DEFAULT_WIDTH: u32 = 1280;
pub const DEFAULT_HEIGHT: u32 = 720;

/// Body joints in file and feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Keypoint {
    Head,
    Neck,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Keypoint {
    pub const ALL: [Keypoint; NUM_KEYPOINTS] = [
        Keypoint::Head,
        Keypoint::Neck,
        Keypoint::LeftShoulder,
        Keypoint::RightShoulder,
        Keypoint::LeftElbow,
        Keypoint::RightElbow,
        Keypoint::LeftWrist,
        Keypoint::RightWrist,
        Keypoint::LeftHip,
        Keypoint::RightHip,
        Keypoint::LeftKnee,
        Keypoint::RightKnee,
        Keypoint::LeftAnkle,
        Keypoint::RightAnkle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::Head => "head",
            Keypoint::Neck => "neck",
            Keypoint::LeftShoulder => "left shoulder",
            Keypoint::RightShoulder => "right shoulder",
            Keypoint::LeftElbow => "left elbow",
            Keypoint::RightElbow => "right elbow",
            Keypoint::LeftWrist => "left wrist",
            Keypoint::RightWrist => "right wrist",
            Keypoint::LeftHip => "left hip",
            Keypoint::RightHip => "right hip",
            Keypoint::LeftKnee => "left knee",
            Keypoint::RightKnee => "right knee",
            Keypoint::LeftAnkle => "left ankle",
            Keypoint::RightAnkle => "right ankle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// One skeleton: 14 keypoints in [`Keypoint::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkeletonFrame {
    pub points: [Point; NUM_KEYPOINTS],
}

impl SkeletonFrame {
    pub fn get(&self, k: Keypoint) -> Point {
        self.points[k as usize]
    }

    pub fn set(&mut self, k: Keypoint, p: Point) {
        self.points[k as usize] = p;
    }

    /// Flattened `x0 y0 x1 y1 ...` coordinates.
    pub fn coords(&self) -> [f64; NUM_COORDS] {
        let mut out = [0.0; NUM_COORDS];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    /// Mean of the left and right ankle positions.
    pub fn mean_ankle(&self) -> Point {
        let l = self.get(Keypoint::LeftAnkle);
        let r = self.get(Keypoint::RightAnkle);
        Point::new((l.x + r.x) / 2.0, (l.y + r.y) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub frames: Vec<SkeletonFrame>,
    pub fps: u32,
    pub frame_width: u32,
    pub frame_height: u32,
}

impl PoseTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn parse_header(line: &str) -> Result<(u32, u32, u32, usize)> {
    let (mut fps, mut width, mut height, mut frames) = (None, None, None, None);
    for tok in line.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::PoseFormat(format!("bad header token `{tok}`")))?;
        let bad = || Error::PoseFormat(format!("bad header value `{tok}`"));
        match key {
            "fps" => fps = Some(value.parse().map_err(|_| bad())?),
            "width" => width = Some(value.parse().map_err(|_| bad())?),
            "height" => height = Some(value.parse().map_err(|_| bad())?),
            "frames" => frames = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(Error::PoseFormat(format!("unknown header key `{key}`"))),
        }
    }
    match (fps, width, height, frames) {
        (Some(f), Some(w), Some(h), Some(n)) => Ok((f, w, h, n)),
        _ => Err(Error::PoseFormat(format!("incomplete header `{line}`"))),
    }
}

fn parse_frame(frame_no: usize, line: &str) -> Result<SkeletonFrame> {
    let mut frame = SkeletonFrame::default();
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < NUM_COORDS {
        let missing = Keypoint::ALL[tokens.len() / 2];
        return Err(Error::IncompleteTrack(format!(
            "frame {frame_no}: {} missing ({} of {NUM_COORDS} coordinates)",
            missing.name(),
            tokens.len()
        )));
    }
    if tokens.len() > NUM_COORDS {
        return Err(Error::PoseFormat(format!(
            "frame {frame_no}: {} coordinates, expected {NUM_COORDS}",
            tokens.len()
        )));
    }
    for (k, pair) in tokens.chunks(2).enumerate() {
        let mut xy = [0.0; 2];
        for (slot, tok) in xy.iter_mut().zip(pair) {
            // Detectors write `nan` or `-` for joints they could not find.
            let v: f64 = if *tok == "-" {
                f64::NAN
            } else {
                tok.parse().map_err(|_| {
                    Error::PoseFormat(format!("frame {frame_no}: bad number `{tok}`"))
                })?
            };
            if !v.is_finite() {
                return Err(Error::IncompleteTrack(format!(
                    "frame {frame_no}: {} missing",
                    Keypoint::ALL[k].name()
                )));
            }
            *slot = v;
        }
        frame.points[k] = Point::new(xy[0], xy[1]);
    }
    Ok(frame)
}

/// Parses pose-track text, requiring exactly `expected_frames` complete frames.
pub fn parse_pose_track(text: &str, expected_frames: usize) -> Result<PoseTrack> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::PoseFormat("empty pose file".into()))?;
    let (fps, frame_width, frame_height, declared) = parse_header(header)?;
    let frames = lines
        .enumerate()
        .map(|(i, l)| parse_frame(i, l))
        .collect::<Result<Vec<_>>>()?;
    if frames.len() != expected_frames || declared != expected_frames {
        return Err(Error::IncompleteTrack(format!(
            "{} frames present ({} declared), expected {expected_frames}",
            frames.len(),
            declared
        )));
    }
    Ok(PoseTrack {
        frames,
        fps,
        frame_width,
        frame_height,
    })
}

pub fn load_pose_track(path: &Path, expected_frames: usize) -> Result<PoseTrack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_track(&text, expected_frames).map_err(|e| match e {
        Error::IncompleteTrack(msg) => Error::IncompleteTrack(format!("{}: {msg}", path.display())),
        Error::PoseFormat(msg) => Error::PoseFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn format_pose_track(track: &PoseTrack) -> String {
    let mut out = format!(
        "fps={} width={} height={} frames={}\n",
        track.fps,
        track.frame_width,
        track.frame_height,
        track.frames.len()
    );
    for frame in &track.frames {
        let coords = frame.coords();
        for (i, c) in coords.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // `{}` on f64 prints the shortest representation that round-trips.
            write!(out, "{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_pose_track(path: &Path, track: &PoseTrack) -> Result<()> {
    fs::write(path, format_pose_track(track)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(n: usize) -> PoseTrack {
        let frames = (0..n)
            .map(|t| {
                let mut f = SkeletonFrame::default();
                for (k, p) in f.points.iter_mut().enumerate() {
                    *p = Point::new(600.0 + k as f64 * 3.5 + t as f64, 200.0 + k as f64 * 20.25);
                }
                f
            })
            .collect();
        PoseTrack {
            frames,
            fps: 30,
            frame_width: 1280,
            frame_height: 720,
        }
    }

    #[test]
    fn complete_track_loads() {
        let text = format_pose_track(&track(300));
        let t = parse_pose_track(&text, 300).unwrap();
        assert_eq!(t.len(), 300);
        assert_eq!(t.fps, 30);
        assert_eq!(t.frames[10].get(Keypoint::Neck), Point::new(613.5, 220.25));
    }

    #[test]
    fn short_track_is_incomplete() {
        let mut t = track(299);
        let text = format_pose_track(&t);
        assert!(matches!(
            parse_pose_track(&text, 300),
            Err(Error::IncompleteTrack(_))
        ));
        // Header claims 300 but only 299 lines follow.
        t.frames.push(t.frames[0]);
        let mut text = format_pose_track(&t);
        let cut = text.trim_end().rfind('\n').unwrap();
        text.truncate(cut + 1);
        assert!(matches!(
            parse_pose_track(&text, 300),
            Err(Error::IncompleteTrack(_))
        ));
    }

    #[test]
    fn missing_left_wrist_is_incomplete() {
        let text = format_pose_track(&track(300));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut toks: Vec<String> = lines[5].split(' ').map(String::from).collect();
        let wrist = Keypoint::LeftWrist as usize;
        toks[2 * wrist] = "nan".into();
        toks[2 * wrist + 1] = "nan".into();
        lines[5] = toks.join(" ");
        let err = parse_pose_track(&lines.join("\n"), 300).unwrap_err();
        match err {
            Error::IncompleteTrack(msg) => assert!(msg.contains("left wrist"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }

        // Truncated line: the detector dropped trailing joints.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let toks: Vec<&str> = lines[7].split(' ').take(12).collect();
        lines[7] = toks.join(" ");
        assert!(matches!(
            parse_pose_track(&lines.join("\n"), 300),
            Err(Error::IncompleteTrack(_))
        ));
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(
            parse_pose_track("fps=30 width=1280\n", 0),
            Err(Error::PoseFormat(_))
        ));
        assert!(parse_pose_track("", 300).is_err());
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(
            coords in prop::collection::vec(-2000.0f64..2000.0, NUM_COORDS * 5)
        ) {
            let frames = coords
                .chunks(NUM_COORDS)
                .map(|c| {
                    let mut f = SkeletonFrame::default();
                    for k in 0..NUM_KEYPOINTS {
                        f.points[k] = Point::new(c[2 * k], c[2 * k + 1]);
                    }
                    f
                })
                .collect();
            let t = PoseTrack { frames, fps: 30, frame_width: 1280, frame_height: 720 };
            let back = parse_pose_track(&format_pose_track(&t), 5).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
