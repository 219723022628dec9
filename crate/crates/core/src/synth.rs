//! Synthetic paired audio and pose data driven by a shared latent trajectory.
//!
//! Each object has a latent vector trajectory `z(t)` (a style-dependent mean,
//! an object offset and slow oscillations). The audio is a sum of fixed
//! tones, one per latent dimension, whose log amplitudes follow `z`. The
//! pose is a canonical skeleton displaced by a fixed linear map of `z`. Each
//! modality sees its own noisy copy `(z + σ·e) / √(1 + σ²)` where `e` is an
//! independent trajectory with the same smoothness, so large `σ` leaves the
//! two modalities unrelated.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{hz_to_mel, mel_to_hz, MelConfig};
use crate::error::{Error, Result};
use crate::ingest::{
    write_manifest, write_pose_track, write_wav, AudioClip, DanceStyle, DatasetManifest, ManifestEntry, Point,
    PoseTrack, SkeletonFrame, DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_HEIGHT, DEFAULT_WIDTH, NUM_COORDS, NUM_KEYPOINTS,
    TARGET_SAMPLE_RATE,
};

pub const MAX_LATENT_DIM: usize = 32;
const CLIP_SECS: f64 = 10.0;
/// Natural-log amplitude change per latent unit.
const AUDIO_GAIN: f64 = 0.6;
/// Pixel displacement per latent unit, before the object's own scale.
const POSE_GAIN: f64 = 15.0;
const BACKGROUND_NOISE: f64 = 1e-3;
const POSE_JITTER: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub styles: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_objects: 200,
            latent_dim: 8,
            noise_sigma: 0.3,
            styles: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::Config("synth n_objects must be positive".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > MAX_LATENT_DIM {
            return Err(Error::Config(format!(
                "synth latent_dim must be in 1..={MAX_LATENT_DIM}"
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("synth noise_sigma must be finite and non-negative".into()));
        }
        if self.styles == 0 || self.styles > DanceStyle::ALL.len() {
            return Err(Error::Config(format!(
                "synth styles must be in 1..={}",
                DanceStyle::ALL.len()
            )));
        }
        Ok(())
    }
}

/// Ground truth kept alongside the generated files.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub clip_id: String,
    pub style: DanceStyle,
    /// Shared latent per pose frame, `[frame][dim]`.
    pub latent: Vec<Vec<f64>>,
    /// Latent seen by the audio, sampled at the pose frame times.
    pub audio_latent: Vec<Vec<f64>>,
    pub pose_latent: Vec<Vec<f64>>,
    pub translation: Point,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub objects: Vec<SynthObject>,
    /// Frequency of the tone driven by each latent dimension.
    pub tone_hz: Vec<f64>,
}

/// Canonical upright skeleton, 300 px tall, feet at y = 0, x centered at 0.
fn canonical_skeleton() -> [Point; NUM_KEYPOINTS] {
    let p = Point::new;
    [
        p(0.0, -300.0),  // head
        p(0.0, -255.0),  // neck
        p(-40.0, -250.0), // left shoulder
        p(40.0, -250.0), // right shoulder
        p(-55.0, -195.0), // left elbow
        p(55.0, -195.0), // right elbow
        p(-60.0, -140.0), // left wrist
        p(60.0, -140.0), // right wrist
        p(-25.0, -150.0), // left hip
        p(25.0, -150.0), // right hip
        p(-28.0, -75.0), // left knee
        p(28.0, -75.0),  // right knee
        p(-30.0, 0.0),   // left ankle
        p(30.0, 0.0),    // right ankle
    ]
}

/// Tone frequencies: centers of mel bands spread evenly over the mel range,
/// so each latent dimension owns a separate region of the spectrogram.
pub fn tone_frequencies(latent_dim: usize) -> Vec<f64> {
    let cfg = MelConfig::default();
    let lo = hz_to_mel(150.0);
    let hi = hz_to_mel(cfg.f_max * 0.9);
    (0..latent_dim)
        .map(|d| mel_to_hz(lo + (hi - lo) * (d as f64 + 0.5) / latent_dim as f64))
        .collect()
}

/// Smooth zero-mean trajectory with unit marginal variance: a sum of
/// sinusoids with random slow frequencies and phases.
struct Oscillator {
    freq: Vec<f64>,
    phase: Vec<f64>,
    amp: f64,
}

impl Oscillator {
    const TERMS: usize = 3;

    fn new(rng: &mut ChaCha8Rng) -> Self {
        let freq = (0..Self::TERMS).map(|_| rng.random_range(0.1..0.6)).collect();
        let phase = (0..Self::TERMS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        // Each sinusoid has variance amp²/2.
        let amp = (2.0 / Self::TERMS as f64).sqrt();
        Oscillator { freq, phase, amp }
    }

    fn at(&self, t: f64) -> f64 {
        self.freq
            .iter()
            .zip(&self.phase)
            .map(|(f, p)| self.amp * (2.0 * PI * f * t + p).sin())
            .sum()
    }
}

/// Latent dynamics of one object: constant part plus per-dimension oscillation.
struct LatentPath {
    base: Vec<f64>,
    motion: Vec<Oscillator>,
    motion_gain: f64,
}

impl LatentPath {
    fn at(&self, t: f64) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.motion)
            .map(|(b, o)| b + self.motion_gain * o.at(t))
            .collect()
    }
}

struct NoisyView<'a> {
    shared: &'a LatentPath,
    noise: Vec<Oscillator>,
    sigma: f64,
}

impl NoisyView<'_> {
    fn at(&self, t: f64) -> Vec<f64> {
        let norm = (1.0 + self.sigma * self.sigma).sqrt();
        self.shared
            .at(t)
            .iter()
            .zip(&self.noise)
            .map(|(z, e)| (z + self.sigma * e.at(t)) / norm)
            .collect()
    }
}

/// Dataset-wide parameters derived from the seed.
struct World {
    style_means: Vec<Vec<f64>>,
    pose_map: DMatrix<f64>,
    tone_hz: Vec<f64>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let l = cfg.latent_dim;
        let style_means = (0..cfg.styles)
            .map(|_| (0..l).map(|_| 0.7 * normal(&mut rng)).collect())
            .collect();
        let scale = 1.0 / (l as f64).sqrt();
        let pose_map = DMatrix::from_fn(NUM_COORDS, l, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        World {
            style_means,
            pose_map,
            tone_hz: tone_frequencies(l),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn object_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn clip_id(index: usize) -> String {
    format!("synth{index:04}")
}

fn synthesize(cfg: &SynthConfig, world: &World, index: usize) -> (AudioClip, PoseTrack, SynthObject) {
    let l = cfg.latent_dim;
    let mut rng = object_rng(cfg.seed, index);
    let style_idx = index % cfg.styles;
    let style = DanceStyle::ALL[style_idx];
    let base: Vec<f64> = world.style_means[style_idx]
        .iter()
        .map(|m| m + 0.7 * normal(&mut rng))
        .collect();
    let shared = LatentPath {
        base,
        motion: (0..l).map(|_| Oscillator::new(&mut rng)).collect(),
        motion_gain: 0.5,
    };
    let audio_view = NoisyView {
        shared: &shared,
        noise: (0..l).map(|_| Oscillator::new(&mut rng)).collect(),
        sigma: cfg.noise_sigma,
    };
    let pose_view = NoisyView {
        shared: &shared,
        noise: (0..l).map(|_| Oscillator::new(&mut rng)).collect(),
        sigma: cfg.noise_sigma,
    };
    let translation = Point::new(
        rng.random_range(440.0..840.0),
        rng.random_range(560.0..640.0),
    );
    let scale = rng.random_range(0.8..1.2);

    // Audio: tones with log amplitude following the audio view of z.
    let sr = TARGET_SAMPLE_RATE as f64;
    let n = (CLIP_SECS * sr) as usize;
    let start_phase: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let peak = 0.8 / (l as f64 * (AUDIO_GAIN * 3.0).exp());
    let noise = Normal::new(0.0, BACKGROUND_NOISE).unwrap();
    // Amplitudes move slowly; evaluate them on a 1 ms grid and hold.
    let block = (sr / 1000.0) as usize;
    let mut samples = Vec::with_capacity(n);
    let mut amps = vec![0.0; l];
    for i in 0..n {
        if i % block == 0 {
            let z = audio_view.at(i as f64 / sr);
            for (a, zd) in amps.iter_mut().zip(&z) {
                *a = peak * (AUDIO_GAIN * zd).exp();
            }
        }
        let t = i as f64 / sr;
        let mut s = 0.0;
        for d in 0..l {
            s += amps[d] * (2.0 * PI * world.tone_hz[d] * t + start_phase[d]).sin();
        }
        s += noise.sample(&mut rng);
        samples.push(s.clamp(-1.0, 1.0) as f32);
    }

    // Pose: canonical skeleton displaced by a linear map of the pose view.
    let skeleton = canonical_skeleton();
    let jitter = Normal::new(0.0, POSE_JITTER).unwrap();
    let (w, h) = (DEFAULT_WIDTH as f64, DEFAULT_HEIGHT as f64);
    let mut frames = Vec::with_capacity(DEFAULT_FRAMES);
    let mut latent = Vec::with_capacity(DEFAULT_FRAMES);
    let mut audio_latent = Vec::with_capacity(DEFAULT_FRAMES);
    let mut pose_latent = Vec::with_capacity(DEFAULT_FRAMES);
    for f in 0..DEFAULT_FRAMES {
        let t = f as f64 / DEFAULT_FPS as f64;
        let zp = pose_view.at(t);
        let offsets = &world.pose_map * nalgebra::DVector::from_column_slice(&zp);
        let mut points = skeleton;
        for (k, p) in points.iter_mut().enumerate() {
            let x = translation.x + scale * (p.x + POSE_GAIN * offsets[2 * k]) + jitter.sample(&mut rng);
            let y = translation.y + scale * (p.y + POSE_GAIN * offsets[2 * k + 1]) + jitter.sample(&mut rng);
            *p = Point::new(x.clamp(0.0, w), y.clamp(0.0, h));
        }
        frames.push(SkeletonFrame { points });
        latent.push(shared.at(t));
        audio_latent.push(audio_view.at(t));
        pose_latent.push(zp);
    }
    let id = clip_id(index);
    (
        AudioClip {
            samples,
            sample_rate: TARGET_SAMPLE_RATE,
        },
        PoseTrack {
            frames,
            fps: DEFAULT_FPS,
            frame_width: DEFAULT_WIDTH,
            frame_height: DEFAULT_HEIGHT,
        },
        SynthObject {
            clip_id: id,
            style,
            latent,
            audio_latent,
            pose_latent,
            translation,
            scale,
        },
    )
}

/// Generates one object in memory.
pub fn generate_object(cfg: &SynthConfig, index: usize) -> Result<(AudioClip, PoseTrack, SynthObject)> {
    cfg.validate()?;
    Ok(synthesize(cfg, &World::new(cfg), index))
}

/// Writes `manifest.tsv`, `audio/<id>.wav` and `pose/<id>.txt` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthDataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let audio_dir = out_dir.join("audio");
    let pose_dir = out_dir.join("pose");
    for d in [&audio_dir, &pose_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let results: Vec<Result<(ManifestEntry, SynthObject)>> = (0..cfg.n_objects)
        .into_par_iter()
        .map(|i| {
            let (clip, track, obj) = synthesize(cfg, &world, i);
            let audio_path = audio_dir.join(format!("{}.wav", obj.clip_id));
            let pose_path = pose_dir.join(format!("{}.txt", obj.clip_id));
            write_wav(&audio_path, &clip)?;
            write_pose_track(&pose_path, &track)?;
            Ok((
                ManifestEntry {
                    clip_id: obj.clip_id.clone(),
                    audio_path,
                    pose_path,
                    style: obj.style,
                },
                obj,
            ))
        })
        .collect();
    let mut entries = Vec::with_capacity(cfg.n_objects);
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for r in results {
        let (e, o) = r?;
        entries.push(e);
        objects.push(o);
    }
    let manifest = DatasetManifest::new(entries)?;
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest_path, &manifest)?;
    Ok(SynthDataset {
        manifest,
        manifest_path,
        objects,
        tone_hz: world.tone_hz,
    })
}

/// Two jointly Gaussian views whose population canonical correlations are
/// `planted` (padded with zeros). Each view is an invertible linear mix of
/// its latent coordinates.
pub fn generate_gaussian_views(
    n: usize,
    d_x: usize,
    d_y: usize,
    planted: &[f64],
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if planted.len() > d_x.min(d_y) {
        return Err(Error::InvalidArgument(format!(
            "{} planted correlations exceed view dimensions {d_x}, {d_y}",
            planted.len()
        )));
    }
    if let Some(c) = planted.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("correlation {c} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng, r: usize, c: usize| -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    };
    let zx = gauss(&mut rng, n, d_x);
    let e = gauss(&mut rng, n, d_y);
    let mut zy = e.clone();
    for (j, &rho) in planted.iter().enumerate() {
        let s = (1.0 - rho * rho).sqrt();
        for i in 0..n {
            zy[(i, j)] = rho * zx[(i, j)] + s * e[(i, j)];
        }
    }
    let mixing = |rng: &mut ChaCha8Rng, d: usize| -> DMatrix<f64> {
        let q = gauss(rng, d, d).qr().q();
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0)));
        diag * q
    };
    let ax = mixing(&mut rng, d_x);
    let ay = mixing(&mut rng, d_y);
    Ok((zx * ax, zy * ay))
}
