use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Half-width of the resampling kernel; the filter has `2 * RESAMPLE_HALF_TAPS` taps.
const RESAMPLE_HALF_TAPS: i64 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Mono samples in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM WAV file (integer or 32-bit float), downmixes to mono and
/// resamples to 16 kHz when needed.
pub fn load_audio(path: &Path) -> Result<AudioClip> {
    let ctx = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let reader = WavReader::open(path).map_err(ctx)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(ctx)?,
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(ctx)?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Audio(format!("{}: zero-length audio", path.display())));
    }
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let samples = if spec.sample_rate == TARGET_SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, TARGET_SAMPLE_RATE)
    };
    Ok(AudioClip {
        samples,
        sample_rate: TARGET_SAMPLE_RATE,
    })
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let ctx = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut w = WavWriter::create(path, spec).map_err(ctx)?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(ctx)?;
    }
    w.finalize().map_err(ctx)
}

fn blackman(d: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        return 0.0;
    }
    let phase = PI * d / half_width;
    0.42 + 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc resampler: 64-tap Blackman-windowed sinc, symmetric (linear
/// phase), cut off at the lower Nyquist frequency, unit DC gain.
///
/// Output length is `round(len * to / from)`.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let step = from as f64 / to as f64;
    let out_len = (input.len() as f64 * to as f64 / from as f64).round() as usize;
    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * (to as f64 / from as f64).min(1.0);
    let half = RESAMPLE_HALF_TAPS as f64;
    let n_in = input.len() as i64;
    let mut weights = [0.0f64; 2 * RESAMPLE_HALF_TAPS as usize];
    (0..out_len)
        .map(|n| {
            let center = n as f64 * step;
            let base = center.floor() as i64;
            let first = base - RESAMPLE_HALF_TAPS + 1;
            let mut total = 0.0;
            for (i, w) in weights.iter_mut().enumerate() {
                let d = center - (first + i as i64) as f64;
                *w = 2.0 * cutoff * sinc(2.0 * cutoff * d) * blackman(d, half);
                total += *w;
            }
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                let j = first + i as i64;
                if (0..n_in).contains(&j) {
                    acc += w * input[j as usize] as f64;
                }
            }
            (acc / total) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> Vec<f32> {
        let n = (rate as f64 * secs).round() as usize;
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    fn write_int16(path: &Path, rate: u32, channels: u16, samples: &[f32]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample((s * 32767.0) as i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn mono_16k_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples = tone(440.0, 16_000, 10.0);
        write_int16(&p, 16_000, 1, &samples);
        let clip = load_audio(&p).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert_eq!(clip.samples.len(), 160_000);
        assert!((clip.samples[1000] - samples[1000]).abs() < 1e-4);
    }

    #[test]
    fn stereo_44k1_is_downmixed_and_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let left = tone(1000.0, 44_100, 10.0);
        let interleaved: Vec<f32> = left.iter().flat_map(|&s| [s, s]).collect();
        write_int16(&p, 44_100, 2, &interleaved);
        let clip = load_audio(&p).unwrap();
        assert_eq!(clip.samples.len(), 160_000);
        // The resampled tone matches a tone synthesized directly at 16 kHz.
        let reference = tone(1000.0, 16_000, 10.0);
        let max_err = clip.samples[100..159_900]
            .iter()
            .zip(&reference[100..159_900])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 2e-3, "max error {max_err}");
    }

    #[test]
    fn float_wav_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let clip = AudioClip {
            samples: tone(300.0, 16_000, 0.5),
            sample_rate: 16_000,
        };
        write_wav(&p, &clip).unwrap();
        assert_eq!(load_audio(&p).unwrap(), clip);
    }

    #[test]
    fn resampler_removes_content_above_target_nyquist() {
        // 12 kHz is above the 8 kHz Nyquist limit of the 16 kHz output.
        let out = resample(&tone(12_000.0, 48_000, 1.0), 48_000, 16_000);
        let rms = (out[200..15_800].iter().map(|s| (s * s) as f64).sum::<f64>()
            / 15_600.0)
            .sqrt();
        assert!(rms < 5e-3, "aliased energy {rms}");
    }

    #[test]
    fn corrupt_and_empty_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"RIFF\x00\x00junk").unwrap();
        assert!(matches!(load_audio(&p), Err(Error::Audio(_))));

        let e = dir.path().join("empty.wav");
        write_int16(&e, 16_000, 1, &[]);
        let err = load_audio(&e).unwrap_err();
        assert!(err.to_string().contains("zero-length"));
    }
}
