//! Run configuration: every tunable of extraction, training and evaluation
//! in one TOML file. Missing keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::MelConfig;
use crate::error::{Error, Result};
use crate::ingest::DEFAULT_FRAMES;
use crate::nnet::{BatchNormConfig, OptimizerConfig};
use crate::posefeat::AnkleTolerance;

/// DCCA needs a batch comfortably larger than the 32 + 128 output dimensions.
pub const MIN_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: PathBuf::from("manifest.tsv"),
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub audio_frames: usize,
    pub audio_hop: usize,
    pub movement_frames: usize,
    pub movement_hop: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            audio_frames: 39,
            audio_hop: 20,
            movement_frames: 30,
            movement_hop: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub frames: usize,
    /// Clip whose geometry defines the shared target frame. When unset, the
    /// lexicographically first training clip of fold 0 with usable geometry.
    pub target_clip_id: Option<String>,
}

impl Default for PoseConfig {
    fn default() -> Self {
        let tol = AnkleTolerance::default();
        PoseConfig {
            alpha: tol.alpha,
            epsilon: tol.epsilon,
            frames: DEFAULT_FRAMES,
            target_clip_id: None,
        }
    }
}

impl PoseConfig {
    pub fn tolerance(&self) -> AnkleTolerance {
        AnkleTolerance {
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub batch_norm: BatchNormConfig,
    pub r_reg: f64,
    /// Number of canonical components kept by the linear CCA.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            batch_norm: BatchNormConfig::default(),
            r_reg: crate::dcca::DEFAULT_R_REG,
            k: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Base seed; run `r` initializes and shuffles from `seed + r`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 512,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub folds: usize,
    pub runs: usize,
    pub fold_seed: u64,
    pub baseline_samples: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 4,
            runs: 10,
            fold_seed: 0,
            baseline_samples: 100_000,
            permutations: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub mel: MelConfig,
    pub segments: SegmentConfig,
    pub pose: PoseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Extraction worker threads; 0 uses one per core.
    pub workers: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.mel.validate()?;
        let s = &self.segments;
        if s.audio_frames == 0 || s.audio_hop == 0 || s.movement_frames == 0 || s.movement_hop == 0 {
            return bad("segment lengths and hops must be positive".into());
        }
        if !(self.pose.alpha > 0.0 && self.pose.epsilon > 0.0) {
            return bad("pose alpha and epsilon must be positive".into());
        }
        if self.pose.frames == 0 {
            return bad("pose frame count must be positive".into());
        }
        if !(self.model.r_reg > 0.0) {
            return bad("r_reg must be positive".into());
        }
        if self.model.k == 0 {
            return bad("k must be at least 1".into());
        }
        let bn = &self.model.batch_norm;
        if !(0.0..1.0).contains(&bn.momentum) || !(bn.eps > 0.0) {
            return bad("batch norm momentum must be in [0, 1) and eps positive".into());
        }
        if self.train.batch_size < MIN_BATCH_SIZE {
            return bad(format!(
                "batch size {} is below the minimum of {MIN_BATCH_SIZE}",
                self.train.batch_size
            ));
        }
        if self.train.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        match self.train.optimizer {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps >= 0.0) {
                    return bad("invalid Adam hyperparameters".into());
                }
            }
            OptimizerConfig::Sgd { lr } => {
                if !(lr > 0.0) {
                    return bad("learning rate must be positive".into());
                }
            }
        }
        let e = &self.eval;
        if e.folds < 2 {
            return bad("need at least 2 folds".into());
        }
        if e.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if e.permutations < 1000 {
            return bad("at least 1000 permutations are required".into());
        }
        if e.baseline_samples < 2 {
            return bad("baseline needs at least 2 samples".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML serialization, leaving out paths
    /// and the worker count since neither changes any result.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            paths: PathsConfig::default(),
            workers: 0,
            ..self.clone()
        };
        hex(&Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// Seed of run `run`: initialization and batch order.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.train.seed.wrapping_add(run as u64)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
