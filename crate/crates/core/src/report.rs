//! Evaluation report: a schema-versioned TOML document holding every number
//! needed to rebuild the summary tables, plus a fixed-width text rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::ingest::DanceStyle;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to rerun an evaluation and recognize its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub config_hash: String,
    pub fold: usize,
    pub folds: usize,
    pub fold_seed: u64,
    pub fold_sizes: Vec<usize>,
    pub test_ids: Vec<String>,
    pub n_test: usize,
    pub run_seeds: Vec<u64>,
    pub checkpoint_hashes: Vec<String>,
    pub trained: bool,
    pub target_clip_id: String,
    pub audio_params: usize,
    pub movement_params: usize,
    pub threads: usize,
    pub baseline_samples: usize,
    pub permutations: usize,
    pub eval_seed: u64,
}

/// Run-averaged pair or rank accuracy with its binomial test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub score: f64,
    /// Expected score of a random ranking.
    pub random: f64,
    /// `round(score · trials)`, the success count fed to the binomial test.
    pub successes: u64,
    /// Number of queries.
    pub trials: u64,
    pub p_value: f64,
    /// `N(N−1)` pair trials for pair accuracy, list length `N` for rank accuracy.
    pub per_run_trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub style: String,
    pub n_queries: usize,
    pub map: f64,
    pub baseline: f64,
    pub baseline_std_error: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub map: f64,
    pub baseline: f64,
    /// Only the unweighted average has a permutation test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// `audio_to_movement` or `movement_to_audio`.
    pub direction: String,
    pub n_queries: usize,
    pub pair: AccuracyRow,
    pub rank: AccuracyRow,
    pub classes: Vec<ClassRow>,
    pub average: SummaryRow,
    pub overall: SummaryRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub clip_id: String,
    pub class: usize,
    /// 1-based rank of the paired object.
    pub rank: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDirection {
    pub direction: String,
    pub pair: f64,
    pub rank: f64,
    pub average_map: f64,
    pub overall_map: f64,
    pub queries: Vec<QueryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub directions: Vec<RunDirection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub schema_version: u32,
    pub reproducibility: Reproducibility,
    pub directions: Vec<DirectionReport>,
    pub runs: Vec<RunReport>,
}

impl RetrievalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: RetrievalReport = toml::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Writes the TOML form and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_toml();
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn direction(&self, name: &str) -> Option<&DirectionReport> {
        self.directions.iter().find(|d| d.direction == name)
    }

    /// Human-readable tables: accuracies first, then per-class MAP.
    pub fn render(&self) -> String {
        let r = &self.reproducibility;
        let mut s = String::new();
        let _ = writeln!(s, "fold {} of {} ({} test objects, {} run(s), trained: {})", r.fold, r.folds, r.n_test, r.run_seeds.len(), r.trained);
        let _ = writeln!(s, "config {}", r.config_hash);
        let _ = writeln!(s, "parameters: audio {}, movement {}", group(r.audio_params), group(r.movement_params));
        let _ = writeln!(s, "fold sizes {:?}, fold seed {}, run seeds {:?}", r.fold_sizes, r.fold_seed, r.run_seeds);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>10} {:>8} {:>8} {:>10}", "direction", "pair", "random", "p", "rank", "random", "p");
        for d in &self.directions {
            let _ = writeln!(
                s,
                "{:<20} {:>8.3} {:>8.3} {:>10.2e} {:>8.3} {:>8.3} {:>10.2e}",
                d.direction, d.pair.score, d.pair.random, d.pair.p_value, d.rank.score, d.rank.random, d.rank.p_value
            );
        }
        for d in &self.directions {
            let _ = writeln!(s);
            let _ = writeln!(s, "MAP, {} ({} queries)", d.direction, d.n_queries);
            let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>9} {:>10}", "class", "n", "MAP", "baseline", "p");
            for c in &d.classes {
                let _ = writeln!(s, "{:<12} {:>6} {:>8.3} {:>9.3} {:>10.2e}", c.style, c.n_queries, c.map, c.baseline, c.p_value);
            }
            let p = d.average.p_value.map_or("-".to_string(), |p| format!("{p:.2e}"));
            let _ = writeln!(s, "{:<12} {:>6} {:>8.3} {:>9.3} {:>10}", "Average", "", d.average.map, d.average.baseline, p);
            let _ = writeln!(s, "{:<12} {:>6} {:>8.3} {:>9.3} {:>10}", "Overall", d.n_queries, d.overall.map, d.overall.baseline, "-");
        }
        s
    }
}

/// Style name of a class index, or the index itself for unknown classes.
pub fn style_name(class: usize) -> String {
    DanceStyle::ALL
        .get(class)
        .map_or_else(|| class.to_string(), |s| s.as_str().to_string())
}

/// `12892` → `12,892`.
pub fn group(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RetrievalReport {
        let acc = |score: f64, random: f64| AccuracyRow {
            score,
            random,
            successes: 3,
            trials: 4,
            p_value: 0.05078125,
            per_run_trials: 12,
        };
        RetrievalReport {
            schema_version: SCHEMA_VERSION,
            reproducibility: Reproducibility {
                config_hash: "ab".repeat(32),
                fold: 0,
                folds: 4,
                fold_seed: 0,
                fold_sizes: vec![4, 4, 4, 4],
                test_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                n_test: 4,
                run_seeds: vec![0, 1],
                checkpoint_hashes: vec!["00".into(), "11".into()],
                trained: true,
                target_clip_id: "x".into(),
                audio_params: 12_892,
                movement_params: 15_164,
                threads: 1,
                baseline_samples: 100_000,
                permutations: 1000,
                eval_seed: 0,
            },
            directions: vec![DirectionReport {
                direction: "audio_to_movement".into(),
                n_queries: 4,
                pair: acc(0.1 + 0.2, 0.25),
                rank: acc(2.0 / 3.0, 0.5),
                classes: vec![ClassRow {
                    class: 0,
                    style: style_name(0),
                    n_queries: 4,
                    map: 0.7,
                    baseline: 0.52,
                    baseline_std_error: 1e-3,
                    p_value: 0.3,
                }],
                average: SummaryRow {
                    map: 0.7,
                    baseline: 0.52,
                    p_value: Some(0.3),
                },
                overall: SummaryRow {
                    map: 0.7,
                    baseline: 0.52,
                    p_value: None,
                },
            }],
            runs: vec![RunReport {
                run: 0,
                seed: 0,
                checkpoint_hash: "00".into(),
                directions: vec![RunDirection {
                    direction: "audio_to_movement".into(),
                    pair: 0.25,
                    rank: 0.5,
                    average_map: 0.6,
                    overall_map: 0.6,
                    queries: vec![QueryRow {
                        clip_id: "a".into(),
                        class: 0,
                        rank: 2,
                        ap: 1.0 / 3.0,
                    }],
                }],
            }],
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let r = sample();
        let back = RetrievalReport::from_toml(&r.to_toml()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.hash(), r.hash());
    }

    #[test]
    fn rejects_other_schema_versions() {
        let text = sample().to_toml().replace("schema_version = 1", "schema_version = 99");
        assert!(matches!(RetrievalReport::from_toml(&text), Err(Error::Report(_))));
    }

    #[test]
    fn rendering_has_every_table_row() {
        let text = sample().render();
        for needle in ["12,892", "15,164", "Average", "Overall", "audio_to_movement", "baseline"] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group(0), "0");
        assert_eq!(group(999), "999");
        assert_eq!(group(12_892), "12,892");
        assert_eq!(group(1_234_567), "1,234,567");
    }
}
