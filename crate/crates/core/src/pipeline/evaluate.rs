use std::collections::BTreeSet;

use log::{info, warn};
use nalgebra::DMatrix;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dcca::View;
use crate::error::{Error, Result};
use crate::ingest::FoldAssignment;
use crate::report::{
    style_name, AccuracyRow, ClassRow, DirectionReport, QueryRow, Reproducibility, RetrievalReport, RunDirection,
    RunReport, SummaryRow, SCHEMA_VERSION,
};
use crate::retrieval::{
    binomial_pvalue, class_map, object_embedding, pair_accuracy, permutation_test_map_runs, random_map_baseline,
    rank_accuracy, similarity_matrix, transpose, ClassMap, PairAccuracy, RankAccuracy,
};

use super::data::{segment_refs, ClipFeatures};
use super::train::{branch_outputs, mix_seed};

pub const AUDIO_TO_MOVEMENT: &str = "audio_to_movement";
pub const MOVEMENT_TO_AUDIO: &str = "movement_to_audio";

const PAIR_NULL: f64 = 0.25;
const RANK_NULL: f64 = 0.5;

/// Object embeddings of `clips` under a checkpoint: the mean canonical
/// projection of each clip's segments, audio and movement.
pub fn embed_objects(cfg: &RunConfig, ckpt: &Checkpoint, clips: &[ClipFeatures]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let refs = segment_refs(clips, &cfg.segments);
    let (xa, xm) = branch_outputs(cfg, &ckpt.audio, &ckpt.movement, clips, &refs)?;
    let pa = ckpt.cca.project(&xa, View::X)?;
    let pm = ckpt.cca.project(&xm, View::Y)?;
    let mut audio = Vec::with_capacity(clips.len());
    let mut movement = Vec::with_capacity(clips.len());
    let mut start = 0;
    for clip in clips {
        let n = clip.segments(&cfg.segments);
        audio.push(object_embedding(&DMatrix::from(pa.rows(start, n)))?);
        movement.push(object_embedding(&DMatrix::from(pm.rows(start, n)))?);
        start += n;
    }
    Ok((audio, movement))
}

struct RunMetrics {
    pair: PairAccuracy,
    rank: RankAccuracy,
    map: ClassMap,
}

fn run_metrics(sim: &[Vec<f64>], labels: &[usize], ids: &[String]) -> Result<RunMetrics> {
    Ok(RunMetrics {
        pair: pair_accuracy(sim)?,
        rank: rank_accuracy(sim, ids)?,
        map: class_map(sim, labels, labels, ids)?,
    })
}

fn accuracy_row(score: f64, n: usize, p0: f64, per_run_trials: u64) -> AccuracyRow {
    let trials = n as u64;
    let successes = (score * n as f64).round() as u64;
    AccuracyRow {
        score,
        random: p0,
        successes,
        trials,
        p_value: binomial_pvalue(successes, trials, p0),
        per_run_trials,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Rejects checkpoints trained on any of `test` or belonging to another fold.
pub fn check_fold(ckpt: &Checkpoint, fold: usize, test: &[ClipFeatures]) -> Result<()> {
    if ckpt.meta.fold != fold {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained for fold {}, evaluating fold {fold}",
            ckpt.meta.fold
        )));
    }
    let train: BTreeSet<&str> = ckpt.meta.train_ids.iter().map(String::as_str).collect();
    let overlap = test.iter().filter(|c| train.contains(c.clip_id.as_str())).count();
    if overlap > 0 {
        return Err(Error::FoldLeakage(overlap));
    }
    Ok(())
}

/// Evaluates one or more runs of the same fold on its test clips, in both
/// query directions. Scores are averaged over runs; significance tests use
/// the run-averaged scores.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoints: &[Checkpoint],
    test: &[ClipFeatures],
    folds: &FoldAssignment,
    fold: usize,
) -> Result<RetrievalReport> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::InvalidArgument("no checkpoints to evaluate".into()))?;
    if test.len() < 2 {
        return Err(Error::InvalidArgument("need at least two test objects".into()));
    }
    for ckpt in checkpoints {
        check_fold(ckpt, fold, test)?;
        if ckpt.meta.config_hash != first.meta.config_hash || ckpt.meta.trained != first.meta.trained {
            return Err(Error::InvalidArgument("checkpoints come from different configurations".into()));
        }
    }
    if first.meta.config_hash != cfg.hash() {
        warn!("checkpoints were trained with a different configuration");
    }
    let ids: Vec<String> = test.iter().map(|c| c.clip_id.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    let n = test.len();

    let mut sims: [Vec<Vec<Vec<f64>>>; 2] = [Vec::new(), Vec::new()];
    for ckpt in checkpoints {
        let (audio, movement) = embed_objects(cfg, ckpt, test)?;
        let a2m = similarity_matrix(&audio, &movement);
        sims[1].push(transpose(&a2m));
        sims[0].push(a2m);
    }
    let metrics: Vec<Vec<RunMetrics>> = sims
        .iter()
        .map(|runs| runs.iter().map(|s| run_metrics(s, &labels, &ids)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let baseline = random_map_baseline(&labels, cfg.eval.baseline_samples, cfg.eval.seed)?;
    let names = [AUDIO_TO_MOVEMENT, MOVEMENT_TO_AUDIO];
    let mut directions = Vec::new();
    for (d, name) in names.iter().enumerate() {
        let m = &metrics[d];
        let pair = mean(m.iter().map(|r| r.pair.score));
        let rank = mean(m.iter().map(|r| r.rank.score));
        let perm = permutation_test_map_runs(
            &sims[d],
            &labels,
            &labels,
            &ids,
            cfg.eval.permutations,
            mix_seed(cfg.eval.seed, d as u64 + 1),
        )?;
        let classes: Vec<ClassRow> = baseline
            .per_class
            .iter()
            .map(|(&c, est)| ClassRow {
                class: c,
                style: style_name(c),
                n_queries: m[0].map.per_class[&c].n_queries,
                map: mean(m.iter().map(|r| r.map.per_class[&c].map)),
                baseline: est.mean,
                baseline_std_error: est.std_error,
                p_value: perm.per_class[&c],
            })
            .collect();
        let report = DirectionReport {
            direction: name.to_string(),
            n_queries: n,
            pair: accuracy_row(pair, n, PAIR_NULL, (n * (n - 1)) as u64),
            rank: accuracy_row(rank, n, RANK_NULL, n as u64),
            classes,
            average: SummaryRow {
                map: mean(m.iter().map(|r| r.map.average)),
                baseline: baseline.average,
                p_value: Some(perm.average),
            },
            overall: SummaryRow {
                map: mean(m.iter().map(|r| r.map.overall)),
                baseline: baseline.overall,
                p_value: None,
            },
        };
        info!(
            "{name}: pair {:.3} (p {:.2e}), rank {:.3} (p {:.2e}), MAP {:.3} vs {:.3} (p {:.3})",
            report.pair.score,
            report.pair.p_value,
            report.rank.score,
            report.rank.p_value,
            report.average.map,
            report.average.baseline,
            perm.average
        );
        directions.push(report);
    }

    let hashes: Vec<String> = checkpoints.iter().map(Checkpoint::hash).collect();
    let runs = checkpoints
        .iter()
        .enumerate()
        .map(|(r, ckpt)| RunReport {
            run: ckpt.meta.run,
            seed: ckpt.meta.seed,
            checkpoint_hash: hashes[r].clone(),
            directions: names
                .iter()
                .enumerate()
                .map(|(d, name)| {
                    let m = &metrics[d][r];
                    let mut seen = vec![0usize; labels.iter().max().map_or(0, |&c| c + 1)];
                    let queries = (0..n)
                        .map(|q| {
                            let c = labels[q];
                            let ap = m.map.per_class[&c].ap[seen[c]];
                            seen[c] += 1;
                            QueryRow {
                                clip_id: ids[q].clone(),
                                class: c,
                                rank: m.rank.ranks[q],
                                ap,
                            }
                        })
                        .collect();
                    RunDirection {
                        direction: name.to_string(),
                        pair: m.pair.score,
                        rank: m.rank.score,
                        average_map: m.map.average,
                        overall_map: m.map.overall,
                        queries,
                    }
                })
                .collect(),
        })
        .collect();

    let counts = (first.audio.count_parameters().total, first.movement.count_parameters().total);
    Ok(RetrievalReport {
        schema_version: SCHEMA_VERSION,
        reproducibility: Reproducibility {
            config_hash: first.meta.config_hash.clone(),
            fold,
            folds: folds.k,
            fold_seed: folds.seed,
            fold_sizes: folds.fold_sizes(),
            test_ids: ids,
            n_test: n,
            run_seeds: checkpoints.iter().map(|c| c.meta.seed).collect(),
            checkpoint_hashes: hashes,
            trained: first.meta.trained,
            target_clip_id: first.meta.target_clip_id.clone(),
            audio_params: counts.0,
            movement_params: counts.1,
            threads: rayon::current_num_threads(),
            baseline_samples: cfg.eval.baseline_samples,
            permutations: cfg.eval.permutations,
            eval_seed: cfg.eval.seed,
        },
        directions,
        runs,
    })
}
