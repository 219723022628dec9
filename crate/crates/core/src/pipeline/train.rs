use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointFields};
use crate::config::RunConfig;
use crate::dcca::{column_means, dcca_loss_and_gradient, fit_linear_cca, CcaModel};
use crate::error::{Error, Result};
use crate::nnet::{audio_specs, movement_specs, Branch, Mode, Optimizer, Param, Tensor};
use crate::posefeat::NUM_MOVEMENT_FEATURES;

use super::data::{audio_batch, movement_batch, segment_refs, ClipFeatures};
use super::extract::TargetFrame;

/// Largest number of segments pushed through a branch at once outside training.
const INFERENCE_CHUNK: usize = 256;
/// Segments used to set batch-norm statistics of an untrained model.
const CALIBRATION_SEGMENTS: usize = 2048;

/// Derives independent seeds for the different random streams of a run.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AUDIO_INIT: u64 = 1;
const STREAM_MOVEMENT_INIT: u64 = 2;
const STREAM_RANDOM_CCA: u64 = 3;
const STREAM_CALIBRATION: u64 = 4;
const STREAM_EPOCH: u64 = 1 << 32;

/// Both branches with the input shapes implied by the configuration.
pub fn build_branches(cfg: &RunConfig, seed: u64) -> Result<(Branch, Branch)> {
    let bn = cfg.model.batch_norm;
    let s = &cfg.segments;
    let audio = Branch::build(
        "audio",
        &[s.audio_frames, cfg.mel.n_mels, 1],
        &audio_specs(),
        bn,
        mix_seed(seed, STREAM_AUDIO_INIT),
    )?;
    let movement = Branch::build(
        "movement",
        &[s.movement_frames, NUM_MOVEMENT_FEATURES],
        &movement_specs(),
        bn,
        mix_seed(seed, STREAM_MOVEMENT_INIT),
    )?;
    Ok((audio, movement))
}

fn rows(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.data)
}

fn row_major(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], m.transpose().as_slice().to_vec())
}

/// Evaluation-mode outputs of both branches for `refs`, one row per segment.
pub fn branch_outputs(
    cfg: &RunConfig,
    audio: &Branch,
    movement: &Branch,
    clips: &[ClipFeatures],
    refs: &[(usize, usize)],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut xa = DMatrix::zeros(refs.len(), audio.output_dim());
    let mut xm = DMatrix::zeros(refs.len(), movement.output_dim());
    for (i, chunk) in refs.chunks(INFERENCE_CHUNK).enumerate() {
        let start = i * INFERENCE_CHUNK;
        let a = audio.forward(&audio_batch(clips, chunk, &cfg.segments), Mode::Eval)?.output;
        let m = movement.forward(&movement_batch(clips, chunk, &cfg.segments), Mode::Eval)?.output;
        xa.rows_mut(start, chunk.len()).copy_from(&rows(&a));
        xm.rows_mut(start, chunk.len()).copy_from(&rows(&m));
    }
    Ok((xa, xm))
}

fn effective_k(cfg: &RunConfig, audio: &Branch, movement: &Branch) -> usize {
    let max = audio.output_dim().min(movement.output_dim());
    if cfg.model.k > max {
        warn!("k = {} exceeds the branch output dimensions; using {max}", cfg.model.k);
    }
    cfg.model.k.min(max)
}

/// Splits `n` items into `n / batch` batches of nearly equal size, none
/// smaller than `batch`.
fn batch_bounds(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let nb = n / batch;
    let (base, extra) = (n / nb, n % nb);
    let mut start = 0;
    (0..nb)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = (start, start + len);
            start += len;
            r
        })
        .collect()
}

/// Ids of `clips`, sorted.
fn sorted_ids(clips: &[ClipFeatures]) -> Vec<String> {
    let mut ids: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
    ids.sort();
    ids
}

/// Trains both branches on the DCCA loss over minibatches of paired
/// segments, then fits the linear CCA on an evaluation-mode pass over the
/// whole training set.
pub fn train_model(
    cfg: &RunConfig,
    train: &[ClipFeatures],
    fold: usize,
    run: usize,
    target: &TargetFrame,
) -> Result<Checkpoint> {
    let seed = cfg.run_seed(run);
    let (mut audio, mut movement) = build_branches(cfg, seed)?;
    let refs = segment_refs(train, &cfg.segments);
    let batch = cfg.train.batch_size;
    if refs.len() < batch {
        return Err(Error::Config(format!(
            "{} training segments are fewer than the batch size {batch}",
            refs.len()
        )));
    }
    let bounds = batch_bounds(refs.len(), batch);
    let mut optimizer = Optimizer::new(cfg.train.optimizer);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let mut order = refs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_EPOCH + epoch as u64)));
        let mut total = 0.0;
        for (b, &(lo, hi)) in bounds.iter().enumerate() {
            let chunk = &order[lo..hi];
            let pa = audio.forward(&audio_batch(train, chunk, &cfg.segments), Mode::Train)?;
            let pm = movement.forward(&movement_batch(train, chunk, &cfg.segments), Mode::Train)?;
            let (loss, gx, gy) = dcca_loss_and_gradient(&rows(&pa.output), &rows(&pm.output), cfg.model.r_reg)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            let ga = audio.backward(&pa, &row_major(&gx));
            let gm = movement.backward(&pm, &row_major(&gy));
            let grads: Vec<Vec<f64>> = ga.params.into_iter().chain(gm.params).collect();
            let mut params: Vec<&mut Param> = audio.trainable_mut().into_iter().chain(movement.trainable_mut()).collect();
            optimizer
                .step(&mut params, &grads)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            audio.update_running_stats(&pa);
            movement.update_running_stats(&pm);
            total += loss;
            debug!("epoch {epoch} batch {b}: loss {loss:.6}");
        }
        let mean = total / bounds.len() as f64;
        info!("fold {fold} run {run} epoch {}: loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    let (xa, xm) = branch_outputs(cfg, &audio, &movement, train, &refs)?;
    let k = effective_k(cfg, &audio, &movement);
    let cca = fit_linear_cca(&xa, &xm, k, cfg.model.r_reg)?;
    info!("canonical correlations: {:?}", &cca.corrs[..cca.k.min(4)]);
    let meta = Checkpoint::meta_for(
        &audio,
        &movement,
        &optimizer,
        &cca,
        CheckpointFields {
            config_hash: cfg.hash(),
            fold,
            run,
            seed,
            trained: true,
            loss_history: history,
            train_ids: sorted_ids(train),
            target_clip_id: target.clip_id.clone(),
            target: target.stats,
            batch_norm: cfg.model.batch_norm,
        },
    );
    Ok(Checkpoint {
        meta,
        audio,
        movement,
        optimizer,
        cca,
    })
}

/// Chance-level reference model: freshly initialized branches whose
/// batch-norm statistics are set from training segments (no gradient steps)
/// and a random projection, centered on those segments, in place of the
/// fitted CCA.
pub fn untrained_model(
    cfg: &RunConfig,
    train: &[ClipFeatures],
    fold: usize,
    run: usize,
    target: &TargetFrame,
) -> Result<Checkpoint> {
    let seed = cfg.run_seed(run);
    let (mut audio, mut movement) = build_branches(cfg, seed)?;
    let mut refs = segment_refs(train, &cfg.segments);
    if refs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training segments".into()));
    }
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_CALIBRATION)));
    refs.truncate(CALIBRATION_SEGMENTS);
    let pa = audio.forward(&audio_batch(train, &refs, &cfg.segments), Mode::Train)?;
    audio.calibrate_running_stats(&pa);
    drop(pa);
    let pm = movement.forward(&movement_batch(train, &refs, &cfg.segments), Mode::Train)?;
    movement.calibrate_running_stats(&pm);
    drop(pm);
    // Centered like a fitted CCA, so no single direction dominates the cosines.
    let (xa, xm) = branch_outputs(cfg, &audio, &movement, train, &refs)?;
    let k = effective_k(cfg, &audio, &movement);
    let mut cca = CcaModel::random(audio.output_dim(), movement.output_dim(), k, mix_seed(seed, STREAM_RANDOM_CCA));
    cca.mean_x = column_means(&xa);
    cca.mean_y = column_means(&xm);
    let optimizer = Optimizer::new(cfg.train.optimizer);
    let meta = Checkpoint::meta_for(
        &audio,
        &movement,
        &optimizer,
        &cca,
        CheckpointFields {
            config_hash: cfg.hash(),
            fold,
            run,
            seed,
            trained: false,
            loss_history: Vec::new(),
            train_ids: Vec::new(),
            target_clip_id: target.clip_id.clone(),
            target: target.stats,
            batch_norm: cfg.model.batch_norm,
        },
    );
    Ok(Checkpoint {
        meta,
        audio,
        movement,
        optimizer,
        cca,
    })
}
