use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use dancecca::config::RunConfig;
use dancecca::ingest::{load_audio, write_wav, DatasetManifest};
use dancecca::pipeline::{self, Direction};
use dancecca::synth::{generate_dataset, SynthConfig};
use dancecca::Error;

fn dataset(dir: &Path, objects: usize) -> (RunConfig, DatasetManifest) {
    let sc = SynthConfig {
        n_objects: objects,
        styles: 4,
        noise_sigma: 0.5,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&sc, dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.manifest = ds.manifest_path.clone();
    cfg.paths.cache_dir = dir.join("cache");
    cfg.paths.output_dir = dir.join("out");
    cfg.eval.runs = 1;
    (cfg, ds.manifest)
}

#[test]
fn extraction_skips_fresh_clips_and_redoes_changed_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = dataset(dir.path(), 16);
    let first = pipeline::extract(&cfg, &manifest).unwrap();
    assert_eq!(first.computed.len(), 16);
    assert!(first.failures.is_empty());

    let again = pipeline::extract(&cfg, &manifest).unwrap();
    assert_eq!(again.computed.len(), 0);
    assert_eq!(again.skipped.len(), 16);

    // Changing one input file invalidates only that clip.
    let entry = &manifest.entries()[3];
    let mut clip = load_audio(&entry.audio_path).unwrap();
    clip.samples[100] += 0.25;
    write_wav(&entry.audio_path, &clip).unwrap();
    let third = pipeline::extract(&cfg, &manifest).unwrap();
    assert_eq!(third.computed, vec![entry.clip_id.clone()]);
    assert_eq!(third.skipped.len(), 15);

    // So does a change to feature settings.
    let mut other = cfg.clone();
    other.segments.audio_hop += 1;
    assert_eq!(pipeline::extract(&other, &manifest).unwrap().computed.len(), 16);
}

#[test]
fn folds_partition_the_dataset_by_style() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = dataset(dir.path(), 24);
    let folds = pipeline::folds_for(&cfg, &manifest).unwrap();
    let mut seen = BTreeSet::new();
    for f in 0..cfg.eval.folds {
        let test: BTreeSet<String> = folds.test_ids(f).into_iter().collect();
        let train: BTreeSet<String> = folds.train_ids(f).into_iter().collect();
        assert!(test.is_disjoint(&train));
        assert_eq!(test.len() + train.len(), 24);
        assert!(seen.is_disjoint(&test));
        seen.extend(test);
    }
    assert_eq!(seen.len(), 24);
    // Same seed, same folds.
    assert_eq!(pipeline::folds_for(&cfg, &manifest).unwrap(), folds);
}

#[test]
fn evaluation_refuses_leaked_or_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = dataset(dir.path(), 16);
    pipeline::extract(&cfg, &manifest).unwrap();
    let ckpt = pipeline::train_fold(&cfg, &manifest, 0, 0, true).unwrap();
    let report = pipeline::evaluate_fold(&cfg, &manifest, std::slice::from_ref(&ckpt), 0).unwrap();
    assert_eq!(report.directions.len(), 2);

    let folds = pipeline::folds_for(&cfg, &manifest).unwrap();
    let mut leaked = ckpt.clone();
    leaked.meta.train_ids.push(folds.test_ids(0)[0].clone());
    let err = pipeline::evaluate_fold(&cfg, &manifest, &[leaked], 0).unwrap_err();
    assert!(matches!(err, Error::FoldLeakage(1)), "{err}");

    let err = pipeline::evaluate_fold(&cfg, &manifest, &[ckpt], 1).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn training_needs_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = dataset(dir.path(), 16);
    let err = pipeline::train_fold(&cfg, &manifest, 0, 0, false).unwrap_err();
    assert!(err.to_string().contains("run `extract` first"), "{err}");
}

#[test]
fn retrieval_ranks_every_indexed_clip_once() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = dataset(dir.path(), 16);
    pipeline::extract(&cfg, &manifest).unwrap();
    // One clip without cached features is left out of the index.
    let dropped = manifest.entries()[5].clip_id.clone();
    let ckpt = pipeline::train_fold(&cfg, &manifest, 0, 0, true).unwrap();
    fs::remove_file(pipeline::CachePaths::new(&cfg.paths.cache_dir, &dropped).key).unwrap();
    let entry = &manifest.entries()[0];
    for (direction, query) in [
        (Direction::AudioToMovement, &entry.audio_path),
        (Direction::MovementToAudio, &entry.pose_path),
    ] {
        let hits = pipeline::retrieve(&cfg, &ckpt, &manifest, query, direction).unwrap();
        assert_eq!(hits.len(), 15);
        let ids: BTreeSet<&str> = hits.iter().map(|h| h.clip_id.as_str()).collect();
        assert_eq!(ids.len(), 15);
        assert!(!ids.contains(dropped.as_str()));
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score && w[1].rank == w[0].rank + 1));
    }
}

#[test]
fn directions_parse_and_print() {
    for s in ["audio-to-movement", "movement-to-audio"] {
        assert_eq!(s.parse::<Direction>().unwrap().to_string(), s);
    }
    assert_eq!("a2m".parse::<Direction>().unwrap(), Direction::AudioToMovement);
    assert!("sideways".parse::<Direction>().is_err());
}
