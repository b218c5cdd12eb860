use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use voicescreen::audio::{write_wav, AudioBuffer};
use voicescreen::cohort::{generate_cohort, CohortConfig};
use voicescreen::error::Error;
use voicescreen::eval::{
    run_cross_validation, run_sweep, verify_audit, CellOutcome, FitStage, PipelineConfig, SweepSpec,
};
use voicescreen::features::{write_fvec, EmbeddingMatrix, FeatureSetId};
use voicescreen::manifest::{write_manifest, DatasetManifest, Label, ParticipantRecord, Scenario};
use voicescreen::models::ModelKind;
use voicescreen::rng::stream;

fn small_cohort(dir: &Path, per_class: usize, duration: f64, seed: u64) -> DatasetManifest {
    let cfg = CohortConfig {
        n_depressed: per_class,
        n_healthy: per_class,
        recording_duration_s: duration,
        seed,
        ..CohortConfig::default()
    };
    generate_cohort(&cfg, dir).unwrap()
}

fn quick(feature: FeatureSetId, model: ModelKind, t: f64, n: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(feature, model, t, n, 5);
    cfg.train.epochs = 60;
    cfg
}

#[test]
fn single_cell_sweep_equals_cross_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cohort(dir.path(), 5, 20.0, 1);
    let cfg = quick(FeatureSetId::EgemapsLite, ModelKind::Mlp, 5.0, 3);
    let cv = run_cross_validation(&m, &cfg).unwrap();
    let sweep = run_sweep(&m, &SweepSpec::single(5.0, 3), &cfg).unwrap();
    let cell = &sweep.grid.cells[0];
    assert_eq!(cell.report().unwrap(), &cv.report);
    assert_eq!(sweep.audit, cv.audit);
    assert_eq!(
        cell.report().unwrap().to_json().unwrap(),
        cv.report.to_json().unwrap()
    );
}

#[test]
fn audit_covers_every_fold_and_never_sees_test_ids() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cohort(dir.path(), 5, 20.0, 2);
    let out = run_cross_validation(&m, &quick(FeatureSetId::EgemapsLite, ModelKind::Svm, 5.0, 3)).unwrap();
    assert_eq!(out.audit.len(), 10);
    for f in 0..5 {
        let stages: Vec<FitStage> = out.audit.iter().filter(|e| e.fold == f).map(|e| e.stage).collect();
        assert_eq!(stages, [FitStage::Standardizer, FitStage::Model]);
    }
    for e in &out.audit {
        assert_eq!(e.participant_ids.len(), 8);
        for id in &e.participant_ids {
            assert_ne!(out.folds.fold_of(id), Some(e.fold));
        }
    }
    verify_audit(&out.folds, &out.audit).unwrap();
    let r = &out.report;
    let pooled = r.per_fold.iter().fold((0, 0, 0, 0), |a, f| {
        (a.0 + f.counts.tp, a.1 + f.counts.fn_, a.2 + f.counts.tn, a.3 + f.counts.fp)
    });
    assert_eq!(pooled, (r.counts.tp, r.counts.fn_, r.counts.tn, r.counts.fp));
    assert_eq!(r.counts.tp + r.counts.fn_, 5);
    assert_eq!(r.counts.tn + r.counts.fp, 5);
    assert_eq!(
        r.metrics.accuracy,
        (r.counts.tp + r.counts.tn) as f64 / r.counts.total() as f64
    );
    assert_eq!(r.predictions.len(), 10);
}

#[test]
fn long_clips_fall_back_to_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cohort(dir.path(), 5, 20.0, 3);
    let out = run_cross_validation(&m, &quick(FeatureSetId::EgemapsLite, ModelKind::Mlp, 10.0, 5)).unwrap();
    assert!(out.report.exclusions.is_empty());
    assert_eq!(out.report.overlap_flagged.len(), 10);
    assert_eq!(out.report.counts.total(), 10);
}

fn add_participant(m: &mut DatasetManifest, id: &str, label: Label, wav: &Path) {
    m.participants.push(ParticipantRecord {
        id: id.into(),
        label,
        scenario: Scenario::Synthetic,
        recordings: vec![PathBuf::from(wav.file_name().unwrap())],
        embeddings: None,
    });
}

#[test]
fn short_recording_is_excluded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small_cohort(dir.path(), 5, 20.0, 4);
    let short = dir.path().join("short.wav");
    let mut rng = stream(0, &["short"]);
    let samples: Vec<f64> = (0..3 * 16_000).map(|_| rng.gen_range(-0.3..0.3)).collect();
    write_wav(&short, &AudioBuffer::new(samples, 16_000).unwrap()).unwrap();
    add_participant(&mut m, "x01", Label::Healthy, &short);
    let out = run_cross_validation(&m, &quick(FeatureSetId::EgemapsLite, ModelKind::Mlp, 5.0, 2)).unwrap();
    assert_eq!(out.report.exclusions.len(), 1);
    assert_eq!(out.report.exclusions[0].participant_id, "x01");
    assert!(out.report.exclusions[0].reason.contains("shorter than"));
    assert_eq!(out.report.counts.total(), 10);
    // the excluded participant still occupies a fold slot
    assert!(out.folds.fold_of("x01").is_some());
}

#[test]
fn training_split_without_positives_collapses() {
    let dir = tempfile::tempdir().unwrap();
    let healthy = small_cohort(dir.path(), 2, 8.0, 5);
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF....").unwrap();
    let mut m = DatasetManifest {
        participants: healthy
            .participants
            .into_iter()
            .filter(|p| p.label == Label::Healthy)
            .collect(),
        ..healthy
    };
    add_participant(&mut m, "d1", Label::Depressed, &junk);
    add_participant(&mut m, "d2", Label::Depressed, &junk);
    let mut cfg = quick(FeatureSetId::EgemapsLite, ModelKind::Mlp, 3.0, 1);
    cfg.k = 2;
    let err = run_cross_validation(&m, &cfg).unwrap_err();
    assert!(matches!(err, Error::FoldCollapse(_)), "{err}");
}

#[test]
fn scenario_filter_selects_participants() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cohort(dir.path(), 5, 8.0, 6);
    let mut cfg = quick(FeatureSetId::EgemapsLite, ModelKind::Mlp, 3.0, 1);
    cfg.scenarios = vec![Scenario::Reading];
    assert!(matches!(run_cross_validation(&m, &cfg), Err(Error::EmptySelection)));
}

/// Per-clip embedding files whose frames are shifted by the label.
fn embedding_manifest(dir: &Path, per_class: usize, clips: usize) -> DatasetManifest {
    let mut participants = Vec::new();
    let wav = dir.join("unused.wav");
    write_wav(&wav, &AudioBuffer::new(vec![0.0; 1600], 16_000).unwrap()).unwrap();
    for i in 0..2 * per_class {
        let label = if i < per_class { Label::Depressed } else { Label::Healthy };
        let id = format!("e{i:02}");
        let shift = if label == Label::Depressed { 0.6 } else { -0.6 };
        let mut rng = stream(9, &["emb", &id]);
        let mut index = BTreeMap::new();
        let n_clips = if i == 0 { 2 } else { clips };
        for c in 0..n_clips {
            let values: Vec<f64> = (0..10 * 8)
                .map(|_| (shift + rng.gen_range(-1.0..1.0)) as f32 as f64)
                .collect();
            let rel = PathBuf::from(format!("{id}_{c}.fvec"));
            write_fvec(dir.join(&rel), &EmbeddingMatrix::new(10, 8, values).unwrap()).unwrap();
            index.insert(format!("clip{c}"), rel);
        }
        participants.push(ParticipantRecord {
            id,
            label,
            scenario: Scenario::Chatbot,
            recordings: vec![PathBuf::from("unused.wav")],
            embeddings: Some(index),
        });
    }
    let m = DatasetManifest {
        version: 1,
        participants,
        base_dir: dir.to_path_buf(),
    };
    write_manifest(dir.join("manifest.json"), &m).unwrap();
    voicescreen::manifest::parse_manifest(dir.join("manifest.json")).unwrap()
}

#[test]
fn embedding_pipeline_separates_and_excludes_short_lists() {
    let dir = tempfile::tempdir().unwrap();
    let m = embedding_manifest(dir.path(), 8, 6);
    let cfg = quick(FeatureSetId::Embedding, ModelKind::Mlp, 5.0, 3);
    let out = run_cross_validation(&m, &cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.exclusions.len(), 1);
    assert_eq!(r.exclusions[0].participant_id, "e00");
    assert_eq!(r.counts.total(), 15);
    assert!(r.metrics.accuracy >= 0.9, "{:?}", r.metrics);
    assert_eq!(r.config.scenario, "all");
    assert!(r.predictions.iter().all(|p| p.clips == 3));
}

#[test]
fn sweep_records_skips_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cohort(dir.path(), 5, 12.0, 7);
    let spec = SweepSpec {
        durations_s: vec![3.0, 14.0],
        counts: vec![1, 7],
        constraints: vec![voicescreen::eval::CellConstraint {
            clip_count: 7,
            max_duration_s: 3.0,
        }],
    };
    let out = run_sweep(&m, &spec, &quick(FeatureSetId::EgemapsLite, ModelKind::Svm, 3.0, 1)).unwrap();
    let g = &out.grid;
    assert_eq!(g.cells.len(), 4);
    assert!(g.cell(3.0, 1).unwrap().report().is_some());
    assert!(g.cell(3.0, 7).unwrap().report().is_some(), "{:?}", g.cell(3.0, 7).unwrap().outcome);
    assert!(matches!(g.cell(14.0, 7).unwrap().outcome, CellOutcome::Skipped { .. }));
    // 14 s clips from 12 s recordings: everyone is excluded
    assert!(matches!(g.cell(14.0, 1).unwrap().outcome, CellOutcome::Failed { .. }));
    let text = g.to_json().unwrap();
    let back: voicescreen::eval::SweepGrid = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, g);
}
