//! Participant-level evaluation: stratified folds, clip voting, confusion
//! metrics, cross-validation and the T x N sweep.
//!
//! Every fit performed during a run is written to an audit log, and each run
//! checks the log against its folds before a report is returned.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, resample, AudioBuffer, CANONICAL_RATE_HZ};
use crate::error::{Error, Result};
use crate::features::{load_embedding_matrix, pool_mean, FeatureExtractor, FeatureSetId};
use crate::manifest::{DatasetManifest, Label, ParticipantRecord, Scenario};
use crate::models::{fit_standardizer, Model, ModelKind, TrainConfig};
use crate::rng::{derive_seed, stream};
use crate::segment::{
    detect_voiced_regions, sample_participant_clips, ClipRecord, ClipSamplingConfig,
    ClipSelection, SourceRecording, VoicedRegion,
};

pub const DEFAULT_FOLDS: usize = 5;
pub const REPORT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Participant ids per fold, sorted.
    pub folds: Vec<Vec<String>>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| f.binary_search_by(|x| x.as_str().cmp(id)).is_ok())
    }

    /// Checks that the folds are pairwise disjoint and cover exactly `ids`.
    pub fn check_partition<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (f, fold) in self.folds.iter().enumerate() {
            for id in fold {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Leakage {
                        id: id.clone(),
                        what: "more than one fold".into(),
                        fold: f,
                    });
                }
            }
        }
        let expected: BTreeSet<&str> = ids.into_iter().collect();
        if let Some(missing) = expected.difference(&seen).next() {
            return Err(Error::InvalidConfig(format!(
                "participant '{missing}' is in no fold"
            )));
        }
        if let Some(extra) = seen.difference(&expected).next() {
            return Err(Error::InvalidConfig(format!(
                "fold member '{extra}' is not a selected participant"
            )));
        }
        Ok(())
    }
}

/// Stratified participant folds. Each label's ids are sorted, shuffled with a
/// stream keyed by the label, and dealt round-robin; the healthy stratum
/// continues dealing where the depressed stratum stopped so total fold sizes
/// stay within one of each other.
pub fn make_participant_folds(
    participants: &[(String, Label)],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for label in [Label::Depressed, Label::Healthy] {
        let mut ids: Vec<&str> = participants
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(id, _)| id.as_str())
            .collect();
        if ids.len() < k {
            return Err(Error::TooFewParticipants {
                label: label.as_str().into(),
                have: ids.len(),
                k,
            });
        }
        ids.sort_unstable();
        ids.shuffle(&mut stream(seed, &["folds", label.as_str()]));
        for id in ids {
            folds[next % k].push(id.to_string());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldAssignment { folds })
}

// ---------------------------------------------------------------------------
// voting and metrics

/// Modal clip label; an exact tie goes to the positive class.
pub fn majority_vote(labels: &[bool]) -> Result<bool> {
    if labels.is_empty() {
        return Err(Error::EmptyVote);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok(2 * pos >= labels.len())
}

/// Participant-level confusion counts, depressed = positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Ratios with a zero denominator are `None` and serialise as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    Ok(MetricsReport {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
    })
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scenarios to evaluate; participants from other scenarios are ignored.
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<Scenario>,
    /// Clip length, count and VAD settings. Its `seed` is not used: clip
    /// streams are derived from the global seed per (T, N) cell.
    pub sampling: ClipSamplingConfig,
    pub feature_set: FeatureSetId,
    pub model: ModelKind,
    /// Its `seed` is likewise replaced by a per-fold derived seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub k: usize,
    pub seed: u64,
}

fn all_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

impl PipelineConfig {
    pub fn new(
        feature_set: FeatureSetId,
        model: ModelKind,
        clip_duration_s: f64,
        clip_count: usize,
        seed: u64,
    ) -> Self {
        Self {
            scenarios: all_scenarios(),
            sampling: ClipSamplingConfig::new(clip_duration_s, clip_count, 0),
            feature_set,
            model,
            train: TrainConfig::default(),
            k: DEFAULT_FOLDS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("scenario filter is empty".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 folds, got {}", self.k)));
        }
        self.sampling.validate()?;
        self.train.validate()
    }

    /// `all`, or the selected scenarios joined with `+`.
    pub fn scenario_label(&self) -> String {
        let set: BTreeSet<Scenario> = self.scenarios.iter().copied().collect();
        if set.len() == Scenario::ALL.len() {
            "all".into()
        } else {
            set.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
        }
    }

    fn with_cell(&self, t: f64, n: usize) -> Self {
        let mut c = self.clone();
        c.sampling.clip_duration_s = t;
        c.sampling.clip_count = n;
        c
    }

    fn cell_key(&self) -> [String; 2] {
        [
            format!("{}", self.sampling.clip_duration_s),
            format!("{}", self.sampling.clip_count),
        ]
    }

    pub fn folds_seed(&self) -> u64 {
        derive_seed(self.seed, &["folds"])
    }

    pub fn clips_seed(&self) -> u64 {
        let [t, n] = self.cell_key();
        derive_seed(self.seed, &["clips", &t, &n])
    }

    pub fn train_seed(&self, fold: usize) -> u64 {
        let [t, n] = self.cell_key();
        derive_seed(self.seed, &["train", &t, &n, &fold.to_string()])
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub scenario: String,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub feature_set: FeatureSetId,
    pub model: ModelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_participants: Vec<String>,
    pub n_train_participants: usize,
    pub n_train_clips: usize,
    pub counts: ConfusionCounts,
    /// Absent when every test participant of the fold was excluded.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub participant_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPrediction {
    pub participant_id: String,
    pub fold: usize,
    pub label: Label,
    pub predicted: Label,
    pub positive_clips: usize,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub tool: String,
    pub version: String,
    pub pipeline: PipelineConfig,
    pub seed: u64,
    pub folds_seed: u64,
    pub clips_seed: u64,
}

impl Reproducibility {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            pipeline: cfg.clone(),
            seed: cfg.seed,
            folds_seed: cfg.folds_seed(),
            clips_seed: cfg.clips_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub version: u32,
    pub config: CellConfig,
    /// Pooled over all folds.
    pub metrics: MetricsReport,
    pub counts: ConfusionCounts,
    pub per_fold: Vec<FoldReport>,
    pub exclusions: Vec<Exclusion>,
    /// Participants whose clips had to overlap.
    pub overlap_flagged: Vec<String>,
    pub predictions: Vec<ParticipantPrediction>,
    pub seed: u64,
    pub reproducibility: Reproducibility,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStage {
    Standardizer,
    Model,
}

/// One fit call: which participants' clips it saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    #[serde(rename = "T")]
    pub t: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub fold: usize,
    pub stage: FitStage,
    pub participant_ids: Vec<String>,
}

impl AuditEntry {
    fn key(&self) -> (&str, usize, usize, FitStage) {
        (&self.t, self.n, self.fold, self.stage)
    }
}

/// Fails if any fit call in `audit` saw a participant from its own test fold.
pub fn verify_audit(folds: &FoldAssignment, audit: &[AuditEntry]) -> Result<()> {
    for e in audit {
        let test = folds.folds.get(e.fold).ok_or_else(|| {
            Error::InvalidConfig(format!("audit entry names fold {} of {}", e.fold, folds.k()))
        })?;
        if let Some(id) = e.participant_ids.iter().find(|id| test.binary_search(id).is_ok()) {
            return Err(Error::Leakage {
                id: id.clone(),
                what: match e.stage {
                    FitStage::Standardizer => "the standardizer".into(),
                    FitStage::Model => "the model".into(),
                },
                fold: e.fold,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub folds: FoldAssignment,
    pub audit: Vec<AuditEntry>,
}

// ---------------------------------------------------------------------------
// dataset preparation

struct PreparedRecording {
    id: String,
    buffer: AudioBuffer,
    regions: Vec<VoicedRegion>,
}

enum Source {
    Audio(Vec<PreparedRecording>),
    /// Pooled vector per clip id, in key order.
    Embeddings(Vec<(String, Vec<f64>)>),
}

struct Prepared<'a> {
    record: &'a ParticipantRecord,
    source: std::result::Result<Source, String>,
}

/// The selected participants with audio loaded at the canonical rate and VAD
/// applied, or their embeddings loaded, so sweep cells can share them.
pub struct PreparedDataset<'a> {
    participants: Vec<Prepared<'a>>,
    feature_set: FeatureSetId,
    threshold_db: f64,
    min_region_ms: f64,
}

impl<'a> PreparedDataset<'a> {
    pub fn new(dataset: &'a DatasetManifest, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let selected: Vec<&ParticipantRecord> = dataset
            .participants
            .iter()
            .filter(|p| cfg.scenarios.contains(&p.scenario))
            .collect();
        if selected.is_empty() {
            return Err(Error::EmptySelection);
        }
        let participants = selected
            .par_iter()
            .map(|&record| Prepared {
                record,
                source: prepare_source(dataset, record, cfg).map_err(|e| e.to_string()),
            })
            .collect();
        Ok(Self {
            participants,
            feature_set: cfg.feature_set,
            threshold_db: cfg.sampling.threshold_db,
            min_region_ms: cfg.sampling.min_region_ms,
        })
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    fn compatible(&self, cfg: &PipelineConfig) -> bool {
        self.feature_set == cfg.feature_set
            && self.threshold_db == cfg.sampling.threshold_db
            && self.min_region_ms == cfg.sampling.min_region_ms
    }
}

fn prepare_source(
    dataset: &DatasetManifest,
    record: &ParticipantRecord,
    cfg: &PipelineConfig,
) -> Result<Source> {
    if cfg.feature_set == FeatureSetId::Embedding {
        let Some(index) = &record.embeddings else {
            return Err(Error::InvalidConfig("no embeddings listed".into()));
        };
        let mut out = Vec::with_capacity(index.len());
        for (clip_id, rel) in index {
            let m = load_embedding_matrix(dataset.resolve(rel))?;
            out.push((clip_id.clone(), pool_mean(&m).values));
        }
        return Ok(Source::Embeddings(out));
    }
    let mut recs = Vec::with_capacity(record.recordings.len());
    for (i, rel) in record.recordings.iter().enumerate() {
        let mut buffer = load_wav(dataset.resolve(rel))?;
        if buffer.sample_rate_hz() != CANONICAL_RATE_HZ {
            buffer = resample(&buffer, CANONICAL_RATE_HZ)?;
        }
        let regions =
            detect_voiced_regions(&buffer, cfg.sampling.threshold_db, cfg.sampling.min_region_ms);
        recs.push(PreparedRecording {
            id: record.recording_id(i),
            buffer,
            regions,
        });
    }
    Ok(Source::Audio(recs))
}

// ---------------------------------------------------------------------------
// cross-validation

/// Features of one sampled clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub quality_flag: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantFeatures {
    pub participant_id: String,
    pub label: Label,
    pub overlap_flag: bool,
    pub clips: Vec<ClipFeatures>,
}

impl ParticipantFeatures {
    fn positive(&self) -> bool {
        self.label.is_positive()
    }
}

enum Selection<'p> {
    Audio(ClipSelection),
    Embedding(Vec<&'p (String, Vec<f64>)>),
}

/// Errors come back as exclusion reasons.
fn select_clips<'p>(
    p: &'p Prepared<'_>,
    cfg: &PipelineConfig,
) -> std::result::Result<Selection<'p>, String> {
    let source = p.source.as_ref().map_err(Clone::clone)?;
    let id = &p.record.id;
    match source {
        Source::Embeddings(all) => {
            let n = cfg.sampling.clip_count;
            if all.len() < n {
                return Err(Error::TooFewCandidates {
                    have: all.len(),
                    need: n,
                }
                .to_string());
            }
            let mut picks: Vec<usize> = (0..all.len()).collect();
            picks.shuffle(&mut stream(cfg.clips_seed(), &["embedding", id]));
            picks.truncate(n);
            picks.sort_unstable();
            Ok(Selection::Embedding(picks.into_iter().map(|i| &all[i]).collect()))
        }
        Source::Audio(recs) => {
            let sources: Vec<SourceRecording<'_>> = recs
                .iter()
                .map(|r| SourceRecording {
                    recording_id: &r.id,
                    buffer: &r.buffer,
                    regions: &r.regions,
                })
                .collect();
            let mut sampling = cfg.sampling.clone();
            sampling.seed = cfg.clips_seed();
            sample_participant_clips(id, &sources, &sampling)
                .map(Selection::Audio)
                .map_err(|e| e.to_string())
        }
    }
}

fn exclusion(p: &Prepared<'_>, reason: impl ToString) -> Exclusion {
    let reason = reason.to_string();
    log::warn!("excluding {}: {reason}", p.record.id);
    Exclusion {
        participant_id: p.record.id.clone(),
        reason,
    }
}

fn participant_features(
    p: &Prepared<'_>,
    cfg: &PipelineConfig,
) -> std::result::Result<ParticipantFeatures, Exclusion> {
    let selection = select_clips(p, cfg).map_err(|e| exclusion(p, e))?;
    let (clips, overlap_flag) = match selection {
        Selection::Embedding(picked) => (
            picked
                .into_iter()
                .map(|(clip_id, values)| ClipFeatures {
                    clip_id: clip_id.clone(),
                    quality_flag: false,
                    values: values.clone(),
                })
                .collect(),
            false,
        ),
        Selection::Audio(sel) => {
            let extractor =
                FeatureExtractor::new(cfg.feature_set, CANONICAL_RATE_HZ).map_err(|e| exclusion(p, e))?;
            let mut clips = Vec::with_capacity(sel.clips.len());
            for clip in &sel.clips {
                let fv = extractor
                    .extract_clip(clip)
                    .map_err(|e| exclusion(p, format!("clip {}: {e}", clip.id())))?;
                clips.push(ClipFeatures {
                    clip_id: clip.id(),
                    quality_flag: fv.quality_flag,
                    values: fv.values,
                });
            }
            (clips, sel.overlap_flag)
        }
    };
    Ok(ParticipantFeatures {
        participant_id: p.record.id.clone(),
        label: p.record.label,
        overlap_flag,
        clips,
    })
}

/// Draws each participant's clips for the configured (T, N) cell without
/// extracting features. Participants without audio are excluded.
pub fn sample_dataset(
    prep: &PreparedDataset<'_>,
    cfg: &PipelineConfig,
) -> (Vec<ClipRecord>, Vec<Exclusion>) {
    let mut records = Vec::new();
    let mut exclusions = Vec::new();
    for p in &prep.participants {
        match select_clips(p, cfg) {
            Ok(Selection::Audio(sel)) => records.extend(sel.records()),
            Ok(Selection::Embedding(_)) => {
                exclusions.push(exclusion(p, "embedding entries are not sampled from audio"))
            }
            Err(e) => exclusions.push(exclusion(p, e)),
        }
    }
    (records, exclusions)
}

/// Samples and featurises every prepared participant, in manifest order.
pub fn extract_dataset(
    prep: &PreparedDataset<'_>,
    cfg: &PipelineConfig,
) -> (Vec<ParticipantFeatures>, Vec<Exclusion>) {
    let results: Vec<_> = prep
        .participants
        .par_iter()
        .map(|p| participant_features(p, cfg))
        .collect();
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(f) => ok.push(f),
            Err(e) => excluded.push(e),
        }
    }
    (ok, excluded)
}

struct FoldResult {
    report: FoldReport,
    predictions: Vec<ParticipantPrediction>,
    audit: [AuditEntry; 2],
}

fn label_of(positive: bool) -> Label {
    if positive {
        Label::Depressed
    } else {
        Label::Healthy
    }
}

fn run_fold(
    fold: usize,
    folds: &FoldAssignment,
    data: &[ParticipantFeatures],
    cfg: &PipelineConfig,
) -> Result<FoldResult> {
    let test_ids = &folds.folds[fold];
    let is_test = |id: &str| test_ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok();
    let train: Vec<&ParticipantFeatures> =
        data.iter().filter(|p| !is_test(&p.participant_id)).collect();
    let test: Vec<&ParticipantFeatures> =
        data.iter().filter(|p| is_test(&p.participant_id)).collect();

    if !(train.iter().any(|p| p.positive()) && train.iter().any(|p| !p.positive())) {
        return Err(Error::FoldCollapse(fold));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for p in &train {
        for c in &p.clips {
            x.push(c.values.clone());
            y.push(p.positive());
        }
    }
    let mut train_ids: Vec<String> = train.iter().map(|p| p.participant_id.clone()).collect();
    train_ids.sort();
    let [t, _] = cfg.cell_key();
    let entry = |stage| AuditEntry {
        t: t.clone(),
        n: cfg.sampling.clip_count,
        fold,
        stage,
        participant_ids: train_ids.clone(),
    };

    let standardizer = fit_standardizer(&x)?;
    let audit_std = entry(FitStage::Standardizer);
    for r in &mut x {
        *r = standardizer.transform(r)?;
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train_seed(fold);
    let model = Model::train(cfg.model, &x, &y, &train_cfg)?;
    let audit_model = entry(FitStage::Model);

    let mut counts = ConfusionCounts::default();
    let mut predictions = Vec::with_capacity(test.len());
    for p in &test {
        let mut labels = Vec::with_capacity(p.clips.len());
        for c in &p.clips {
            labels.push(model.predict(&standardizer.transform(&c.values)?)?.label);
        }
        let vote = majority_vote(&labels)?;
        counts.record(p.positive(), vote);
        predictions.push(ParticipantPrediction {
            participant_id: p.participant_id.clone(),
            fold,
            label: p.label,
            predicted: label_of(vote),
            positive_clips: labels.iter().filter(|&&l| l).count(),
            clips: labels.len(),
        });
    }
    let metrics = match compute_metrics(&counts) {
        Ok(m) => Some(m),
        Err(Error::EmptyCounts) => None,
        Err(e) => return Err(e),
    };
    Ok(FoldResult {
        report: FoldReport {
            fold,
            test_participants: test.iter().map(|p| p.participant_id.clone()).collect(),
            n_train_participants: train.len(),
            n_train_clips: x.len(),
            counts,
            metrics,
        },
        predictions,
        audit: [audit_std, audit_model],
    })
}

/// Cross-validates one (T, N) configuration on already prepared data.
pub fn run_prepared(prep: &PreparedDataset<'_>, cfg: &PipelineConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    if !prep.compatible(cfg) {
        return Err(Error::InvalidConfig(
            "prepared dataset was built for a different feature set or VAD setting".into(),
        ));
    }
    let roster: Vec<(String, Label)> = prep
        .participants
        .iter()
        .map(|p| (p.record.id.clone(), p.record.label))
        .collect();
    let folds = make_participant_folds(&roster, cfg.k, cfg.folds_seed())?;
    folds.check_partition(roster.iter().map(|(id, _)| id.as_str()))?;

    let (data, exclusions) = extract_dataset(prep, cfg);
    let overlap_flagged: Vec<String> = data
        .iter()
        .filter(|p| p.overlap_flag)
        .map(|p| p.participant_id.clone())
        .collect();
    for id in &overlap_flagged {
        log::info!(
            "{id}: clips overlap at T={} N={}",
            cfg.sampling.clip_duration_s,
            cfg.sampling.clip_count
        );
    }

    let results: Vec<FoldResult> = (0..folds.k())
        .into_par_iter()
        .map(|f| run_fold(f, &folds, &data, cfg))
        .collect::<Result<_>>()?;

    let mut audit: Vec<AuditEntry> = results.iter().flat_map(|r| r.audit.clone()).collect();
    audit.sort_by(|a, b| a.key().cmp(&b.key()));
    verify_audit(&folds, &audit)?;

    let counts: ConfusionCounts = results.iter().map(|r| r.report.counts).sum();
    let metrics = compute_metrics(&counts)?;
    let mut predictions: Vec<ParticipantPrediction> =
        results.iter().flat_map(|r| r.predictions.clone()).collect();
    predictions.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    let report = CvReport {
        version: REPORT_VERSION,
        config: CellConfig {
            scenario: cfg.scenario_label(),
            t: cfg.sampling.clip_duration_s,
            n: cfg.sampling.clip_count,
            feature_set: cfg.feature_set,
            model: cfg.model,
        },
        metrics,
        counts,
        per_fold: results.into_iter().map(|r| r.report).collect(),
        exclusions,
        overlap_flagged,
        predictions,
        seed: cfg.seed,
        reproducibility: Reproducibility::new(cfg),
    };
    Ok(CvOutcome {
        report,
        folds,
        audit,
    })
}

/// Participant-partitioned k-fold cross-validation of the whole pipeline.
pub fn run_cross_validation(dataset: &DatasetManifest, cfg: &PipelineConfig) -> Result<CvOutcome> {
    let prep = PreparedDataset::new(dataset, cfg)?;
    run_prepared(&prep, cfg)
}

/// Runs `f` on a pool of at most `jobs` worker threads.
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// sweep

/// Clip count `n` is only admissible with clips no longer than
/// `max_duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConstraint {
    pub clip_count: usize,
    pub max_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub durations_s: Vec<f64>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub constraints: Vec<CellConstraint>,
}

impl SweepSpec {
    /// T in {5, 10, 15, 20} against N in {1, 3, 5, 7, 11}, with N = 7 capped
    /// at T = 10 and N = 11 only at T = 5: fifteen admissible cells.
    pub fn default_grid() -> Self {
        Self {
            durations_s: vec![5.0, 10.0, 15.0, 20.0],
            counts: vec![1, 3, 5, 7, 11],
            constraints: vec![
                CellConstraint {
                    clip_count: 7,
                    max_duration_s: 10.0,
                },
                CellConstraint {
                    clip_count: 11,
                    max_duration_s: 5.0,
                },
            ],
        }
    }

    pub fn single(t: f64, n: usize) -> Self {
        Self {
            durations_s: vec![t],
            counts: vec![n],
            constraints: Vec::new(),
        }
    }

    /// Why the cell is inadmissible, if it is.
    pub fn skip_reason(&self, t: f64, n: usize) -> Option<String> {
        self.constraints
            .iter()
            .find(|c| c.clip_count == n && t > c.max_duration_s)
            .map(|c| format!("N={n} requires T <= {}", c.max_duration_s))
    }

    /// Requested cells in T-major order.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.durations_s
            .iter()
            .flat_map(|&t| self.counts.iter().map(move |&n| (t, n)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok { report: Box<CvReport> },
    Skipped { reason: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl SweepCell {
    pub fn report(&self) -> Option<&CvReport> {
        match &self.outcome {
            CellOutcome::Ok { report } => Some(report),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub version: u32,
    pub spec: SweepSpec,
    pub cells: Vec<SweepCell>,
    pub seed: u64,
    pub reproducibility: Reproducibility,
}

impl SweepGrid {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn cell(&self, t: f64, n: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.t == t && c.n == n)
    }

    pub fn evaluated(&self) -> usize {
        self.cells.iter().filter(|c| c.report().is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub grid: SweepGrid,
    pub audit: Vec<AuditEntry>,
}

/// Evaluates every admissible cell of `spec`. Cells that fail are recorded
/// with the error; a leakage failure aborts the sweep.
pub fn run_sweep(
    dataset: &DatasetManifest,
    spec: &SweepSpec,
    cfg: &PipelineConfig,
) -> Result<SweepOutcome> {
    let prep = PreparedDataset::new(dataset, cfg)?;
    let mut cells = Vec::new();
    let mut audit = Vec::new();
    for (t, n) in spec.cells() {
        let outcome = if let Some(reason) = spec.skip_reason(t, n) {
            CellOutcome::Skipped { reason }
        } else {
            match run_prepared(&prep, &cfg.with_cell(t, n)) {
                Ok(o) => {
                    audit.extend(o.audit);
                    CellOutcome::Ok {
                        report: Box::new(o.report),
                    }
                }
                Err(e @ Error::Leakage { .. }) => return Err(e),
                Err(e) => {
                    log::warn!("cell T={t} N={n} failed: {e}");
                    CellOutcome::Failed {
                        reason: e.to_string(),
                    }
                }
            }
        };
        cells.push(SweepCell { t, n, outcome });
    }
    Ok(SweepOutcome {
        grid: SweepGrid {
            version: REPORT_VERSION,
            spec: spec.clone(),
            cells,
            seed: cfg.seed,
            reproducibility: Reproducibility::new(cfg),
        },
        audit,
    })
}

// ---------------------------------------------------------------------------
// tables

pub const TABLE_COLUMNS: [&str; 8] = [
    "Interactive mode",
    "Duration",
    "#Audio clips",
    "Feature",
    "Accuracy",
    "Sensitivity(Recall)",
    "Specificity",
    "Precision",
];

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// One table row per report.
pub fn table_rows<'r>(reports: impl IntoIterator<Item = &'r CvReport>) -> Vec<[String; 8]> {
    reports
        .into_iter()
        .map(|r| {
            [
                r.config.scenario.clone(),
                format!("{}s", r.config.t),
                r.config.n.to_string(),
                r.config.feature_set.to_string(),
                pct(Some(r.metrics.accuracy)),
                pct(r.metrics.sensitivity),
                pct(r.metrics.specificity),
                pct(r.metrics.precision),
            ]
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(rows: &[[String; 8]]) -> String {
    let mut out = TABLE_COLUMNS.map(csv_field).join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn render_markdown(rows: &[[String; 8]]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

/// Parses either a single cross-validation report or a sweep grid and
/// returns its table rows; skipped and failed cells produce no row.
pub fn report_rows_from_json(text: &str) -> Result<Vec<[String; 8]>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("cells").is_some() {
        let grid: SweepGrid = serde_json::from_value(value)?;
        Ok(table_rows(grid.cells.iter().filter_map(|c| c.report())))
    } else {
        let report: CvReport = serde_json::from_value(value)?;
        Ok(table_rows([&report]))
    }
}
