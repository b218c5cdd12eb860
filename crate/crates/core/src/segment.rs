//! Voice-activity detection and random T-second clip sampling.
//!
//! Clip starts live on a 1 s grid. A grid position is a candidate when the
//! window `[start, start + T)` is covered by voiced regions for at least
//! `min_voiced_ratio` of its length; N candidates are then drawn at random
//! without replacement.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{frame_signal, AudioBuffer};
use crate::error::{Error, Result};
use crate::lld::energy_rms_db;
use crate::rng;

pub const VAD_FRAME_MS: f64 = 25.0;
pub const VAD_HOP_MS: f64 = 10.0;
pub const DEFAULT_THRESHOLD_DB: f64 = -25.0;
pub const DEFAULT_MIN_REGION_MS: f64 = 100.0;
const GRID_S: f64 = 1.0;
const ENERGY_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoicedRegion {
    pub start_s: f64,
    pub end_s: f64,
}

impl VoicedRegion {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSamplingConfig {
    /// Clip length T in seconds.
    pub clip_duration_s: f64,
    /// Clips per participant, N.
    pub clip_count: usize,
    pub seed: u64,
    #[serde(default = "default_min_voiced_ratio")]
    pub min_voiced_ratio: f64,
    #[serde(default)]
    pub allow_overlap: bool,
    #[serde(default = "default_threshold_db")]
    pub threshold_db: f64,
    #[serde(default = "default_min_region_ms")]
    pub min_region_ms: f64,
}

fn default_min_voiced_ratio() -> f64 {
    0.5
}
fn default_threshold_db() -> f64 {
    DEFAULT_THRESHOLD_DB
}
fn default_min_region_ms() -> f64 {
    DEFAULT_MIN_REGION_MS
}

impl ClipSamplingConfig {
    pub fn new(clip_duration_s: f64, clip_count: usize, seed: u64) -> Self {
        Self {
            clip_duration_s,
            clip_count,
            seed,
            min_voiced_ratio: default_min_voiced_ratio(),
            allow_overlap: false,
            threshold_db: DEFAULT_THRESHOLD_DB,
            min_region_ms: DEFAULT_MIN_REGION_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_duration_s > 0.0 && self.clip_duration_s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "clip duration must be positive, got {}",
                self.clip_duration_s
            )));
        }
        if self.clip_count == 0 {
            return Err(Error::InvalidConfig("clip count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_voiced_ratio) {
            return Err(Error::InvalidConfig(format!(
                "min_voiced_ratio must lie in [0, 1], got {}",
                self.min_voiced_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub participant_id: String,
    pub recording_id: String,
    pub start_s: f64,
    pub buffer: AudioBuffer,
}

impl Clip {
    pub fn duration_s(&self) -> f64 {
        self.buffer.duration_s()
    }

    /// Stable identifier, `participant/recording@start`.
    pub fn id(&self) -> String {
        format!("{}/{}@{}", self.participant_id, self.recording_id, self.start_s)
    }
}

/// The clips drawn for one participant.
#[derive(Debug, Clone)]
pub struct ClipSelection {
    pub clips: Vec<Clip>,
    /// Set when disjoint clips could not be found and overlapping ones were
    /// returned instead.
    pub overlap_flag: bool,
}

/// One line of the clip inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub participant_id: String,
    pub recording_id: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub overlap_flag: bool,
}

impl ClipSelection {
    pub fn records(&self) -> Vec<ClipRecord> {
        self.clips
            .iter()
            .map(|c| ClipRecord {
                participant_id: c.participant_id.clone(),
                recording_id: c.recording_id.clone(),
                start_s: c.start_s,
                duration_s: c.duration_s(),
                overlap_flag: self.overlap_flag,
            })
            .collect()
    }
}

/// Energy-threshold VAD on 25 ms / 10 ms frames.
///
/// A frame is active when its RMS level exceeds the recording's 95th
/// percentile frame level plus `threshold_db` (which is negative). Frames at
/// the digital-silence floor are never active.
pub fn detect_voiced_regions(
    buf: &AudioBuffer,
    threshold_db: f64,
    min_region_ms: f64,
) -> Vec<VoicedRegion> {
    let Ok(frames) = frame_signal(buf, VAD_FRAME_MS, VAD_HOP_MS) else {
        return Vec::new();
    };
    let levels: Vec<f64> = frames.iter().map(energy_rms_db).collect();
    let mut sorted = levels.clone();
    sorted.sort_by(f64::total_cmp);
    let reference = percentile_sorted(&sorted, 0.95);
    let active: Vec<bool> = levels
        .iter()
        .map(|&l| l > ENERGY_FLOOR_DB && l > reference + threshold_db)
        .collect();

    // An onset lies between the end of the last silent frame and the end of
    // the first active one; take the former. Offsets likewise end at the
    // start of the next silent frame.
    let rate = buf.sample_rate_hz() as f64;
    let hop_s = frames.hop() as f64 / rate;
    let frame_s = frames.frame_len() as f64 / rate;
    let duration = buf.duration_s();
    let last = active.len() - 1;

    let mut regions: Vec<VoicedRegion> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let first = i;
        while i + 1 < active.len() && active[i + 1] {
            i += 1;
        }
        let start_s = if first == 0 {
            0.0
        } else {
            (first - 1) as f64 * hop_s + frame_s
        };
        let end_s = if i == last {
            duration
        } else {
            (i + 1) as f64 * hop_s
        };
        let region = VoicedRegion { start_s, end_s };
        if end_s > start_s && region.duration_s() * 1000.0 >= min_region_ms {
            regions.push(region);
        }
        i += 1;
    }
    regions
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fraction of `[start, start + len)` covered by `regions`.
pub fn voiced_coverage(regions: &[VoicedRegion], start_s: f64, len_s: f64) -> f64 {
    let end = start_s + len_s;
    let covered: f64 = regions
        .iter()
        .map(|r| (r.end_s.min(end) - r.start_s.max(start_s)).max(0.0))
        .sum();
    covered / len_s
}

/// A recording prepared for sampling.
pub struct SourceRecording<'a> {
    pub recording_id: &'a str,
    pub buffer: &'a AudioBuffer,
    pub regions: &'a [VoicedRegion],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    recording: usize,
    start_s: f64,
}

/// Draws `cfg.clip_count` clips of `cfg.clip_duration_s` from one recording.
pub fn sample_clips(
    buf: &AudioBuffer,
    regions: &[VoicedRegion],
    cfg: &ClipSamplingConfig,
    participant_id: &str,
    recording_id: &str,
) -> Result<ClipSelection> {
    sample_participant_clips(
        participant_id,
        &[SourceRecording {
            recording_id,
            buffer: buf,
            regions,
        }],
        cfg,
    )
}

/// Draws clips from the pooled candidate windows of all of a participant's
/// recordings. The generator is seeded from `(cfg.seed, participant_id,
/// recording ids...)`, so results do not depend on the order participants
/// are processed in.
pub fn sample_participant_clips(
    participant_id: &str,
    recordings: &[SourceRecording<'_>],
    cfg: &ClipSamplingConfig,
) -> Result<ClipSelection> {
    cfg.validate()?;
    let t = cfg.clip_duration_s;
    let longest = recordings
        .iter()
        .map(|r| r.buffer.duration_s())
        .fold(0.0, f64::max);
    if longest < t {
        return Err(Error::InsufficientAudio {
            duration_s: longest,
            clip_s: t,
        });
    }

    let mut candidates = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        let duration = rec.buffer.duration_s();
        let mut k = 0usize;
        loop {
            let start = k as f64 * GRID_S;
            if start + t > duration + 1e-9 {
                break;
            }
            if voiced_coverage(rec.regions, start, t) >= cfg.min_voiced_ratio {
                candidates.push(Candidate {
                    recording: ri,
                    start_s: start,
                });
            }
            k += 1;
        }
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientVoiced {
            min_ratio: cfg.min_voiced_ratio,
        });
    }
    let n = cfg.clip_count;
    if candidates.len() < n {
        return Err(Error::TooFewCandidates {
            have: candidates.len(),
            need: n,
        });
    }

    let mut key: Vec<&str> = vec![participant_id];
    key.extend(recordings.iter().map(|r| r.recording_id));
    let mut rng = rng::stream(cfg.seed, &key);
    let mut order = candidates.clone();
    order.shuffle(&mut rng);

    let (mut chosen, overlap_flag) = if cfg.allow_overlap {
        (order[..n].to_vec(), false)
    } else {
        match pick_disjoint(&order, n, t) {
            Some(c) => (c, false),
            None => {
                log::warn!(
                    "participant {participant_id}: fewer than {n} disjoint {t} s windows, allowing overlap"
                );
                (order[..n].to_vec(), true)
            }
        }
    };
    chosen.sort_by(|a, b| {
        a.recording
            .cmp(&b.recording)
            .then(a.start_s.total_cmp(&b.start_s))
    });

    let clips = chosen
        .into_iter()
        .map(|c| {
            let rec = &recordings[c.recording];
            let rate = rec.buffer.sample_rate_hz() as f64;
            let start = (c.start_s * rate).round() as usize;
            let len = (t * rate).round() as usize;
            Clip {
                participant_id: participant_id.to_string(),
                recording_id: rec.recording_id.to_string(),
                start_s: c.start_s,
                buffer: rec.buffer.slice(start, len),
            }
        })
        .collect();
    Ok(ClipSelection {
        clips,
        overlap_flag,
    })
}

fn overlaps(a: &Candidate, b: &Candidate, t: f64) -> bool {
    a.recording == b.recording && (a.start_s - b.start_s).abs() < t - 1e-9
}

/// Size of the largest set of mutually disjoint windows among `pool` that
/// also avoid everything in `taken`. Earliest-start greedy is optimal for
/// equal-length intervals.
fn max_packing(pool: &[Candidate], taken: &[Candidate], t: f64) -> usize {
    let mut free: Vec<&Candidate> = pool
        .iter()
        .filter(|c| taken.iter().all(|x| !overlaps(c, x, t)))
        .collect();
    free.sort_by(|a, b| {
        a.recording
            .cmp(&b.recording)
            .then(a.start_s.total_cmp(&b.start_s))
    });
    let mut count = 0;
    let mut last: Option<&Candidate> = None;
    for c in free {
        if last.map_or(true, |l| !overlaps(c, l, t)) {
            count += 1;
            last = Some(c);
        }
    }
    count
}

/// Walks the shuffled candidates, keeping each one that leaves room for the
/// rest. Returns `None` when `n` disjoint windows do not exist.
fn pick_disjoint(order: &[Candidate], n: usize, t: f64) -> Option<Vec<Candidate>> {
    if max_packing(order, &[], t) < n {
        return None;
    }
    let mut taken: Vec<Candidate> = Vec::with_capacity(n);
    for c in order {
        if taken.len() == n {
            break;
        }
        if taken.iter().any(|x| overlaps(c, x, t)) {
            continue;
        }
        taken.push(*c);
        if taken.len() + max_packing(order, &taken, t) < n {
            taken.pop();
        }
    }
    (taken.len() == n).then_some(taken)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * 16000.0) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
            .collect()
    }

    fn buf(s: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(s, 16000).unwrap()
    }

    fn full_region(b: &AudioBuffer) -> Vec<VoicedRegion> {
        vec![VoicedRegion {
            start_s: 0.0,
            end_s: b.duration_s(),
        }]
    }

    #[test]
    fn silence_has_no_regions() {
        let b = buf(vec![0.0; 48000]);
        assert!(detect_voiced_regions(&b, -25.0, 100.0).is_empty());
    }

    #[test]
    fn steady_tone_is_one_region() {
        let b = buf(tone(3.0, 1.0));
        let r = detect_voiced_regions(&b, -25.0, 100.0);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].start_s, 0.0);
        assert!((r[0].end_s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn tone_gap_tone_gives_two_regions() {
        let mut s = tone(1.0, 0.8);
        s.extend(vec![0.0; 16000]);
        s.extend(tone(1.0, 0.8));
        let r = detect_voiced_regions(&buf(s), -25.0, 100.0);
        assert_eq!(r.len(), 2, "{r:?}");
        let hop = 0.01;
        assert!(r[0].start_s.abs() <= hop);
        assert!((r[0].end_s - 1.0).abs() <= hop, "{:?}", r[0]);
        assert!((r[1].start_s - 2.0).abs() <= hop, "{:?}", r[1]);
        assert!((r[1].end_s - 3.0).abs() <= hop);
    }

    #[test]
    fn short_bursts_are_dropped() {
        let mut s = tone(1.0, 0.8);
        s.extend(vec![0.0; 16000]);
        s.extend(tone(0.03, 0.8));
        s.extend(vec![0.0; 16000]);
        let r = detect_voiced_regions(&buf(s), -25.0, 100.0);
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn sixty_seconds_five_clips() {
        let b = buf(vec![0.1; 60 * 16000]);
        let regions = full_region(&b);
        let cfg = ClipSamplingConfig::new(10.0, 5, 42);
        let sel = sample_clips(&b, &regions, &cfg, "p1", "r1").unwrap();
        assert_eq!(sel.clips.len(), 5);
        assert!(!sel.overlap_flag);
        let mut starts: Vec<f64> = sel.clips.iter().map(|c| c.start_s).collect();
        for c in &sel.clips {
            assert_eq!(c.buffer.len(), 160_000);
            assert!((0.0..=50.0).contains(&c.start_s));
        }
        starts.dedup();
        assert_eq!(starts.len(), 5);
        for (i, a) in sel.clips.iter().enumerate() {
            for b in &sel.clips[i + 1..] {
                assert!((a.start_s - b.start_s).abs() >= 10.0);
            }
        }
        let again = sample_clips(&b, &regions, &cfg, "p1", "r1").unwrap();
        let s2: Vec<f64> = again.clips.iter().map(|c| c.start_s).collect();
        assert_eq!(starts, s2);
    }

    #[test]
    fn short_recording_is_insufficient() {
        let b = buf(vec![0.1; 8 * 16000]);
        let cfg = ClipSamplingConfig::new(10.0, 1, 0);
        assert!(matches!(
            sample_clips(&b, &full_region(&b), &cfg, "p", "r"),
            Err(Error::InsufficientAudio { .. })
        ));
    }

    #[test]
    fn unvoiced_recording_is_insufficient_voiced() {
        let b = buf(vec![0.0; 20 * 16000]);
        let cfg = ClipSamplingConfig::new(5.0, 1, 0);
        assert!(matches!(
            sample_clips(&b, &[], &cfg, "p", "r"),
            Err(Error::InsufficientVoiced { .. })
        ));
    }

    #[test]
    fn overlap_fallback_is_flagged() {
        // 55 s fits 11 disjoint 5 s windows, but only 2 disjoint 20 s ones.
        let b = buf(vec![0.1; 55 * 16000]);
        let cfg = ClipSamplingConfig::new(5.0, 11, 1);
        let sel = sample_clips(&b, &full_region(&b), &cfg, "p", "r").unwrap();
        assert!(!sel.overlap_flag);
        assert_eq!(sel.clips.len(), 11);

        let cfg = ClipSamplingConfig::new(20.0, 5, 1);
        let sel = sample_clips(&b, &full_region(&b), &cfg, "p", "r").unwrap();
        assert!(sel.overlap_flag);
        assert_eq!(sel.clips.len(), 5);
    }

    #[test]
    fn too_few_candidates_even_with_overlap() {
        let b = buf(vec![0.1; 12 * 16000]);
        let cfg = ClipSamplingConfig::new(10.0, 5, 1);
        assert!(matches!(
            sample_clips(&b, &full_region(&b), &cfg, "p", "r"),
            Err(Error::TooFewCandidates { have: 3, need: 5 })
        ));
    }

    #[test]
    fn pooled_recordings() {
        let a = buf(vec![0.1; 12 * 16000]);
        let b = buf(vec![0.1; 25 * 16000]);
        let ra = full_region(&a);
        let rb = full_region(&b);
        let recs = [
            SourceRecording { recording_id: "a", buffer: &a, regions: &ra },
            SourceRecording { recording_id: "b", buffer: &b, regions: &rb },
        ];
        let cfg = ClipSamplingConfig::new(10.0, 3, 5);
        let sel = sample_participant_clips("p", &recs, &cfg).unwrap();
        assert_eq!(sel.clips.len(), 3);
        assert!(!sel.overlap_flag);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn sampling_contracts(
            seed in any::<u64>(),
            seconds in 20usize..90,
            t in 1usize..8,
            n in 1usize..6,
            gaps in proptest::collection::vec((0.0f64..80.0, 0.5f64..4.0), 0..6),
        ) {
            let b = buf(vec![0.1; seconds * 16000]);
            let dur = b.duration_s();
            // voiced everywhere except the gaps
            let mut cuts: Vec<(f64, f64)> = gaps.iter().map(|&(s, l)| (s.min(dur), (s + l).min(dur))).collect();
            cuts.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut regions = Vec::new();
            let mut cursor = 0.0;
            for (s, e) in cuts {
                if s > cursor { regions.push(VoicedRegion { start_s: cursor, end_s: s }); }
                cursor = cursor.max(e);
            }
            if cursor < dur { regions.push(VoicedRegion { start_s: cursor, end_s: dur }); }

            let cfg = ClipSamplingConfig::new(t as f64, n, seed);
            let Ok(sel) = sample_clips(&b, &regions, &cfg, "p", "r") else { return Ok(()); };
            prop_assert_eq!(sel.clips.len(), n);
            for c in &sel.clips {
                prop_assert_eq!(c.buffer.len(), t * 16000);
                prop_assert!(c.start_s + t as f64 <= dur + 1e-9);
                prop_assert!(voiced_coverage(&regions, c.start_s, t as f64) >= cfg.min_voiced_ratio);
            }
            if !sel.overlap_flag {
                for (i, a) in sel.clips.iter().enumerate() {
                    for c in &sel.clips[i + 1..] {
                        prop_assert!((a.start_s - c.start_s).abs() >= t as f64);
                    }
                }
            }
            // seed only moves the starts
            let other = ClipSamplingConfig { seed: seed ^ 0x5555, ..cfg.clone() };
            let sel2 = sample_clips(&b, &regions, &other, "p", "r").unwrap();
            prop_assert_eq!(sel2.clips.len(), n);
            prop_assert!(sel2.clips.iter().all(|c| c.buffer.len() == t * 16000));
        }
    }
}
