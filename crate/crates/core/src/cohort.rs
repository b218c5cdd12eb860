//! Synthetic voice cohorts with a tunable class effect.
//!
//! Each participant gets a source-filter voice: a train of smooth glottal
//! pulses at a slowly wandering F0, with per-cycle period and amplitude
//! perturbation, passed through three formant resonators, shaped by a
//! syllabic envelope, interrupted by pauses and mixed with a noise floor.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer, CANONICAL_RATE_HZ};
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, DatasetManifest, Label, ParticipantRecord, Scenario};
use crate::rng::{self, Rng};

pub const HEALTHY_F0_MEAN_HZ: f64 = 190.0;
pub const HEALTHY_F0_BETWEEN_SD_HZ: f64 = 20.0;
pub const HEALTHY_F0_WANDER_HZ: f64 = 18.0;
pub const HEALTHY_JITTER: f64 = 0.008;
pub const HEALTHY_SHIMMER: f64 = 0.025;
pub const HEALTHY_PAUSE_RATE: f64 = 0.3;
pub const HEALTHY_MEAN_PAUSE_S: f64 = 0.35;
pub const HEALTHY_SYLLABLE_RATE: f64 = 4.0;
pub const NOISE_FLOOR_DB: f64 = -45.0;
pub const NEUTRAL_FORMANTS: [(f64, f64); 3] = [(500.0, 80.0), (1500.0, 120.0), (2500.0, 160.0)];

/// Glottal pulse width as a fraction of the unperturbed period. The width
/// does not follow the per-cycle jitter, so pulse centres move with onsets.
const OPEN_QUOTIENT: f64 = 0.5;
/// Depth of the per-syllable intensity dip.
const SYLLABLE_DEPTH: f64 = 0.06;
/// For i.i.d. Gaussian ε with sd σ, E|ε_i − ε_(i−1)| = 2σ/√π. Scaling by
/// √π/2 makes the parameters the expected local jitter and shimmer.
const LOCAL_TO_SD: f64 = 0.886_226_925_452_758;
const WANDER_COMPONENTS: usize = 3;
const PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceParams {
    pub f0_mean_hz: f64,
    /// Standard deviation of the slow F0 wander.
    pub f0_sd_hz: f64,
    pub jitter_frac: f64,
    pub shimmer_frac: f64,
    pub pause_rate_per_s: f64,
    pub mean_pause_s: f64,
    pub syllable_rate_per_s: f64,
    /// (centre Hz, bandwidth Hz), ascending.
    pub formants: [(f64, f64); 3],
    /// Noise RMS in dB re full scale, before peak normalisation.
    pub noise_floor_db: f64,
}

impl Default for VoiceParams {
    fn default() -> Self {
        Self {
            f0_mean_hz: HEALTHY_F0_MEAN_HZ,
            f0_sd_hz: HEALTHY_F0_WANDER_HZ,
            jitter_frac: HEALTHY_JITTER,
            shimmer_frac: HEALTHY_SHIMMER,
            pause_rate_per_s: HEALTHY_PAUSE_RATE,
            mean_pause_s: HEALTHY_MEAN_PAUSE_S,
            syllable_rate_per_s: HEALTHY_SYLLABLE_RATE,
            formants: NEUTRAL_FORMANTS,
            noise_floor_db: NOISE_FLOOR_DB,
        }
    }
}

impl VoiceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(70.0..=400.0).contains(&self.f0_mean_hz) {
            return bad(format!("f0_mean_hz {} outside [70, 400]", self.f0_mean_hz));
        }
        for (name, v) in [("jitter_frac", self.jitter_frac), ("shimmer_frac", self.shimmer_frac)] {
            if !(0.0..=0.1).contains(&v) {
                return bad(format!("{name} {v} outside [0, 0.1]"));
            }
        }
        if self.f0_sd_hz < 0.0 || self.pause_rate_per_s < 0.0 || self.mean_pause_s < 0.0 {
            return bad("negative wander or pause parameter".into());
        }
        if self.syllable_rate_per_s <= 0.0 {
            return bad("syllable_rate_per_s must be positive".into());
        }
        let f = &self.formants;
        if !(f[0].0 < f[1].0 && f[1].0 < f[2].0) || f.iter().any(|(c, b)| *c <= 0.0 || *b <= 0.0) {
            return bad("formant centres must be positive and ascending".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_depressed: usize,
    pub n_healthy: usize,
    pub effect_size: f64,
    pub recording_duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_depressed: 20,
            n_healthy: 20,
            effect_size: 1.0,
            recording_duration_s: 120.0,
            sample_rate: CANONICAL_RATE_HZ,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_depressed == 0 || self.n_healthy == 0 {
            return Err(Error::InvalidConfig("cohort needs at least one participant per class".into()));
        }
        if !(0.0..=1.0).contains(&self.effect_size) {
            return Err(Error::InvalidConfig(format!("effect size {} outside [0, 1]", self.effect_size)));
        }
        if self.recording_duration_s < 2.0 {
            return Err(Error::InvalidConfig("recordings must be at least 2 s".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one participant's voice. Healthy speakers get the baseline; the
/// depressed-like shifts scale linearly with `d`. At `d = 0` the label is
/// never consulted.
pub fn class_params(label: Label, d: f64, rng: &mut Rng) -> VoiceParams {
    let base = Normal::new(HEALTHY_F0_MEAN_HZ, HEALTHY_F0_BETWEEN_SD_HZ).unwrap();
    let f0 = base.sample(rng).clamp(80.0, 380.0);
    let mut p = VoiceParams {
        f0_mean_hz: f0,
        ..VoiceParams::default()
    };
    if d > 0.0 && label == Label::Depressed {
        p.f0_mean_hz *= 1.0 - 0.12 * d;
        p.f0_sd_hz *= 1.0 - 0.4 * d;
        p.jitter_frac += 0.015 * d;
        p.shimmer_frac += 0.020 * d;
        p.pause_rate_per_s *= 1.0 + 0.8 * d;
        p.syllable_rate_per_s *= 1.0 - 0.2 * d;
    }
    p
}

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(centre_hz: f64, bandwidth_hz: f64, rate: f64) -> Self {
        let r = (-PI * bandwidth_hz / rate).exp();
        let b = 2.0 * r * (TAU * centre_hz / rate).cos();
        let c = -r * r;
        Self {
            a: 1.0 - b - c,
            b,
            c,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Sum of slow sinusoids with the requested standard deviation.
struct Wander {
    parts: Vec<(f64, f64, f64)>,
}

impl Wander {
    fn new(sd: f64, rng: &mut Rng) -> Self {
        let amp = sd * (2.0 / WANDER_COMPONENTS as f64).sqrt();
        let parts = (0..WANDER_COMPONENTS)
            .map(|_| (amp, rng.gen_range(0.1..0.5), rng.gen_range(0.0..TAU)))
            .collect();
        Self { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts.iter().map(|(a, f, ph)| a * (TAU * f * t + ph).sin()).sum()
    }
}

/// Pause intervals from a Poisson process with exponential lengths.
fn pauses(p: &VoiceParams, duration_s: f64, rng: &mut Rng) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if p.pause_rate_per_s <= 0.0 || p.mean_pause_s <= 0.0 {
        return out;
    }
    let gap = Exp::new(p.pause_rate_per_s).unwrap();
    let len = Exp::new(1.0 / p.mean_pause_s).unwrap();
    let mut t: f64 = gap.sample(rng);
    while t < duration_s {
        // keep pauses audible to a 25 ms VAD
        let l = (0.1 + len.sample(rng)).min(3.0);
        out.push((t, (t + l).min(duration_s)));
        t += l + gap.sample(rng);
    }
    out
}

/// Adds a raised-cosine pulse of `width` samples starting at the fractional
/// sample position `onset`.
fn add_pulse(buf: &mut [f64], onset: f64, width: f64, amp: f64) {
    let lo = onset.ceil().max(0.0) as usize;
    let hi = ((onset + width).ceil().max(0.0) as usize).min(buf.len());
    for (i, s) in buf.iter_mut().enumerate().take(hi).skip(lo) {
        let tau = i as f64 - onset;
        *s += amp * 0.5 * (1.0 - (TAU * tau / width).cos());
    }
}

/// Bare glottal excitation: one pulse per onset, no vocal tract.
pub fn pulse_train(onsets: &[f64], amplitudes: &[f64], width: f64, n: usize) -> Vec<f64> {
    let mut buf = vec![0.0; n];
    for (&o, &a) in onsets.iter().zip(amplitudes) {
        add_pulse(&mut buf, o, width, a);
    }
    buf
}

pub fn synth_voice(p: &VoiceParams, duration_s: f64, sample_rate: u32, rng: &mut Rng) -> Result<AudioBuffer> {
    p.validate()?;
    if duration_s < 2.0 {
        return Err(Error::InvalidConfig("synthesis needs at least 2 s".into()));
    }
    let rate = sample_rate as f64;
    let n = (duration_s * rate).round() as usize;
    let wander = Wander::new(p.f0_sd_hz, rng);
    let silences = pauses(p, duration_s, rng);
    let syll_phase: f64 = rng.gen_range(0.0..1.0);
    let envelope = |t: f64| {
        let ph = (t * p.syllable_rate_per_s + syll_phase).fract();
        1.0 - SYLLABLE_DEPTH * 0.5 * (1.0 - (TAU * ph).cos())
    };

    // excitation
    let mut source = vec![0.0; n];
    let mut onset = rng.gen_range(0.0..rate / p.f0_mean_hz);
    let mut in_pause = 0;
    while onset < n as f64 {
        let t = onset / rate;
        let f0 = (p.f0_mean_hz + wander.at(t)).clamp(60.0, 480.0);
        let e_period: f64 = StandardNormal.sample(rng);
        let e_amp: f64 = StandardNormal.sample(rng);
        let period = rate / f0 * (1.0 + LOCAL_TO_SD * p.jitter_frac * e_period).max(0.5);
        while in_pause < silences.len() && silences[in_pause].1 <= t {
            in_pause += 1;
        }
        let silent = silences.get(in_pause).is_some_and(|s| s.0 <= t);
        if !silent {
            let amp = envelope(t) * (1.0 + LOCAL_TO_SD * p.shimmer_frac * e_amp).max(0.05);
            add_pulse(&mut source, onset, OPEN_QUOTIENT * rate / f0, amp);
        }
        onset += period;
    }

    // vocal tract
    let mut tract: Vec<Resonator> = p.formants.iter().map(|(c, b)| Resonator::new(*c, *b, rate)).collect();
    let mut y: Vec<f64> = source
        .into_iter()
        .map(|s| tract.iter_mut().fold(s, |acc, r| r.step(acc)))
        .collect();
    normalise(&mut y);

    let noise = Normal::new(0.0, 10f64.powf(p.noise_floor_db / 20.0)).unwrap();
    for v in &mut y {
        *v += noise.sample(rng);
    }
    normalise(&mut y);
    AudioBuffer::new(y, sample_rate)
}

fn normalise(y: &mut [f64]) {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn participant_id(i: usize) -> String {
    format!("s{:03}", i + 1)
}

/// Labels in generation order: all depressed first, then healthy.
pub fn cohort_labels(cfg: &CohortConfig) -> Vec<Label> {
    std::iter::repeat(Label::Depressed)
        .take(cfg.n_depressed)
        .chain(std::iter::repeat(Label::Healthy).take(cfg.n_healthy))
        .collect()
}

/// Voice parameters and audio for participant `i`. The random stream is keyed
/// by position only.
pub fn synth_participant(cfg: &CohortConfig, i: usize, label: Label) -> Result<(VoiceParams, AudioBuffer)> {
    let mut rng = rng::stream(cfg.seed, &["cohort", &participant_id(i)]);
    let params = class_params(label, cfg.effect_size, &mut rng);
    let audio = synth_voice(&params, cfg.recording_duration_s, cfg.sample_rate, &mut rng)?;
    Ok((params, audio))
}

/// Writes one WAV per participant and `manifest.json` into `out_dir`.
pub fn generate_cohort(cfg: &CohortConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut participants = Vec::new();
    for (i, label) in cohort_labels(cfg).into_iter().enumerate() {
        let id = participant_id(i);
        let (_, audio) = synth_participant(cfg, i, label)?;
        let rel = PathBuf::from(format!("{id}.wav"));
        write_wav(out_dir.join(&rel), &audio)?;
        participants.push(ParticipantRecord {
            id,
            label,
            scenario: Scenario::Synthetic,
            recordings: vec![rel],
            embeddings: None,
        });
    }
    let manifest = DatasetManifest {
        version: crate::manifest::MANIFEST_VERSION,
        participants,
        base_dir: out_dir.to_path_buf(),
    };
    write_manifest(out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lld::LldExtractor;

    fn steady(f0: f64, jitter: f64, shimmer: f64) -> VoiceParams {
        VoiceParams {
            f0_mean_hz: f0,
            jitter_frac: jitter,
            shimmer_frac: shimmer,
            pause_rate_per_s: 0.0,
            ..VoiceParams::default()
        }
    }

    fn measure(p: &VoiceParams, seed: u64) -> (f64, f64, f64, f64) {
        let mut rng = rng::stream(seed, &["t"]);
        let buf = synth_voice(p, 6.0, 16_000, &mut rng).unwrap();
        let v = LldExtractor::new(16_000).voicing(&buf).unwrap();
        let mut f0: Vec<f64> = v.f0_hz.iter().flatten().copied().collect();
        f0.sort_by(f64::total_cmp);
        let mean = f0.iter().sum::<f64>() / f0.len() as f64;
        (mean, v.jitter().unwrap(), v.shimmer().unwrap(), v.voiced_ratio())
    }

    #[test]
    fn class_shifts() {
        let mut a = rng::stream(1, &["x"]);
        let mut b = rng::stream(1, &["x"]);
        assert_eq!(class_params(Label::Depressed, 0.0, &mut a), class_params(Label::Healthy, 0.0, &mut b));

        let mut rng = rng::stream(2, &["mc"]);
        let draws = |label, rng: &mut Rng| -> Vec<VoiceParams> { (0..1000).map(|_| class_params(label, 1.0, rng)).collect() };
        let dep = draws(Label::Depressed, &mut rng);
        let hea = draws(Label::Healthy, &mut rng);
        let avg = |v: &[VoiceParams], f: fn(&VoiceParams) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
        assert!(avg(&dep, |p| p.f0_mean_hz) < avg(&hea, |p| p.f0_mean_hz));
        assert!(avg(&dep, |p| p.jitter_frac) > avg(&hea, |p| p.jitter_frac));
        assert!(avg(&dep, |p| p.shimmer_frac) > avg(&hea, |p| p.shimmer_frac));
        assert!(avg(&dep, |p| p.pause_rate_per_s) > avg(&hea, |p| p.pause_rate_per_s));
        assert!(avg(&dep, |p| p.syllable_rate_per_s) < avg(&hea, |p| p.syllable_rate_per_s));
        assert!((avg(&dep, |p| p.f0_mean_hz) / avg(&hea, |p| p.f0_mean_hz) - 0.88).abs() < 0.02);
    }

    #[test]
    fn clean_voice_measures_clean() {
        let (_, j, s, _) = measure(&steady(190.0, 0.0, 0.0), 1);
        assert!(j < 0.005, "jitter {j}");
        assert!(s < 0.01, "shimmer {s}");
    }

    #[test]
    fn fixed_pitch_is_recovered() {
        let p = VoiceParams {
            f0_sd_hz: 0.0,
            ..steady(150.0, 0.0, 0.0)
        };
        let mut rng = rng::stream(3, &["t"]);
        let buf = synth_voice(&p, 4.0, 16_000, &mut rng).unwrap();
        let v = LldExtractor::new(16_000).voicing(&buf).unwrap();
        let mut f0: Vec<f64> = v.f0_hz.iter().flatten().copied().collect();
        f0.sort_by(f64::total_cmp);
        let median = f0[f0.len() / 2];
        assert!((median - 150.0).abs() <= 5.0, "{median}");
    }

    #[test]
    fn no_pauses_mostly_voiced() {
        let (.., ratio) = measure(&steady(190.0, HEALTHY_JITTER, HEALTHY_SHIMMER), 4);
        assert!(ratio >= 0.85, "{ratio}");
    }

    #[test]
    fn measured_matches_specified() {
        for (k, (f0, j, s)) in [(190.0, 0.008, 0.025), (167.0, 0.023, 0.045), (120.0, 0.02, 0.03), (250.0, 0.0, 0.0)]
            .into_iter()
            .enumerate()
        {
            let p = steady(f0, j, s);
            let (mf0, mj, ms, _) = measure(&p, 10 + k as u64);
            eprintln!("f0 {f0} -> {mf0:.1}; jitter {j} -> {mj:.4}; shimmer {s} -> {ms:.4}");
            assert!((mf0 - f0).abs() <= 0.05 * f0);
            assert!((mj - j).abs() <= 0.01);
            assert!((ms - s).abs() <= 0.015);
        }
    }

    #[test]
    fn perturbation_windows() {
        let (_, j, _, _) = measure(&steady(190.0, 0.02, 0.0), 20);
        assert!((0.01..=0.03).contains(&j), "{j}");
        let (_, _, s, _) = measure(&steady(190.0, 0.0, 0.03), 21);
        assert!((0.015..=0.045).contains(&s), "{s}");
    }

    #[test]
    fn cohort_is_deterministic() {
        let cfg = CohortConfig {
            n_depressed: 2,
            n_healthy: 1,
            recording_duration_s: 3.0,
            seed: 9,
            ..CohortConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_cohort(&cfg, a.path()).unwrap();
        generate_cohort(&cfg, b.path()).unwrap();
        assert_eq!(ma.participants.len(), 3);
        for name in ["s001.wav", "s002.wav", "s003.wav", "manifest.json"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let parsed = crate::manifest::parse_manifest(a.path().join("manifest.json")).unwrap();
        assert_eq!(parsed, ma);
    }
}
