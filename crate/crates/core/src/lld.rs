//! Frame-level acoustic descriptors.
//!
//! All descriptors share one frame grid: 40 ms windows on a 10 ms hop. Pitch
//! and harmonicity use the full 40 ms window; energy, zero-crossing, MFCC and
//! spectral-shape descriptors use the centred 25 ms sub-window. Voiced-only
//! descriptors (F0, HNR, jitter, shimmer) are `None` on unvoiced frames.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{frame_samples, ms_to_samples, AudioBuffer};
use crate::error::{Error, Result};

pub const PITCH_FRAME_MS: f64 = 40.0;
pub const SPECTRAL_FRAME_MS: f64 = 25.0;
pub const HOP_MS: f64 = 10.0;
pub const F0_MIN_HZ: f64 = 55.0;
pub const F0_MAX_HZ: f64 = 500.0;
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Smallest-lag peak reaching this fraction of the best peak wins.
const OCTAVE_GUARD: f64 = 0.85;
pub const HNR_MIN_DB: f64 = -20.0;
pub const HNR_MAX_DB: f64 = 40.0;
pub const DB_FLOOR: f64 = -120.0;
pub const MEL_FILTERS: usize = 26;
pub const MFCC_COEFFS: usize = 13;
const LOG_ENERGY_FLOOR: f64 = 1e-10;
const MEL_MAX_HZ: f64 = 8000.0;
const SILENCE_RMS: f64 = 1e-6;
/// Cycle search window around the predicted epoch, as a fraction of the period.
const EPOCH_TOLERANCE: f64 = 0.2;
/// Low-pass cutoffs for cycle tracking, as multiples of F0.
const TIMING_CUTOFF: f64 = 1.3;
const AMPLITUDE_CUTOFF: f64 = 1.2;
/// Low-pass kernel length, in periods of the cutoff.
const KERNEL_CYCLES: f64 = 4.0;

// ---------------------------------------------------------------------------
// energy and zero crossings

pub fn rms(frame: &[f64]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    (frame.iter().map(|s| s * s).sum::<f64>() / frame.len() as f64).sqrt()
}

/// RMS level in dB relative to full scale, floored at -120 dB.
pub fn energy_rms_db(frame: &[f64]) -> f64 {
    let r = rms(frame);
    if r > 0.0 {
        (20.0 * r.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Sign changes per second.
pub fn zcr(frame: &[f64], sample_rate: u32) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let crossings = frame
        .windows(2)
        .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
        .count();
    crossings as f64 * sample_rate as f64 / frame.len() as f64
}

// ---------------------------------------------------------------------------
// autocorrelation pitch

/// Energy-normalised autocorrelation for lags `0..=max_lag`:
/// `r(k) = sum x[n] x[n+k] / sqrt(E_head(k) E_tail(k))` over the overlapping
/// part, after removing the frame mean.
struct Autocorrelator {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    size: usize,
}

impl Autocorrelator {
    fn new(planner: &mut FftPlanner<f64>, frame_len: usize, max_lag: usize) -> Self {
        let size = (frame_len + max_lag + 1).next_power_of_two();
        Self {
            fft: planner.plan_fft_forward(size),
            ifft: planner.plan_fft_inverse(size),
            size,
        }
    }

    fn compute(&self, frame: &[f64], max_lag: usize) -> Vec<f64> {
        let n = frame.len();
        let mean = frame.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = frame.iter().map(|s| s - mean).collect();
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.size)
            .collect();
        self.fft.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.size as f64;

        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for v in &x {
            prefix.push(prefix.last().unwrap() + v * v);
        }
        let total = prefix[n];
        (0..=max_lag.min(n - 1))
            .map(|k| {
                let head = prefix[n - k];
                let tail = total - prefix[k];
                let denom = (head * tail).sqrt();
                if denom > 0.0 {
                    (buf[k].re * scale / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn lag_range(sample_rate: u32, fmin: f64, fmax: f64, frame_len: usize) -> (usize, usize) {
    let rate = sample_rate as f64;
    let lo = (rate / fmax).ceil().max(2.0) as usize;
    // keep at least a quarter of the frame overlapping at the longest lag
    let hi = ((rate / fmin).floor() as usize).min(frame_len - frame_len / 4);
    (lo, hi)
}

/// Pitch decision from a precomputed autocorrelation.
fn pick_pitch(r: &[f64], lo: usize, hi: usize, sample_rate: u32) -> (bool, f64, f64) {
    let mut peaks: Vec<usize> = Vec::new();
    for k in lo..=hi.min(r.len().saturating_sub(2)) {
        if r[k] >= r[k - 1] && r[k] > r[k + 1] {
            peaks.push(k);
        }
    }
    let Some(best) = peaks.iter().map(|&k| r[k]).reduce(f64::max) else {
        return (false, 0.0, 0.0);
    };
    if best < VOICING_THRESHOLD {
        return (false, 0.0, best);
    }
    let k = *peaks
        .iter()
        .find(|&&k| r[k] >= OCTAVE_GUARD * best)
        .expect("best peak qualifies");
    let (offset, _) = parabolic(r[k - 1], r[k], r[k + 1]);
    let lag = k as f64 + offset;
    (true, sample_rate as f64 / lag, r[k])
}

/// Vertex of the parabola through three equally spaced points, as
/// (offset from the centre in samples, interpolated value).
fn parabolic(left: f64, centre: f64, right: f64) -> (f64, f64) {
    let denom = left - 2.0 * centre + right;
    if denom.abs() < 1e-300 {
        return (0.0, centre);
    }
    let d = (0.5 * (left - right) / denom).clamp(-0.5, 0.5);
    (d, centre - 0.25 * (left - right) * d)
}

/// Autocorrelation F0 estimate. Returns `(is_voiced, f0_hz)`; `f0_hz` is 0
/// for unvoiced frames.
pub fn f0_autocorr(frame: &[f64], sample_rate: u32, fmin: f64, fmax: f64) -> Result<(bool, f64)> {
    let needed = (sample_rate as f64 / fmin).ceil() as usize;
    if frame.len() < needed {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            needed,
        });
    }
    let (lo, hi) = lag_range(sample_rate, fmin, fmax, frame.len());
    let mut planner = FftPlanner::new();
    let ac = Autocorrelator::new(&mut planner, frame.len(), hi + 1);
    let r = ac.compute(frame, hi + 1);
    let (voiced, f0, _) = pick_pitch(&r, lo, hi, sample_rate);
    Ok((voiced, f0))
}

fn hnr_from_r(r: f64) -> f64 {
    if r <= 0.0 {
        return HNR_MIN_DB;
    }
    if r >= 1.0 {
        return HNR_MAX_DB;
    }
    (10.0 * (r / (1.0 - r)).log10()).clamp(HNR_MIN_DB, HNR_MAX_DB)
}

fn r_at_lag(r: &[f64], lag: f64) -> f64 {
    let k = lag.floor() as usize;
    if k + 1 >= r.len() {
        return r[r.len() - 1];
    }
    let frac = lag - k as f64;
    r[k] * (1.0 - frac) + r[k + 1] * frac
}

/// Harmonics-to-noise ratio `10 log10(r / (1 - r))` with `r` the normalised
/// autocorrelation at the period lag, clamped to [-20, 40] dB.
pub fn hnr_db(frame: &[f64], sample_rate: u32, f0_hz: f64) -> Result<f64> {
    if !(f0_hz.is_finite() && f0_hz > 0.0) {
        return Err(Error::UnvoicedFrame);
    }
    let lag = sample_rate as f64 / f0_hz;
    if lag + 2.0 > frame.len() as f64 {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            needed: lag.ceil() as usize + 2,
        });
    }
    let max_lag = lag.ceil() as usize + 1;
    let mut planner = FftPlanner::new();
    let r = Autocorrelator::new(&mut planner, frame.len(), max_lag).compute(frame, max_lag);
    Ok(hnr_from_r(r_at_lag(&r, lag)))
}

// ---------------------------------------------------------------------------
// jitter and shimmer

/// Mean absolute difference of consecutive periods over the mean period.
pub fn jitter_local(periods_s: &[f64]) -> Result<f64> {
    if periods_s.len() < 2 {
        return Err(Error::TooFewPeriods(periods_s.len()));
    }
    Ok(mean_abs_diff(periods_s) / mean(periods_s))
}

/// Mean absolute difference of consecutive cycle amplitudes over the mean
/// amplitude.
pub fn shimmer_local(peak_amplitudes: &[f64]) -> Result<f64> {
    if peak_amplitudes.len() < 2 {
        return Err(Error::TooFewPeriods(peak_amplitudes.len()));
    }
    if let Some(i) = peak_amplitudes.iter().position(|&a| !(a > 0.0)) {
        return Err(Error::NonPositiveAmplitude(i));
    }
    Ok(mean_abs_diff(peak_amplitudes) / mean(peak_amplitudes))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_abs_diff(v: &[f64]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (v.len() - 1) as f64
}

/// A glottal-cycle peak: integer sample index plus sub-sample offset, kept
/// apart so that exactly periodic input yields exactly equal periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclePeak {
    pub index: usize,
    pub offset: f64,
    pub amplitude: f64,
}

/// Consecutive cycles inside one voiced stretch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleRun {
    pub peaks: Vec<CyclePeak>,
    sample_rate: f64,
}

impl CycleRun {
    pub fn periods_s(&self) -> Vec<f64> {
        self.peaks
            .windows(2)
            .map(|w| {
                ((w[1].index - w[0].index) as f64 + (w[1].offset - w[0].offset)) / self.sample_rate
            })
            .collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.peaks.iter().map(|p| p.amplitude).collect()
    }
}

/// Per-frame voicing plus the cycle-level measurements behind jitter and
/// shimmer.
#[derive(Debug, Clone)]
pub struct VoicingDecision {
    pub is_voiced: Vec<bool>,
    /// F0 in Hz on voiced frames.
    pub f0_hz: Vec<Option<f64>>,
    /// Peak autocorrelation per frame (0 where no peak was found).
    pub clarity: Vec<f64>,
    /// Harmonics-to-noise ratio on voiced frames.
    pub hnr_db: Vec<Option<f64>>,
    /// Cycle epochs, tracked on a copy low-passed at 1.3x the stretch's F0.
    pub period_runs: Vec<CycleRun>,
    /// Cycle peaks, tracked on a copy low-passed at 1.2x F0, where the
    /// fundamental dominates and formant ringing is suppressed.
    pub amplitude_runs: Vec<CycleRun>,
}

impl VoicingDecision {
    pub fn periods_s(&self) -> Vec<f64> {
        self.period_runs.iter().flat_map(|r| r.periods_s()).collect()
    }

    pub fn peak_amplitudes(&self) -> Vec<f64> {
        self.amplitude_runs.iter().flat_map(|r| r.amplitudes()).collect()
    }

    /// Jitter over all runs: consecutive-period differences are only taken
    /// inside a run.
    pub fn jitter(&self) -> Option<f64> {
        let (mut diff, mut n) = (0.0, 0usize);
        let mut all = Vec::new();
        for run in &self.period_runs {
            let p = run.periods_s();
            if p.len() >= 2 {
                diff += p.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
                n += p.len() - 1;
            }
            all.extend(p);
        }
        (n > 0).then(|| diff / n as f64 / mean(&all))
    }

    pub fn shimmer(&self) -> Option<f64> {
        let (mut diff, mut n) = (0.0, 0usize);
        let mut all = Vec::new();
        for run in &self.amplitude_runs {
            let a = run.amplitudes();
            if a.len() >= 2 {
                diff += a.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
                n += a.len() - 1;
            }
            all.extend(a);
        }
        (n > 0).then(|| diff / n as f64 / mean(&all))
    }

    pub fn voiced_ratio(&self) -> f64 {
        if self.is_voiced.is_empty() {
            return 0.0;
        }
        self.is_voiced.iter().filter(|&&v| v).count() as f64 / self.is_voiced.len() as f64
    }
}

/// Hann-windowed sinc low-pass with unit DC gain and odd length.
fn lowpass_kernel(cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let fc = cutoff_hz.min(0.45 * sample_rate) / sample_rate;
    let len = ((KERNEL_CYCLES / fc).round() as usize) | 1;
    let mid = (len / 2) as f64;
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let m = i as f64 - mid;
            let sinc = if m == 0.0 {
                1.0
            } else {
                (2.0 * PI * fc * m).sin() / (2.0 * PI * fc * m)
            };
            let w = 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (len + 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Direct-form filtering of `x[start..end]`, where the kernel must fit
/// inside `x`. Every output goes through the same operations, so a periodic
/// input stays exactly periodic.
fn fir_valid(x: &[f64], h: &[f64], start: usize, end: usize) -> Vec<f64> {
    let half = h.len() / 2;
    (start..end)
        .map(|n| {
            let w = &x[n - half..n - half + h.len()];
            w.iter().zip(h).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Tracks positive waveform peaks through a voiced stretch `[start, end)`,
/// searching for each next peak within +-20% of the period predicted by the
/// local F0.
fn track_cycles(
    x: &[f64],
    start: usize,
    end: usize,
    period_at: impl Fn(usize) -> f64,
    sample_rate: f64,
) -> Vec<CycleRun> {
    let argmax = |lo: usize, hi: usize| -> usize {
        (lo..hi)
            .max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a)))
            .unwrap_or(lo)
    };
    let refine = |i: usize| -> CyclePeak {
        if i == 0 || i + 1 >= x.len() {
            return CyclePeak {
                index: i,
                offset: 0.0,
                amplitude: x[i],
            };
        }
        let (offset, amplitude) = parabolic(x[i - 1], x[i], x[i + 1]);
        CyclePeak {
            index: i,
            offset,
            amplitude,
        }
    };

    let mut runs = Vec::new();
    let mut current = CycleRun {
        peaks: Vec::new(),
        sample_rate,
    };
    let first_period = period_at(start);
    let first_end = (start + first_period.round() as usize).min(end);
    if first_end <= start + 2 {
        return runs;
    }
    let mut pos = argmax(start.max(1), first_end);
    loop {
        let peak = refine(pos);
        if peak.amplitude > 0.0 {
            current.peaks.push(peak);
        } else if current.peaks.len() > 1 {
            runs.push(std::mem::take(&mut current));
            current.sample_rate = sample_rate;
        } else {
            current.peaks.clear();
        }
        let period = period_at(pos);
        let lo = (pos as f64 + period * (1.0 - EPOCH_TOLERANCE)).ceil() as usize;
        let hi = (pos as f64 + period * (1.0 + EPOCH_TOLERANCE)).floor() as usize + 1;
        if hi >= end.min(x.len() - 1) || lo >= hi {
            break;
        }
        pos = argmax(lo, hi);
    }
    if current.peaks.len() > 1 {
        runs.push(current);
    }
    runs
}

// ---------------------------------------------------------------------------
// MFCC

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Power spectrum of a windowed, zero-padded frame.
struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    size: usize,
}

impl SpectrumAnalyzer {
    fn new(planner: &mut FftPlanner<f64>, window: Vec<f64>) -> Self {
        let size = window.len().next_power_of_two();
        Self {
            fft: planner.plan_fft_forward(size),
            window,
            size,
        }
    }

    /// Power spectrum `|X(k)|^2` for `k = 0..=size/2`.
    fn power(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.size)
            .collect();
        self.fft.process(&mut buf);
        buf[..=self.size / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Triangular mel filterbank over FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `(first_bin, weights)` per filter.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let fmax = fmax.min(sample_rate as f64 / 2.0);
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let n_bins = fft_size / 2 + 1;
        let filters = (0..n_filters)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= centre {
                            (f - lo) / (centre - lo)
                        } else if f > centre && f < hi {
                            (hi - f) / (hi - centre)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let first = weights.first().map_or(0, |&(k, _)| k);
                (first, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Self { filters }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(first, w)| {
                w.iter()
                    .enumerate()
                    .map(|(i, wi)| wi * power[first + i])
                    .sum()
            })
            .collect()
    }
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2_ortho(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// MFCCs for frames of a fixed length: Hamming window, power spectrum,
/// 26 mel filters over 0-8 kHz, natural log floored at 1e-10, orthonormal
/// DCT-II. Coefficient 0 comes first.
pub struct MfccExtractor {
    spectrum: SpectrumAnalyzer,
    bank: MelFilterbank,
    frame_len: usize,
}

impl MfccExtractor {
    pub fn new(frame_len: usize, sample_rate: u32) -> Self {
        let mut planner = FftPlanner::new();
        Self::with_planner(&mut planner, frame_len, sample_rate)
    }

    fn with_planner(planner: &mut FftPlanner<f64>, frame_len: usize, sample_rate: u32) -> Self {
        let spectrum = SpectrumAnalyzer::new(planner, hamming(frame_len.max(1)));
        let bank = MelFilterbank::new(MEL_FILTERS, spectrum.size, sample_rate, 0.0, MEL_MAX_HZ);
        Self {
            spectrum,
            bank,
            frame_len,
        }
    }

    fn from_power(&self, power: &[f64], n_coeffs: usize) -> Vec<f64> {
        let log_mel: Vec<f64> = self
            .bank
            .apply(power)
            .into_iter()
            .map(|e| e.max(LOG_ENERGY_FLOOR).ln())
            .collect();
        dct2_ortho(&log_mel, n_coeffs)
    }

    pub fn compute(&self, frame: &[f64], n_coeffs: usize) -> Result<Vec<f64>> {
        check_frame(frame, self.frame_len)?;
        Ok(self.from_power(&self.spectrum.power(frame), n_coeffs))
    }
}

const MIN_FRAME: usize = 32;

fn check_frame(frame: &[f64], expected: usize) -> Result<()> {
    if frame.len() < MIN_FRAME {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            needed: MIN_FRAME,
        });
    }
    if frame.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: frame.len(),
        });
    }
    Ok(())
}

pub fn mfcc(frame: &[f64], sample_rate: u32, n_coeffs: usize) -> Result<Vec<f64>> {
    MfccExtractor::new(frame.len(), sample_rate).compute(frame, n_coeffs)
}

// ---------------------------------------------------------------------------
// spectral shape

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralDescriptors {
    pub centroid_hz: f64,
    /// dB per Hz, linear fit over 0-500 Hz.
    pub slope_0_500: f64,
    /// dB per Hz, linear fit over 500-1500 Hz.
    pub slope_500_1500: f64,
    pub alpha_ratio_db: f64,
    pub hammarberg_db: f64,
}

fn spectral_from_power(power: &[f64], bin_hz: f64) -> SpectralDescriptors {
    let mag: Vec<f64> = power.iter().map(|p| p.sqrt()).collect();
    let freq = |k: usize| k as f64 * bin_hz;
    let total: f64 = mag.iter().sum();
    let centroid_hz = mag.iter().enumerate().map(|(k, m)| freq(k) * m).sum::<f64>() / total;

    let db = |k: usize| 20.0 * mag[k].max(1e-300).log10();
    let band = |lo: f64, hi: f64| (0..mag.len()).filter(move |&k| freq(k) >= lo && freq(k) <= hi);
    let slope = |lo: f64, hi: f64| {
        let pts: Vec<(f64, f64)> = band(lo, hi).map(|k| (freq(k), db(k))).collect();
        linear_fit_slope(&pts)
    };
    let energy = |lo: f64, hi: f64| band(lo, hi).map(|k| power[k]).sum::<f64>();
    let peak = |lo: f64, hi: f64| band(lo, hi).map(db).fold(f64::NEG_INFINITY, f64::max);

    SpectralDescriptors {
        centroid_hz,
        slope_0_500: slope(0.0, 500.0),
        slope_500_1500: slope(500.0, 1500.0),
        alpha_ratio_db: 10.0 * (energy(1000.0, 5000.0) / energy(50.0, 1000.0)).log10(),
        hammarberg_db: peak(0.0, 2000.0) - peak(2000.0, 5000.0),
    }
}

fn linear_fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Spectral centroid, band slopes, alpha ratio and Hammarberg index of a
/// Hann-windowed frame. (Hamming's far sidelobes bias the magnitude-weighted
/// centroid by several percent once the frame is zero-padded.)
pub fn spectral_descriptors(frame: &[f64], sample_rate: u32) -> Result<SpectralDescriptors> {
    if frame.len() < MIN_FRAME {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            needed: MIN_FRAME,
        });
    }
    if rms(frame) <= SILENCE_RMS {
        return Err(Error::SilentFrame);
    }
    let mut planner = FftPlanner::new();
    let sa = SpectrumAnalyzer::new(&mut planner, hann(frame.len()));
    Ok(spectral_from_power(
        &sa.power(frame),
        sample_rate as f64 / sa.size as f64,
    ))
}

// ---------------------------------------------------------------------------
// contours

#[derive(Debug, Clone, PartialEq)]
pub struct LldContour {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub frame_rate_hz: f64,
}

impl LldContour {
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Descriptor names in contour order.
pub const ZCR: &str = "zcr";
pub const ENERGY_DB: &str = "energy_db";
pub const F0_HZ: &str = "f0_hz";
pub const HNR_DB: &str = "hnr_db";
pub const JITTER: &str = "jitter";
pub const SHIMMER: &str = "shimmer";
pub const CENTROID: &str = "centroid_hz";
pub const SLOPE_0_500: &str = "slope_0_500";
pub const SLOPE_500_1500: &str = "slope_500_1500";
pub const ALPHA_RATIO: &str = "alpha_ratio_db";
pub const HAMMARBERG: &str = "hammarberg_db";

pub fn mfcc_name(i: usize) -> String {
    format!("mfcc{i}")
}

/// All contours of one signal on the shared frame grid.
#[derive(Debug, Clone)]
pub struct LldSet {
    pub frame_rate_hz: f64,
    pub hop_s: f64,
    pub frame_len_s: f64,
    pub voicing: VoicingDecision,
    pub contours: Vec<LldContour>,
}

impl LldSet {
    pub fn frame_count(&self) -> usize {
        self.voicing.is_voiced.len()
    }

    pub fn get(&self, name: &str) -> &LldContour {
        self.contours
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("no contour named {name}"))
    }

    /// Writes `frame_index,time_s,<contours...>`; missing values are empty
    /// cells. Times are frame centres.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "frame_index,time_s")?;
        for c in &self.contours {
            write!(out, ",{}", c.name)?;
        }
        writeln!(out)?;
        for i in 0..self.frame_count() {
            write!(out, "{i},{:.4}", i as f64 * self.hop_s + self.frame_len_s / 2.0)?;
            for c in &self.contours {
                match c.values[i] {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Computes every descriptor on the shared 40 ms / 10 ms grid. Holds FFT
/// plans, so reuse one extractor per sample rate.
pub struct LldExtractor {
    sample_rate: u32,
    pitch_len: usize,
    spec_len: usize,
    hop: usize,
    lag_lo: usize,
    lag_hi: usize,
    autocorr: Autocorrelator,
    mfcc: MfccExtractor,
    shape: SpectrumAnalyzer,
}

impl LldExtractor {
    pub fn new(sample_rate: u32) -> Self {
        let pitch_len = ms_to_samples(PITCH_FRAME_MS, sample_rate);
        let spec_len = ms_to_samples(SPECTRAL_FRAME_MS, sample_rate);
        let hop = ms_to_samples(HOP_MS, sample_rate);
        let (lag_lo, lag_hi) = lag_range(sample_rate, F0_MIN_HZ, F0_MAX_HZ, pitch_len);
        let mut planner = FftPlanner::new();
        Self {
            sample_rate,
            pitch_len,
            spec_len,
            hop,
            lag_lo,
            lag_hi,
            autocorr: Autocorrelator::new(&mut planner, pitch_len, lag_hi + 1),
            mfcc: MfccExtractor::with_planner(&mut planner, spec_len, sample_rate),
            shape: SpectrumAnalyzer::new(&mut planner, hann(spec_len)),
        }
    }

    /// Per-frame voicing and cycle tracking only.
    pub fn voicing(&self, buf: &AudioBuffer) -> Result<VoicingDecision> {
        self.check_rate(buf)?;
        let x = buf.samples();
        let frames = frame_samples(x, self.sample_rate, PITCH_FRAME_MS, HOP_MS)?;
        let mut is_voiced = Vec::with_capacity(frames.len());
        let mut f0 = Vec::with_capacity(frames.len());
        let mut clarity = Vec::with_capacity(frames.len());
        let mut hnr = Vec::with_capacity(frames.len());
        for frame in frames.iter() {
            let r = self.autocorr.compute(frame, self.lag_hi + 1);
            let (v, hz, c) = pick_pitch(&r, self.lag_lo, self.lag_hi, self.sample_rate);
            is_voiced.push(v);
            f0.push(v.then_some(hz));
            clarity.push(c);
            hnr.push(v.then(|| hnr_from_r(r_at_lag(&r, self.sample_rate as f64 / hz))));
        }
        let (period_runs, amplitude_runs) = self.cycles(x, &f0);
        Ok(VoicingDecision {
            is_voiced,
            f0_hz: f0,
            clarity,
            hnr_db: hnr,
            period_runs,
            amplitude_runs,
        })
    }

    fn check_rate(&self, buf: &AudioBuffer) -> Result<()> {
        if buf.sample_rate_hz() != self.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "extractor built for {} Hz, buffer is {} Hz",
                self.sample_rate,
                buf.sample_rate_hz()
            )));
        }
        Ok(())
    }

    /// Tracks cycles through every voiced stretch. Each stretch is low-passed
    /// relative to its median F0 and only the part where the filters see no
    /// edge is tracked.
    fn cycles(&self, x: &[f64], f0: &[Option<f64>]) -> (Vec<CycleRun>, Vec<CycleRun>) {
        let rate = self.sample_rate as f64;
        let mut period_runs = Vec::new();
        let mut amplitude_runs = Vec::new();
        let mut i = 0;
        while i < f0.len() {
            if f0[i].is_none() {
                i += 1;
                continue;
            }
            let first = i;
            while i + 1 < f0.len() && f0[i + 1].is_some() {
                i += 1;
            }
            let last = i;
            i += 1;

            let mut hz: Vec<f64> = f0[first..=last].iter().flatten().copied().collect();
            hz.sort_by(f64::total_cmp);
            let f_ref = hz[hz.len() / 2];
            let timing = lowpass_kernel(TIMING_CUTOFF * f_ref, rate);
            let level = lowpass_kernel(AMPLITUDE_CUTOFF * f_ref, rate);
            let margin = level.len() / 2;
            let start = first * self.hop + margin;
            let end = (last * self.hop + self.pitch_len).min(x.len()).saturating_sub(margin);
            if end <= start + 3 * (rate / f_ref) as usize {
                continue;
            }
            let half = self.pitch_len / 2;
            let period_at = |pos: usize| {
                let k = (pos.saturating_sub(half) as f64 / self.hop as f64).round() as usize;
                let k = k.clamp(first, last);
                rate / f0[k].expect("frame inside a voiced run")
            };
            for (kernel, out) in [(&timing, &mut period_runs), (&level, &mut amplitude_runs)] {
                let z = fir_valid(x, kernel, start, end);
                let shift = |mut run: CycleRun| {
                    run.peaks.iter_mut().for_each(|p| p.index += start);
                    run
                };
                let runs = track_cycles(&z, 0, z.len(), |pos| period_at(pos + start), rate);
                out.extend(runs.into_iter().map(shift));
            }
        }
        (period_runs, amplitude_runs)
    }

    pub fn extract(&self, buf: &AudioBuffer) -> Result<LldSet> {
        let voicing = self.voicing(buf)?;
        let x = buf.samples();
        let n = voicing.is_voiced.len();
        let rate = self.sample_rate;
        let offset = (self.pitch_len - self.spec_len) / 2;

        let mut zcr_v = Vec::with_capacity(n);
        let mut energy = Vec::with_capacity(n);
        let mut mfccs: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); MFCC_COEFFS];
        let mut spectral: Vec<Option<SpectralDescriptors>> = Vec::with_capacity(n);
        let bin_hz = rate as f64 / self.shape.size as f64;
        for i in 0..n {
            let start = i * self.hop;
            let frame = &x[start + offset..start + offset + self.spec_len];
            zcr_v.push(Some(zcr(frame, rate)));
            energy.push(Some(energy_rms_db(frame)));
            let power = self.mfcc.spectrum.power(frame);
            let c = self.mfcc.from_power(&power, MFCC_COEFFS);
            for (k, v) in c.into_iter().enumerate() {
                mfccs[k].push(Some(v));
            }
            spectral.push(
                (rms(frame) > SILENCE_RMS)
                    .then(|| spectral_from_power(&self.shape.power(frame), bin_hz)),
            );
        }
        let (jitter, shimmer) = self.frame_perturbation(&voicing);

        let fr = 1000.0 / HOP_MS;
        let contour = |name: &str, values: Vec<Option<f64>>| LldContour {
            name: name.to_string(),
            values,
            frame_rate_hz: fr,
        };
        let spec = |f: fn(&SpectralDescriptors) -> f64| -> Vec<Option<f64>> {
            spectral.iter().map(|s| s.as_ref().map(f)).collect()
        };
        let mut contours = vec![
            contour(ZCR, zcr_v),
            contour(ENERGY_DB, energy),
            contour(F0_HZ, voicing.f0_hz.clone()),
            contour(HNR_DB, voicing.hnr_db.clone()),
            contour(JITTER, jitter),
            contour(SHIMMER, shimmer),
            contour(CENTROID, spec(|s| s.centroid_hz)),
            contour(SLOPE_0_500, spec(|s| s.slope_0_500)),
            contour(SLOPE_500_1500, spec(|s| s.slope_500_1500)),
            contour(ALPHA_RATIO, spec(|s| s.alpha_ratio_db)),
            contour(HAMMARBERG, spec(|s| s.hammarberg_db)),
        ];
        for (k, values) in mfccs.into_iter().enumerate() {
            contours.push(contour(&mfcc_name(k), values));
        }
        Ok(LldSet {
            frame_rate_hz: fr,
            hop_s: self.hop as f64 / rate as f64,
            frame_len_s: self.pitch_len as f64 / rate as f64,
            voicing,
            contours,
        })
    }

    /// Jitter and shimmer of the cycles whose peaks fall inside each voiced
    /// frame; frames with fewer than three such cycles are missing.
    fn frame_perturbation(&self, v: &VoicingDecision) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let n = v.is_voiced.len();
        let mut jitter = vec![None; n];
        let mut shimmer = vec![None; n];
        let per_frame = |runs: &[CycleRun], out: &mut Vec<Option<f64>>, periods: bool| {
            for run in runs {
                let idx: Vec<usize> = run.peaks.iter().map(|p| p.index).collect();
                let values = if periods { run.periods_s() } else { run.amplitudes() };
                let first_frame = idx[0].saturating_sub(self.pitch_len) / self.hop;
                let last_frame = (idx[idx.len() - 1] / self.hop).min(n - 1);
                for f in first_frame..=last_frame {
                    if !v.is_voiced[f] {
                        continue;
                    }
                    let (lo, hi) = (f * self.hop, f * self.hop + self.pitch_len);
                    let a = idx.partition_point(|&i| i < lo);
                    let b = idx.partition_point(|&i| i < hi);
                    if b >= a + 3 {
                        out[f] = if periods {
                            jitter_local(&values[a..b - 1]).ok()
                        } else {
                            shimmer_local(&values[a..b]).ok()
                        };
                    }
                }
            }
        };
        per_frame(&v.period_runs, &mut jitter, true);
        per_frame(&v.amplitude_runs, &mut shimmer, false);
        (jitter, shimmer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const SR: u32 = 16000;

    fn sine(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin())
            .collect()
    }

    fn sawtooth(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let ph = (freq * i as f64 / SR as f64).fract();
                2.0 * ph - 1.0
            })
            .collect()
    }

    fn noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn sine_f0() {
        let (v, f0) = f0_autocorr(&sine(220.0, 640, 0.5), SR, 55.0, 500.0).unwrap();
        assert!(v);
        assert!((f0 - 220.0).abs() <= 2.0, "{f0}");
    }

    #[test]
    fn sawtooth_f0_no_octave_error() {
        let (v, f0) = f0_autocorr(&sawtooth(110.0, 640), SR, 55.0, 500.0).unwrap();
        assert!(v);
        assert!((f0 - 110.0).abs() <= 1.5, "{f0}");
    }

    #[test]
    fn noise_is_mostly_unvoiced() {
        let x = noise(640 * 200, 0.3, 11);
        let voiced = x
            .chunks(640)
            .filter(|f| f0_autocorr(f, SR, 55.0, 500.0).unwrap().0)
            .count();
        assert!((voiced as f64) < 0.2 * 200.0, "{voiced}");
    }

    #[test]
    fn short_frame_is_rejected() {
        assert!(matches!(
            f0_autocorr(&[0.0; 100], SR, 55.0, 500.0),
            Err(Error::FrameTooShort { .. })
        ));
    }

    #[test]
    fn jitter_shimmer_formulas() {
        assert_eq!(jitter_local(&[0.01; 6]).unwrap(), 0.0);
        let j = jitter_local(&[0.0100, 0.0102, 0.0100, 0.0102]).unwrap();
        assert!((j - 0.0002 / 0.0101).abs() < 1e-12, "{j}");
        assert_eq!(shimmer_local(&[0.7; 5]).unwrap(), 0.0);
        let s = shimmer_local(&[1.0, 1.1, 1.0, 1.1]).unwrap();
        assert!((s - 0.1 / 1.05).abs() < 1e-12);
        assert!(matches!(jitter_local(&[0.01]), Err(Error::TooFewPeriods(1))));
        assert!(matches!(shimmer_local(&[]), Err(Error::TooFewPeriods(0))));
        assert!(matches!(
            shimmer_local(&[1.0, 0.0, 1.0]),
            Err(Error::NonPositiveAmplitude(1))
        ));
    }

    #[test]
    fn jitter_shimmer_are_scale_invariant() {
        let p = [0.0051, 0.0049, 0.0052, 0.005, 0.0048];
        let k = 3.0;
        let pk: Vec<f64> = p.iter().map(|v| v * k).collect();
        assert!((jitter_local(&p).unwrap() - jitter_local(&pk).unwrap()).abs() < 1e-15);
        assert!((shimmer_local(&p).unwrap() - shimmer_local(&pk).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn hnr_cases() {
        assert_eq!(hnr_db(&sine(200.0, 640, 0.5), SR, 200.0).unwrap(), 40.0);

        let s = sine(200.0, 640 * 20, 0.5);
        let n = noise(s.len(), 0.5 / 2f64.sqrt(), 4);
        let mix: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        let hs: Vec<f64> = mix.chunks(640).map(|f| hnr_db(f, SR, 200.0).unwrap()).collect();
        let mean = hs.iter().sum::<f64>() / hs.len() as f64;
        assert!(mean.abs() <= 3.0, "{mean}");

        let n = noise(640, 0.3, 9);
        assert!(hnr_db(&n, SR, 150.0).unwrap() <= 5.0);
        assert!(matches!(hnr_db(&n, SR, 0.0), Err(Error::UnvoicedFrame)));
    }

    #[test]
    fn zcr_and_energy() {
        let z = zcr(&sine(220.0, 16000, 0.5), SR);
        assert!((z - 440.0).abs() <= 5.0, "{z}");
        let a = 0.3;
        let x = sine(250.0, 16000, a);
        assert!((rms(&x) - a / 2f64.sqrt()).abs() < 1e-6);
        assert!((energy_rms_db(&x) - 20.0 * (a / 2f64.sqrt()).log10()).abs() < 1e-6);
        assert_eq!(energy_rms_db(&[0.0; 400]), -120.0);
    }

    #[test]
    fn mfcc_dimension_and_gain() {
        let x = noise(400, 0.1, 2);
        let c = mfcc(&x, SR, 13).unwrap();
        assert_eq!(c.len(), 13);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let c2 = mfcc(&x2, SR, 13).unwrap();
        assert!((c2[0] - c[0] - 26f64.sqrt() * 4f64.ln()).abs() < 1e-9);
        for k in 1..13 {
            assert!((c2[k] - c[k]).abs() < 1e-6);
        }
        assert!(matches!(mfcc(&[0.1; 8], SR, 13), Err(Error::FrameTooShort { .. })));
    }

    #[test]
    fn spectral_cases() {
        let s = spectral_descriptors(&sine(1000.0, 400, 0.5), SR).unwrap();
        assert!((s.centroid_hz - 1000.0).abs() <= 20.0, "{}", s.centroid_hz);

        let n = noise(400 * 50, 0.2, 8);
        let cents: Vec<f64> = n
            .chunks(400)
            .map(|f| spectral_descriptors(f, SR).unwrap().centroid_hz)
            .collect();
        let mean = cents.iter().sum::<f64>() / cents.len() as f64;
        assert!((mean - 4000.0).abs() <= 400.0, "{mean}");

        // first-order low-pass tilts energy toward the low band
        let mut lp = vec![0.0; n.len()];
        for i in 1..n.len() {
            lp[i] = 0.9 * lp[i - 1] + 0.1 * n[i];
        }
        let alpha = |x: &[f64]| {
            x.chunks(400)
                .map(|f| spectral_descriptors(f, SR).unwrap().alpha_ratio_db)
                .sum::<f64>()
        };
        assert!(alpha(&lp) < alpha(&n));

        assert!(matches!(
            spectral_descriptors(&[0.0; 400], SR),
            Err(Error::SilentFrame)
        ));
    }

    /// Train of Hann pulses at the given (possibly fractional) onsets.
    fn pulse_train(onsets: &[f64], amps: &[f64], n: usize) -> Vec<f64> {
        let width = 24.0;
        let mut x = vec![0.0; n];
        for (&t, &a) in onsets.iter().zip(amps) {
            let lo = t.floor() as usize;
            for i in lo..(lo + width as usize + 2).min(n) {
                let u = (i as f64 - t) / width;
                if (0.0..=1.0).contains(&u) {
                    x[i] += a * 0.5 * (1.0 - (2.0 * PI * u).cos());
                }
            }
        }
        x
    }

    #[test]
    fn periodic_pulse_train_has_zero_perturbation() {
        let onsets: Vec<f64> = (0..200).map(|i| 10.0 + 80.0 * i as f64).collect();
        let amps = vec![0.5; onsets.len()];
        let buf = AudioBuffer::new(pulse_train(&onsets, &amps, 16000), SR).unwrap();
        let v = LldExtractor::new(SR).voicing(&buf).unwrap();
        assert!(v.voiced_ratio() > 0.9);
        assert_eq!(v.jitter(), Some(0.0));
        assert_eq!(v.shimmer(), Some(0.0));
    }

    #[test]
    fn extractor_contour_shapes() {
        let buf = AudioBuffer::new(sawtooth(150.0, 16000), SR).unwrap();
        let set = LldExtractor::new(SR).extract(&buf).unwrap();
        let n = (16000 - 640) / 160 + 1;
        assert_eq!(set.frame_count(), n);
        assert_eq!(set.contours.len(), 11 + 13);
        for c in &set.contours {
            assert_eq!(c.values.len(), n);
        }
        for (i, v) in set.voicing.is_voiced.iter().enumerate() {
            for name in [F0_HZ, HNR_DB] {
                assert_eq!(set.get(name).values[i].is_some(), *v);
            }
        }
        let mut csv = Vec::new();
        set.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), n + 1);
        assert!(text.starts_with("frame_index,time_s,zcr,energy_db,f0_hz"));
    }
}
