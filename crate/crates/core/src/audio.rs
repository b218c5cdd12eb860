//! Audio loading, resampling and framing.
//!
//! Everything downstream consumes mono [`AudioBuffer`]s at
//! [`CANONICAL_RATE_HZ`]. WAV input may be PCM16 or IEEE float32, any channel
//! count; channels are averaged on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CANONICAL_RATE_HZ: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    /// Builds a buffer, clamping samples into `[-1, 1]`.
    ///
    /// Fails with [`Error::NonFiniteValue`] on NaN or infinite samples and
    /// with [`Error::InvalidConfig`] for a zero sample rate.
    pub fn new(mut samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        for (i, s) in samples.iter_mut().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFiniteValue(i));
            }
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copies `len` samples starting at `start`. Panics if out of range.
    pub fn slice(&self, start: usize, len: usize) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Multiplies every sample by `gain`, clamping to `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer {
            samples: self
                .samples
                .iter()
                .map(|s| (s * gain).clamp(-1.0, 1.0))
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Reads a RIFF/WAVE file, downmixing to mono.
///
/// PCM16 samples are scaled by `1/32768`; float32 samples are taken as is
/// (and clamped).
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?} (only PCM16 and float32 are accepted)"
            )))
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioBuffer::new(mono, spec.sample_rate)
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::MalformedHeader(msg.to_string()),
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            Error::UnsupportedEncoding(e.to_string())
        }
        hound::Error::UnfinishedSample => Error::MalformedHeader(e.to_string()),
    }
}

/// Writes a mono PCM16 WAV at the buffer's rate.
///
/// The file is written to a temporary sibling and renamed into place, so a
/// reader never observes a half-written file.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("wav.part");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let write = || -> std::result::Result<(), hound::Error> {
        let mut w = hound::WavWriter::create(&tmp, spec)?;
        for &s in &buf.samples {
            w.write_sample(pcm16(s))?;
        }
        w.finalize()
    };
    write().map_err(|e| map_hound(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

/// Band-limited sample-rate conversion with a 64-tap Kaiser-windowed sinc
/// evaluated on a polyphase grid (one filter phase per output position modulo
/// the reduced rate ratio).
pub fn resample(buf: &AudioBuffer, target_hz: u32) -> Result<AudioBuffer> {
    if target_hz == 0 {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    let source_hz = buf.sample_rate_hz;
    if source_hz == target_hz {
        return Ok(buf.clone());
    }
    let g = gcd(source_hz as u64, target_hz as u64);
    // output index j sits at source position j * step / phases
    let phases = target_hz as u64 / g;
    let step = source_hz as u64 / g;
    let out_len = (buf.len() as f64 * target_hz as f64 / source_hz as f64).round() as usize;

    // cutoff relative to the source Nyquist; leave a little transition band
    let cutoff = 0.97 * (target_hz as f64 / source_hz as f64).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as i64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let bank: Vec<[f64; RESAMPLE_TAPS]> = (0..phases)
        .map(|p| {
            let frac = p as f64 / phases as f64;
            let mut taps = [0.0; RESAMPLE_TAPS];
            for (k, tap) in taps.iter_mut().enumerate() {
                // distance from the output position to source sample (floor - half + 1 + k)
                let u = frac + (half - 1 - k as i64) as f64;
                let w = u / half as f64;
                let window = if w.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - w * w).sqrt()) / i0_beta
                } else {
                    0.0
                };
                *tap = cutoff * sinc(cutoff * u) * window;
            }
            taps
        })
        .collect();

    let x = &buf.samples;
    let n = x.len() as i64;
    let out = (0..out_len as u64)
        .map(|j| {
            let pos = j * step;
            let base = (pos / phases) as i64;
            let taps = &bank[(pos % phases) as usize];
            let first = base - half + 1;
            taps.iter()
                .enumerate()
                .filter_map(|(k, &h)| {
                    let idx = first + k as i64;
                    (0..n).contains(&idx).then(|| h * x[idx as usize])
                })
                .sum::<f64>()
        })
        .collect();
    AudioBuffer::new(out, target_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Fixed-length windows over a buffer, taken left to right with a constant
/// hop. The trailing partial window is dropped.
#[derive(Debug, Clone, Copy)]
pub struct FrameSequence<'a> {
    samples: &'a [f64],
    sample_rate_hz: u32,
    frame_len: usize,
    hop: usize,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
}

impl<'a> FrameSequence<'a> {
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    pub fn len(&self) -> usize {
        frame_count(self.samples.len(), self.frame_len, self.hop)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample index of the first sample of frame `i`.
    pub fn start(&self, i: usize) -> usize {
        i * self.hop
    }

    pub fn frame(&self, i: usize) -> &'a [f64] {
        let s = i * self.hop;
        &self.samples[s..s + self.frame_len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }
}

pub(crate) fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len || frame_len == 0 {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

pub(crate) fn ms_to_samples(ms: f64, rate: u32) -> usize {
    (ms / 1000.0 * rate as f64).round() as usize
}

pub fn frame_signal(buf: &AudioBuffer, frame_len_ms: f64, hop_ms: f64) -> Result<FrameSequence<'_>> {
    frame_samples(&buf.samples, buf.sample_rate_hz, frame_len_ms, hop_ms)
}

pub(crate) fn frame_samples(
    samples: &[f64],
    rate: u32,
    frame_len_ms: f64,
    hop_ms: f64,
) -> Result<FrameSequence<'_>> {
    if !(hop_ms > 0.0 && frame_len_ms >= hop_ms) {
        return Err(Error::InvalidConfig(format!(
            "need frame_len_ms >= hop_ms > 0, got {frame_len_ms}/{hop_ms}"
        )));
    }
    let frame_len = ms_to_samples(frame_len_ms, rate);
    let hop = ms_to_samples(hop_ms, rate).max(1);
    if samples.len() < frame_len {
        return Err(Error::AudioTooShort {
            len: samples.len(),
            needed: frame_len,
        });
    }
    Ok(FrameSequence {
        samples,
        sample_rate_hz: rate,
        frame_len,
        hop,
        frame_len_ms,
        hop_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> AudioBuffer {
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    fn peak_hz(buf: &AudioBuffer) -> (f64, f64) {
        let n = buf.len();
        let mut data: Vec<Complex<f64>> = buf.samples().iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut data);
        let (k, _) = data[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        let bin = buf.sample_rate_hz() as f64 / n as f64;
        (k as f64 * bin, bin)
    }

    #[test]
    fn wav_round_trip_one_second() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let buf = sine(440.0, 16000, 16000, 0.5);
        write_wav(&p, &buf).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate_hz(), 16000);
        for (a, b) in buf.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_antiphase_downmixes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..800i32 {
            let v = ((i * 37) % 20000 - 10000) as i16;
            w.write_sample(v).unwrap();
            w.write_sample(-v).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&p).unwrap();
        assert_eq!(buf.len(), 800);
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn float32_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for v in [0.25f32, -0.5, 0.75] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&p).unwrap();
        assert_eq!(buf.samples(), &[0.25, -0.5, 0.75]);
        assert_eq!(buf.sample_rate_hz(), 22050);
    }

    #[test]
    fn empty_data_chunk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        let buf = AudioBuffer::new(vec![], 16000).unwrap();
        write_wav(&p, &buf).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::EmptyAudio)));
    }

    #[test]
    fn non_riff_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        fs::write(&p, b"this is not a wave file at all, just text").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn pcm24_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn resample_identity() {
        let buf = sine(300.0, 16000, 1000, 0.3);
        assert_eq!(resample(&buf, 16000).unwrap(), buf);
    }

    #[test]
    fn resample_length_ratio() {
        let buf = sine(300.0, 44100, 441, 0.3);
        let out = resample(&buf, 16000).unwrap();
        assert_eq!(out.len(), 160);
        assert_eq!(out.sample_rate_hz(), 16000);
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let buf = sine(1000.0, 44100, 44100, 0.5);
        let out = resample(&buf, 16000).unwrap();
        let (peak, bin) = peak_hz(&out);
        assert!((peak - 1000.0).abs() <= bin, "peak at {peak}");
        // upsampling as well
        let out = resample(&sine(1000.0, 8000, 8000, 0.5), 16000).unwrap();
        let (peak, bin) = peak_hz(&out);
        assert!((peak - 1000.0).abs() <= bin, "peak at {peak}");
    }

    #[test]
    fn resample_keeps_amplitude() {
        let out = resample(&sine(500.0, 48000, 48000, 0.5), 16000).unwrap();
        let mid = &out.samples()[1000..15000];
        let rms = (mid.iter().map(|s| s * s).sum::<f64>() / mid.len() as f64).sqrt();
        assert!((rms - 0.5 / 2f64.sqrt()).abs() < 5e-3, "rms {rms}");
    }

    #[test]
    fn resample_then_wav_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let out = resample(&sine(700.0, 22050, 22050, 0.6), 16000).unwrap();
        write_wav(&p, &out).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.len(), out.len());
        for (a, b) in out.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn frame_counts() {
        let buf = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        let f = frame_signal(&buf, 25.0, 10.0).unwrap();
        assert_eq!(f.len(), 98);
        assert!(f.iter().all(|fr| fr.len() == 400));
        assert_eq!(f.frame_rate_hz(), 100.0);

        let buf = AudioBuffer::new(vec![0.0; 400], 16000).unwrap();
        assert_eq!(frame_signal(&buf, 25.0, 10.0).unwrap().len(), 1);

        let buf = AudioBuffer::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(
            frame_signal(&buf, 25.0, 10.0),
            Err(Error::AudioTooShort { len: 399, needed: 400 })
        ));
        assert!(frame_signal(&buf, 5.0, 10.0).is_err());
    }

    #[test]
    fn frames_index_back_into_the_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..32000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let buf = AudioBuffer::new(s, 16000).unwrap();
        let f = frame_signal(&buf, 25.0, 10.0).unwrap();
        for i in 0..f.len() {
            let start = f.start(i);
            assert!(start + f.frame_len() <= buf.len());
            for (j, &v) in f.frame(i).iter().enumerate() {
                assert_eq!(v, buf.samples()[start + j]);
            }
        }
    }
}
