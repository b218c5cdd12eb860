//! Clip-level feature vectors.
//!
//! Two hand-crafted sets are built from [`crate::lld`] contours:
//!
//! * `is09`: 16 descriptors (ZCR, RMS energy, F0, HNR, MFCC 1-12) and their
//!   first differences, each summarised by 12 functionals: 384 values.
//! * `egemaps-lite`: 13 descriptors summarised by mean, standard deviation
//!   and the 20th/50th/80th percentiles, plus three voicing-timing
//!   statistics: 68 values. The composition is inspired by the Geneva
//!   minimalistic set but is not identical to it.
//!
//! Learned embeddings are computed elsewhere and ingested from FVEC files,
//! then mean-pooled over frames.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::lld::{self, LldContour, LldExtractor, LldSet};
use crate::segment::Clip;

pub const IS09_DIMS: usize = 384;
pub const EGEMAPS_LITE_DIMS: usize = 68;
/// Minimum voiced material a clip must carry, in seconds.
pub const MIN_VOICED_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSetId {
    #[serde(rename = "is09")]
    Is09,
    #[serde(rename = "egemaps-lite")]
    EgemapsLite,
    #[serde(rename = "embedding")]
    Embedding,
}

impl FeatureSetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSetId::Is09 => "is09",
            FeatureSetId::EgemapsLite => "egemaps-lite",
            FeatureSetId::Embedding => "embedding",
        }
    }

    /// Fixed dimensionality, or `None` when declared by the data.
    pub fn dims(&self) -> Option<usize> {
        match self {
            FeatureSetId::Is09 => Some(IS09_DIMS),
            FeatureSetId::EgemapsLite => Some(EGEMAPS_LITE_DIMS),
            FeatureSetId::Embedding => None,
        }
    }
}

impl fmt::Display for FeatureSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "is09" => Ok(FeatureSetId::Is09),
            "egemaps-lite" => Ok(FeatureSetId::EgemapsLite),
            "embedding" => Ok(FeatureSetId::Embedding),
            other => Err(Error::InvalidConfig(format!("unknown feature set '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub set_id: FeatureSetId,
    pub values: Vec<f64>,
    /// Set when a voiced-only descriptor had no voiced frames and its block
    /// was zero-filled.
    pub quality_flag: bool,
}

impl FeatureVector {
    pub fn dims(&self) -> usize {
        self.values.len()
    }
}

// ---------------------------------------------------------------------------
// functionals

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    Mean,
    Std,
    Skewness,
    Kurtosis,
    Min,
    Max,
    Range,
    RelPosMin,
    RelPosMax,
    Slope,
    Offset,
    RegressionMse,
    P20,
    P50,
    P80,
}

/// The 12 functionals of the IS09 set, in output order.
pub const IS09_FUNCTIONALS: [Functional; 12] = [
    Functional::Mean,
    Functional::Std,
    Functional::Skewness,
    Functional::Kurtosis,
    Functional::Min,
    Functional::Max,
    Functional::Range,
    Functional::RelPosMin,
    Functional::RelPosMax,
    Functional::Slope,
    Functional::Offset,
    Functional::RegressionMse,
];

pub const EGEMAPS_FUNCTIONALS: [Functional; 5] = [
    Functional::Mean,
    Functional::Std,
    Functional::P20,
    Functional::P50,
    Functional::P80,
];

/// Summary statistics of the present values of a contour.
///
/// Time is normalised to `[0, 1]` over the whole contour (frame `i` of `n`
/// sits at `i / (n - 1)`), so regression slope is per clip, offset is the
/// fitted value at the clip start and relative positions are in `[0, 1]`.
/// With fewer than two present values, the spread, shape and regression
/// statistics are 0. Moments are population moments; kurtosis is not
/// excess-corrected.
pub fn apply_functionals(contour: &LldContour, spec: &[Functional]) -> Result<Vec<f64>> {
    let n = contour.values.len();
    let pts: Vec<(f64, f64)> = contour
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            v.map(|v| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                (t, v)
            })
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptyContour(contour.name.clone()));
    }
    let stats = Stats::new(&pts);
    Ok(spec.iter().map(|f| stats.get(*f)).collect())
}

struct Stats {
    mean: f64,
    std: f64,
    skew: f64,
    kurt: f64,
    min: (f64, f64),
    max: (f64, f64),
    slope: f64,
    offset: f64,
    mse: f64,
    sorted: Vec<f64>,
}

impl Stats {
    fn new(pts: &[(f64, f64)]) -> Self {
        let m = pts.len() as f64;
        let mean = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let moment = |k: i32| pts.iter().map(|p| (p.1 - mean).powi(k)).sum::<f64>() / m;
        let (m2, m3, m4) = (moment(2), moment(3), moment(4));
        let (std, skew, kurt) = if pts.len() < 2 || m2 <= 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            (m2.sqrt(), m3 / m2.powf(1.5), m4 / (m2 * m2))
        };
        // first occurrence wins on ties
        let mut min = pts[0];
        let mut max = pts[0];
        for &p in &pts[1..] {
            if p.1 < min.1 {
                min = p;
            }
            if p.1 > max.1 {
                max = p;
            }
        }
        let (slope, offset, mse) = if pts.len() < 2 {
            (0.0, mean, 0.0)
        } else {
            let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
            let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mean)).sum();
            let slope = sty / stt;
            let offset = mean - slope * mt;
            let mse = pts
                .iter()
                .map(|p| (p.1 - (offset + slope * p.0)).powi(2))
                .sum::<f64>()
                / m;
            (slope, offset, mse)
        };
        let mut sorted: Vec<f64> = pts.iter().map(|p| p.1).collect();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            std,
            skew,
            kurt,
            min,
            max,
            slope,
            offset,
            mse,
            sorted,
        }
    }

    fn get(&self, f: Functional) -> f64 {
        match f {
            Functional::Mean => self.mean,
            Functional::Std => self.std,
            Functional::Skewness => self.skew,
            Functional::Kurtosis => self.kurt,
            Functional::Min => self.min.1,
            Functional::Max => self.max.1,
            Functional::Range => self.max.1 - self.min.1,
            Functional::RelPosMin => self.min.0,
            Functional::RelPosMax => self.max.0,
            Functional::Slope => self.slope,
            Functional::Offset => self.offset,
            Functional::RegressionMse => self.mse,
            Functional::P20 => crate::segment::percentile_sorted(&self.sorted, 0.2),
            Functional::P50 => crate::segment::percentile_sorted(&self.sorted, 0.5),
            Functional::P80 => crate::segment::percentile_sorted(&self.sorted, 0.8),
        }
    }
}

/// First differences; the first frame (and the first frame of every voiced
/// stretch) gets 0, missing frames stay missing.
pub fn delta(contour: &LldContour) -> LldContour {
    let v = &contour.values;
    let values = (0..v.len())
        .map(|i| match (i.checked_sub(1).and_then(|j| v[j]), v[i]) {
            (_, None) => None,
            (None, Some(_)) => Some(0.0),
            (Some(prev), Some(cur)) => Some(cur - prev),
        })
        .collect();
    LldContour {
        name: format!("{}_de", contour.name),
        values,
        frame_rate_hz: contour.frame_rate_hz,
    }
}

// ---------------------------------------------------------------------------
// extraction

/// Turns clips into feature vectors of one hand-crafted set.
pub struct FeatureExtractor {
    set_id: FeatureSetId,
    lld: LldExtractor,
    sample_rate: u32,
}

impl FeatureExtractor {
    pub fn new(set_id: FeatureSetId, sample_rate: u32) -> Result<Self> {
        if set_id == FeatureSetId::Embedding {
            return Err(Error::InvalidConfig(
                "embeddings are ingested from FVEC files, not extracted".into(),
            ));
        }
        Ok(Self {
            set_id,
            lld: LldExtractor::new(sample_rate),
            sample_rate,
        })
    }

    pub fn set_id(&self) -> FeatureSetId {
        self.set_id
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn extract(&self, buf: &AudioBuffer) -> Result<FeatureVector> {
        let set = self.lld.extract(buf)?;
        let voiced_s = set.voicing.is_voiced.iter().filter(|&&v| v).count() as f64 * set.hop_s;
        if voiced_s < MIN_VOICED_S {
            return Err(Error::InsufficientVoiced {
                min_ratio: MIN_VOICED_S / buf.duration_s(),
            });
        }
        let fv = match self.set_id {
            FeatureSetId::Is09 => is09_from_llds(&set),
            FeatureSetId::EgemapsLite => egemaps_from_llds(&set, buf.duration_s()),
            FeatureSetId::Embedding => unreachable!("rejected in new()"),
        }?;
        debug_assert_eq!(Some(fv.dims()), self.set_id.dims());
        Ok(fv)
    }

    pub fn extract_clip(&self, clip: &Clip) -> Result<FeatureVector> {
        self.extract(&clip.buffer)
    }
}

pub fn extract_is09(clip: &Clip) -> Result<FeatureVector> {
    FeatureExtractor::new(FeatureSetId::Is09, clip.buffer.sample_rate_hz())?.extract_clip(clip)
}

pub fn extract_egemaps_lite(clip: &Clip) -> Result<FeatureVector> {
    FeatureExtractor::new(FeatureSetId::EgemapsLite, clip.buffer.sample_rate_hz())?
        .extract_clip(clip)
}

fn is09_llds(set: &LldSet) -> Vec<LldContour> {
    let mut names: Vec<String> = [lld::ZCR, lld::ENERGY_DB, lld::F0_HZ, lld::HNR_DB]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=12).map(lld::mfcc_name));
    names.iter().map(|n| set.get(n).clone()).collect()
}

/// Summarises `contour`, zero-filling the block when it has no present values.
fn block(contour: &LldContour, spec: &[Functional], out: &mut Vec<f64>, flag: &mut bool) -> Result<()> {
    if contour.present_count() == 0 {
        *flag = true;
        out.extend(std::iter::repeat(0.0).take(spec.len()));
        return Ok(());
    }
    let v = apply_functionals(contour, spec)?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue(out.len() + i));
    }
    out.extend(v);
    Ok(())
}

fn is09_from_llds(set: &LldSet) -> Result<FeatureVector> {
    let llds = is09_llds(set);
    let mut values = Vec::with_capacity(IS09_DIMS);
    let mut flag = false;
    for c in &llds {
        block(c, &IS09_FUNCTIONALS, &mut values, &mut flag)?;
    }
    for c in &llds {
        block(&delta(c), &IS09_FUNCTIONALS, &mut values, &mut flag)?;
    }
    Ok(FeatureVector {
        set_id: FeatureSetId::Is09,
        values,
        quality_flag: flag,
    })
}

/// Semitones relative to 27.5 Hz.
fn log_f0(contour: &LldContour) -> LldContour {
    LldContour {
        name: "log_f0_st".into(),
        values: contour
            .values
            .iter()
            .map(|v| v.map(|hz| 12.0 * (hz / 27.5).log2()))
            .collect(),
        frame_rate_hz: contour.frame_rate_hz,
    }
}

fn egemaps_from_llds(set: &LldSet, duration_s: f64) -> Result<FeatureVector> {
    let mut llds = vec![log_f0(set.get(lld::F0_HZ))];
    for name in [
        lld::ENERGY_DB,
        lld::JITTER,
        lld::SHIMMER,
        lld::HNR_DB,
        lld::CENTROID,
        lld::SLOPE_0_500,
        lld::SLOPE_500_1500,
        lld::ALPHA_RATIO,
        lld::HAMMARBERG,
    ] {
        llds.push(set.get(name).clone());
    }
    for k in 1..=3 {
        llds.push(set.get(&lld::mfcc_name(k)).clone());
    }
    let mut values = Vec::with_capacity(EGEMAPS_LITE_DIMS);
    let mut flag = false;
    for c in &llds {
        block(c, &EGEMAPS_FUNCTIONALS, &mut values, &mut flag)?;
    }

    let voiced = &set.voicing.is_voiced;
    let n_voiced = voiced.iter().filter(|&&v| v).count();
    let segments = voiced
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v && (i == 0 || !voiced[i - 1]))
        .count();
    values.push(n_voiced as f64 / voiced.len() as f64);
    values.push(segments as f64 / duration_s);
    values.push(if segments > 0 {
        n_voiced as f64 * set.hop_s / segments as f64
    } else {
        0.0
    });
    Ok(FeatureVector {
        set_id: FeatureSetId::EgemapsLite,
        values,
        quality_flag: flag,
    })
}

// ---------------------------------------------------------------------------
// FVEC embeddings

const FVEC_MAGIC: &[u8; 4] = b"FVEC";
const FVEC_VERSION: u32 = 1;
const FVEC_HEADER: usize = 16;

/// Frame-level embeddings of one clip, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_frames: usize,
    dims: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(n_frames: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || dims == 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding matrix must be non-empty, got {n_frames}x{dims}"
            )));
        }
        if values.len() != n_frames * dims {
            return Err(Error::DimMismatch {
                expected: n_frames * dims,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            n_frames,
            dims,
            values,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Parses the FVEC layout: `"FVEC"`, u32 version (1), u32 frames, u32 dims,
/// then frames x dims little-endian f32 values.
pub fn parse_fvec(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 4];
    let head = bytes.len().min(4);
    magic[..head].copy_from_slice(&bytes[..head]);
    if &magic != FVEC_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < FVEC_HEADER {
        return Err(Error::MalformedHeader("truncated FVEC header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FVEC_VERSION {
        return Err(Error::UnsupportedEncoding(format!("FVEC version {version}")));
    }
    let (n_frames, dims) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[FVEC_HEADER..];
    let expected = n_frames * dims;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(Error::DimMismatch {
            expected,
            actual: payload.len() / 4,
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingMatrix::new(n_frames, dims, values)
}

pub fn load_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_fvec(&bytes)
}

pub fn encode_fvec(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FVEC_HEADER + 4 * m.values.len());
    out.extend_from_slice(FVEC_MAGIC);
    out.extend_from_slice(&FVEC_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(m.dims as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Writes `m` as FVEC. Values are stored as f32.
pub fn write_fvec(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_fvec(m)).map_err(|e| Error::io(path, e))
}

/// Column means over frames. Each column is summed in sorted order, so the
/// result does not depend on frame order at all.
pub fn pool_mean(m: &EmbeddingMatrix) -> FeatureVector {
    let n = m.n_frames as f64;
    let mut col = Vec::with_capacity(m.n_frames);
    let values = (0..m.dims)
        .map(|j| {
            col.clear();
            col.extend((0..m.n_frames).map(|i| m.values[i * m.dims + j]));
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect();
    FeatureVector {
        set_id: FeatureSetId::Embedding,
        values,
        quality_flag: false,
    }
}

/// Reads a sidecar index `{ "clip-id": "relative/path.fvec", ... }`. Paths
/// are resolved against the index file's directory.
pub fn load_embedding_index(path: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, PathBuf> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(raw.into_iter().map(|(k, p)| (k, base.join(p))).collect())
}
