//! Dataset manifests.
//!
//! ```json
//! {"version": 1,
//!  "participants": [
//!    {"id": "p01", "label": "depressed", "scenario": "chatbot",
//!     "recordings": ["audio/p01.wav"],
//!     "embeddings": {"p01/r0/0.000": "emb/p01_0.fvec"}}]}
//! ```
//!
//! Paths are relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Depressed,
    Healthy,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Depressed
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Depressed => "depressed",
            Label::Healthy => "healthy",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Interview,
    Chatbot,
    Reading,
    Synthetic,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Interview,
        Scenario::Chatbot,
        Scenario::Reading,
        Scenario::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Interview => "interview",
            Scenario::Chatbot => "chatbot",
            Scenario::Reading => "reading",
            Scenario::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub label: Label,
    pub scenario: Scenario,
    pub recordings: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<BTreeMap<String, PathBuf>>,
}

impl ParticipantRecord {
    /// Recording id used in clip ids and seeds: the path as written.
    pub fn recording_id(&self, i: usize) -> String {
        self.recordings[i].to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub participants: Vec<ParticipantRecord>,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&ParticipantRecord> {
        self.participants.iter().find(|p| p.id == id)
    }
}

// Loose mirror of the schema, so vocabulary errors can be reported by field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u32,
    participants: Vec<RawParticipant>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParticipant {
    id: String,
    label: String,
    scenario: String,
    recordings: Vec<PathBuf>,
    #[serde(default)]
    embeddings: Option<BTreeMap<String, PathBuf>>,
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            at: "manifest".into(),
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    parse_manifest_str(&text, &base)
}

/// Parses and validates manifest text whose relative paths resolve against
/// `base_dir`.
pub fn parse_manifest_str(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::SchemaViolation {
        at: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    if raw.version != MANIFEST_VERSION {
        return Err(Error::SchemaViolation {
            at: "version".into(),
            msg: format!("unsupported version {}, expected {MANIFEST_VERSION}", raw.version),
        });
    }
    let mut seen = HashSet::new();
    let mut participants = Vec::with_capacity(raw.participants.len());
    for (i, p) in raw.participants.into_iter().enumerate() {
        let at = |field: &str| format!("participants[{i}].{field}");
        if p.id.is_empty() {
            return Err(Error::SchemaViolation {
                at: at("id"),
                msg: "empty id".into(),
            });
        }
        if !seen.insert(p.id.clone()) {
            return Err(Error::DuplicateId(p.id));
        }
        let label = match p.label.as_str() {
            "depressed" => Label::Depressed,
            "healthy" => Label::Healthy,
            _ => {
                return Err(Error::UnknownLabel {
                    at: at("label"),
                    label: p.label,
                })
            }
        };
        let scenario = p.scenario.parse().map_err(|_| Error::SchemaViolation {
            at: at("scenario"),
            msg: format!(
                "unknown scenario '{}', expected one of interview, chatbot, reading, synthetic",
                p.scenario
            ),
        })?;
        if p.recordings.is_empty() {
            return Err(Error::SchemaViolation {
                at: at("recordings"),
                msg: "at least one recording is required".into(),
            });
        }
        for (j, r) in p.recordings.iter().enumerate() {
            check_exists(base_dir, r, format!("participants[{i}].recordings[{j}]"))?;
        }
        if let Some(emb) = &p.embeddings {
            for (clip, r) in emb {
                check_exists(base_dir, r, format!("participants[{i}].embeddings.{clip}"))?;
            }
        }
        participants.push(ParticipantRecord {
            id: p.id,
            label,
            scenario,
            recordings: p.recordings,
            embeddings: p.embeddings,
        });
    }
    Ok(DatasetManifest {
        version: raw.version,
        participants,
        base_dir: base_dir.to_path_buf(),
    })
}

fn check_exists(base: &Path, rel: &Path, at: String) -> Result<()> {
    if base.join(rel).is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile {
            at,
            path: rel.to_path_buf(),
        })
    }
}

/// Writes the manifest as pretty JSON (write-temp-rename).
pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
