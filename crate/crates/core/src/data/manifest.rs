//! JSONL sample manifests.
//!
//! One object per line:
//!
//! ```text
//! {"id": "s000017",
//!  "audio":    {"bank": "audio.mc3f",    "row": 17},
//!  "video":    {"bank": "video.mc3f",    "row": 17},
//!  "language": {"bank": "language.mc3f", "row": 17},
//!  "sounding": 1, "verb": "verb03", "noun": "noun11",
//!  "split": "test", "t": 431.5}
//! ```
//!
//! `sounding`, `verb`, `noun` and `t` are optional. Bank paths are relative
//! to the manifest's directory. Unknown keys are ignored.

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bank::read_bank_header;
use crate::binio::{read_file, write_atomic};
use crate::error::{Mc3Error, Result};
use crate::modality::PerModality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Mc3Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            o => Err(Mc3Error::config("split", format!("unknown split {o:?}"))),
        }
    }
}

/// Which modalities share the action, following the five overlap cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    /// Audio, video and language all describe the action.
    #[serde(rename = "I")]
    AllAgree,
    /// Audio and video share a distractor; language names the action.
    #[serde(rename = "II")]
    AvOnly,
    /// Video and language show the action; audio is unrelated.
    #[serde(rename = "III")]
    VlOnly,
    /// Audio and language carry the action; video shows a distractor.
    #[serde(rename = "IV")]
    AlOnly,
    /// Nothing is shared.
    #[serde(rename = "V")]
    None,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 5] = [
        RegionLabel::AllAgree,
        RegionLabel::AvOnly,
        RegionLabel::VlOnly,
        RegionLabel::AlOnly,
        RegionLabel::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V"][self.index()]
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub bank: String,
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub features: PerModality<FeatureRef>,
    pub sounding: Option<bool>,
    pub verb: Option<String>,
    pub noun: Option<String>,
    pub split: Split,
    /// Opaque clip timestamp in seconds.
    pub timestamp: Option<f64>,
    /// Ground-truth overlap case; only present in generated corpora.
    pub region: Option<RegionLabel>,
}

impl SampleRecord {
    /// `verb/noun` when both tags are present.
    pub fn action_group(&self) -> Option<String> {
        match (&self.verb, &self.noun) {
            (Some(v), Some(n)) => Some(format!("{v}/{n}")),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    audio: FeatureRef,
    video: FeatureRef,
    language: FeatureRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sounding: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noun: Option<String>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<RegionLabel>,
}

impl RawRecord {
    fn into_record(self) -> std::result::Result<SampleRecord, String> {
        let sounding = match self.sounding {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(v) => return Err(format!("sounding must be 0 or 1, got {v}")),
        };
        for (key, tag) in [("verb", &self.verb), ("noun", &self.noun)] {
            if tag.as_deref().is_some_and(|t| t.trim().is_empty()) {
                return Err(format!("{key} tag must be non-empty"));
            }
        }
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        Ok(SampleRecord {
            id: self.id,
            features: PerModality([self.audio, self.video, self.language]),
            sounding,
            verb: self.verb,
            noun: self.noun,
            split: self.split,
            timestamp: self.t,
            region: self.region,
        })
    }

    fn from_record(r: &SampleRecord) -> Self {
        let [audio, video, language] = r.features.0.clone();
        RawRecord {
            id: r.id.clone(),
            audio,
            video,
            language,
            sounding: r.sounding.map(u8::from),
            verb: r.verb.clone(),
            noun: r.noun.clone(),
            split: r.split,
            t: r.timestamp,
            region: r.region,
        }
    }
}

/// Parses manifest text without touching any bank file.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Mc3Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(raw.into_record().map_err(parse_err)?);
    }
    Ok(out)
}

pub fn manifest_to_string(records: &[SampleRecord]) -> String {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &RawRecord::from_record(r)).expect("records serialize");
        buf.push(b'\n');
    }
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn save_manifest(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(manifest_to_string(records).as_bytes())
        .map_err(|e| Mc3Error::io(path, e))?;
    write_atomic(path, &buf)
}

pub(crate) fn bank_path(manifest: &Path, bank: &str) -> PathBuf {
    manifest
        .parent()
        .map(|d| d.join(bank))
        .unwrap_or_else(|| PathBuf::from(bank))
}

/// Loads and validates a manifest. Every referenced bank header is read to
/// confirm that the referenced rows exist and that modalities line up.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Mc3Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not utf-8: {e}"),
    })?;
    let records = parse_manifest(&text, path)?;
    let mut headers = HashMap::new();
    for r in &records {
        for (m, fref) in r.features.iter() {
            if !headers.contains_key(&fref.bank) {
                let h = read_bank_header(&bank_path(path, &fref.bank))?;
                headers.insert(fref.bank.clone(), h);
            }
            let h = headers[&fref.bank];
            if h.modality != m {
                return Err(Mc3Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!(
                        "record {}: {m} refers to bank {} holding {} features",
                        r.id, fref.bank, h.modality
                    ),
                });
            }
            if fref.row >= h.count {
                return Err(Mc3Error::DanglingReference {
                    record: r.id.clone(),
                    modality: m.to_string(),
                    bank: fref.bank.clone(),
                    row: fref.row,
                    count: h.count,
                });
            }
        }
    }
    Ok(records)
}
