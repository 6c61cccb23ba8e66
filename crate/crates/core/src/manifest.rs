//! Append-only JSON Lines manifests, one file per stage.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationError, LoadReport, RegionModel, SiteModel};
use crate::chip::{ChipError, ChipRecord};
use crate::config::Config;
use crate::pairs::AugmentationReport;
use crate::stac::{AnnotationKey, ResolutionRecord};
use crate::stats::{BreakdownTable, Histogram, LabelDistribution};
use crate::vqa::GenerationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Resolve,
    Fetch,
    Chip,
    Vqa,
    Pairs,
    Stats,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Ingest,
        Stage::Resolve,
        Stage::Fetch,
        Stage::Chip,
        Stage::Vqa,
        Stage::Pairs,
        Stage::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Resolve => "resolve",
            Stage::Fetch => "fetch",
            Stage::Chip => "chip",
            Stage::Vqa => "vqa",
            Stage::Pairs => "pairs",
            Stage::Stats => "stats",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ORDER.into_iter().find(|st| st.as_str() == s)
    }

    pub fn manifest_file(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub seed: u64,
    pub tool_version: String,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub source_file: String,
    pub source_sha256: String,
    pub site: SiteModel,
    pub report: LoadReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub source_file: String,
    pub source_sha256: String,
    pub region: RegionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub source_file: String,
    pub source_sha256: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChipFailureKind {
    NoOverlap,
    RasterRead,
    Storage,
    InvalidRecord,
    MissingAnnotation,
    /// Another observation already produced the same chip file.
    Duplicate,
}

impl From<&ChipError> for ChipFailureKind {
    fn from(e: &ChipError) -> Self {
        match e {
            ChipError::NoOverlap => ChipFailureKind::NoOverlap,
            ChipError::RasterRead(_) => ChipFailureKind::RasterRead,
            ChipError::Storage(_) => ChipFailureKind::Storage,
            ChipError::MalformedFilename(_) | ChipError::InvalidRecord(_) => {
                ChipFailureKind::InvalidRecord
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipFailure {
    pub annotation_key: AnnotationKey,
    pub kind: ChipFailureKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub breakdown: BreakdownTable,
    pub labels: LabelDistribution,
    pub histograms: Vec<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub outcome: String,
    pub counts: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
pub enum Payload {
    Header(Box<RunHeader>),
    Site(Box<SiteEntry>),
    Region(Box<RegionEntry>),
    IngestFailure(IngestFailure),
    Resolution(Box<ResolutionRecord>),
    Chip(Box<ChipRecord>),
    ChipFailure(ChipFailure),
    Generation(GenerationReport),
    Augmentation(AugmentationReport),
    Stats(Box<StatsReport>),
    Summary(StageSummary),
}

impl Payload {
    /// Key that must be unique within one writer session.
    fn unique_key(&self) -> Option<String> {
        match self {
            Payload::Resolution(r) => Some(format!("resolution:{}", r.annotation_key.key_string())),
            Payload::Chip(c) => Some(format!("chip:{}", c.annotation_key.key_string())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: Stage,
    pub timestamp: DateTime<Utc>,
    pub run_id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest storage error: {0}")]
    Storage(String),
    #[error("duplicate manifest key {0}")]
    DuplicateKey(String),
    #[error("{path}:{line}: unreadable manifest line: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("manifest {0} does not exist")]
    Missing(PathBuf),
}

impl From<AnnotationError> for ManifestError {
    fn from(e: AnnotationError) -> Self {
        ManifestError::Storage(e.to_string())
    }
}

struct WriterState {
    file: Option<File>,
    keys: HashSet<String>,
}

/// Single writer per manifest file; every line is written with one call under a lock.
pub struct ManifestWriter {
    path: PathBuf,
    stage: Stage,
    run_id: String,
    state: Mutex<WriterState>,
}

impl ManifestWriter {
    pub fn open(path: &Path, stage: Stage, run_id: &str) -> Result<ManifestWriter, ManifestError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| ManifestError::Storage(e.to_string()))?;
        }
        drop_torn_tail(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ManifestError::Storage(format!("{}: {e}", path.display())))?;
        Ok(ManifestWriter {
            path: path.to_path_buf(),
            stage,
            run_id: run_id.to_string(),
            state: Mutex::new(WriterState {
                file: Some(file),
                keys: HashSet::new(),
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, payload: Payload) -> Result<(), ManifestError> {
        let key = payload.unique_key();
        let entry = ManifestEntry {
            stage: self.stage,
            timestamp: Utc::now(),
            run_id: self.run_id.clone(),
            payload,
        };
        let mut line =
            serde_json::to_string(&entry).map_err(|e| ManifestError::Storage(e.to_string()))?;
        line.push('\n');
        let mut st = self.state.lock().expect("manifest lock");
        let WriterState { file, keys } = &mut *st;
        let file = file
            .as_mut()
            .ok_or_else(|| ManifestError::Storage(format!("{} is closed", self.path.display())))?;
        if let Some(k) = key {
            if !keys.insert(k.clone()) {
                return Err(ManifestError::DuplicateKey(k));
            }
        }
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| ManifestError::Storage(e.to_string()))
    }

    pub fn close(&self) -> Result<(), ManifestError> {
        let mut st = self.state.lock().expect("manifest lock");
        if let Some(f) = st.file.take() {
            f.sync_all()
                .map_err(|e| ManifestError::Storage(e.to_string()))?;
        }
        Ok(())
    }
}

/// Cuts an unterminated last line left by an interrupted writer.
fn drop_torn_tail(path: &Path) -> Result<(), ManifestError> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| ManifestError::Storage(e.to_string()))?;
    f.set_len(keep as u64)
        .map_err(|e| ManifestError::Storage(e.to_string()))
}

/// Reads every entry. A torn final line (no newline) from an interrupted
/// writer is skipped; any other unreadable line is an error.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    if !path.exists() {
        return Err(ManifestError::Missing(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| ManifestError::Storage(e.to_string()))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut n = 0;
    loop {
        buf.clear();
        let read = reader
            .read_line(&mut buf)
            .map_err(|e| ManifestError::Storage(e.to_string()))?;
        if read == 0 {
            break;
        }
        n += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim_end();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestEntry>(text) {
            Ok(e) => out.push(e),
            Err(_) if !complete => {
                tracing::warn!(path = %path.display(), line = n, "skipping torn manifest line");
            }
            Err(e) => {
                return Err(ManifestError::Corrupt {
                    path: path.to_path_buf(),
                    line: n,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Manifest text with timestamps removed, for comparing runs.
pub fn strip_timestamps(text: &str) -> String {
    text.lines()
        .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
            Ok(mut v) => {
                if let Some(o) = v.as_object_mut() {
                    o.remove("timestamp");
                }
                strip_nested_times(&mut v);
                v.to_string()
            }
            Err(_) => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_nested_times(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(o) => {
            o.remove("fetched_at");
            if let Some(cfg) = o.get_mut("config").and_then(|c| c.as_object_mut()) {
                cfg.remove("paths");
            }
            o.values_mut().for_each(strip_nested_times);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_nested_times),
        _ => {}
    }
}
