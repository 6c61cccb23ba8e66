//! Run configuration: one JSON document, defaults for absent keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::FieldNames;
use crate::chip::{Resampling, WindowConfig, GSD_M};
use crate::pairs::PairConfig;
use crate::refs::LadderConfig;
use crate::stac::{RetryPolicy, DEFAULT_ASSET_PREFERENCE, DEFAULT_ENDPOINT};
use crate::stats::BinWidths;
use crate::vqa::{ExampleFormat, LocationConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub annotations: PathBuf,
    pub store: PathBuf,
    pub chips: PathBuf,
    pub datasets: PathBuf,
    pub manifests: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotations: "annotations".into(),
            store: "work/store".into(),
            chips: "work/chips".into(),
            datasets: "work/datasets".into(),
            manifests: "work/manifests".into(),
        }
    }
}

impl Paths {
    /// Makes relative paths relative to `base`.
    pub fn anchored(&self, base: &Path) -> Paths {
        let f = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        Paths {
            annotations: f(&self.annotations),
            store: f(&self.store),
            chips: f(&self.chips),
            datasets: f(&self.datasets),
            manifests: f(&self.manifests),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub stac_endpoint: String,
    /// Preferred (Level-2A) collection first, fallback (Level-1C) second.
    pub collections: Vec<String>,
    pub window_days: u32,
    pub widen_factor: u32,
    pub margin_m: f64,
    pub min_side_m: f64,
    pub max_side_m: f64,
    pub gsd_m: f64,
    /// Required to run with any `gsd_m` other than 10.
    pub allow_gsd_override: bool,
    pub max_concurrent_fetches: usize,
    pub retry: RetryPolicy,
    pub page_limit: usize,
    pub max_pages: usize,
    pub seed: u64,
    pub paths: Paths,
    pub field_names: FieldNames,
    pub asset_preference: Vec<String>,
    pub templates_per_pair: usize,
    pub max_pairs_per_site: Option<usize>,
    pub location: LocationConfig,
    pub formats: Vec<ExampleFormat>,
    pub resampling: Resampling,
    pub keep_no_overlap: bool,
    pub write_png: bool,
    pub bin_widths: BinWidths,
}

impl Default for Config {
    fn default() -> Self {
        let ladder = LadderConfig::default();
        let window = WindowConfig::default();
        Config {
            stac_endpoint: DEFAULT_ENDPOINT.into(),
            collections: vec![ladder.l2a_collection, ladder.l1c_collection],
            window_days: ladder.window_days,
            widen_factor: ladder.widen_factor,
            margin_m: window.margin_m,
            min_side_m: window.min_side_m,
            max_side_m: window.max_side_m,
            gsd_m: GSD_M,
            allow_gsd_override: false,
            max_concurrent_fetches: 4,
            retry: RetryPolicy::default(),
            page_limit: 100,
            max_pages: 20,
            seed: 0,
            paths: Paths::default(),
            field_names: FieldNames::default(),
            asset_preference: DEFAULT_ASSET_PREFERENCE
                .iter()
                .map(|s| s.to_string())
                .collect(),
            templates_per_pair: 3,
            max_pairs_per_site: None,
            location: LocationConfig::default(),
            formats: vec![ExampleFormat::JsonlChat, ExampleFormat::TsvFlat],
            resampling: Resampling::Bilinear,
            keep_no_overlap: false,
            write_png: false,
            bin_widths: BinWidths::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.gsd_m != GSD_M && !self.allow_gsd_override {
            return bad("gsd_m must be 10.0 unless allow_gsd_override is set");
        }
        if self.gsd_m != GSD_M {
            // Chip windows are built on a fixed 10 m grid.
            return bad("gsd_m other than 10.0 is not supported by the chip engine");
        }
        if self.max_concurrent_fetches == 0 {
            return bad("max_concurrent_fetches must be positive");
        }
        if self.collections.len() != 2 || self.collections.iter().any(|c| c.trim().is_empty()) {
            return bad("collections must name the preferred and the fallback collection");
        }
        if self.window_days == 0 || self.widen_factor == 0 {
            return bad("window_days and widen_factor must be positive");
        }
        if !(self.margin_m >= 0.0 && self.min_side_m > 0.0 && self.min_side_m <= self.max_side_m) {
            return bad("chip sizes need margin_m >= 0 and 0 < min_side_m <= max_side_m");
        }
        if !(1..=3).contains(&self.templates_per_pair) {
            return bad("templates_per_pair must be 1, 2 or 3");
        }
        if self.max_pairs_per_site == Some(0) {
            return bad("max_pairs_per_site must be positive when set");
        }
        if self.page_limit == 0 || self.max_pages == 0 {
            return bad("page_limit and max_pages must be positive");
        }
        if self.retry.factor.is_nan() || self.retry.factor < 1.0 {
            return bad("retry.factor must be at least 1");
        }
        if self.asset_preference.is_empty() || self.formats.is_empty() {
            return bad("asset_preference and formats must not be empty");
        }
        let w = &self.bin_widths;
        if w.chip_px == 0 || w.obs_per_site == 0 || w.span_days == 0 {
            return bad("bin widths must be positive");
        }
        Ok(())
    }

    pub fn ladder(&self) -> LadderConfig {
        LadderConfig {
            window_days: self.window_days,
            widen_factor: self.widen_factor,
            l2a_collection: self.collections[0].clone(),
            l1c_collection: self.collections[1].clone(),
        }
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            margin_m: self.margin_m,
            min_side_m: self.min_side_m,
            max_side_m: self.max_side_m,
        }
    }

    pub fn pairs(&self) -> PairConfig {
        PairConfig {
            seed: self.seed,
            templates_per_pair: self.templates_per_pair,
            max_pairs_per_site: self.max_pairs_per_site,
        }
    }

    /// Stable id of the settings that shape outputs; paths are excluded.
    pub fn run_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        hex::encode(digest)[..16].to_string()
    }
}

/// Sets `a.b.c` in a JSON object, creating intermediate objects.
fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Invalid(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            ConfigError::Invalid(format!("override {key:?} crosses a non-object"))
        })?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| ConfigError::Invalid(format!("override {key:?} crosses a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides; values parse as JSON, else as a string.
pub fn apply_overrides<S: AsRef<str>>(doc: &mut Value, overrides: &[S]) -> Result<(), ConfigError> {
    for o in overrides {
        let o = o.as_ref();
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override {o:?} is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_dotted(doc, k.trim(), value)?;
    }
    Ok(())
}

pub fn parse_config<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Config, ConfigError> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?
    };
    if !doc.is_object() {
        return Err(ConfigError::Invalid("config must be a JSON object".into()));
    }
    apply_overrides(&mut doc, overrides)?;
    let cfg: Config =
        serde_json::from_value(doc).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, overrides and validates; relative paths anchor at the config's directory.
pub fn load_config<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Config, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut cfg = parse_config(&text, overrides)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    cfg.paths = cfg.paths.anchored(base);
    Ok(cfg)
}
