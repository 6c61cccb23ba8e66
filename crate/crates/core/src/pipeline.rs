//! Staged execution over manifests: ingest, resolve, fetch, chip, vqa, pairs, stats.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;
use tracing::{info, warn};
use walkdir::WalkDir;

use crate::annotation::{
    build_site_index, load_region_model, load_site_model, AnnotationError, Observation,
    RegionModel, SiteModel,
};
use crate::chip::geotiff::{write_png, write_rgb_geotiff, SceneReader};
use crate::chip::{
    chip_georef, compute_chip_window, encode_chip_filename, extract_chip, local_projection_for,
    ChipName, ChipRecord, ExtractOptions,
};
use crate::config::{Config, ConfigError};
use crate::manifest::{
    read_manifest, ChipFailure, ChipFailureKind, IngestFailure, ManifestEntry, ManifestError,
    ManifestWriter, Payload, RegionEntry, RunHeader, SiteEntry, Stage, StageSummary, StatsReport,
};
use crate::refs::{build_query_ladder, parse_reference, NormalizedImageRef};
use crate::stac::{
    complete_resolution, plan_resolution, sha256_file, AnnotationKey, AssetFetcher, Catalog,
    Downloader, FileFetcher, FixtureCatalog, HttpCatalog, HttpFetcher, ResolutionRecord,
    ResolutionStatus,
};
use crate::stats::{
    histogram_report, label_distributions, summarize_counts, HistogramKind, ObservationRow,
};
use crate::taxonomy::SensorFamily;
use crate::vqa::serialize_all;

pub const SINGLE_DATASET: &str = "vqa_single";
pub const PAIR_DATASET: &str = "vqa_pairs";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {missing}")]
    DependencyMissing { stage: Stage, missing: PathBuf },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("catalog error: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Complete,
    /// The stage finished but some records failed.
    Partial,
}

impl Outcome {
    fn as_str(self) -> &'static str {
        match self {
            Outcome::Complete => "complete",
            Outcome::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub outcome: Outcome,
    pub counts: BTreeMap<String, u64>,
    /// Human-readable text for standard output.
    pub stdout: Option<String>,
}

impl StageReport {
    pub fn count(&self, k: &str) -> u64 {
        self.counts.get(k).copied().unwrap_or(0)
    }
}

/// 0 success, 1 partial, 2 fatal.
pub fn exit_code(result: &Result<Vec<StageReport>, PipelineError>) -> i32 {
    match result {
        Err(_) => 2,
        Ok(reports) if reports.iter().any(|r| r.outcome == Outcome::Partial) => 1,
        Ok(_) => 0,
    }
}

/// Catalog and asset transport used by a run.
#[derive(Clone)]
pub struct Runtime {
    pub catalog: Arc<dyn Catalog>,
    pub fetcher: Arc<dyn AssetFetcher>,
}

impl Runtime {
    pub fn online(cfg: &Config) -> Runtime {
        Runtime {
            catalog: Arc::new(HttpCatalog::new(
                &cfg.stac_endpoint,
                cfg.page_limit,
                cfg.max_pages,
                cfg.retry,
            )),
            fetcher: Arc::new(HttpFetcher::new()),
        }
    }

    /// Fixture catalog rooted at `dir/catalog` when present, else at `dir`.
    pub fn offline(dir: &Path) -> Result<Runtime, PipelineError> {
        let sub = dir.join("catalog");
        let root = if sub.is_dir() { sub } else { dir.to_path_buf() };
        if !root.is_dir() {
            return Err(PipelineError::Catalog(format!(
                "no fixture catalog at {}",
                root.display()
            )));
        }
        let catalog =
            FixtureCatalog::load(&root).map_err(|e| PipelineError::Catalog(e.to_string()))?;
        Ok(Runtime {
            catalog: Arc::new(catalog),
            fetcher: Arc::new(FileFetcher::new(&root)),
        })
    }
}

fn storage<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Storage(e.to_string())
}

fn write_text_atomic(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(storage)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(storage)?;
    fs::rename(&tmp, path).map_err(storage)
}

fn rel_string(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Whether an observation is sent to the catalog at all.
pub fn should_attempt(obs: &Observation) -> bool {
    match obs.sensor_family {
        SensorFamily::Sentinel2 => true,
        SensorFamily::None => obs
            .source_ref
            .as_deref()
            .is_some_and(|r| parse_reference(r).is_ok()),
        _ => false,
    }
}

pub fn annotation_key(site_id: &str, obs: &Observation) -> AnnotationKey {
    AnnotationKey {
        site_id: site_id.to_string(),
        obs_date: obs.obs_date,
        raw_ref: obs.source_ref.clone(),
    }
}

fn normalized_ref(obs: &Observation) -> NormalizedImageRef {
    obs.source_ref
        .as_deref()
        .and_then(|r| parse_reference(r).ok())
        .unwrap_or_else(|| {
            NormalizedImageRef::geometry_only(obs.source_ref.as_deref(), obs.obs_date)
        })
}

/// Sites and regions as of the latest ingest entries.
#[derive(Debug, Default)]
pub struct IngestState {
    pub sites: BTreeMap<String, SiteModel>,
    pub regions: BTreeMap<String, RegionModel>,
}

impl IngestState {
    fn from_entries(entries: &[ManifestEntry]) -> IngestState {
        let mut by_file_site: BTreeMap<String, SiteModel> = BTreeMap::new();
        let mut by_file_region: BTreeMap<String, RegionModel> = BTreeMap::new();
        for e in entries {
            match &e.payload {
                Payload::Site(s) => {
                    by_file_site.insert(s.source_file.clone(), s.site.clone());
                }
                Payload::Region(r) => {
                    by_file_region.insert(r.source_file.clone(), r.region.clone());
                }
                _ => {}
            }
        }
        IngestState {
            sites: by_file_site
                .into_values()
                .map(|s| (s.site_id.clone(), s))
                .collect(),
            regions: by_file_region
                .into_values()
                .map(|r| (r.region_id.clone(), r))
                .collect(),
        }
    }

    fn observation(&self, key: &AnnotationKey) -> Option<(&SiteModel, &Observation)> {
        let site = self.sites.get(&key.site_id)?;
        let obs = site
            .observations
            .iter()
            .find(|o| o.obs_date == key.obs_date && o.source_ref == key.raw_ref)?;
        Some((site, obs))
    }

    /// Annotation-side rows for every observation of usable sites.
    pub fn observation_rows(&self) -> Vec<ObservationRow> {
        let mut rows = Vec::new();
        for site in self.sites.values().filter(|s| s.is_usable()) {
            for o in &site.observations {
                rows.push(ObservationRow {
                    site_id: site.site_id.clone(),
                    sensor: if should_attempt(o) {
                        SensorFamily::Sentinel2
                    } else {
                        o.sensor_family
                    },
                    source_ref: o.source_ref.clone(),
                    types: o.types.clone(),
                    phase: o.phase,
                });
            }
        }
        rows
    }
}

fn latest_resolutions(entries: &[ManifestEntry]) -> BTreeMap<AnnotationKey, ResolutionRecord> {
    let mut out = BTreeMap::new();
    for e in entries {
        if let Payload::Resolution(r) = &e.payload {
            out.insert(r.annotation_key.clone(), (**r).clone());
        }
    }
    out
}

fn latest_chips(entries: &[ManifestEntry]) -> BTreeMap<AnnotationKey, ChipRecord> {
    let mut out = BTreeMap::new();
    for e in entries {
        if let Payload::Chip(c) = &e.payload {
            out.insert(c.annotation_key.clone(), (**c).clone());
        }
    }
    out
}

struct ChipTask {
    key: AnnotationKey,
    rec: ResolutionRecord,
    name: ChipName,
    rel_path: String,
}

pub struct Pipeline {
    cfg: Config,
    rt: Runtime,
    run_id: String,
}

impl Pipeline {
    pub fn new(cfg: Config, rt: Runtime) -> Pipeline {
        let run_id = cfg.run_id();
        Pipeline { cfg, rt, run_id }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.manifests.join(stage.manifest_file())
    }

    pub fn dataset_path(&self, name: &str, fmt: crate::vqa::ExampleFormat) -> PathBuf {
        self.cfg
            .paths
            .datasets
            .join(format!("{name}.{}", fmt.extension()))
    }

    /// Runs one stage, or every stage in order when `stage` is `None`.
    /// Stops at the first fatal error.
    pub fn run(&self, stage: Option<Stage>) -> Result<Vec<StageReport>, PipelineError> {
        match stage {
            Some(s) => Ok(vec![self.run_stage(s)?]),
            None => Stage::ORDER.iter().map(|&s| self.run_stage(s)).collect(),
        }
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        info!(stage = %stage, run_id = %self.run_id, "stage start");
        let (writer, mut report) = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Resolve => self.resolve()?,
            Stage::Fetch => self.fetch()?,
            Stage::Chip => self.chip()?,
            Stage::Vqa => self.vqa()?,
            Stage::Pairs => self.pairs()?,
            Stage::Stats => self.stats()?,
        };
        report.stage = stage;
        writer.append(Payload::Summary(StageSummary {
            outcome: report.outcome.as_str().to_string(),
            counts: report.counts.clone(),
        }))?;
        writer.close()?;
        info!(stage = %stage, outcome = report.outcome.as_str(), counts = ?report.counts, "stage done");
        Ok(report)
    }

    fn writer(&self, stage: Stage) -> Result<ManifestWriter, PipelineError> {
        let w = ManifestWriter::open(&self.manifest_path(stage), stage, &self.run_id)?;
        w.append(Payload::Header(Box::new(RunHeader {
            run_id: self.run_id.clone(),
            seed: self.cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
        })))?;
        Ok(w)
    }

    fn require(&self, stage: Stage, dep: Stage) -> Result<Vec<ManifestEntry>, PipelineError> {
        match read_manifest(&self.manifest_path(dep)) {
            Err(ManifestError::Missing(p)) => {
                Err(PipelineError::DependencyMissing { stage, missing: p })
            }
            other => Ok(other?),
        }
    }

    fn optional(&self, stage: Stage) -> Result<Vec<ManifestEntry>, PipelineError> {
        match read_manifest(&self.manifest_path(stage)) {
            Err(ManifestError::Missing(_)) => Ok(Vec::new()),
            other => Ok(other?),
        }
    }

    pub fn ingest_state(&self, stage: Stage) -> Result<IngestState, PipelineError> {
        Ok(IngestState::from_entries(
            &self.require(stage, Stage::Ingest)?,
        ))
    }

    /// Latest chip records, ordered by chip path.
    pub fn chip_records(&self, stage: Stage) -> Result<Vec<ChipRecord>, PipelineError> {
        let mut chips: Vec<ChipRecord> = latest_chips(&self.require(stage, Stage::Chip)?)
            .into_values()
            .collect();
        chips.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(chips)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_concurrent_fetches)
            .build()
            .map_err(storage)
    }

    fn ingest(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let root = &self.cfg.paths.annotations;
        if !root.is_dir() {
            return Err(PipelineError::DependencyMissing {
                stage: Stage::Ingest,
                missing: root.clone(),
            });
        }
        let mut done: BTreeMap<String, String> = BTreeMap::new();
        for e in self.optional(Stage::Ingest)? {
            match &e.payload {
                Payload::Site(s) => {
                    done.insert(s.source_file.clone(), s.source_sha256.clone());
                }
                Payload::Region(r) => {
                    done.insert(r.source_file.clone(), r.source_sha256.clone());
                }
                _ => {}
            }
        }
        let w = self.writer(Stage::Ingest)?;
        let fields = &self.cfg.field_names;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut bump = |k: &str, n: u64| *counts.entry(k.to_string()).or_default() += n;
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(storage)?;
            let p = entry.path();
            let is_doc = p.extension().is_some_and(|e| e == "json" || e == "geojson");
            if !entry.file_type().is_file() || !is_doc {
                continue;
            }
            let rel = rel_string(root, p);
            let (_, sha) = sha256_file(p).map_err(storage)?;
            if done.get(&rel) == Some(&sha) {
                bump("files_unchanged", 1);
                continue;
            }
            let failure = |e: &AnnotationError| {
                Payload::IngestFailure(IngestFailure {
                    source_file: rel.clone(),
                    source_sha256: sha.clone(),
                    error: e.to_string(),
                })
            };
            match load_site_model(p, fields) {
                Ok((site, report)) => {
                    for msg in &report.warnings {
                        warn!(file = %rel, "{msg}");
                    }
                    bump("sites", 1);
                    bump("observations", site.observations.len() as u64);
                    w.append(Payload::Site(Box::new(SiteEntry {
                        source_file: rel.clone(),
                        source_sha256: sha.clone(),
                        site,
                        report,
                    })))?;
                }
                Err(site_err) => match load_region_model(p, fields) {
                    Ok(region) => {
                        bump("regions", 1);
                        w.append(Payload::Region(Box::new(RegionEntry {
                            source_file: rel.clone(),
                            source_sha256: sha.clone(),
                            region,
                        })))?;
                    }
                    Err(_) => {
                        warn!(file = %rel, error = %site_err, "annotation file rejected");
                        bump("failures", 1);
                        w.append(failure(&site_err))?;
                    }
                },
            }
        }
        let outcome = if counts.get("failures").copied().unwrap_or(0) > 0 {
            Outcome::Partial
        } else {
            Outcome::Complete
        };
        Ok((
            w,
            StageReport {
                stage: Stage::Ingest,
                outcome,
                counts,
                stdout: None,
            },
        ))
    }

    fn resolve(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let state = self.ingest_state(Stage::Resolve)?;
        let prior = latest_resolutions(&self.optional(Stage::Resolve)?);
        let ladder_cfg = self.cfg.ladder();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut bump = |k: &str| *counts.entry(k.to_string()).or_default() += 1;
        let mut seen = BTreeSet::new();
        let mut tasks = Vec::new();
        for site in state.sites.values().filter(|s| s.is_usable()) {
            let region = state
                .regions
                .get(&site.region_id)
                .map(|r| (r.start_date, r.end_date));
            for obs in build_site_index(site).observations {
                if !should_attempt(&obs) {
                    bump("not_attempted");
                    continue;
                }
                let key = annotation_key(&site.site_id, &obs);
                if !seen.insert(key.clone()) {
                    bump("duplicate_keys");
                    continue;
                }
                if prior.get(&key).is_some_and(|r| {
                    matches!(
                        r.status,
                        ResolutionStatus::Pending | ResolutionStatus::Resolved
                    )
                }) {
                    bump("already_resolved");
                    continue;
                }
                let r = normalized_ref(&obs);
                let ladder = build_query_ladder(&r, Some(&site.base_geometry), region, &ladder_cfg);
                tasks.push((key, r, ladder));
            }
        }
        let catalog = self.rt.catalog.as_ref();
        let pref = &self.cfg.asset_preference;
        let records: Vec<ResolutionRecord> = self.pool()?.install(|| {
            tasks
                .par_iter()
                .map(|(key, r, ladder)| match ladder {
                    Ok(l) => plan_resolution(key.clone(), l, r, catalog, pref),
                    Err(e) => ResolutionRecord {
                        annotation_key: key.clone(),
                        family: r.family,
                        tried_tiers: Vec::new(),
                        chosen: None,
                        score: None,
                        local_file: None,
                        status: ResolutionStatus::Exhausted,
                        error: Some(e.to_string()),
                    },
                })
                .collect()
        });
        let w = self.writer(Stage::Resolve)?;
        let mut failed = 0;
        for rec in records {
            match rec.status {
                ResolutionStatus::Pending => bump("planned"),
                ResolutionStatus::SearchFailed => {
                    failed += 1;
                    bump("search_failed")
                }
                _ => {
                    failed += 1;
                    bump("exhausted")
                }
            }
            w.append(Payload::Resolution(Box::new(rec)))?;
        }
        let outcome = if failed > 0 {
            Outcome::Partial
        } else {
            Outcome::Complete
        };
        Ok((
            w,
            StageReport {
                stage: Stage::Resolve,
                outcome,
                counts,
                stdout: None,
            },
        ))
    }

    fn fetch(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let planned = latest_resolutions(&self.require(Stage::Fetch, Stage::Resolve)?);
        let prior = latest_resolutions(&self.optional(Stage::Fetch)?);
        let store = &self.cfg.paths.store;
        fs::create_dir_all(store).map_err(storage)?;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut todo = Vec::new();
        for (key, rec) in planned {
            if rec.status != ResolutionStatus::Pending {
                continue;
            }
            let present = prior.get(&key).and_then(|p| {
                p.local_file
                    .as_ref()
                    .filter(|_| p.status == ResolutionStatus::Resolved)
            });
            let intact = present.is_some_and(|f| {
                fs::metadata(store.join(&f.path)).is_ok_and(|m| m.len() == f.content_length_bytes)
            });
            if intact {
                *counts.entry("already_fetched".into()).or_default() += 1;
                continue;
            }
            todo.push(rec);
        }
        let downloader = Downloader::new(store, self.rt.fetcher.clone(), self.cfg.retry);
        let done: Vec<ResolutionRecord> = self.pool()?.install(|| {
            todo.into_par_iter()
                .map(|r| complete_resolution(r, &downloader))
                .collect()
        });
        let w = self.writer(Stage::Fetch)?;
        let mut failed = 0;
        for rec in done {
            let k = if rec.status == ResolutionStatus::Resolved {
                "fetched"
            } else {
                "download_failed"
            };
            failed += (k == "download_failed") as u64;
            *counts.entry(k.into()).or_default() += 1;
            w.append(Payload::Resolution(Box::new(rec)))?;
        }
        counts.insert("new_downloads".into(), downloader.transfers());
        counts.insert("fetch_calls".into(), downloader.fetch_calls());
        let outcome = if failed > 0 {
            Outcome::Partial
        } else {
            Outcome::Complete
        };
        Ok((
            w,
            StageReport {
                stage: Stage::Fetch,
                outcome,
                counts,
                stdout: None,
            },
        ))
    }

    fn make_chip(&self, state: &IngestState, t: &ChipTask) -> Result<ChipRecord, ChipFailure> {
        let fail = |kind: ChipFailureKind, error: String| ChipFailure {
            annotation_key: t.key.clone(),
            kind,
            error,
        };
        let (site, _) = state.observation(&t.key).ok_or_else(|| {
            fail(
                ChipFailureKind::MissingAnnotation,
                "observation not in ingest manifest".into(),
            )
        })?;
        let chosen = t.rec.chosen.as_ref().expect("resolved record has a choice");
        let local = t
            .rec
            .local_file
            .as_ref()
            .expect("resolved record has a file");
        let chip_err = |e: crate::chip::ChipError| fail(ChipFailureKind::from(&e), e.to_string());
        let mut scene =
            SceneReader::open(&self.cfg.paths.store.join(&local.path)).map_err(chip_err)?;
        let proj = local_projection_for(&site.base_geometry);
        let window = compute_chip_window(&site.base_geometry, &proj, &self.cfg.window());
        let opts = ExtractOptions {
            resampling: self.cfg.resampling,
            keep_no_overlap: self.cfg.keep_no_overlap,
        };
        let (img, diagnostics) =
            extract_chip(&mut scene, &window, &proj, opts).map_err(chip_err)?;
        let out = self.cfg.paths.chips.join(&t.rel_path);
        let io = |e: std::io::Error| fail(ChipFailureKind::Storage, e.to_string());
        fs::create_dir_all(out.parent().expect("chip path has a parent")).map_err(io)?;
        let tmp = out.with_extension("tif.partial");
        write_rgb_geotiff(
            &tmp,
            img.width,
            img.height,
            &img.data,
            &chip_georef(&window, &proj),
            16,
        )
        .map_err(chip_err)?;
        fs::rename(&tmp, &out).map_err(io)?;
        let png_path = if self.cfg.write_png {
            let rel = t.rel_path.replace(".tif", ".png");
            write_png(
                &self.cfg.paths.chips.join(&rel),
                img.width,
                img.height,
                &img.data,
            )
            .map_err(chip_err)?;
            Some(rel)
        } else {
            None
        };
        Ok(ChipRecord {
            path: t.rel_path.clone(),
            site_id: site.site_id.clone(),
            region_id: site.region_id.clone(),
            annotation_key: t.key.clone(),
            acquired: t.name.acquired,
            types: t.name.types.clone(),
            phase: t.name.phase,
            diagnostics,
            item_id: chosen.item_id.clone(),
            source_file: local.path.clone(),
            source_ref: t.key.raw_ref.clone(),
            png_path,
        })
    }

    fn chip(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let fetched = latest_resolutions(&self.require(Stage::Chip, Stage::Fetch)?);
        let state = self.ingest_state(Stage::Chip)?;
        let prior = latest_chips(&self.optional(Stage::Chip)?);
        let chips_root = &self.cfg.paths.chips;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut bump = |k: &str| *counts.entry(k.to_string()).or_default() += 1;
        let mut taken: BTreeSet<String> = BTreeSet::new();
        let mut tasks = Vec::new();
        let mut early = Vec::new();
        for (key, rec) in fetched {
            if rec.status != ResolutionStatus::Resolved {
                continue;
            }
            if let Some(c) = prior
                .get(&key)
                .filter(|c| chips_root.join(&c.path).is_file())
            {
                taken.insert(c.path.clone());
                bump("already_chipped");
                continue;
            }
            let Some((site, obs)) = state.observation(&key) else {
                early.push(Err(ChipFailure {
                    annotation_key: key,
                    kind: ChipFailureKind::MissingAnnotation,
                    error: "observation not in ingest manifest".into(),
                }));
                continue;
            };
            let chosen = rec.chosen.as_ref().expect("resolved record has a choice");
            let acquired = chosen.datetime.naive_utc().with_nanosecond_zero();
            let name = ChipName {
                site_id: site.site_id.clone(),
                acquired,
                types: obs.types.clone(),
                phase: obs.phase,
            };
            let filename = match encode_chip_filename(&name) {
                Ok(f) => f,
                Err(e) => {
                    early.push(Err(ChipFailure {
                        annotation_key: key,
                        kind: ChipFailureKind::InvalidRecord,
                        error: e.to_string(),
                    }));
                    continue;
                }
            };
            let rel_path = format!("{}/{}", site.site_id, filename);
            if !taken.insert(rel_path.clone()) {
                early.push(Err(ChipFailure {
                    annotation_key: key,
                    kind: ChipFailureKind::Duplicate,
                    error: format!("{rel_path} already produced"),
                }));
                continue;
            }
            tasks.push(ChipTask {
                key,
                rec,
                name,
                rel_path,
            });
        }
        let results: Vec<Result<ChipRecord, ChipFailure>> = tasks
            .par_iter()
            .map(|t| self.make_chip(&state, t))
            .collect();
        let w = self.writer(Stage::Chip)?;
        let mut failed = 0;
        let mut all: Vec<_> = early.into_iter().chain(results).collect();
        all.sort_by(|a, b| {
            let k = |r: &Result<ChipRecord, ChipFailure>| match r {
                Ok(c) => c.annotation_key.clone(),
                Err(f) => f.annotation_key.clone(),
            };
            k(a).cmp(&k(b))
        });
        for r in all {
            match r {
                Ok(c) => {
                    bump("chipped");
                    if c.diagnostics.padded {
                        bump("padded");
                    }
                    w.append(Payload::Chip(Box::new(c)))?;
                }
                Err(f) => {
                    if f.kind == ChipFailureKind::Duplicate {
                        bump("duplicates");
                    } else {
                        failed += 1;
                        bump("failed");
                    }
                    warn!(key = %f.annotation_key.key_string(), error = %f.error, "chip not produced");
                    w.append(Payload::ChipFailure(f))?;
                }
            }
        }
        let outcome = if failed > 0 {
            Outcome::Partial
        } else {
            Outcome::Complete
        };
        Ok((
            w,
            StageReport {
                stage: Stage::Chip,
                outcome,
                counts,
                stdout: None,
            },
        ))
    }

    fn write_dataset(
        &self,
        name: &str,
        examples: &[crate::vqa::VqaExample],
    ) -> Result<(), PipelineError> {
        for &fmt in &self.cfg.formats {
            write_text_atomic(&self.dataset_path(name, fmt), &serialize_all(examples, fmt))?;
        }
        Ok(())
    }

    fn vqa(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let chips = self.chip_records(Stage::Vqa)?;
        let (examples, report) = crate::vqa::generate_all(&chips, &self.cfg.location);
        self.write_dataset(SINGLE_DATASET, &examples)?;
        let w = self.writer(Stage::Vqa)?;
        let mut counts = BTreeMap::from([
            ("chips".to_string(), report.chips),
            ("examples".to_string(), report.examples),
        ]);
        counts.insert("missing_location".into(), report.missing_location);
        w.append(Payload::Generation(report))?;
        Ok((
            w,
            StageReport {
                stage: Stage::Vqa,
                outcome: Outcome::Complete,
                counts,
                stdout: None,
            },
        ))
    }

    fn pairs(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let chips = self.chip_records(Stage::Pairs)?;
        let (examples, report) = crate::pairs::generate_all_pairs(&chips, &self.cfg.pairs());
        self.write_dataset(PAIR_DATASET, &examples)?;
        let w = self.writer(Stage::Pairs)?;
        let counts = BTreeMap::from([
            ("sites".to_string(), report.sites),
            ("pairs".to_string(), report.pairs),
            ("examples".to_string(), report.examples),
            ("capped_sites".to_string(), report.capped_sites),
        ]);
        w.append(Payload::Augmentation(report))?;
        Ok((
            w,
            StageReport {
                stage: Stage::Pairs,
                outcome: Outcome::Complete,
                counts,
                stdout: None,
            },
        ))
    }

    fn stats(&self) -> Result<(ManifestWriter, StageReport), PipelineError> {
        let state = self.ingest_state(Stage::Stats)?;
        let chips = self.chip_records(Stage::Stats)?;
        let rows = state.observation_rows();
        let breakdown = summarize_counts(&rows, &chips);
        let labels = label_distributions(&rows);
        let dir = self.cfg.paths.datasets.join("stats");
        write_text_atomic(&dir.join("breakdown.csv"), &breakdown.to_csv())?;
        write_text_atomic(&dir.join("type_labels.csv"), &labels.types_csv())?;
        write_text_atomic(&dir.join("phase_labels.csv"), &labels.phases_csv())?;
        let mut text = breakdown.to_text();
        let mut histograms = Vec::new();
        for kind in HistogramKind::ALL {
            let h = histogram_report(&chips, kind, &self.cfg.bin_widths);
            write_text_atomic(&dir.join(format!("{}.csv", kind.as_str())), &h.to_csv())?;
            write_text_atomic(&dir.join(format!("{}.svg", kind.as_str())), &h.to_svg())?;
            text.push_str(&format!(
                "{}: n={} min={} max={} median={}\n",
                kind.as_str(),
                h.total(),
                h.min.map_or("-".into(), |v| v.to_string()),
                h.max.map_or("-".into(), |v| v.to_string()),
                h.median.map_or("-".into(), |v| v.to_string()),
            ));
            histograms.push(h);
        }
        write_text_atomic(&dir.join("summary.txt"), &text)?;
        let w = self.writer(Stage::Stats)?;
        let counts = BTreeMap::from([
            ("observations".to_string(), rows.len() as u64),
            ("chips".to_string(), chips.len() as u64),
        ]);
        w.append(Payload::Stats(Box::new(StatsReport {
            breakdown,
            labels,
            histograms,
        })))?;
        Ok((
            w,
            StageReport {
                stage: Stage::Stats,
                outcome: Outcome::Complete,
                counts,
                stdout: Some(text),
            },
        ))
    }
}

trait TruncateNanos {
    fn with_nanosecond_zero(self) -> Self;
}

impl TruncateNanos for chrono::NaiveDateTime {
    fn with_nanosecond_zero(self) -> Self {
        use chrono::Timelike;
        self.with_nanosecond(0).expect("zero nanoseconds is valid")
    }
}
