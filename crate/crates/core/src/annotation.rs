//! Region and site annotation models loaded from GeoJSON feature collections.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{validate_geometry, Geometry, GeometryError};
use crate::projection::TransverseMercator;
use crate::taxonomy::{ConstructionType, PhaseLabel, SensorFamily, TypeSet};

/// Positive sites at or below this planar area are flagged.
pub const MIN_SITE_AREA_M2: f64 = 8_000.0;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: schema violation: {reason}")]
    SchemaViolation { path: PathBuf, reason: String },
}

/// Property keys used to read annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldNames {
    pub feature_type: String,
    pub region_id: String,
    pub site_id: String,
    pub status: String,
    pub start_date: String,
    pub end_date: String,
    pub observation_date: String,
    pub current_phase: String,
    pub source: String,
    pub sensor_name: String,
    pub construction_type: String,
}

impl Default for FieldNames {
    fn default() -> Self {
        FieldNames {
            feature_type: "type".into(),
            region_id: "region_id".into(),
            site_id: "site_id".into(),
            status: "status".into(),
            start_date: "start_date".into(),
            end_date: "end_date".into(),
            observation_date: "observation_date".into(),
            current_phase: "current_phase".into(),
            source: "source".into(),
            sensor_name: "sensor_name".into(),
            construction_type: "construction_type".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModel {
    pub region_id: String,
    pub extent: Geometry,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteStatus {
    Positive,
    NonPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub obs_date: NaiveDate,
    pub source_ref: Option<String>,
    pub sensor_family: SensorFamily,
    pub phase: PhaseLabel,
    pub types: TypeSet,
    pub geometry: Geometry,
    pub subsite_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteModel {
    pub site_id: String,
    pub region_id: String,
    pub status: SiteStatus,
    pub base_geometry: Geometry,
    pub observations: Vec<Observation>,
}

impl SiteModel {
    pub fn is_usable(&self) -> bool {
        self.status == SiteStatus::Positive && !self.observations.is_empty()
    }

    /// Area in square metres in a transverse Mercator centered on the site.
    pub fn planar_area_m2(&self) -> f64 {
        let c = self.base_geometry.vertex_centroid();
        let tm = TransverseMercator::local(c[0], c[1]);
        self.base_geometry
            .map_positions(|p| {
                let (x, y) = tm.forward(p[0], p[1]);
                [x, y]
            })
            .planar_area()
    }
}

/// Per-file ingest diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub source_file: String,
    pub kind: String,
    pub id: Option<String>,
    pub observations_total: u32,
    pub observations_loaded: u32,
    pub dropped_bad_date: u32,
    pub coerced_phase: u32,
    pub coerced_type: u32,
    pub conflicting_subsite_phase: u32,
    pub unknown_sensor: u32,
    pub invalid_observation_geometry: u32,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl LoadReport {
    fn new(path: &Path, kind: &str) -> Self {
        LoadReport {
            source_file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            kind: kind.into(),
            ..Default::default()
        }
    }
}

fn read_features(path: &Path) -> Result<Vec<Map<String, Value>>, AnnotationError> {
    let malformed = |reason: String| AnnotationError::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => {}
        Some("Feature") => {
            return doc
                .as_object()
                .cloned()
                .map(|f| vec![f])
                .ok_or_else(|| malformed("feature is not an object".into()))
        }
        _ => return Err(malformed("not a GeoJSON FeatureCollection".into())),
    }
    doc.get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing features array".into()))?
        .iter()
        .map(|f| {
            f.as_object()
                .cloned()
                .ok_or_else(|| malformed("feature is not an object".into()))
        })
        .collect()
}

fn props(feature: &Map<String, Value>) -> Option<&Map<String, Value>> {
    feature.get("properties").and_then(Value::as_object)
}

fn prop_str<'a>(feature: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    props(feature)?
        .get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Parses a calendar date, discarding any time-of-day component.
pub fn parse_day(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y/%m/%d") {
        return Some(d);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.date_naive());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.date());
        }
    }
    None
}

fn feature_kind<'a>(feature: &'a Map<String, Value>, fields: &FieldNames) -> Option<&'a str> {
    prop_str(feature, &fields.feature_type)
}

pub fn load_region_model(path: &Path, fields: &FieldNames) -> Result<RegionModel, AnnotationError> {
    let schema = |reason: &str| AnnotationError::SchemaViolation {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let features = read_features(path)?;
    let region = features
        .iter()
        .find(|f| feature_kind(f, fields) == Some("region"))
        .or_else(|| {
            features
                .iter()
                .find(|f| prop_str(f, &fields.region_id).is_some())
        })
        .ok_or_else(|| schema("no region feature"))?;
    let region_id =
        prop_str(region, &fields.region_id).ok_or_else(|| schema("missing region id"))?;
    let extent = region
        .get("geometry")
        .filter(|g| !g.is_null())
        .ok_or_else(|| schema("missing extent"))?;
    let extent = validate_geometry(extent).map_err(|e| schema(&format!("extent: {e}")))?;
    let start = prop_str(region, &fields.start_date)
        .and_then(parse_day)
        .ok_or_else(|| schema("missing or invalid start date"))?;
    let end = prop_str(region, &fields.end_date)
        .and_then(parse_day)
        .ok_or_else(|| schema("missing or invalid end date"))?;
    if end < start {
        return Err(schema("end date precedes start date"));
    }
    Ok(RegionModel {
        region_id: region_id.to_string(),
        extent,
        start_date: start,
        end_date: end,
    })
}

fn label_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) => s
            .split(',')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        _ => Vec::new(),
    }
}

fn reduce_phase(entries: &[String], report: &mut LoadReport) -> PhaseLabel {
    if entries.is_empty() {
        report.coerced_phase += 1;
        return PhaseLabel::Unknown;
    }
    let parsed: Vec<Option<PhaseLabel>> = entries.iter().map(|e| PhaseLabel::parse(e)).collect();
    if parsed.iter().any(Option::is_none) {
        report.coerced_phase += 1;
        return PhaseLabel::Unknown;
    }
    let first = parsed[0].expect("checked");
    if parsed.iter().all(|p| *p == Some(first)) {
        first
    } else {
        report.conflicting_subsite_phase += 1;
        PhaseLabel::Unknown
    }
}

fn parse_types(entries: &[String], report: &mut LoadReport) -> TypeSet {
    let mut set = TypeSet::new();
    let mut coerced = false;
    for e in entries {
        match ConstructionType::parse(e) {
            Some(t) => {
                set.insert(t);
            }
            None => coerced = true,
        }
    }
    if coerced {
        report.coerced_type += 1;
        set.insert(ConstructionType::Unlabeled);
    }
    if set.is_empty() {
        set.insert(ConstructionType::Unlabeled);
    }
    set
}

/// Loads a site model. Returns the site and its load report.
pub fn load_site_model(
    path: &Path,
    fields: &FieldNames,
) -> Result<(SiteModel, LoadReport), AnnotationError> {
    let schema = |reason: String| AnnotationError::SchemaViolation {
        path: path.to_path_buf(),
        reason,
    };
    let features = read_features(path)?;
    let mut report = LoadReport::new(path, "site");

    let site_idx = features
        .iter()
        .position(|f| feature_kind(f, fields) == Some("site"))
        .or_else(|| {
            features.iter().position(|f| {
                prop_str(f, &fields.site_id).is_some()
                    && prop_str(f, &fields.observation_date).is_none()
            })
        })
        .ok_or_else(|| schema("no site feature".into()))?;
    let site = &features[site_idx];
    let site_id = prop_str(site, &fields.site_id)
        .ok_or_else(|| schema("missing site id".into()))?
        .to_string();
    report.id = Some(site_id.clone());
    let base_geometry = site
        .get("geometry")
        .filter(|g| !g.is_null())
        .ok_or_else(|| schema("missing site geometry".into()))?;
    let base_geometry =
        validate_geometry(base_geometry).map_err(|e| schema(format!("site geometry: {e}")))?;
    let region_id = prop_str(site, &fields.region_id)
        .map(str::to_string)
        .unwrap_or_else(|| region_from_site_id(&site_id));
    let status = match prop_str(site, &fields.status) {
        Some(s) if s.to_ascii_lowercase().starts_with("positive") => SiteStatus::Positive,
        Some(_) => SiteStatus::NonPositive,
        None => SiteStatus::Positive,
    };
    let site_types = label_list(props(site).and_then(|p| p.get(&fields.construction_type)));

    let mut observations = Vec::new();
    for (i, f) in features.iter().enumerate() {
        if i == site_idx {
            continue;
        }
        let is_obs = match feature_kind(f, fields) {
            Some(kind) => kind == "observation",
            None => props(f).is_some_and(|p| p.contains_key(&fields.observation_date)),
        };
        if !is_obs {
            continue;
        }
        report.observations_total += 1;
        let Some(obs_date) = prop_str(f, &fields.observation_date).and_then(parse_day) else {
            report.dropped_bad_date += 1;
            continue;
        };
        let p = props(f);
        let phase_entries = label_list(p.and_then(|p| p.get(&fields.current_phase)));
        let phase = reduce_phase(&phase_entries, &mut report);
        let mut type_entries = label_list(p.and_then(|p| p.get(&fields.construction_type)));
        if type_entries.is_empty() {
            type_entries = site_types.clone();
        }
        let types = parse_types(&type_entries, &mut report);
        let sensor_family = match prop_str(f, &fields.sensor_name) {
            None => SensorFamily::None,
            Some(name) => SensorFamily::parse(name).unwrap_or_else(|| {
                report.unknown_sensor += 1;
                SensorFamily::None
            }),
        };
        let geometry = match f.get("geometry").filter(|g| !g.is_null()) {
            Some(g) => match validate_geometry(g) {
                Ok(g) => g,
                Err(GeometryError::Invalid(_)) => {
                    report.invalid_observation_geometry += 1;
                    base_geometry.clone()
                }
            },
            None => base_geometry.clone(),
        };
        let subsite_count = (phase_entries.len().max(geometry.polygon_count())).max(1) as u32;
        observations.push(Observation {
            obs_date,
            source_ref: prop_str(f, &fields.source).map(str::to_string),
            sensor_family,
            phase,
            types,
            geometry,
            subsite_count,
        });
    }
    report.observations_loaded = observations.len() as u32;

    let model = SiteModel {
        site_id,
        region_id,
        status,
        base_geometry,
        observations,
    };
    if model.status == SiteStatus::Positive {
        let area = model.planar_area_m2();
        if area <= MIN_SITE_AREA_M2 {
            report.warnings.push(format!(
                "positive site area {area:.0} m2 is at or below {MIN_SITE_AREA_M2:.0} m2"
            ));
        }
    }
    if model.observations.iter().any(|o| o.subsite_count > 1) {
        report
            .warnings
            .push("observations with multiple subsites".to_string());
    }
    Ok((model, report))
}

/// `BR_R001_0005` belongs to region `BR_R001`.
pub fn region_from_site_id(site_id: &str) -> String {
    match site_id.rsplit_once('_') {
        Some((region, _)) => region.to_string(),
        None => site_id.to_string(),
    }
}

/// Observations of one site in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationIndex {
    pub site_id: String,
    pub observations: Vec<Observation>,
}

impl ObservationIndex {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Sorts by `(obs_date, source_ref)`; stable, so full ties keep file order.
pub fn build_site_index(site: &SiteModel) -> ObservationIndex {
    let mut observations = site.observations.clone();
    observations.sort_by(|a, b| {
        a.obs_date
            .cmp(&b.obs_date)
            .then_with(|| a.source_ref.cmp(&b.source_ref))
    });
    ObservationIndex {
        site_id: site.site_id.clone(),
        observations,
    }
}
