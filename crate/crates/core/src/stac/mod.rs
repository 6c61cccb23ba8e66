//! STAC item search, candidate ranking, asset selection and downloads.

mod client;
mod fetch;
mod fixture;
mod resolve;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Duration;

use chrono::{DateTime, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{validate_geometry, Geometry};
use crate::refs::{Level, NormalizedImageRef, SearchQuery};

pub use client::HttpCatalog;
pub use fetch::{
    local_filename, sha256_file, AssetFetcher, AssetRequest, DownloadOutcome, Downloader,
    FetchError, FileFetcher, HttpFetcher, LocalFileRecord,
};
pub use fixture::FixtureCatalog;
pub use resolve::{
    complete_resolution, plan_resolution, resolve_and_fetch, AnnotationKey, ChosenAsset,
    ResolutionRecord, ResolutionStatus, TierTry,
};

pub const DEFAULT_ENDPOINT: &str = "https://earth-search.aws.element84.com/v1";
pub const DEFAULT_ASSET_PREFERENCE: [&str; 4] = ["visual", "visual-10m", "TCI", "true_color"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StacError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no usable asset in {item_id}")]
    NoUsableAsset { item_id: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("storage error: {0}")]
    Storage(String),
}

/// Exponential backoff: `base * factor^k` before retry `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 4,
            base_delay_ms: 1000,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(retries: u32) -> Self {
        RetryPolicy {
            retries,
            base_delay_ms: 0,
            factor: 2.0,
        }
    }

    pub fn max_attempts(&self) -> u32 {
        self.retries + 1
    }

    pub fn delay(&self, failed_attempts: u32) -> Duration {
        let exp = failed_attempts.saturating_sub(1) as i32;
        Duration::from_millis((self.base_delay_ms as f64 * self.factor.powi(exp)) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRef {
    pub href: String,
    pub media_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScene {
    pub item_id: String,
    pub collection: String,
    pub platform: String,
    pub tile_id: String,
    pub datetime: DateTime<Utc>,
    pub level: Level,
    pub cloud_cover_pct: Option<f64>,
    pub assets: BTreeMap<String, AssetRef>,
}

fn tile_from_item(item: &Value) -> Option<String> {
    let p = &item["properties"];
    if let Some(code) = p["grid:code"].as_str() {
        return Some(code.trim_start_matches("MGRS-").to_string());
    }
    if let (Some(z), Some(b), Some(s)) = (
        p["mgrs:utm_zone"].as_u64(),
        p["mgrs:latitude_band"].as_str(),
        p["mgrs:grid_square"].as_str(),
    ) {
        return Some(format!("{z:02}{b}{s}"));
    }
    if let Some(t) = p["s2:mgrs_tile"].as_str() {
        return Some(t.to_string());
    }
    let id = item["id"].as_str()?;
    id.split('_').nth(1).map(str::to_string)
}

fn level_from_item(collection: &str, id: &str) -> Level {
    let c = collection.to_ascii_lowercase();
    if c.contains("l2a") {
        Level::L2A
    } else if c.contains("l1c") {
        Level::L1C
    } else {
        id.rsplit('_').next().map_or(Level::Unknown, Level::parse)
    }
}

fn platform_from_item(item: &Value, id: &str) -> String {
    match item["properties"]["platform"].as_str() {
        Some(p) => match p.to_ascii_lowercase().as_str() {
            "sentinel-2a" => "S2A".into(),
            "sentinel-2b" => "S2B".into(),
            "sentinel-2c" => "S2C".into(),
            other => other.to_ascii_uppercase(),
        },
        None => id.split('_').next().unwrap_or("S2").to_string(),
    }
}

impl CandidateScene {
    /// Reads a STAC item document.
    pub fn from_item(item: &Value) -> Result<CandidateScene, StacError> {
        let bad = |m: &str| StacError::Protocol(m.to_string());
        let item_id = item["id"]
            .as_str()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad("item without id"))?;
        let datetime = item["properties"]["datetime"]
            .as_str()
            .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
            .ok_or_else(|| bad("item without parseable datetime"))?
            .with_timezone(&Utc);
        let mut assets = BTreeMap::new();
        if let Some(map) = item["assets"].as_object() {
            for (name, a) in map {
                if let Some(href) = a["href"].as_str() {
                    assets.insert(
                        name.clone(),
                        AssetRef {
                            href: href.to_string(),
                            media_type: a["type"].as_str().map(str::to_string),
                        },
                    );
                }
            }
        }
        if assets.is_empty() {
            return Err(bad("item without assets"));
        }
        let collection = item["collection"].as_str().unwrap_or_default().to_string();
        Ok(CandidateScene {
            item_id: item_id.to_string(),
            level: level_from_item(&collection, item_id),
            platform: platform_from_item(item, item_id),
            tile_id: tile_from_item(item).unwrap_or_default(),
            cloud_cover_pct: item["properties"]["eo:cloud_cover"].as_f64(),
            collection,
            datetime,
            assets,
        })
    }
}

/// Footprint of an item, from its geometry or else its bbox.
pub fn item_footprint(item: &Value) -> Option<Geometry> {
    if let Ok(g) = validate_geometry(&item["geometry"]) {
        return Some(g);
    }
    let b: Vec<f64> = item["bbox"]
        .as_array()?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    if b.len() != 4 {
        return None;
    }
    validate_geometry(&json!({"type": "Polygon", "coordinates": [[
        [b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]], [b[0], b[1]]
    ]]}))
    .ok()
}

/// Searches one ladder rung; implemented over HTTP and over fixture files.
pub trait Catalog: Send + Sync {
    fn search(&self, q: &SearchQuery) -> Result<Vec<CandidateScene>, StacError>;
}

/// STAC API item-search request body for a query.
pub fn search_body(q: &SearchQuery, limit: usize) -> Value {
    let mut body = json!({
        "collections": q.collections,
        "datetime": q.datetime_window.to_interval(),
        "limit": limit,
    });
    if let Some(id) = &q.id_filter {
        body["ids"] = json!([id]);
    }
    if let Some(g) = &q.geometry {
        body["intersects"] = g.to_value();
    }
    if let Some(t) = &q.tile_filter {
        body["query"] = json!({"grid:code": {"eq": format!("MGRS-{t}")}});
    }
    body
}

pub fn execute_query(
    q: &SearchQuery,
    catalog: &dyn Catalog,
) -> Result<Vec<CandidateScene>, StacError> {
    catalog.search(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub tile_match: bool,
    pub date_exact: bool,
    pub level_pref: u8,
    /// `None` when the reference has no date.
    pub temporal_distance_s: Option<i64>,
}

impl ScoreBreakdown {
    pub fn of(c: &CandidateScene, r: &NormalizedImageRef) -> ScoreBreakdown {
        let reference = r.acquisition_date.map(|d| {
            d.and_time(
                r.acquisition_time
                    .unwrap_or(NaiveTime::from_hms_opt(12, 0, 0).expect("noon")),
            )
            .and_utc()
        });
        ScoreBreakdown {
            tile_match: r.tile_id.as_deref().is_some_and(|t| t == c.tile_id),
            date_exact: r.acquisition_date == Some(c.datetime.date_naive()),
            level_pref: u8::from(c.level == Level::L2A),
            temporal_distance_s: reference.map(|t| (c.datetime - t).num_seconds().abs()),
        }
    }
}

/// Ranking order; `Less` means `a` ranks ahead of `b`.
pub fn compare_ranked(
    a: &(CandidateScene, ScoreBreakdown),
    b: &(CandidateScene, ScoreBreakdown),
) -> Ordering {
    let (ca, sa) = a;
    let (cb, sb) = b;
    let dist = |s: &ScoreBreakdown| s.temporal_distance_s.unwrap_or(i64::MAX);
    sb.tile_match
        .cmp(&sa.tile_match)
        .then(sb.date_exact.cmp(&sa.date_exact))
        .then(sb.level_pref.cmp(&sa.level_pref))
        .then(dist(sa).cmp(&dist(sb)))
        .then_with(|| ca.item_id.cmp(&cb.item_id))
}

pub fn rank_candidates(
    cands: Vec<CandidateScene>,
    r: &NormalizedImageRef,
) -> Vec<(CandidateScene, ScoreBreakdown)> {
    let mut scored: Vec<_> = cands
        .into_iter()
        .map(|c| {
            let s = ScoreBreakdown::of(&c, r);
            (c, s)
        })
        .collect();
    scored.sort_by(compare_ranked);
    scored
}

/// First preferred asset name present on the scene.
pub fn select_asset<'a, S: AsRef<str>>(
    scene: &'a CandidateScene,
    preference: &[S],
) -> Result<(&'a str, &'a AssetRef), StacError> {
    preference
        .iter()
        .find_map(|name| scene.assets.get_key_value(name.as_ref()))
        .map(|(k, v)| (k.as_str(), v))
        .ok_or_else(|| StacError::NoUsableAsset {
            item_id: scene.item_id.clone(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refs::parse_reference;

    pub(crate) fn scene(
        id: &str,
        tile: &str,
        dt: &str,
        level: Level,
        assets: &[&str],
    ) -> CandidateScene {
        CandidateScene {
            item_id: id.into(),
            collection: String::new(),
            platform: "S2A".into(),
            tile_id: tile.into(),
            datetime: DateTime::parse_from_rfc3339(dt)
                .unwrap()
                .with_timezone(&Utc),
            level,
            cloud_cover_pct: None,
            assets: assets
                .iter()
                .map(|a| {
                    (
                        a.to_string(),
                        AssetRef {
                            href: format!("{id}/{a}.tif"),
                            media_type: None,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn asset_preference() {
        let pref = DEFAULT_ASSET_PREFERENCE;
        let s = scene(
            "a",
            "32TQM",
            "2019-07-15T10:30:00Z",
            Level::L2A,
            &["visual", "B04"],
        );
        assert_eq!(select_asset(&s, &pref).unwrap().0, "visual");
        let s = scene("a", "32TQM", "2019-07-15T10:30:00Z", Level::L2A, &["TCI"]);
        assert_eq!(select_asset(&s, &pref).unwrap().0, "TCI");
        let s = scene("a", "32TQM", "2019-07-15T10:30:00Z", Level::L2A, &["B02"]);
        assert!(matches!(
            select_asset(&s, &pref),
            Err(StacError::NoUsableAsset { .. })
        ));
    }

    #[test]
    fn exact_match_and_proximity() {
        let r = parse_reference("T32TQM_20190715").unwrap();
        let exact = scene(
            "z",
            "32TQM",
            "2019-07-15T10:30:00Z",
            Level::L1C,
            &["visual"],
        );
        let other = scene(
            "a",
            "32TQN",
            "2019-07-15T10:30:00Z",
            Level::L2A,
            &["visual"],
        );
        let ranked = rank_candidates(vec![other, exact], &r);
        assert_eq!(ranked[0].0.item_id, "z");

        let r = parse_reference("2019-07-15").unwrap();
        let far = scene(
            "a",
            "32TQM",
            "2019-07-20T10:30:00Z",
            Level::L2A,
            &["visual"],
        );
        let near = scene(
            "b",
            "32TQM",
            "2019-07-16T10:30:00Z",
            Level::L2A,
            &["visual"],
        );
        let ranked = rank_candidates(vec![far, near], &r);
        assert_eq!(ranked[0].0.item_id, "b");
        assert!(
            ranked[0].1.temporal_distance_s.unwrap() < ranked[1].1.temporal_distance_s.unwrap()
        );
    }

    #[test]
    fn undated_reference_scores_null_distance() {
        let mut r = parse_reference("T32TQM_20190715").unwrap();
        r.acquisition_date = None;
        let s = ScoreBreakdown::of(
            &scene(
                "a",
                "32TQM",
                "2019-07-15T10:30:00Z",
                Level::L2A,
                &["visual"],
            ),
            &r,
        );
        assert_eq!(s.temporal_distance_s, None);
        assert_eq!(
            serde_json::to_value(s).unwrap()["temporal_distance_s"],
            Value::Null
        );
    }

    #[test]
    fn item_parsing() {
        let item = json!({"type": "Feature", "id": "S2B_23LKC_20190715_0_L1C", "collection": "sentinel-2-l1c",
            "properties": {"datetime": "2019-07-15T13:21:09.024000Z", "platform": "sentinel-2b",
                "grid:code": "MGRS-23LKC", "eo:cloud_cover": 3.5},
            "assets": {"TCI": {"href": "a.tif", "type": "image/tiff"}}, "bbox": [-48.0, -16.0, -47.0, -15.0]});
        let c = CandidateScene::from_item(&item).unwrap();
        assert_eq!(
            (c.level, c.platform.as_str(), c.tile_id.as_str()),
            (Level::L1C, "S2B", "23LKC")
        );
        assert_eq!(c.cloud_cover_pct, Some(3.5));
        assert!(item_footprint(&item).is_some());
        assert!(CandidateScene::from_item(&json!({"id": "x", "properties": {}})).is_err());
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.max_attempts(), 5);
        let d: Vec<u64> = (1..=4).map(|k| p.delay(k).as_millis() as u64).collect();
        assert_eq!(d, [1000, 2000, 4000, 8000]);
    }
}
