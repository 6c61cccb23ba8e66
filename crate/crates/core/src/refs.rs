//! Historical Sentinel-2 image references: classification, parsing and
//! catalog search planning.

use std::fmt;
use std::sync::LazyLock;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReferenceFamily {
    EarthSearchId,
    EsaProductName,
    TimestampOnly,
    CompactTileDate,
    SmartCompositeLabel,
    Unrecognized,
}

impl ReferenceFamily {
    pub const ALL: [ReferenceFamily; 6] = [
        ReferenceFamily::EarthSearchId,
        ReferenceFamily::EsaProductName,
        ReferenceFamily::TimestampOnly,
        ReferenceFamily::CompactTileDate,
        ReferenceFamily::SmartCompositeLabel,
        ReferenceFamily::Unrecognized,
    ];
}

impl fmt::Display for ReferenceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Platform {
    S2A,
    S2B,
    #[serde(rename = "S2-any")]
    S2Any,
}

impl Platform {
    fn from_token(t: &str) -> Platform {
        match t {
            "S2A" => Platform::S2A,
            "S2B" => Platform::S2B,
            _ => Platform::S2Any,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::S2A => "S2A",
            Platform::S2B => "S2B",
            Platform::S2Any => "S2-any",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1C,
    L2A,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Level {
    pub fn parse(s: &str) -> Level {
        match s.to_ascii_uppercase().as_str() {
            "L1C" | "MSIL1C" => Level::L1C,
            "L2A" | "MSIL2A" => Level::L2A,
            _ => Level::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1C => "L1C",
            Level::L2A => "L2A",
            Level::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedImageRef {
    pub platform: Platform,
    pub tile_id: Option<String>,
    pub acquisition_date: Option<NaiveDate>,
    pub acquisition_time: Option<NaiveTime>,
    pub level: Level,
    pub asset_hint: Option<String>,
    pub family: ReferenceFamily,
    pub raw: String,
}

impl NormalizedImageRef {
    /// Reference that only knows its observation day; searched by geometry.
    pub fn geometry_only(raw: Option<&str>, date: NaiveDate) -> Self {
        NormalizedImageRef {
            platform: Platform::S2Any,
            tile_id: None,
            acquisition_date: Some(date),
            acquisition_time: None,
            level: Level::Unknown,
            asset_hint: None,
            family: ReferenceFamily::Unrecognized,
            raw: raw.unwrap_or_default().to_string(),
        }
    }

    fn empty(raw: &str, family: ReferenceFamily) -> Self {
        NormalizedImageRef {
            platform: Platform::S2Any,
            tile_id: None,
            acquisition_date: None,
            acquisition_time: None,
            level: Level::Unknown,
            asset_hint: None,
            family,
            raw: raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefError {
    #[error("unparseable reference {0:?}")]
    UnparseableReference(String),
    #[error("no tile, date or geometry to search with")]
    EmptyLadder,
}

const TILE: &str = r"(\d{1,2}[A-Z]{3})";

static ESA: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"^(S2[A-D_])_MSI(L1C|L2A)_(\d{{8}})T(\d{{6}})_N\d{{4}}_R\d{{3}}_T{TILE}_([0-9A-Za-z]+(?:T\d{{6}})?)(?:\.SAFE)?$"
    ))
    .unwrap()
});
static EARTH_SEARCH: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"^(S2[A-D])_{TILE}_(\d{{8}})_(\d+)_(L1C|L2A)$")).unwrap()
});
static SMART: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"^([A-Z]{{2}})_([A-Za-z0-9]+)_([A-Za-z0-9]+)_{TILE}_(\d{{8}})_(L1C|L2A)_([A-Za-z0-9][A-Za-z0-9_-]*)$"
    ))
    .unwrap()
});
static COMPACT_BASIC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^T?{TILE}[_-](\d{{8}})$")).unwrap());
static COMPACT_ISO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^{TILE}[-/](\d{{4}}-\d{{2}}-\d{{2}})$")).unwrap());
static TIMESTAMP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{4}-\d{2}-\d{2})(?:[T ](\d{2}:\d{2}:\d{2})(?:\.\d+)?(?:Z|[+-]00:?00)?)?$")
        .unwrap()
});

fn ymd(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y%m%d").ok()
}

fn hms(s: &str) -> Option<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H%M%S").ok()
}

fn parse_esa(raw: &str, s: &str) -> Option<NormalizedImageRef> {
    let c = ESA.captures(s)?;
    Some(NormalizedImageRef {
        platform: Platform::from_token(&c[1]),
        tile_id: Some(c[5].to_string()),
        acquisition_date: Some(ymd(&c[3])?),
        acquisition_time: Some(hms(&c[4])?),
        level: Level::parse(&c[2]),
        asset_hint: None,
        family: ReferenceFamily::EsaProductName,
        raw: raw.to_string(),
    })
}

fn parse_earth_search(raw: &str, s: &str) -> Option<NormalizedImageRef> {
    let c = EARTH_SEARCH.captures(s)?;
    Some(NormalizedImageRef {
        platform: Platform::from_token(&c[1]),
        tile_id: Some(c[2].to_string()),
        acquisition_date: Some(ymd(&c[3])?),
        acquisition_time: None,
        level: Level::parse(&c[5]),
        asset_hint: None,
        family: ReferenceFamily::EarthSearchId,
        raw: raw.to_string(),
    })
}

fn parse_smart(raw: &str, s: &str) -> Option<NormalizedImageRef> {
    let c = SMART.captures(s)?;
    Some(NormalizedImageRef {
        platform: Platform::S2Any,
        tile_id: Some(c[4].to_string()),
        acquisition_date: Some(ymd(&c[5])?),
        acquisition_time: None,
        level: Level::parse(&c[6]),
        asset_hint: Some(c[7].to_string()),
        family: ReferenceFamily::SmartCompositeLabel,
        raw: raw.to_string(),
    })
}

fn parse_compact(raw: &str, s: &str) -> Option<NormalizedImageRef> {
    let (tile, date) = if let Some(c) = COMPACT_BASIC.captures(s) {
        (c[1].to_string(), ymd(&c[2])?)
    } else {
        let c = COMPACT_ISO.captures(s)?;
        (
            c[1].to_string(),
            NaiveDate::parse_from_str(&c[2], "%Y-%m-%d").ok()?,
        )
    };
    let mut r = NormalizedImageRef::empty(raw, ReferenceFamily::CompactTileDate);
    r.tile_id = Some(tile);
    r.acquisition_date = Some(date);
    Some(r)
}

fn parse_timestamp(raw: &str, s: &str) -> Option<NormalizedImageRef> {
    let c = TIMESTAMP.captures(s)?;
    let mut r = NormalizedImageRef::empty(raw, ReferenceFamily::TimestampOnly);
    r.acquisition_date = Some(NaiveDate::parse_from_str(&c[1], "%Y-%m-%d").ok()?);
    if let Some(t) = c.get(2) {
        r.acquisition_time = Some(NaiveTime::parse_from_str(t.as_str(), "%H:%M:%S").ok()?);
    }
    Some(r)
}

type Grammar = fn(&str, &str) -> Option<NormalizedImageRef>;

/// In precedence order.
const GRAMMARS: [Grammar; 5] = [
    parse_esa,
    parse_earth_search,
    parse_smart,
    parse_compact,
    parse_timestamp,
];

fn try_parse(raw: &str) -> Option<NormalizedImageRef> {
    let s = raw.trim();
    GRAMMARS.iter().find_map(|g| g(raw, s))
}

pub fn classify_reference(raw: &str) -> ReferenceFamily {
    try_parse(raw).map_or(ReferenceFamily::Unrecognized, |r| r.family)
}

pub fn parse_reference(raw: &str) -> Result<NormalizedImageRef, RefError> {
    try_parse(raw).ok_or_else(|| RefError::UnparseableReference(raw.to_string()))
}

/// Inclusive UTC time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    /// From the start of `first` to the last second of `last`.
    pub fn days(first: NaiveDate, last: NaiveDate) -> TimeWindow {
        let start = first.and_time(NaiveTime::MIN).and_utc();
        let end = last.and_hms_opt(23, 59, 59).expect("valid time").and_utc();
        TimeWindow { start, end }
    }

    pub fn around(date: NaiveDate, days: u32) -> TimeWindow {
        let d = Duration::days(days as i64);
        TimeWindow::days(date - d, date + d)
    }

    pub fn width(&self) -> Duration {
        self.end - self.start
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn hull(&self, other: &TimeWindow) -> TimeWindow {
        TimeWindow {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }

    /// RFC 3339 interval as used by STAC `datetime`.
    pub fn to_interval(&self) -> String {
        format!(
            "{}/{}",
            self.start.format("%Y-%m-%dT%H:%M:%SZ"),
            self.end.format("%Y-%m-%dT%H:%M:%SZ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub tier: u8,
    pub collections: Vec<String>,
    pub id_filter: Option<String>,
    pub tile_filter: Option<String>,
    pub datetime_window: TimeWindow,
    pub geometry: Option<Geometry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub window_days: u32,
    pub widen_factor: u32,
    pub l2a_collection: String,
    pub l1c_collection: String,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            window_days: 3,
            widen_factor: 5,
            l2a_collection: "sentinel-2-l2a".into(),
            l1c_collection: "sentinel-2-l1c".into(),
        }
    }
}

/// Builds the ordered search ladder. Tier 5 runs over the hull of the region
/// range and the tier 4 window so that windows never shrink with tier.
pub fn build_query_ladder(
    r: &NormalizedImageRef,
    site_geom: Option<&Geometry>,
    region_range: Option<(NaiveDate, NaiveDate)>,
    cfg: &LadderConfig,
) -> Result<Vec<SearchQuery>, RefError> {
    let both = vec![cfg.l2a_collection.clone(), cfg.l1c_collection.clone()];
    let mut ladder = Vec::new();
    let date = r.acquisition_date;

    if r.family == ReferenceFamily::EarthSearchId {
        let collections = match r.level {
            Level::L2A => vec![cfg.l2a_collection.clone()],
            Level::L1C => vec![cfg.l1c_collection.clone()],
            Level::Unknown => both.clone(),
        };
        if let Some(d) = date {
            ladder.push(SearchQuery {
                tier: 0,
                collections,
                id_filter: Some(r.raw.trim().to_string()),
                tile_filter: None,
                datetime_window: TimeWindow::days(d, d),
                geometry: None,
            });
        }
    }
    if let (Some(tile), Some(d)) = (&r.tile_id, date) {
        for (tier, collections) in [(1, vec![cfg.l2a_collection.clone()]), (2, both.clone())] {
            ladder.push(SearchQuery {
                tier,
                collections,
                id_filter: None,
                tile_filter: Some(tile.clone()),
                datetime_window: TimeWindow::days(d, d),
                geometry: None,
            });
        }
    }
    if let Some(geom) = site_geom {
        let mut widest = None;
        if let Some(d) = date {
            let narrow = TimeWindow::around(d, cfg.window_days);
            let wide = TimeWindow::around(d, cfg.window_days * cfg.widen_factor);
            for (tier, w) in [(3, narrow), (4, wide)] {
                ladder.push(SearchQuery {
                    tier,
                    collections: both.clone(),
                    id_filter: None,
                    tile_filter: None,
                    datetime_window: w,
                    geometry: Some(geom.clone()),
                });
            }
            widest = Some(wide);
        }
        if let Some((a, b)) = region_range {
            let region = TimeWindow::days(a, b);
            let w = widest.map_or(region, |w| w.hull(&region));
            ladder.push(SearchQuery {
                tier: 5,
                collections: both,
                id_filter: None,
                tile_filter: None,
                datetime_window: w,
                geometry: Some(geom.clone()),
            });
        }
    }
    if ladder.is_empty() {
        return Err(RefError::EmptyLadder);
    }
    Ok(ladder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::validate_geometry;
    use proptest::prelude::*;
    use serde_json::json;

    fn site() -> Geometry {
        validate_geometry(&json!({"type": "Polygon", "coordinates": [[[10.0, 45.0], [10.01, 45.0], [10.01, 45.01], [10.0, 45.0]]]}))
            .unwrap()
    }

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn esa_product_name() {
        let raw = "S2B_MSIL2A_20190715T103029_N0213_R108_T32TQM_20190715T124321";
        assert_eq!(classify_reference(raw), ReferenceFamily::EsaProductName);
        let r = parse_reference(raw).unwrap();
        assert_eq!(r.platform, Platform::S2B);
        assert_eq!(r.level, Level::L2A);
        assert_eq!(r.tile_id.as_deref(), Some("32TQM"));
        assert_eq!(r.acquisition_date, Some(d("2019-07-15")));
        assert_eq!(r.acquisition_time, NaiveTime::from_hms_opt(10, 30, 29));
        assert_eq!(r.raw, raw);
        assert!(parse_reference(&format!("{raw}.SAFE")).is_ok());
    }

    #[test]
    fn earth_search_id() {
        let r = parse_reference("S2A_32TQM_20190715_0_L2A").unwrap();
        assert_eq!(r.family, ReferenceFamily::EarthSearchId);
        assert_eq!(
            (r.platform, r.tile_id.as_deref(), r.level),
            (Platform::S2A, Some("32TQM"), Level::L2A)
        );
        assert_eq!(r.acquisition_date, Some(d("2019-07-15")));
    }

    #[test]
    fn compact_and_timestamp() {
        let r = parse_reference("T32TQM_20190715").unwrap();
        assert_eq!(r.family, ReferenceFamily::CompactTileDate);
        assert_eq!(r.platform, Platform::S2Any);
        assert_eq!(r.level, Level::Unknown);
        for s in ["32TQM-20190715", "32TQM/2019-07-15", "32TQM-2019-07-15"] {
            assert_eq!(
                classify_reference(s),
                ReferenceFamily::CompactTileDate,
                "{s}"
            );
        }
        assert_eq!(
            classify_reference("2019-07-15T10:30:29Z"),
            ReferenceFamily::TimestampOnly
        );
        let t = parse_reference("2019-07-15").unwrap();
        assert_eq!(t.acquisition_time, None);
        assert_eq!(t.tile_id, None);
    }

    #[test]
    fn smart_label() {
        let r = parse_reference("BR_R001_0001_23LKC_20200111_L2A_visual").unwrap();
        assert_eq!(r.family, ReferenceFamily::SmartCompositeLabel);
        assert_eq!(r.tile_id.as_deref(), Some("23LKC"));
        assert_eq!(r.asset_hint.as_deref(), Some("visual"));
        assert_eq!(r.level, Level::L2A);
    }

    #[test]
    fn unrecognized() {
        for s in [
            "",
            "   ",
            "LC08_L1TP_044034_20190715",
            "S2A_32TQM_20191345_0_L2A",
            "hello",
        ] {
            assert_eq!(classify_reference(s), ReferenceFamily::Unrecognized, "{s}");
            assert!(matches!(
                parse_reference(s),
                Err(RefError::UnparseableReference(_))
            ));
        }
    }

    fn tiers(l: &[SearchQuery]) -> Vec<u8> {
        l.iter().map(|q| q.tier).collect()
    }

    #[test]
    fn ladder_shapes() {
        let g = site();
        let range = Some((d("2015-01-01"), d("2020-12-31")));
        let cfg = LadderConfig::default();
        let esa = parse_reference("S2B_MSIL2A_20190715T103029_N0213_R108_T32TQM_20190715T124321")
            .unwrap();
        assert_eq!(
            tiers(&build_query_ladder(&esa, Some(&g), range, &cfg).unwrap()),
            [1, 2, 3, 4, 5]
        );
        let es = parse_reference("S2A_32TQM_20190715_0_L2A").unwrap();
        let l = build_query_ladder(&es, Some(&g), range, &cfg).unwrap();
        assert_eq!(tiers(&l), [0, 1, 2, 3, 4, 5]);
        assert_eq!(l[0].id_filter.as_deref(), Some("S2A_32TQM_20190715_0_L2A"));
        let ts = parse_reference("2019-07-15T10:30:29Z").unwrap();
        assert_eq!(
            tiers(&build_query_ladder(&ts, Some(&g), range, &cfg).unwrap()),
            [3, 4, 5]
        );
        let ct = parse_reference("T32TQM_20190715").unwrap();
        let l = build_query_ladder(&ct, Some(&g), None, &cfg).unwrap();
        let w = l.iter().find(|q| q.tier == 3).unwrap().datetime_window;
        assert_eq!(w.start.date_naive(), d("2019-07-12"));
        assert_eq!(w.end.date_naive(), d("2019-07-18"));
        assert_eq!(l[0].collections, ["sentinel-2-l2a"]);
        assert_eq!(l[1].collections, ["sentinel-2-l2a", "sentinel-2-l1c"]);
    }

    #[test]
    fn empty_ladder() {
        let r = NormalizedImageRef::empty("x", ReferenceFamily::Unrecognized);
        assert_eq!(
            build_query_ladder(&r, None, None, &LadderConfig::default()),
            Err(RefError::EmptyLadder)
        );
    }

    #[test]
    fn short_region_range_does_not_shrink_window() {
        let g = site();
        let ts = parse_reference("2019-07-15").unwrap();
        let l = build_query_ladder(
            &ts,
            Some(&g),
            Some((d("2019-07-14"), d("2019-07-16"))),
            &LadderConfig::default(),
        )
        .unwrap();
        assert!(l[2].datetime_window.width() >= l[1].datetime_window.width());
    }

    fn filter_kinds(q: &SearchQuery) -> (bool, bool) {
        (q.id_filter.is_some(), q.tile_filter.is_some())
    }

    fn ref_strategy() -> impl Strategy<Value = String> {
        let tile = (1u8..=60, "[C-X]", "[A-Z]{2}").prop_map(|(z, b, s)| format!("{z:02}{b}{s}"));
        let date = (2015i32..=2024, 1u32..=12, 1u32..=28)
            .prop_map(|(y, m, d)| format!("{y:04}{m:02}{d:02}"));
        prop_oneof![
            (tile.clone(), date.clone())
                .prop_map(|(t, d)| format!("S2A_MSIL2A_{d}T103029_N0213_R108_T{t}_{d}T124321")),
            (tile.clone(), date.clone()).prop_map(|(t, d)| format!("S2B_{t}_{d}_0_L1C")),
            (tile.clone(), date.clone()).prop_map(|(t, d)| format!("T{t}_{d}")),
            date.prop_map(|d| format!("{}-{}-{}", &d[..4], &d[4..6], &d[6..])),
            ".*",
        ]
    }

    proptest! {
        #[test]
        fn classify_agrees_with_parse(raw in ref_strategy()) {
            let fam = classify_reference(&raw);
            match parse_reference(&raw) {
                Ok(r) => {
                    prop_assert_eq!(r.family, fam);
                    prop_assert!(r.tile_id.is_some() || r.acquisition_date.is_some());
                    prop_assert_eq!(r.raw, raw);
                }
                Err(_) => prop_assert_eq!(fam, ReferenceFamily::Unrecognized),
            }
        }

        #[test]
        fn ladder_weakens_with_tier(raw in ref_strategy(), w in 1u32..10) {
            let Ok(r) = parse_reference(&raw) else { return Ok(()) };
            let cfg = LadderConfig { window_days: w, ..Default::default() };
            let g = site();
            let l = build_query_ladder(&r, Some(&g), Some((d("2016-01-01"), d("2019-12-31"))), &cfg).unwrap();
            prop_assert!(l.windows(2).all(|p| p[0].tier < p[1].tier));
            for p in l.windows(2) {
                let (a, b) = (filter_kinds(&p[0]), filter_kinds(&p[1]));
                // Filter kinds at t+1 are contained in those at t.
                prop_assert!((!b.0 || a.0) && (!b.1 || a.1 || a.0));
                prop_assert!(p[1].datetime_window.width() >= p[0].datetime_window.width());
            }
            for q in &l {
                prop_assert!(q.datetime_window.start <= q.datetime_window.end);
                prop_assert_eq!(q.tier == 0, q.id_filter.is_some());
                if q.geometry.is_some() { prop_assert!(q.id_filter.is_none()); }
            }
        }
    }
}
