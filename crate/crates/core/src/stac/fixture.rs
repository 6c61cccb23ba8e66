use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Utc};
use serde_json::Value;
use walkdir::WalkDir;

use super::client::parse_page;
use super::{item_footprint, search_body, CandidateScene, Catalog, StacError};
use crate::geometry::validate_geometry;
use crate::refs::SearchQuery;

/// Offline catalog over a directory of STAC item documents.
pub struct FixtureCatalog {
    root: PathBuf,
    items: Vec<Value>,
    searches: AtomicUsize,
}

fn parse_instant(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|d| d.with_timezone(&Utc))
}

fn in_datetime(item: &Value, spec: &str) -> bool {
    let Some(t) = item["properties"]["datetime"]
        .as_str()
        .and_then(parse_instant)
    else {
        return false;
    };
    match spec.split_once('/') {
        Some((a, b)) => {
            let after = a.is_empty() || a == ".." || parse_instant(a).is_some_and(|s| s <= t);
            let before = b.is_empty() || b == ".." || parse_instant(b).is_some_and(|e| t <= e);
            after && before
        }
        None => parse_instant(spec) == Some(t),
    }
}

fn property_matches(item: &Value, name: &str, ops: &Value) -> bool {
    let v = &item["properties"][name];
    let Some(ops) = ops.as_object() else {
        return false;
    };
    ops.iter().all(|(op, arg)| match op.as_str() {
        "eq" => v == arg,
        "neq" => v != arg,
        "in" => arg.as_array().is_some_and(|a| a.contains(v)),
        "lt" | "lte" | "gt" | "gte" => match (v.as_f64(), arg.as_f64()) {
            (Some(x), Some(y)) => match op.as_str() {
                "lt" => x < y,
                "lte" => x <= y,
                "gt" => x > y,
                _ => x >= y,
            },
            _ => false,
        },
        _ => false,
    })
}

impl FixtureCatalog {
    /// Loads every `*.json` item (or item collection) below `root`.
    pub fn load(root: &Path) -> Result<FixtureCatalog, StacError> {
        let mut items = Vec::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| StacError::Storage(e.to_string()))?;
            let p = entry.path();
            if !entry.file_type().is_file() || p.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let text = fs::read_to_string(p).map_err(|e| StacError::Storage(e.to_string()))?;
            let Ok(doc) = serde_json::from_str::<Value>(&text) else {
                continue;
            };
            match doc["type"].as_str() {
                Some("Feature") if doc.get("assets").is_some() => items.push(doc),
                Some("FeatureCollection") => {
                    if let Some(fs) = doc["features"].as_array() {
                        items.extend(fs.iter().filter(|f| f.get("assets").is_some()).cloned());
                    }
                }
                _ => {}
            }
        }
        Ok(Self::from_items(root, items))
    }

    pub fn from_items(root: &Path, mut items: Vec<Value>) -> FixtureCatalog {
        items.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
        FixtureCatalog {
            root: root.to_path_buf(),
            items,
            searches: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn items(&self) -> &[Value] {
        &self.items
    }

    pub fn search_count(&self) -> usize {
        self.searches.load(Ordering::Relaxed)
    }

    /// Item documents matching an item-search request body, sorted by id.
    pub fn evaluate(&self, body: &Value) -> Vec<Value> {
        let collections: Option<Vec<&str>> = body["collections"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect());
        let ids: Option<Vec<&str>> = body["ids"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect());
        let region = body
            .get("intersects")
            .filter(|g| !g.is_null())
            .and_then(|g| validate_geometry(g).ok());
        let has_region = body.get("intersects").is_some_and(|g| !g.is_null());
        self.items
            .iter()
            .filter(|item| {
                if let Some(cs) = &collections {
                    let c = item["collection"].as_str().unwrap_or_default();
                    if !cs.is_empty() && !cs.contains(&c) {
                        return false;
                    }
                }
                if let Some(ids) = &ids {
                    if !ids.contains(&item["id"].as_str().unwrap_or_default()) {
                        return false;
                    }
                }
                if let Some(dt) = body["datetime"].as_str() {
                    if !in_datetime(item, dt) {
                        return false;
                    }
                }
                if has_region {
                    let hit = match (&region, item_footprint(item)) {
                        (Some(r), Some(fp)) => r.intersects(&fp),
                        _ => false,
                    };
                    if !hit {
                        return false;
                    }
                }
                if let Some(q) = body["query"].as_object() {
                    if !q.iter().all(|(k, ops)| property_matches(item, k, ops)) {
                        return false;
                    }
                }
                true
            })
            .cloned()
            .collect()
    }
}

impl Catalog for FixtureCatalog {
    fn search(&self, q: &SearchQuery) -> Result<Vec<CandidateScene>, StacError> {
        self.searches.fetch_add(1, Ordering::Relaxed);
        let body = search_body(q, self.items.len().max(1));
        let page =
            serde_json::json!({"type": "FeatureCollection", "features": self.evaluate(&body)});
        parse_page(&page)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refs::{build_query_ladder, parse_reference, LadderConfig};
    use serde_json::json;

    fn item(id: &str, coll: &str, dt: &str, tile: &str, lon: f64) -> Value {
        json!({"type": "Feature", "stac_version": "1.0.0", "id": id, "collection": coll,
            "geometry": {"type": "Polygon", "coordinates": [[[lon, 45.0], [lon + 1.0, 45.0], [lon + 1.0, 46.0], [lon, 46.0], [lon, 45.0]]]},
            "properties": {"datetime": dt, "grid:code": format!("MGRS-{tile}")},
            "assets": {"visual": {"href": format!("{id}.tif")}}})
    }

    fn catalog() -> FixtureCatalog {
        FixtureCatalog::from_items(
            Path::new("."),
            vec![
                item(
                    "S2A_32TQM_20190715_0_L2A",
                    "sentinel-2-l2a",
                    "2019-07-15T10:30:00Z",
                    "32TQM",
                    10.0,
                ),
                item(
                    "S2B_32TQM_20190715_0_L2A",
                    "sentinel-2-l2a",
                    "2019-07-15T10:40:00Z",
                    "32TQM",
                    10.0,
                ),
                item(
                    "S2A_33TUN_20190716_0_L1C",
                    "sentinel-2-l1c",
                    "2019-07-16T10:30:00Z",
                    "33TUN",
                    12.0,
                ),
            ],
        )
    }

    fn ladder(raw: &str, geom: Value) -> Vec<SearchQuery> {
        let g = validate_geometry(&geom).unwrap();
        build_query_ladder(
            &parse_reference(raw).unwrap(),
            Some(&g),
            None,
            &LadderConfig::default(),
        )
        .unwrap()
    }

    fn square(lon: f64) -> Value {
        json!({"type": "Polygon", "coordinates": [[[lon, 45.5], [lon + 0.01, 45.5], [lon + 0.01, 45.51], [lon, 45.5]]]})
    }

    #[test]
    fn id_query_returns_single_item() {
        let c = catalog();
        let l = ladder("S2A_32TQM_20190715_0_L2A", square(10.5));
        assert_eq!(c.search(&l[0]).unwrap().len(), 1);
    }

    #[test]
    fn tile_date_query_returns_both_platforms() {
        let c = catalog();
        let l = ladder("T32TQM_20190715", square(10.5));
        let hits = c.search(&l[0]).unwrap();
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn disjoint_geometry_is_empty() {
        let c = catalog();
        let l = ladder("2019-07-15", square(-100.0));
        assert!(l.iter().all(|q| c.search(q).unwrap().is_empty()));
        let l = ladder("2019-07-15", square(12.5));
        let hits = c.search(&l[0]).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(c.search_count(), 3);
    }

    #[test]
    fn datetime_bounds() {
        let i = item("x", "c", "2019-07-15T10:30:00Z", "32TQM", 0.0);
        assert!(in_datetime(&i, "2019-07-15T00:00:00Z/2019-07-15T23:59:59Z"));
        assert!(in_datetime(&i, "../2019-07-15T10:30:00Z"));
        assert!(!in_datetime(&i, "2019-07-16T00:00:00Z/.."));
    }
}
