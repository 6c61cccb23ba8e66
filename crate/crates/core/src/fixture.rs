//! Self-contained offline workspace: annotations, a STAC item catalog and
//! synthetic UTM scenes, laid out so every reference grammar and the
//! Level-1C fallback are exercised by a full run.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::chip::geotiff::{write_rgb_geotiff, Georef, RasterCrs};
use crate::chip::ChipError;
use crate::projection::TransverseMercator;

pub const REGION_ID: &str = "BR_R001";
pub const TILE: &str = "23LKC";
const ZONE: u8 = 23;
const CENTER: (f64, f64) = (-47.90, -15.80);
const SCENE_PX: u32 = 400;
const PIXEL_M: f64 = 10.0;

/// Chips, single-image examples, pairs and pair examples a clean run yields.
pub const EXPECTED_CHIPS: u64 = 11;
pub const EXPECTED_SINGLE_EXAMPLES: u64 = 33;
pub const EXPECTED_PAIRS: u64 = 17;
pub const EXPECTED_PAIR_EXAMPLES: u64 = 51;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSummary {
    pub root: PathBuf,
    pub config: PathBuf,
    pub catalog: PathBuf,
    pub sites: usize,
    pub items: usize,
}

struct Item {
    id: &'static str,
    collection: &'static str,
    datetime: &'static str,
    tile: &'static str,
    /// Footprint shift in degrees; the decoy sits off the sites.
    shift_deg: f64,
}

const ITEMS: [Item; 8] = [
    Item {
        id: "S2A_23LKC_20190302_0_L1C",
        collection: "sentinel-2-l1c",
        datetime: "2019-03-02T13:12:39Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2B_23LKC_20190511_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2019-05-11T13:12:45Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2A_23LKC_20190715_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2019-07-15T13:12:41Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2A_23LKC_20190715_0_L1C",
        collection: "sentinel-2-l1c",
        datetime: "2019-07-15T13:12:41Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2A_23LKD_20190715_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2019-07-15T13:12:44Z",
        tile: "23LKD",
        shift_deg: 1.0,
    },
    Item {
        id: "S2B_23LKC_20190918_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2019-09-18T13:12:49Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2A_23LKC_20200111_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2020-01-11T13:12:41Z",
        tile: TILE,
        shift_deg: 0.0,
    },
    Item {
        id: "S2B_23LKC_20200604_0_L2A",
        collection: "sentinel-2-l2a",
        datetime: "2020-06-04T13:12:50Z",
        tile: TILE,
        shift_deg: 0.0,
    },
];

struct Obs {
    date: &'static str,
    phase: &'static str,
    source: Option<&'static str>,
    sensor: Option<&'static str>,
}

const fn s2(date: &'static str, phase: &'static str, source: Option<&'static str>) -> Obs {
    Obs {
        date,
        phase,
        source,
        sensor: Some("Sentinel-2"),
    }
}

struct Site {
    number: u32,
    status: &'static str,
    types: &'static [&'static str],
    /// Center offset from the scene center and size, metres.
    offset: (f64, f64),
    size: (f64, f64),
    observations: &'static [Obs],
}

const SITES: [Site; 5] = [
    Site {
        number: 1,
        status: "positive_annotated",
        types: &["Commercial"],
        offset: (-800.0, 600.0),
        size: (150.0, 120.0),
        observations: &[
            s2(
                "2019-03-02",
                "No Activity",
                Some("S2A_MSIL1C_20190302T131239_N0207_R138_T23LKC_20190302T145513"),
            ),
            s2(
                "2019-05-11",
                "Site Preparation",
                Some("S2B_23LKC_20190511_0_L2A"),
            ),
            s2(
                "2019-07-15",
                "Site Preparation",
                Some("BR_R001_0001_23LKC_20190715_L2A_visual"),
            ),
            s2("2019-09-18", "Active Construction", Some("T23LKC_20190918")),
            s2(
                "2020-01-11",
                "Active Construction",
                Some("2020-01-11T13:12:41Z"),
            ),
            s2("2020-06-04", "Post Construction", None),
        ],
    },
    Site {
        number: 2,
        status: "positive_annotated",
        types: &["Industrial", "Commercial"],
        offset: (700.0, 700.0),
        size: (250.0, 180.0),
        observations: &[
            s2(
                "2019-07-15",
                "Active Construction",
                Some("S2A_23LKC_20190715_0_L2A"),
            ),
            s2("2020-06-04", "Post Construction", Some("23LKC-2020-06-04")),
        ],
    },
    Site {
        number: 3,
        status: "positive_annotated",
        types: &["Medium Residential"],
        offset: (-600.0, -700.0),
        size: (90.0, 90.0),
        observations: &[
            Obs {
                date: "2019-05-11",
                phase: "",
                source: Some("2019-05-11"),
                sensor: None,
            },
            s2(
                "2019-09-18",
                "Active Construction",
                Some("S2B_MSIL2A_20190918T131249_N0213_R138_T23LKC_20190918T153722"),
            ),
        ],
    },
    Site {
        number: 4,
        status: "positive_annotated",
        types: &["Heavy Residential"],
        offset: (800.0, -600.0),
        size: (200.0, 300.0),
        observations: &[
            s2(
                "2020-01-11",
                "Site Preparation",
                Some("BR_R001_0004_23LKC_20200111_L2A_visual"),
            ),
            Obs {
                date: "2020-03-01",
                phase: "Site Preparation",
                source: Some("WV03_20200301"),
                sensor: Some("WorldView-3"),
            },
        ],
    },
    Site {
        number: 5,
        status: "negative",
        types: &["Commercial"],
        offset: (0.0, 0.0),
        size: (100.0, 100.0),
        observations: &[s2(
            "2019-07-15",
            "No Activity",
            Some("S2A_23LKC_20190715_0_L2A"),
        )],
    },
];

fn utm() -> TransverseMercator {
    TransverseMercator::utm(ZONE, false)
}

/// Upper-left scene corner in UTM metres, snapped to the pixel grid.
fn scene_origin() -> (f64, f64) {
    let (x, y) = utm().forward(CENTER.0, CENTER.1);
    let half = SCENE_PX as f64 * PIXEL_M / 2.0;
    (
        (x / PIXEL_M).round() * PIXEL_M - half,
        (y / PIXEL_M).round() * PIXEL_M + half,
    )
}

fn ring(corners: [(f64, f64); 4], shift_deg: f64) -> Value {
    let tm = utm();
    let mut pts: Vec<Value> = corners
        .iter()
        .map(|&(x, y)| {
            let (lon, lat) = tm.inverse(x, y);
            json!([lon + shift_deg, lat])
        })
        .collect();
    pts.push(pts[0].clone());
    json!({"type": "Polygon", "coordinates": [pts]})
}

fn rect(cx: f64, cy: f64, w: f64, h: f64, shift_deg: f64) -> Value {
    let (x0, x1, y0, y1) = (cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0);
    ring([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], shift_deg)
}

fn scene_footprint(shift_deg: f64) -> Value {
    let (ulx, uly) = scene_origin();
    let side = SCENE_PX as f64 * PIXEL_M;
    rect(ulx + side / 2.0, uly - side / 2.0, side, side, shift_deg)
}

fn site_center(site: &Site) -> (f64, f64) {
    let (ulx, uly) = scene_origin();
    let half = SCENE_PX as f64 * PIXEL_M / 2.0;
    (ulx + half + site.offset.0, uly - half + site.offset.1)
}

fn site_document(site: &Site) -> Value {
    let (cx, cy) = site_center(site);
    let geom = rect(cx, cy, site.size.0, site.size.1, 0.0);
    let site_id = format!("{REGION_ID}_{:04}", site.number);
    let mut features = vec![
        json!({"type": "Feature", "properties": {"type": "site", "site_id": site_id,
        "region_id": REGION_ID, "status": site.status, "start_date": "2019-01-01", "end_date": "2020-12-31"},
        "geometry": geom}),
    ];
    for o in site.observations {
        let mut p = json!({"type": "observation", "observation_date": o.date,
            "current_phase": o.phase, "construction_type": site.types.join(", ")});
        if let Some(s) = o.source {
            p["source"] = json!(s);
        }
        if let Some(s) = o.sensor {
            p["sensor_name"] = json!(s);
        }
        features.push(json!({"type": "Feature", "properties": p, "geometry": geom}));
    }
    json!({"type": "FeatureCollection", "features": features})
}

fn item_document(item: &Item) -> Value {
    let platform = if item.id.starts_with("S2A") {
        "sentinel-2a"
    } else {
        "sentinel-2b"
    };
    json!({"type": "Feature", "stac_version": "1.0.0", "id": item.id, "collection": item.collection,
        "geometry": scene_footprint(item.shift_deg),
        "properties": {"datetime": item.datetime, "platform": platform,
            "grid:code": format!("MGRS-{}", item.tile), "eo:cloud_cover": 3.5, "proj:epsg": 32700 + ZONE as u32},
        "assets": {"visual": {"href": format!("scenes/{}.tif", item.id), "type": "image/tiff; application=geotiff"}}})
}

/// Smooth gradient with a per-scene tint, so chips differ between dates.
fn scene_pixels(tint: u8) -> Vec<u8> {
    let n = SCENE_PX as usize;
    let mut rgb = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            rgb.push((col * 255 / (n - 1)) as u8);
            rgb.push((row * 255 / (n - 1)) as u8);
            rgb.push(tint);
        }
    }
    rgb
}

fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(
        path,
        serde_json::to_string_pretty(v).expect("json serializes") + "\n",
    )
}

/// Writes the fixture below `dir`, replacing any previous copy.
pub fn build_fixture(dir: &Path) -> Result<FixtureSummary, ChipError> {
    let io = |e: std::io::Error| ChipError::Storage(e.to_string());
    let annotations = dir.join("annotations");
    let catalog = dir.join("catalog");
    for sub in [&annotations, &catalog] {
        if sub.exists() {
            fs::remove_dir_all(sub).map_err(io)?;
        }
    }
    let region = json!({"type": "FeatureCollection", "features": [{"type": "Feature",
        "properties": {"type": "region", "region_id": REGION_ID, "start_date": "2018-01-01", "end_date": "2021-12-31"},
        "geometry": scene_footprint(0.0)}]});
    write_json(
        &annotations
            .join("region_models")
            .join(format!("{REGION_ID}.geojson")),
        &region,
    )
    .map_err(io)?;
    for site in &SITES {
        let name = format!("{REGION_ID}_{:04}.geojson", site.number);
        write_json(
            &annotations.join("site_models").join(name),
            &site_document(site),
        )
        .map_err(io)?;
    }

    let (ulx, uly) = scene_origin();
    let georef = Georef {
        crs: RasterCrs::Utm {
            zone: ZONE,
            north: false,
        },
        transform: [ulx, PIXEL_M, 0.0, uly, 0.0, -PIXEL_M],
    };
    let scenes = catalog.join("scenes");
    fs::create_dir_all(&scenes).map_err(io)?;
    for (i, item) in ITEMS.iter().enumerate() {
        write_json(
            &catalog.join("items").join(format!("{}.json", item.id)),
            &item_document(item),
        )
        .map_err(io)?;
        let pixels = scene_pixels((i as u8).wrapping_mul(29).wrapping_add(40));
        write_rgb_geotiff(
            &scenes.join(format!("{}.tif", item.id)),
            SCENE_PX,
            SCENE_PX,
            &pixels,
            &georef,
            32,
        )?;
    }

    let config = dir.join("config.json");
    let cfg = json!({
        "seed": 42,
        "retry": {"retries": 1, "base_delay_ms": 0, "factor": 1.0},
        "max_concurrent_fetches": 2,
        "paths": {"annotations": "annotations", "store": "work/store", "chips": "work/chips",
            "datasets": "work/datasets", "manifests": "work/manifests"}
    });
    write_json(&config, &cfg).map_err(io)?;
    Ok(FixtureSummary {
        root: dir.to_path_buf(),
        config,
        catalog,
        sites: SITES.len(),
        items: ITEMS.len(),
    })
}
