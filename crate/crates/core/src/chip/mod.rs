//! Site-centered, north-up 10 m chips cut from downloaded scenes.

pub mod codec;
pub mod geotiff;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Geometry};
use crate::projection::TransverseMercator;
use crate::stac::AnnotationKey;
use crate::taxonomy::{PhaseLabel, TypeSet};
use geotiff::{invert_geo_transform, GeoTransform, Georef, RasterCrs, SceneReader};

pub use codec::{decode_chip_filename, encode_chip_filename, ChipName};

pub const GSD_M: f64 = 10.0;
/// Sides are multiples of two pixels so the center falls on a pixel corner.
const SIDE_STEP_M: f64 = 2.0 * GSD_M;
const SIDE_TOLERANCE_M: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChipError {
    #[error("chip window does not overlap the scene")]
    NoOverlap,
    #[error("raster read error: {0}")]
    RasterRead(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("malformed chip filename {0:?}")]
    MalformedFilename(String),
    #[error("invalid chip record: {0}")]
    InvalidRecord(String),
}

/// Local transverse Mercator centered on a site, unit scale, no false offsets.
pub type ProjectionSpec = TransverseMercator;

/// Projection centered at the mean of the exterior-ring vertices.
pub fn local_projection_for(geometry: &Geometry) -> ProjectionSpec {
    let c = geometry.vertex_centroid();
    TransverseMercator::local(c[0], c[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChipWindow {
    pub center_x: f64,
    pub center_y: f64,
    pub side_m: f64,
    pub px: u32,
    pub geo_transform: GeoTransform,
    /// Projected bbox width and height of the site.
    pub site_span_m: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub margin_m: f64,
    pub min_side_m: f64,
    pub max_side_m: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            margin_m: 100.0,
            min_side_m: 320.0,
            max_side_m: 6400.0,
        }
    }
}

pub fn projected_bounds(geometry: &Geometry, proj: &ProjectionSpec) -> Bounds {
    let pts: Vec<[f64; 2]> = geometry
        .exterior_rings()
        .flatten()
        .map(|p| {
            let (x, y) = proj.forward(p[0], p[1]);
            [x, y]
        })
        .collect();
    Bounds::of_points(&pts).unwrap_or(Bounds {
        min_x: 0.0,
        min_y: 0.0,
        max_x: 0.0,
        max_y: 0.0,
    })
}

/// Side length after clamping and rounding up to an even pixel count.
pub fn chip_side_m(span_m: f64, cfg: &WindowConfig) -> f64 {
    let raw = (span_m + 2.0 * cfg.margin_m).clamp(cfg.min_side_m, cfg.max_side_m);
    let steps = ((raw - SIDE_TOLERANCE_M) / SIDE_STEP_M).ceil().max(1.0);
    steps * SIDE_STEP_M
}

pub fn compute_chip_window(
    geometry: &Geometry,
    proj: &ProjectionSpec,
    cfg: &WindowConfig,
) -> ChipWindow {
    let b = projected_bounds(geometry, proj);
    let [cx, cy] = b.center();
    let side_m = chip_side_m(b.width().max(b.height()), cfg);
    let px = (side_m / GSD_M).round() as u32;
    let half = side_m / 2.0;
    ChipWindow {
        center_x: cx,
        center_y: cy,
        side_m,
        px,
        geo_transform: [cx - half, GSD_M, 0.0, cy + half, 0.0, -GSD_M],
        site_span_m: [b.width(), b.height()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipImage {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipDiagnostics {
    pub center_lon: f64,
    pub center_lat: f64,
    pub bounds_projected: Bounds,
    pub bounds_geographic: Bounds,
    pub px_width: u32,
    pub px_height: u32,
    pub gsd_m: f64,
    pub site_span_m: [f64; 2],
    pub padded: bool,
    pub pad_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtractOptions {
    pub resampling: Resampling,
    /// Return an all-pad chip instead of `NoOverlap`.
    pub keep_no_overlap: bool,
}

/// Source pixel position (continuous, pixel-is-area) of each output pixel center.
fn sample_positions(
    window: &ChipWindow,
    proj: &ProjectionSpec,
    georef: &Georef,
) -> Result<Vec<(f64, f64)>, ChipError> {
    let inv = invert_geo_transform(&georef.transform)
        .ok_or_else(|| ChipError::RasterRead("singular geotransform".into()))?;
    let to_source = georef.crs.projector();
    let t = &window.geo_transform;
    let n = window.px as usize;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let x = t[0] + (col as f64 + 0.5) * t[1];
            let y = t[3] + (row as f64 + 0.5) * t[5];
            let (lon, lat) = proj.inverse(x, y);
            let (sx, sy) = to_source.forward(lon, lat);
            out.push((
                inv[0] + sx * inv[1] + sy * inv[2],
                inv[3] + sx * inv[4] + sy * inv[5],
            ));
        }
    }
    Ok(out)
}

pub fn chip_diagnostics(
    window: &ChipWindow,
    proj: &ProjectionSpec,
    pad_fraction: f64,
) -> ChipDiagnostics {
    let t = &window.geo_transform;
    let (x0, y1) = (t[0], t[3]);
    let (x1, y0) = (x0 + window.side_m, y1 - window.side_m);
    let xm = (x0 + x1) / 2.0;
    let ym = (y0 + y1) / 2.0;
    let ring: Vec<[f64; 2]> = [
        (x0, y0),
        (xm, y0),
        (x1, y0),
        (x1, ym),
        (x1, y1),
        (xm, y1),
        (x0, y1),
        (x0, ym),
    ]
    .iter()
    .map(|&(x, y)| {
        let (lon, lat) = proj.inverse(x, y);
        [lon, lat]
    })
    .collect();
    let (center_lon, center_lat) = proj.inverse(window.center_x, window.center_y);
    ChipDiagnostics {
        center_lon,
        center_lat,
        bounds_projected: Bounds {
            min_x: x0,
            min_y: y0,
            max_x: x1,
            max_y: y1,
        },
        bounds_geographic: Bounds::of_points(&ring).expect("non-empty"),
        px_width: window.px,
        px_height: window.px,
        gsd_m: GSD_M,
        site_span_m: window.site_span_m,
        padded: pad_fraction > 0.0,
        pad_fraction,
    }
}

/// Resamples the scene onto the chip grid. Output pixels whose centers fall
/// outside the scene are zero in every band and count toward `pad_fraction`.
pub fn extract_chip(
    scene: &mut SceneReader,
    window: &ChipWindow,
    proj: &ProjectionSpec,
    opts: ExtractOptions,
) -> Result<(ChipImage, ChipDiagnostics), ChipError> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    let pos = sample_positions(window, proj, &scene.georef)?;
    let inside = |&(u, v): &(f64, f64)| u >= 0.0 && u < w && v >= 0.0 && v < h;
    let n_inside = pos.iter().filter(|p| inside(p)).count();
    if n_inside == 0 && !opts.keep_no_overlap {
        return Err(ChipError::NoOverlap);
    }
    let total = pos.len();
    let pad_fraction = (total - n_inside) as f64 / total as f64;
    let mut data = vec![0u8; total * 3];
    if n_inside > 0 {
        let (mut c0, mut r0, mut c1, mut r1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for &(u, v) in pos.iter().filter(|p| inside(p)) {
            let (fc, fr) = (
                (u - 0.5).floor().max(0.0) as u32,
                (v - 0.5).floor().max(0.0) as u32,
            );
            c0 = c0.min(fc);
            r0 = r0.min(fr);
            c1 = c1.max(fc + 2);
            r1 = r1.max(fr + 2);
        }
        let src = scene.read_window(c0, r0, c1, r1)?;
        let (maxc, maxr) = (scene.width - 1, scene.height - 1);
        for (i, &(u, v)) in pos.iter().enumerate() {
            if !inside(&(u, v)) {
                continue;
            }
            let out = &mut data[i * 3..i * 3 + 3];
            match opts.resampling {
                Resampling::Nearest => {
                    out.copy_from_slice(src.pixel(u.floor() as u32, v.floor() as u32));
                }
                Resampling::Bilinear => {
                    let fx = (u - 0.5).clamp(0.0, maxc as f64);
                    let fy = (v - 0.5).clamp(0.0, maxr as f64);
                    let (xa, ya) = (fx.floor() as u32, fy.floor() as u32);
                    let (xb, yb) = ((xa + 1).min(maxc), (ya + 1).min(maxr));
                    let (tx, ty) = (fx - xa as f64, fy - ya as f64);
                    let (p00, p10, p01, p11) = (
                        src.pixel(xa, ya),
                        src.pixel(xb, ya),
                        src.pixel(xa, yb),
                        src.pixel(xb, yb),
                    );
                    for b in 0..3 {
                        let top = p00[b] as f64 * (1.0 - tx) + p10[b] as f64 * tx;
                        let bottom = p01[b] as f64 * (1.0 - tx) + p11[b] as f64 * tx;
                        out[b] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    let image = ChipImage {
        width: window.px,
        height: window.px,
        data,
    };
    Ok((image, chip_diagnostics(window, proj, pad_fraction)))
}

/// Georeferencing of a chip written in its local projection.
pub fn chip_georef(window: &ChipWindow, proj: &ProjectionSpec) -> Georef {
    Georef {
        crs: RasterCrs::TransverseMercator(*proj),
        transform: window.geo_transform,
    }
}

/// One extracted chip and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipRecord {
    /// Relative to the chip directory.
    pub path: String,
    pub site_id: String,
    pub region_id: String,
    pub annotation_key: AnnotationKey,
    pub acquired: NaiveDateTime,
    pub types: TypeSet,
    pub phase: PhaseLabel,
    pub diagnostics: ChipDiagnostics,
    pub item_id: String,
    pub source_file: String,
    pub source_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_path: Option<String>,
}
