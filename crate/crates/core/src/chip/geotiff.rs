//! GeoTIFF georeferencing, windowed strip/tile reads and chip writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiff::decoder::{ChunkType, Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, Compression, DeflateLevel, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use super::ChipError;
use crate::projection::TransverseMercator;

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;
const PROJECTION: u16 = 3074;
const PROJ_COORD_TRANS: u16 = 3075;
const PROJ_LINEAR_UNITS: u16 = 3076;
const PROJ_NAT_ORIGIN_LONG: u16 = 3080;
const PROJ_NAT_ORIGIN_LAT: u16 = 3081;
const PROJ_FALSE_EASTING: u16 = 3082;
const PROJ_FALSE_NORTHING: u16 = 3083;
const PROJ_SCALE_AT_NAT_ORIGIN: u16 = 3092;
const USER_DEFINED: u16 = 32767;
const CT_TRANSVERSE_MERCATOR: u16 = 1;
const LINEAR_METER: u16 = 9001;
const RASTER_PIXEL_IS_POINT: u16 = 2;

/// Affine pixel-to-CRS transform in GDAL order:
/// `x = t[0] + col*t[1] + row*t[2]`, `y = t[3] + col*t[4] + row*t[5]`.
pub type GeoTransform = [f64; 6];

pub fn invert_geo_transform(t: &GeoTransform) -> Option<GeoTransform> {
    let det = t[1] * t[5] - t[2] * t[4];
    if det.abs() < 1e-15 {
        return None;
    }
    let (a, b, d, e) = (t[5] / det, -t[2] / det, -t[4] / det, t[1] / det);
    Some([-(a * t[0] + b * t[3]), a, b, -(d * t[0] + e * t[3]), d, e])
}

/// Coordinate reference system of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RasterCrs {
    /// WGS84 lon/lat degrees.
    Geographic,
    Utm {
        zone: u8,
        north: bool,
    },
    TransverseMercator(TransverseMercator),
}

impl RasterCrs {
    pub fn from_epsg(code: u32) -> Option<RasterCrs> {
        match code {
            4326 => Some(RasterCrs::Geographic),
            32601..=32660 => Some(RasterCrs::Utm {
                zone: (code - 32600) as u8,
                north: true,
            }),
            32701..=32760 => Some(RasterCrs::Utm {
                zone: (code - 32700) as u8,
                north: false,
            }),
            _ => None,
        }
    }

    pub fn epsg(&self) -> Option<u32> {
        match self {
            RasterCrs::Geographic => Some(4326),
            RasterCrs::Utm { zone, north } => {
                Some(if *north { 32600 } else { 32700 } + *zone as u32)
            }
            RasterCrs::TransverseMercator(_) => None,
        }
    }

    /// Projector from lon/lat to this CRS.
    pub fn projector(&self) -> Projector {
        match self {
            RasterCrs::Geographic => Projector::Identity,
            RasterCrs::Utm { zone, north } => Projector::Tm(TransverseMercator::utm(*zone, *north)),
            RasterCrs::TransverseMercator(tm) => Projector::Tm(TransverseMercator::new(
                tm.lon0,
                tm.lat0,
                tm.k0,
                tm.false_easting,
                tm.false_northing,
            )),
        }
    }
}

pub enum Projector {
    Identity,
    Tm(TransverseMercator),
}

impl Projector {
    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        match self {
            Projector::Identity => (lon, lat),
            Projector::Tm(tm) => tm.forward(lon, lat),
        }
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Projector::Identity => (x, y),
            Projector::Tm(tm) => tm.inverse(x, y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Georef {
    pub crs: RasterCrs,
    /// Corner-based (pixel-is-area) transform.
    pub transform: GeoTransform,
}

/// 8-bit interleaved raster region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub bands: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, col: u32, row: u32) -> &[u8] {
        let i = ((row - self.y0) as usize * self.width as usize + (col - self.x0) as usize)
            * self.bands;
        &self.data[i..i + self.bands]
    }
}

fn read_err(e: impl std::fmt::Display) -> ChipError {
    ChipError::RasterRead(e.to_string())
}

fn key_map(dir: &[u16]) -> Vec<(u16, u16, u16, u16)> {
    if dir.len() < 4 {
        return Vec::new();
    }
    let n = dir[3] as usize;
    dir[4..]
        .chunks_exact(4)
        .take(n)
        .map(|k| (k[0], k[1], k[2], k[3]))
        .collect()
}

/// Opened scene supporting reads of pixel windows.
pub struct SceneReader {
    decoder: Decoder<BufReader<File>>,
    pub width: u32,
    pub height: u32,
    samples: usize,
    pub georef: Georef,
}

impl SceneReader {
    pub fn open(path: &Path) -> Result<SceneReader, ChipError> {
        let f = File::open(path).map_err(read_err)?;
        let mut decoder = Decoder::new(BufReader::new(f))
            .map_err(read_err)?
            .with_limits(Limits::unlimited());
        let (width, height) = decoder.dimensions().map_err(read_err)?;
        let samples = match decoder.colortype().map_err(read_err)? {
            ColorType::Gray(8) => 1,
            ColorType::RGB(8) => 3,
            ColorType::RGBA(8) => 4,
            ColorType::Multiband {
                bit_depth: 8,
                num_samples,
            } if num_samples >= 3 => num_samples as usize,
            other => {
                return Err(ChipError::RasterRead(format!(
                    "unsupported pixel layout {other:?}"
                )))
            }
        };
        if let Some(pc) = decoder
            .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
            .map_err(read_err)?
        {
            if pc != 1 {
                return Err(ChipError::RasterRead(
                    "planar band layout is not supported".into(),
                ));
            }
        }
        let georef = read_georef(&mut decoder)?;
        Ok(SceneReader {
            decoder,
            width,
            height,
            samples,
            georef,
        })
    }

    /// Reads pixels `[x0, x1) x [y0, y1)` (clamped to the image) as RGB,
    /// decoding only the strips or tiles that intersect the window.
    pub fn read_window(&mut self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Raster, ChipError> {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
        let mut out = Raster {
            x0,
            y0,
            width: w,
            height: h,
            bands: 3,
            data: vec![0; w as usize * h as usize * 3],
        };
        if w == 0 || h == 0 {
            return Ok(out);
        }
        let (cw, ch) = self.decoder.chunk_dimensions();
        let across = match self.decoder.get_chunk_type() {
            ChunkType::Strip => 1,
            ChunkType::Tile => self.width.div_ceil(cw),
        };
        for cy in (y0 / ch)..=((y1 - 1) / ch) {
            for cx in (x0 / cw)..=((x1 - 1) / cw) {
                let idx = cy * across + cx;
                let (dw, dh) = self.decoder.chunk_data_dimensions(idx);
                let data = match self.decoder.read_chunk(idx).map_err(read_err)? {
                    DecodingResult::U8(v) => v,
                    _ => return Err(ChipError::RasterRead("non 8-bit samples".into())),
                };
                let (ox, oy) = (cx * cw, cy * ch);
                for r in oy.max(y0)..(oy + dh).min(y1) {
                    for c in ox.max(x0)..(ox + dw).min(x1) {
                        let s =
                            ((r - oy) as usize * dw as usize + (c - ox) as usize) * self.samples;
                        let d = ((r - y0) as usize * w as usize + (c - x0) as usize) * 3;
                        if self.samples == 1 {
                            out.data[d..d + 3].fill(data[s]);
                        } else {
                            out.data[d..d + 3].copy_from_slice(&data[s..s + 3]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn read_georef<R: std::io::Read + Seek>(dec: &mut Decoder<R>) -> Result<Georef, ChipError> {
    let doubles = |dec: &mut Decoder<R>, tag| -> Result<Option<Vec<f64>>, ChipError> {
        dec.find_tag(tag)
            .map_err(read_err)?
            .map(|v| v.into_f64_vec().map_err(read_err))
            .transpose()
    };
    let keys = dec
        .find_tag(Tag::GeoKeyDirectoryTag)
        .map_err(read_err)?
        .map(|v| v.into_u16_vec().map_err(read_err))
        .transpose()?
        .ok_or_else(|| ChipError::RasterRead("missing GeoKey directory".into()))?;
    let params = doubles(dec, Tag::GeoDoubleParamsTag)?.unwrap_or_default();
    let keys = key_map(&keys);
    let short = |id: u16| keys.iter().find(|k| k.0 == id && k.1 == 0).map(|k| k.3);
    let double = |id: u16| {
        keys.iter()
            .find(|k| k.0 == id && k.1 == Tag::GeoDoubleParamsTag.to_u16())
            .and_then(|k| params.get(k.3 as usize).copied())
    };
    let crs = match (
        short(PROJECTED_CS_TYPE),
        short(GEOGRAPHIC_TYPE),
        short(GT_MODEL_TYPE),
    ) {
        (Some(USER_DEFINED), _, _) | (None, _, Some(1))
            if short(PROJ_COORD_TRANS) == Some(CT_TRANSVERSE_MERCATOR) =>
        {
            let need = |id| {
                double(id).ok_or_else(|| ChipError::RasterRead(format!("missing GeoKey {id}")))
            };
            RasterCrs::TransverseMercator(TransverseMercator::new(
                need(PROJ_NAT_ORIGIN_LONG)?,
                need(PROJ_NAT_ORIGIN_LAT)?,
                double(PROJ_SCALE_AT_NAT_ORIGIN).unwrap_or(1.0),
                double(PROJ_FALSE_EASTING).unwrap_or(0.0),
                double(PROJ_FALSE_NORTHING).unwrap_or(0.0),
            ))
        }
        (Some(code), _, _) if code != USER_DEFINED => RasterCrs::from_epsg(code as u32)
            .ok_or_else(|| ChipError::RasterRead(format!("unsupported EPSG:{code}")))?,
        (None, Some(4326), _) => RasterCrs::Geographic,
        _ => {
            return Err(ChipError::RasterRead(
                "unsupported coordinate system".into(),
            ))
        }
    };

    let mut transform = if let Some(m) = doubles(dec, Tag::ModelTransformationTag)? {
        if m.len() < 8 {
            return Err(ChipError::RasterRead("short model transformation".into()));
        }
        [m[3], m[0], m[1], m[7], m[4], m[5]]
    } else {
        let scale = doubles(dec, Tag::ModelPixelScaleTag)?
            .ok_or_else(|| ChipError::RasterRead("missing pixel scale".into()))?;
        let tie = doubles(dec, Tag::ModelTiepointTag)?
            .ok_or_else(|| ChipError::RasterRead("missing tiepoint".into()))?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err(ChipError::RasterRead("short georeferencing tags".into()));
        }
        let (sx, sy) = (scale[0], -scale[1]);
        [tie[3] - tie[0] * sx, sx, 0.0, tie[4] - tie[1] * sy, 0.0, sy]
    };
    if short(GT_RASTER_TYPE) == Some(RASTER_PIXEL_IS_POINT) {
        // Tiepoint refers to a pixel center; shift to the corner convention.
        transform[0] -= 0.5 * (transform[1] + transform[2]);
        transform[3] -= 0.5 * (transform[4] + transform[5]);
    }
    Ok(Georef { crs, transform })
}

fn geokeys(crs: &RasterCrs) -> (Vec<u16>, Vec<f64>) {
    let mut keys: Vec<[u16; 4]> = Vec::new();
    let mut doubles = Vec::new();
    match crs {
        RasterCrs::Geographic => {
            keys.push([GT_MODEL_TYPE, 0, 1, 2]);
            keys.push([GT_RASTER_TYPE, 0, 1, 1]);
            keys.push([GEOGRAPHIC_TYPE, 0, 1, 4326]);
        }
        RasterCrs::Utm { .. } => {
            keys.push([GT_MODEL_TYPE, 0, 1, 1]);
            keys.push([GT_RASTER_TYPE, 0, 1, 1]);
            keys.push([
                PROJECTED_CS_TYPE,
                0,
                1,
                crs.epsg().expect("utm code") as u16,
            ]);
        }
        RasterCrs::TransverseMercator(tm) => {
            keys.push([GT_MODEL_TYPE, 0, 1, 1]);
            keys.push([GT_RASTER_TYPE, 0, 1, 1]);
            keys.push([GEOGRAPHIC_TYPE, 0, 1, 4326]);
            keys.push([PROJECTED_CS_TYPE, 0, 1, USER_DEFINED]);
            keys.push([PROJECTION, 0, 1, USER_DEFINED]);
            keys.push([PROJ_COORD_TRANS, 0, 1, CT_TRANSVERSE_MERCATOR]);
            keys.push([PROJ_LINEAR_UNITS, 0, 1, LINEAR_METER]);
            for (id, v) in [
                (PROJ_NAT_ORIGIN_LONG, tm.lon0),
                (PROJ_NAT_ORIGIN_LAT, tm.lat0),
                (PROJ_FALSE_EASTING, tm.false_easting),
                (PROJ_FALSE_NORTHING, tm.false_northing),
                (PROJ_SCALE_AT_NAT_ORIGIN, tm.k0),
            ] {
                keys.push([
                    id,
                    Tag::GeoDoubleParamsTag.to_u16(),
                    1,
                    doubles.len() as u16,
                ]);
                doubles.push(v);
            }
        }
    }
    let mut dir = vec![1, 1, 0, keys.len() as u16];
    dir.extend(keys.into_iter().flatten());
    (dir, doubles)
}

/// Writes an RGB8 GeoTIFF with a north-up `transform`.
pub fn write_rgb_geotiff(
    path: &Path,
    width: u32,
    height: u32,
    rgb: &[u8],
    georef: &Georef,
    rows_per_strip: u32,
) -> Result<(), ChipError> {
    let file = File::create(path).map_err(|e| ChipError::Storage(e.to_string()))?;
    let mut w = BufWriter::new(file);
    write_rgb_geotiff_to(&mut w, width, height, rgb, georef, rows_per_strip)?;
    w.flush().map_err(|e| ChipError::Storage(e.to_string()))
}

pub fn write_rgb_geotiff_to<W: Write + Seek>(
    out: W,
    width: u32,
    height: u32,
    rgb: &[u8],
    georef: &Georef,
    rows_per_strip: u32,
) -> Result<(), ChipError> {
    let werr = |e: tiff::TiffError| ChipError::Storage(e.to_string());
    let t = &georef.transform;
    if t[2] != 0.0 || t[4] != 0.0 {
        return Err(ChipError::Storage(
            "only north-up rasters can be written".into(),
        ));
    }
    let mut enc = TiffEncoder::new(out)
        .map_err(werr)?
        .with_compression(Compression::Deflate(DeflateLevel::Balanced));
    let mut image = enc
        .new_image::<colortype::RGB8>(width, height)
        .map_err(werr)?;
    image
        .rows_per_strip(rows_per_strip.clamp(1, height.max(1)))
        .map_err(werr)?;
    let (dir, doubles) = geokeys(&georef.crs);
    let e = image.encoder();
    e.write_tag(Tag::ModelPixelScaleTag, &[t[1], -t[5], 0.0][..])
        .map_err(werr)?;
    e.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, t[0], t[3], 0.0][..])
        .map_err(werr)?;
    e.write_tag(Tag::GeoKeyDirectoryTag, &dir[..])
        .map_err(werr)?;
    if !doubles.is_empty() {
        e.write_tag(Tag::GeoDoubleParamsTag, &doubles[..])
            .map_err(werr)?;
    }
    image.write_data(rgb).map_err(werr)
}

pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<(), ChipError> {
    let serr = |e: png::EncodingError| ChipError::Storage(e.to_string());
    let f = File::create(path).map_err(|e| ChipError::Storage(e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(serr)?;
    w.write_image_data(rgb).map_err(serr)?;
    w.finish().map_err(serr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Vec<u8> {
        (0..h)
            .flat_map(|r| (0..w).flat_map(move |c| [(c % 251) as u8 + 1, (r % 251) as u8 + 1, 7]))
            .collect()
    }

    #[test]
    fn geotransform_inverse() {
        let t = [500_000.0, 10.0, 0.0, 8_300_000.0, 0.0, -10.0];
        let inv = invert_geo_transform(&t).unwrap();
        let (x, y) = (500_123.0, 8_299_001.0);
        let col = inv[0] + x * inv[1] + y * inv[2];
        let row = inv[3] + x * inv[4] + y * inv[5];
        assert!((col - 12.3).abs() < 1e-9 && (row - 99.9).abs() < 1e-9);
    }

    #[test]
    fn round_trip_each_crs_and_window_reads() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (37, 29);
        let rgb = gradient(w, h);
        for crs in [
            RasterCrs::Geographic,
            RasterCrs::Utm {
                zone: 23,
                north: false,
            },
            RasterCrs::TransverseMercator(TransverseMercator::local(-47.9, -15.8)),
        ] {
            let g = Georef {
                crs,
                transform: [100.0, 10.0, 0.0, 2000.0, 0.0, -10.0],
            };
            let p = dir.path().join("t.tif");
            write_rgb_geotiff(&p, w, h, &rgb, &g, 4).unwrap();
            let mut r = SceneReader::open(&p).unwrap();
            assert_eq!((r.width, r.height), (w, h));
            assert_eq!(r.georef.transform, g.transform);
            match (r.georef.crs, crs) {
                (RasterCrs::TransverseMercator(a), RasterCrs::TransverseMercator(b)) => {
                    assert_eq!((a.lon0, a.lat0, a.k0), (b.lon0, b.lat0, b.k0))
                }
                (a, b) => assert_eq!(a, b),
            }
            let win = r.read_window(5, 3, 20, 17).unwrap();
            for row in 3..17 {
                for col in 5..20 {
                    let i = ((row * w + col) * 3) as usize;
                    assert_eq!(win.pixel(col, row), &rgb[i..i + 3]);
                }
            }
            let full = r.read_window(0, 0, w, h).unwrap();
            assert_eq!(full.data, rgb);
        }
    }
}
