//! Polygon and multipolygon handling for annotation geometries.
//!
//! Coordinates are `[lon, lat]` in WGS84 degrees. Validated geometries always
//! carry closed rings (first vertex repeated as the last one).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type Position = [f64; 2];
pub type Ring = Vec<Position>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> GeometryError {
    GeometryError::Invalid(msg.into())
}

/// A polygon or multipolygon in GeoJSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "coordinates")]
pub enum Geometry {
    Polygon(Vec<Ring>),
    MultiPolygon(Vec<Vec<Ring>>),
}

/// Axis-aligned bounds as `(min_x, min_y, max_x, max_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Position>) -> Option<Bounds> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Bounds {
            min_x: first[0],
            min_y: first[1],
            max_x: first[0],
            max_y: first[1],
        };
        for p in it {
            b.min_x = b.min_x.min(p[0]);
            b.min_y = b.min_y.min(p[1]);
            b.max_x = b.max_x.max(p[0]);
            b.max_y = b.max_y.max(p[1]);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Position {
        [
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        ]
    }

    pub fn intersects(&self, other: &Bounds) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }
}

impl Geometry {
    /// Polygons of this geometry, each as a list of rings (exterior first).
    pub fn polygons(&self) -> Vec<&[Ring]> {
        match self {
            Geometry::Polygon(rings) => vec![rings.as_slice()],
            Geometry::MultiPolygon(polys) => polys.iter().map(|p| p.as_slice()).collect(),
        }
    }

    pub fn exterior_rings(&self) -> impl Iterator<Item = &Ring> {
        self.polygons()
            .into_iter()
            .filter_map(|rings| rings.first())
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn polygon_count(&self) -> usize {
        match self {
            Geometry::Polygon(_) => 1,
            Geometry::MultiPolygon(p) => p.len(),
        }
    }

    /// Arithmetic mean of exterior-ring vertices, closing vertices excluded.
    pub fn vertex_centroid(&self) -> Position {
        let mut sum = [0.0, 0.0];
        let mut n = 0usize;
        for ring in self.exterior_rings() {
            for p in open_vertices(ring) {
                sum[0] += p[0];
                sum[1] += p[1];
                n += 1;
            }
        }
        if n == 0 {
            return [f64::NAN, f64::NAN];
        }
        [sum[0] / n as f64, sum[1] / n as f64]
    }

    pub fn bounds(&self) -> Option<Bounds> {
        Bounds::of_points(self.exterior_rings().flatten())
    }

    /// Applies `f` to every vertex, preserving structure.
    pub fn map_positions(&self, mut f: impl FnMut(Position) -> Position) -> Geometry {
        let map_rings = |rings: &Vec<Ring>, f: &mut dyn FnMut(Position) -> Position| -> Vec<Ring> {
            rings
                .iter()
                .map(|r| r.iter().map(|p| f(*p)).collect())
                .collect()
        };
        match self {
            Geometry::Polygon(rings) => Geometry::Polygon(map_rings(rings, &mut f)),
            Geometry::MultiPolygon(polys) => {
                Geometry::MultiPolygon(polys.iter().map(|r| map_rings(r, &mut f)).collect())
            }
        }
    }

    /// Shoelace area in coordinate units squared (exteriors minus holes).
    pub fn planar_area(&self) -> f64 {
        self.polygons()
            .iter()
            .map(|rings| {
                let mut a = 0.0;
                for (i, ring) in rings.iter().enumerate() {
                    let ra = ring_area(ring).abs();
                    if i == 0 {
                        a += ra;
                    } else {
                        a -= ra;
                    }
                }
                a
            })
            .sum()
    }

    pub fn contains_point(&self, p: Position) -> bool {
        self.polygons().iter().any(|rings| {
            let mut inside = match rings.first() {
                Some(ext) => point_in_ring(p, ext),
                None => false,
            };
            if inside {
                inside = !rings[1..].iter().any(|hole| point_in_ring(p, hole));
            }
            inside
        })
    }

    /// Planar intersection test in lon/lat space.
    pub fn intersects(&self, other: &Geometry) -> bool {
        match (self.bounds(), other.bounds()) {
            (Some(a), Some(b)) if a.intersects(&b) => {}
            _ => return false,
        }
        for ra in self.exterior_rings() {
            for rb in other.exterior_rings() {
                if ra.first().is_some_and(|p| other.contains_point(*p))
                    || rb.first().is_some_and(|p| self.contains_point(*p))
                {
                    return true;
                }
                for ea in ra.windows(2) {
                    for eb in rb.windows(2) {
                        if segments_intersect(ea[0], ea[1], eb[0], eb[1]) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("geometry serializes")
    }
}

/// Ring vertices with the closing duplicate dropped.
pub fn open_vertices(ring: &Ring) -> &[Position] {
    if ring.len() > 1 && ring.first() == ring.last() {
        &ring[..ring.len() - 1]
    } else {
        ring
    }
}

fn ring_area(ring: &Ring) -> f64 {
    let v = open_vertices(ring);
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / 2.0
}

fn point_in_ring(p: Position, ring: &Ring) -> bool {
    let v = open_vertices(ring);
    let n = v.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = (v[i][0], v[i][1]);
        let (xj, yj) = (v[j][0], v[j][1]);
        if (yi > p[1]) != (yj > p[1]) && p[0] < (xj - xi) * (p[1] - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn orient(a: Position, b: Position, c: Position) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Position, b: Position, p: Position) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection, touching endpoints included.
pub fn segments_intersect(p1: Position, p2: Position, q1: Position, q2: Position) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when two edges sharing vertex `shared` fold back over each other.
fn adjacent_edges_overlap(a: Position, shared: Position, b: Position) -> bool {
    if orient(a, shared, b) != 0.0 {
        return false;
    }
    // Collinear: overlap iff a and b lie on the same side of `shared`.
    let da = [a[0] - shared[0], a[1] - shared[1]];
    let db = [b[0] - shared[0], b[1] - shared[1]];
    da[0] * db[0] + da[1] * db[1] > 0.0
}

fn parse_position(v: &Value) -> Result<Position, GeometryError> {
    let arr = v
        .as_array()
        .ok_or_else(|| invalid("coordinate is not an array"))?;
    if arr.len() < 2 {
        return Err(invalid("coordinate has fewer than 2 values"));
    }
    let lon = arr[0]
        .as_f64()
        .ok_or_else(|| invalid("non-numeric longitude"))?;
    let lat = arr[1]
        .as_f64()
        .ok_or_else(|| invalid("non-numeric latitude"))?;
    Ok([lon, lat])
}

fn parse_ring(v: &Value) -> Result<Ring, GeometryError> {
    v.as_array()
        .ok_or_else(|| invalid("ring is not an array"))?
        .iter()
        .map(parse_position)
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Vec<Ring>, GeometryError> {
    v.as_array()
        .ok_or_else(|| invalid("polygon is not an array of rings"))?
        .iter()
        .map(parse_ring)
        .collect()
}

/// Validates a ring: range checks, consecutive-duplicate collapse, closure,
/// vertex count and simplicity.
pub fn validate_ring(ring: &[Position]) -> Result<Ring, GeometryError> {
    let mut out: Ring = Vec::with_capacity(ring.len() + 1);
    for p in ring {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(invalid("non-finite coordinate"));
        }
        if !(-180.0..=180.0).contains(&p[0]) {
            return Err(invalid(format!("longitude {} out of range", p[0])));
        }
        if !(-90.0..=90.0).contains(&p[1]) {
            return Err(invalid(format!("latitude {} out of range", p[1])));
        }
        if out.last() != Some(p) {
            out.push(*p);
        }
    }
    if out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    let n = out.len();
    let mut distinct = out.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid(format!(
            "ring has {} distinct vertices, need at least 3",
            distinct.len()
        )));
    }
    // Non-adjacent edges must not touch; adjacent edges must not fold back.
    for i in 0..n {
        let a1 = out[i];
        let a2 = out[(i + 1) % n];
        let a3 = out[(i + 2) % n];
        if adjacent_edges_overlap(a1, a2, a3) {
            return Err(invalid("self-intersecting ring (edge folds back)"));
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(a1, a2, out[j], out[(j + 1) % n]) {
                return Err(invalid(format!(
                    "self-intersecting ring (edges {} and {})",
                    i, j
                )));
            }
        }
    }
    if ring_area(&out) == 0.0 {
        return Err(invalid("ring has zero area"));
    }
    out.push(out[0]);
    Ok(out)
}

fn validate_rings(rings: &[Ring]) -> Result<Vec<Ring>, GeometryError> {
    if rings.is_empty() {
        return Err(invalid("polygon has no rings"));
    }
    rings.iter().map(|r| validate_ring(r)).collect()
}

impl Geometry {
    /// Validates and normalizes an already-structured geometry.
    pub fn validated(&self) -> Result<Geometry, GeometryError> {
        match self {
            Geometry::Polygon(rings) => Ok(Geometry::Polygon(validate_rings(rings)?)),
            Geometry::MultiPolygon(polys) => {
                if polys.is_empty() {
                    return Err(invalid("multipolygon has no polygons"));
                }
                Ok(Geometry::MultiPolygon(
                    polys
                        .iter()
                        .map(|p| validate_rings(p))
                        .collect::<Result<_, _>>()?,
                ))
            }
        }
    }
}

/// Parses and validates a raw geometry.
///
/// Accepts a GeoJSON geometry object, or a string holding either GeoJSON text
/// or WKT (`POLYGON`/`MULTIPOLYGON`), as found in tabular annotation exports.
pub fn validate_geometry(raw: &Value) -> Result<Geometry, GeometryError> {
    let geom = match raw {
        Value::String(s) => {
            let trimmed = s.trim();
            if trimmed.starts_with('{') {
                let v: Value = serde_json::from_str(trimmed)
                    .map_err(|e| invalid(format!("geometry text is not JSON: {e}")))?;
                return validate_geometry(&v);
            }
            parse_wkt(trimmed)?
        }
        Value::Object(obj) => {
            let kind = obj
                .get("type")
                .and_then(Value::as_str)
                .ok_or_else(|| invalid("geometry has no type"))?;
            let coords = obj
                .get("coordinates")
                .ok_or_else(|| invalid("geometry has no coordinates"))?;
            match kind {
                "Polygon" => Geometry::Polygon(parse_polygon(coords)?),
                "MultiPolygon" => Geometry::MultiPolygon(
                    coords
                        .as_array()
                        .ok_or_else(|| invalid("multipolygon coordinates not an array"))?
                        .iter()
                        .map(parse_polygon)
                        .collect::<Result<_, _>>()?,
                ),
                other => return Err(invalid(format!("unsupported geometry type {other}"))),
            }
        }
        _ => return Err(invalid("geometry must be an object or string")),
    };
    geom.validated()
}

fn parse_wkt(s: &str) -> Result<Geometry, GeometryError> {
    let upper = s.to_ascii_uppercase();
    let (multi, rest) = if let Some(r) = upper.strip_prefix("MULTIPOLYGON") {
        (true, r)
    } else if let Some(r) = upper.strip_prefix("POLYGON") {
        (false, r)
    } else {
        return Err(invalid("unrecognized geometry text"));
    };
    let mut parser = WktParser {
        chars: rest.trim().as_bytes(),
        pos: 0,
    };
    let geom = if multi {
        Geometry::MultiPolygon(parser.list(|p| p.list(|p| p.ring()))?)
    } else {
        Geometry::Polygon(parser.list(|p| p.ring())?)
    };
    parser.skip_ws();
    if parser.pos != parser.chars.len() {
        return Err(invalid("trailing characters in WKT"));
    }
    Ok(geom)
}

struct WktParser<'a> {
    chars: &'a [u8],
    pos: usize,
}

impl WktParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), GeometryError> {
        self.skip_ws();
        if self.chars.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(invalid(format!("expected '{}' in WKT", c as char)))
        }
    }

    fn list<T>(
        &mut self,
        mut item: impl FnMut(&mut Self) -> Result<T, GeometryError>,
    ) -> Result<Vec<T>, GeometryError> {
        self.expect(b'(')?;
        let mut out = vec![item(self)?];
        loop {
            self.skip_ws();
            match self.chars.get(self.pos) {
                Some(b',') => {
                    self.pos += 1;
                    out.push(item(self)?);
                }
                Some(b')') => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return Err(invalid("malformed WKT list")),
            }
        }
    }

    fn number(&mut self) -> Result<f64, GeometryError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && matches!(
                self.chars[self.pos],
                b'0'..=b'9' | b'.' | b'-' | b'+' | b'E'
            )
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.chars[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| invalid("malformed WKT number"))
    }

    fn ring(&mut self) -> Result<Ring, GeometryError> {
        self.list(|p| Ok([p.number()?, p.number()?]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn square() -> Value {
        json!({"type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]]})
    }

    #[test]
    fn open_square_gets_closed() {
        let g = validate_geometry(&square()).unwrap();
        let Geometry::Polygon(rings) = &g else {
            panic!("expected polygon")
        };
        assert_eq!(rings[0].len(), 5);
        assert_eq!(rings[0][0], rings[0][4]);
    }

    #[test]
    fn latitude_out_of_range() {
        let v = json!({"type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 91.0], [1.0, 1.0]]]});
        assert!(validate_geometry(&v).is_err());
    }

    #[test]
    fn bow_tie_is_rejected() {
        let v = json!({"type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]]});
        let err = validate_geometry(&v).unwrap_err();
        assert!(err.to_string().contains("self-intersecting"));
    }

    #[test]
    fn too_few_vertices() {
        let v = json!({"type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]]});
        assert!(validate_geometry(&v).is_err());
        let empty = json!({"type": "Polygon", "coordinates": [[]]});
        assert!(validate_geometry(&empty).is_err());
    }

    #[test]
    fn spike_is_rejected() {
        let v = json!({"type": "Polygon", "coordinates": [[[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [1.0, 1.0]]]});
        assert!(validate_geometry(&v).is_err());
    }

    #[test]
    fn wkt_and_json_text_are_accepted() {
        let wkt = Value::String("POLYGON ((0 0, 1 0, 1 1, 0 1, 0 0))".into());
        let a = validate_geometry(&wkt).unwrap();
        let b = validate_geometry(&square()).unwrap();
        assert_eq!(a, b);
        let text = Value::String(square().to_string());
        assert_eq!(validate_geometry(&text).unwrap(), b);
        let multi =
            Value::String("MULTIPOLYGON (((0 0, 1 0, 1 1, 0 0)), ((5 5, 6 5, 6 6, 5 5)))".into());
        assert_eq!(validate_geometry(&multi).unwrap().polygon_count(), 2);
    }

    #[test]
    fn centroid_and_area() {
        let g = validate_geometry(&square()).unwrap();
        assert_eq!(g.vertex_centroid(), [0.5, 0.5]);
        assert_eq!(g.planar_area(), 1.0);
    }

    #[test]
    fn intersection_tests() {
        let a = validate_geometry(&square()).unwrap();
        let b = a.map_positions(|p| [p[0] + 0.5, p[1] + 0.5]);
        let c = a.map_positions(|p| [p[0] + 5.0, p[1]]);
        let inner = a.map_positions(|p| [p[0] * 0.1 + 0.4, p[1] * 0.1 + 0.4]);
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c));
        assert!(a.intersects(&inner));
        assert!(inner.intersects(&a));
    }
}
