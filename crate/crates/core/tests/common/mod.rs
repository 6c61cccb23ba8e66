//! Test-only oracles and record builders, independent of the library's math.
#![allow(dead_code)]

use chrono::{NaiveDate, NaiveDateTime};
use hcforge::chip::{ChipDiagnostics, ChipRecord};
use hcforge::geometry::Bounds;
use hcforge::stac::AnnotationKey;
use hcforge::taxonomy::{ConstructionType, PhaseLabel, TypeSet};

const A: f64 = 6_378_137.0;
const F: f64 = 1.0 / 298.257_223_563;

/// Vincenty inverse on WGS84: geodesic distance in metres.
pub fn vincenty_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let b = A * (1.0 - F);
    let l = (lon2 - lon1).to_radians();
    let u1 = ((1.0 - F) * lat1.to_radians().tan()).atan();
    let u2 = ((1.0 - F) * lat2.to_radians().tan()).atan();
    let (su1, cu1, su2, cu2) = (u1.sin(), u1.cos(), u2.sin(), u2.cos());
    let mut lambda = l;
    for _ in 0..200 {
        let (sl, cl) = (lambda.sin(), lambda.cos());
        let sin_sigma = ((cu2 * sl).powi(2) + (cu1 * su2 - su1 * cu2 * cl).powi(2)).sqrt();
        if sin_sigma == 0.0 {
            return 0.0;
        }
        let cos_sigma = su1 * su2 + cu1 * cu2 * cl;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cu1 * cu2 * sl / sin_sigma;
        let cos2_alpha = 1.0 - sin_alpha * sin_alpha;
        let cos_2sm = if cos2_alpha == 0.0 {
            0.0
        } else {
            cos_sigma - 2.0 * su1 * su2 / cos2_alpha
        };
        let c = F / 16.0 * cos2_alpha * (4.0 + F * (4.0 - 3.0 * cos2_alpha));
        let prev = lambda;
        lambda = l
            + (1.0 - c)
                * F
                * sin_alpha
                * (sigma
                    + c * sin_sigma * (cos_2sm + c * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)));
        if (lambda - prev).abs() < 1e-12 {
            let u_sq = cos2_alpha * (A * A - b * b) / (b * b);
            let big_a =
                1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
            let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
            let delta = big_b
                * sin_sigma
                * (cos_2sm
                    + big_b / 4.0
                        * (cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
                            - big_b / 6.0
                                * cos_2sm
                                * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                                * (-3.0 + 4.0 * cos_2sm * cos_2sm)));
            return b * big_a * (sigma - delta);
        }
    }
    panic!("vincenty did not converge");
}

/// Transverse Mercator from the classic USGS power series.
#[derive(Debug, Clone, Copy)]
pub struct SnyderTm {
    pub lon0: f64,
    pub lat0: f64,
    pub k0: f64,
    pub fe: f64,
    pub fn_: f64,
}

fn e2() -> f64 {
    F * (2.0 - F)
}

fn meridian_arc(phi: f64) -> f64 {
    let e2 = e2();
    let (e4, e6) = (e2 * e2, e2 * e2 * e2);
    A * ((1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0) * phi
        - (3.0 * e2 / 8.0 + 3.0 * e4 / 32.0 + 45.0 * e6 / 1024.0) * (2.0 * phi).sin()
        + (15.0 * e4 / 256.0 + 45.0 * e6 / 1024.0) * (4.0 * phi).sin()
        - (35.0 * e6 / 3072.0) * (6.0 * phi).sin())
}

impl SnyderTm {
    pub fn utm(zone: u8, north: bool) -> Self {
        SnyderTm {
            lon0: -183.0 + 6.0 * zone as f64,
            lat0: 0.0,
            k0: 0.9996,
            fe: 500_000.0,
            fn_: if north { 0.0 } else { 10_000_000.0 },
        }
    }

    pub fn local(lon0: f64, lat0: f64) -> Self {
        SnyderTm {
            lon0,
            lat0,
            k0: 1.0,
            fe: 0.0,
            fn_: 0.0,
        }
    }

    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        let e2 = e2();
        let ep2 = e2 / (1.0 - e2);
        let phi = lat.to_radians();
        let n = A / (1.0 - e2 * phi.sin().powi(2)).sqrt();
        let t = phi.tan().powi(2);
        let c = ep2 * phi.cos().powi(2);
        let a = (lon - self.lon0).to_radians() * phi.cos();
        let m = meridian_arc(phi);
        let m0 = meridian_arc(self.lat0.to_radians());
        let x = self.k0
            * n
            * (a + (1.0 - t + c) * a.powi(3) / 6.0
                + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * a.powi(5) / 120.0);
        let y = self.k0
            * (m - m0
                + n * phi.tan()
                    * (a * a / 2.0
                        + (5.0 - t + 9.0 * c + 4.0 * c * c) * a.powi(4) / 24.0
                        + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * a.powi(6) / 720.0));
        (x + self.fe, y + self.fn_)
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let e2 = e2();
        let ep2 = e2 / (1.0 - e2);
        let (e4, e6) = (e2 * e2, e2 * e2 * e2);
        let m = meridian_arc(self.lat0.to_radians()) + (y - self.fn_) / self.k0;
        let mu = m / (A * (1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0));
        let e1 = (1.0 - (1.0 - e2).sqrt()) / (1.0 + (1.0 - e2).sqrt());
        let phi1 = mu
            + (3.0 * e1 / 2.0 - 27.0 * e1.powi(3) / 32.0) * (2.0 * mu).sin()
            + (21.0 * e1 * e1 / 16.0 - 55.0 * e1.powi(4) / 32.0) * (4.0 * mu).sin()
            + (151.0 * e1.powi(3) / 96.0) * (6.0 * mu).sin()
            + (1097.0 * e1.powi(4) / 512.0) * (8.0 * mu).sin();
        let (s, c1cos) = (phi1.sin(), phi1.cos());
        let c1 = ep2 * c1cos * c1cos;
        let t1 = phi1.tan().powi(2);
        let n1 = A / (1.0 - e2 * s * s).sqrt();
        let r1 = A * (1.0 - e2) / (1.0 - e2 * s * s).powf(1.5);
        let d = (x - self.fe) / (n1 * self.k0);
        let phi = phi1
            - (n1 * phi1.tan() / r1)
                * (d * d / 2.0
                    - (5.0 + 3.0 * t1 + 10.0 * c1 - 4.0 * c1 * c1 - 9.0 * ep2) * d.powi(4) / 24.0
                    + (61.0 + 90.0 * t1 + 298.0 * c1 + 45.0 * t1 * t1
                        - 252.0 * ep2
                        - 3.0 * c1 * c1)
                        * d.powi(6)
                        / 720.0);
        let lam = (d - (1.0 + 2.0 * t1 + c1) * d.powi(3) / 6.0
            + (5.0 - 2.0 * c1 + 28.0 * t1 - 3.0 * c1 * c1 + 8.0 * ep2 + 24.0 * t1 * t1)
                * d.powi(5)
                / 120.0)
            / c1cos;
        (self.lon0 + lam.to_degrees(), phi.to_degrees())
    }
}

pub fn ts(s: &str) -> NaiveDateTime {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").unwrap()
}

/// Minimal chip record; only the fields generators read are meaningful.
pub fn chip(
    site: &str,
    acquired: NaiveDateTime,
    types: &[ConstructionType],
    phase: PhaseLabel,
) -> ChipRecord {
    let stamp = acquired.format("%Y%m%dT%H%M%S").to_string();
    let region = site.rsplit_once('_').map_or(site, |(r, _)| r).to_string();
    let zero = Bounds {
        min_x: 0.0,
        min_y: 0.0,
        max_x: 0.0,
        max_y: 0.0,
    };
    ChipRecord {
        path: format!("{site}/{stamp}.tif"),
        site_id: site.to_string(),
        region_id: region,
        annotation_key: AnnotationKey {
            site_id: site.to_string(),
            obs_date: acquired.date(),
            raw_ref: Some(format!("T23LKC_{}", acquired.format("%Y%m%d"))),
        },
        acquired,
        types: types.iter().copied().collect::<TypeSet>(),
        phase,
        diagnostics: ChipDiagnostics {
            center_lon: 0.0,
            center_lat: 0.0,
            bounds_projected: zero,
            bounds_geographic: zero,
            px_width: 32,
            px_height: 32,
            gsd_m: 10.0,
            site_span_m: [100.0, 100.0],
            padded: false,
            pad_fraction: 0.0,
        },
        item_id: format!("S2A_23LKC_{}_0_L2A", acquired.format("%Y%m%d")),
        source_file: format!("{stamp}.tif"),
        source_ref: Some(format!("T23LKC_{}", acquired.format("%Y%m%d"))),
        png_path: None,
    }
}

/// `n` chips for one site, a week apart, cycling through phases and types.
pub fn site_chips(site: &str, n: usize) -> Vec<ChipRecord> {
    let start = NaiveDate::from_ymd_opt(2018, 1, 3)
        .unwrap()
        .and_hms_opt(10, 30, 0)
        .unwrap();
    (0..n)
        .map(|i| {
            let t = ConstructionType::KNOWN[i % ConstructionType::KNOWN.len()];
            let p = PhaseLabel::ALL[i % PhaseLabel::ALL.len()];
            chip(site, start + chrono::Duration::days(7 * i as i64), &[t], p)
        })
        .collect()
}
