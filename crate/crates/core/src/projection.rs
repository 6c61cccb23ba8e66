//! Transverse Mercator on the WGS84 ellipsoid.
//!
//! Uses the 6th-order Krüger series in the third flattening, which keeps the
//! forward/inverse round trip at the nanometre level within a few thousand
//! kilometres of the central meridian.

use serde::{Deserialize, Serialize};

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseMercator {
    pub lon0: f64,
    pub lat0: f64,
    pub k0: f64,
    pub false_easting: f64,
    pub false_northing: f64,
    #[serde(skip)]
    consts: Option<Series>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Series {
    e: f64,
    e2m: f64,
    a1: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
    y0: f64,
}

impl Series {
    fn wgs84(lat0: f64) -> Series {
        let f = WGS84_F;
        let n = f / (2.0 - f);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let a1 = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
                + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
                - 1_983_433.0 * n6 / 1_935_360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0
                + 15061.0 * n5 / 26880.0
                + 167_603.0 * n6 / 181_440.0,
            49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
            34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
            212_378_941.0 * n6 / 319_334_400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
                + 96199.0 * n6 / 604_800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
                - 1_118_711.0 * n6 / 3_870_720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
            4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
            20_648_693.0 * n6 / 638_668_800.0,
        ];
        let e2 = f * (2.0 - f);
        let mut s = Series {
            e: e2.sqrt(),
            e2m: 1.0 - e2,
            a1,
            alpha,
            beta,
            y0: 0.0,
        };
        s.y0 = s.forward_raw(0.0, lat0.to_radians()).1;
        s
    }

    fn conformal_tau(&self, tau: f64) -> f64 {
        let s = (self.e * (self.e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        tau * (1.0 + s * s).sqrt() - s * (1.0 + tau * tau).sqrt()
    }

    /// (easting, northing) for unit scale with origin on the equator.
    fn forward_raw(&self, dlon: f64, lat: f64) -> (f64, f64) {
        let tau = lat.tan();
        let taup = self.conformal_tau(tau);
        let xip = taup.atan2(dlon.cos());
        let etap = (dlon.sin() / (taup * taup + dlon.cos().powi(2)).sqrt()).asinh();
        let mut xi = xip;
        let mut eta = etap;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi += a * (k * xip).sin() * (k * etap).cosh();
            eta += a * (k * xip).cos() * (k * etap).sinh();
        }
        (self.a1 * eta, self.a1 * xi)
    }

    fn inverse_raw(&self, x: f64, y: f64) -> (f64, f64) {
        let xi = y / self.a1;
        let eta = x / self.a1;
        let mut xip = xi;
        let mut etap = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xip -= b * (k * xi).sin() * (k * eta).cosh();
            etap -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let sinh_etap = etap.sinh();
        let taup = xip.sin() / (sinh_etap * sinh_etap + xip.cos().powi(2)).sqrt();
        let dlon = sinh_etap.atan2(xip.cos());
        let mut tau = taup;
        for _ in 0..10 {
            let tau_i = self.conformal_tau(tau);
            let dtau = (taup - tau_i) / (1.0 + tau_i * tau_i).sqrt() * (1.0 + self.e2m * tau * tau)
                / (self.e2m * (1.0 + tau * tau).sqrt());
            tau += dtau;
            if dtau.abs() < 1e-14 * tau.abs().max(1.0) {
                break;
            }
        }
        (dlon, tau.atan())
    }
}

impl TransverseMercator {
    pub fn new(lon0: f64, lat0: f64, k0: f64, false_easting: f64, false_northing: f64) -> Self {
        TransverseMercator {
            lon0,
            lat0,
            k0,
            false_easting,
            false_northing,
            consts: Some(Series::wgs84(lat0)),
        }
    }

    /// Unit-scale projection centered on `(lon0, lat0)` with no false offsets.
    pub fn local(lon0: f64, lat0: f64) -> Self {
        Self::new(lon0, lat0, 1.0, 0.0, 0.0)
    }

    /// UTM zone `zone` (1..=60), northern or southern hemisphere.
    pub fn utm(zone: u8, north: bool) -> Self {
        let lon0 = -183.0 + 6.0 * zone as f64;
        Self::new(
            lon0,
            0.0,
            0.9996,
            500_000.0,
            if north { 0.0 } else { 10_000_000.0 },
        )
    }

    fn series(&self) -> Series {
        // Deserialized values carry no cached series.
        self.consts.unwrap_or_else(|| Series::wgs84(self.lat0))
    }

    /// Geographic degrees to projected metres.
    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        let s = self.series();
        let dlon = normalize_lon(lon - self.lon0).to_radians();
        let (x, y) = s.forward_raw(dlon, lat.to_radians());
        (
            self.false_easting + self.k0 * x,
            self.false_northing + self.k0 * (y - s.y0),
        )
    }

    /// Projected metres to geographic degrees.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.series();
        let (dlon, lat) = s.inverse_raw(
            (x - self.false_easting) / self.k0,
            (y - self.false_northing) / self.k0 + s.y0,
        );
        (
            normalize_lon(self.lon0 + dlon.to_degrees()),
            lat.to_degrees(),
        )
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let mut l = lon;
    while l > 180.0 {
        l -= 360.0;
    }
    while l < -180.0 {
        l += 360.0;
    }
    l
}

/// UTM zone number containing `lon` (no Norway/Svalbard exceptions).
pub fn utm_zone_for(lon: f64) -> u8 {
    (((normalize_lon(lon) + 180.0) / 6.0).floor() as i32).clamp(0, 59) as u8 + 1
}
