//! WGS-84 geodesy and the propagation-speed latency floor.

use serde::{Deserialize, Serialize};

use super::EstimatorError;

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// Mean Earth radius (IUGG), used by the great-circle fallback.
pub const MEAN_RADIUS_M: f64 = 6_371_008.8;
/// Signal speed in fibre, roughly two thirds of c.
pub const PROPAGATION_M_PER_S: f64 = 2.0e8;

const VINCENTY_TOL: f64 = 1e-12;
const VINCENTY_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoordinate {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoordinate {
    /// Validates latitude and wraps longitude into [-180, 180].
    pub fn new(lat: f64, lon: f64) -> Result<Self, EstimatorError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(EstimatorError::InvalidInput(format!("bad coordinate ({lat}, {lon})")));
        }
        let lon = if (-180.0..=180.0).contains(&lon) {
            lon
        } else {
            (lon + 180.0).rem_euclid(360.0) - 180.0
        };
        Ok(Self { lat, lon })
    }
}

/// Inverse geodesic distance on the WGS-84 ellipsoid in meters.
///
/// Fails with `NoConvergence` for nearly antipodal points.
pub fn vincenty_distance(a: GeoCoordinate, b: GeoCoordinate) -> Result<f64, EstimatorError> {
    let f = WGS84_F;
    let l = (b.lon - a.lon).to_radians();
    let u1 = ((1.0 - f) * a.lat.to_radians().tan()).atan();
    let u2 = ((1.0 - f) * b.lat.to_radians().tan()).atan();
    let (sin_u1, cos_u1) = u1.sin_cos();
    let (sin_u2, cos_u2) = u2.sin_cos();

    let mut lambda = l;
    for _ in 0..VINCENTY_MAX_ITER {
        let (sin_l, cos_l) = lambda.sin_cos();
        let sin_sigma = ((cos_u2 * sin_l).powi(2)
            + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_l).powi(2))
        .sqrt();
        if sin_sigma == 0.0 {
            return Ok(0.0);
        }
        let cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_l;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cos_u1 * cos_u2 * sin_l / sin_sigma;
        let cos2_alpha = 1.0 - sin_alpha * sin_alpha;
        // Equatorial lines have cos²α = 0 and an undefined cos 2σm.
        let cos_2sm = if cos2_alpha != 0.0 {
            cos_sigma - 2.0 * sin_u1 * sin_u2 / cos2_alpha
        } else {
            0.0
        };
        let c = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha));
        let prev = lambda;
        lambda = l
            + (1.0 - c)
                * f
                * sin_alpha
                * (sigma + c * sin_sigma * (cos_2sm + c * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)));
        if (lambda - prev).abs() < VINCENTY_TOL {
            let u_sq = cos2_alpha * (WGS84_A * WGS84_A - WGS84_B * WGS84_B) / (WGS84_B * WGS84_B);
            let big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
            let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
            let delta_sigma = big_b
                * sin_sigma
                * (cos_2sm
                    + big_b / 4.0
                        * (cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
                            - big_b / 6.0
                                * cos_2sm
                                * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                                * (-3.0 + 4.0 * cos_2sm * cos_2sm)));
            return Ok(WGS84_B * big_a * (sigma - delta_sigma));
        }
    }
    Err(EstimatorError::NoConvergence)
}

/// Haversine distance on the mean-radius sphere.
pub fn great_circle_distance(a: GeoCoordinate, b: GeoCoordinate) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * MEAN_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub meters: f64,
    /// True when Vincenty failed and the spherical distance was used.
    pub fallback: bool,
}

pub fn distance(a: GeoCoordinate, b: GeoCoordinate) -> Distance {
    match vincenty_distance(a, b) {
        Ok(meters) => Distance { meters, fallback: false },
        Err(_) => {
            log::warn!("vincenty did not converge for {a:?} -> {b:?}, using great-circle distance");
            Distance {
                meters: great_circle_distance(a, b),
                fallback: true,
            }
        }
    }
}

/// One-way latency floor in milliseconds for a path of `distance_m`.
pub fn geo_latency(distance_m: f64) -> f64 {
    distance_m / PROPAGATION_M_PER_S * 1000.0
}

/// Inverse of [`geo_latency`]: the farthest a signal travels in `ms`.
pub fn latency_to_distance(ms: f64) -> f64 {
    ms / 1000.0 * PROPAGATION_M_PER_S
}
