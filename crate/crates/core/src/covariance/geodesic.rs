#![allow(non_snake_case)]

use nalgebra::DMatrix;

use crate::data::Location;

/// WGS-84 semi-major axis in kilometers.
pub const WGS84_A_KM: f64 = 6378.137;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// Mean earth radius used by the spherical fallback.
pub const MEAN_RADIUS_KM: f64 = 6371.0088;

const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-12;

/// Inverse geodesic distance on the WGS-84 ellipsoid (Vincenty), in km.
///
/// Near-antipodal pairs where the iteration does not converge in 200 steps
/// fall back to the spherical great-circle distance.
pub fn vincenty_km(a: &Location, b: &Location) -> f64 {
    vincenty_inverse(a.lat, a.lon, b.lat, b.lon)
        .unwrap_or_else(|| great_circle_km(a.lat, a.lon, b.lat, b.lon))
}

/// Returns `None` when the longitude iteration fails to converge.
pub fn vincenty_inverse(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Option<f64> {
    let f = WGS84_F;
    let a = WGS84_A_KM;
    let b = a * (1.0 - f);

    let L = (lon2 - lon1).to_radians();
    let U1 = ((1.0 - f) * lat1.to_radians().tan()).atan();
    let U2 = ((1.0 - f) * lat2.to_radians().tan()).atan();
    let (sin_U1, cos_U1) = U1.sin_cos();
    let (sin_U2, cos_U2) = U2.sin_cos();

    let mut lambda = L;
    for _ in 0..MAX_ITERATIONS {
        let (sin_lambda, cos_lambda) = lambda.sin_cos();
        let sin_sigma = ((cos_U2 * sin_lambda).powi(2)
            + (cos_U1 * sin_U2 - sin_U1 * cos_U2 * cos_lambda).powi(2))
        .sqrt();
        if sin_sigma == 0.0 {
            return Some(0.0);
        }
        let cos_sigma = sin_U1 * sin_U2 + cos_U1 * cos_U2 * cos_lambda;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cos_U1 * cos_U2 * sin_lambda / sin_sigma;
        let cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
        // equatorial line: cos_sq_alpha = 0
        let cos_2sigma_m = if cos_sq_alpha != 0.0 {
            cos_sigma - 2.0 * sin_U1 * sin_U2 / cos_sq_alpha
        } else {
            0.0
        };
        let C = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha));
        let lambda_prev = lambda;
        lambda = L
            + (1.0 - C)
                * f
                * sin_alpha
                * (sigma
                    + C * sin_sigma
                        * (cos_2sigma_m + C * cos_sigma * (-1.0 + 2.0 * cos_2sigma_m.powi(2))));

        if (lambda - lambda_prev).abs() < TOLERANCE {
            let u_sq = cos_sq_alpha * (a * a - b * b) / (b * b);
            let A = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
            let B = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
            let delta_sigma = B
                * sin_sigma
                * (cos_2sigma_m
                    + B / 4.0
                        * (cos_sigma * (-1.0 + 2.0 * cos_2sigma_m.powi(2))
                            - B / 6.0
                                * cos_2sigma_m
                                * (-3.0 + 4.0 * sin_sigma.powi(2))
                                * (-3.0 + 4.0 * cos_2sigma_m.powi(2))));
            return Some(b * A * (sigma - delta_sigma));
        }
    }
    None
}

/// Haversine distance on a sphere of mean earth radius, in km.
pub fn great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * MEAN_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Symmetric matrix of pairwise geodesic distances, in km.
pub fn distance_matrix(locations: &[Location]) -> DMatrix<f64> {
    let n = locations.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = vincenty_km(&locations[i], &locations[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Absolute differences between time indices `0..n`.
pub fn lag_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| (i as f64 - j as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Lambert's long-line formula on the same ellipsoid; coded separately
    /// from the Vincenty iteration as an independent reference.
    fn lambert_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        let f = WGS84_F;
        let b1 = ((1.0 - f) * lat1.to_radians().tan()).atan();
        let b2 = ((1.0 - f) * lat2.to_radians().tan()).atan();
        let dl = (lon2 - lon1).to_radians();
        let h = ((b2 - b1) / 2.0).sin().powi(2) + b1.cos() * b2.cos() * (dl / 2.0).sin().powi(2);
        let sigma = 2.0 * h.sqrt().asin();
        let p = (b1 + b2) / 2.0;
        let q = (b2 - b1) / 2.0;
        let x = (sigma - sigma.sin()) * p.sin().powi(2) * q.cos().powi(2) / (sigma / 2.0).cos().powi(2);
        let y = (sigma + sigma.sin()) * p.cos().powi(2) * q.sin().powi(2) / (sigma / 2.0).sin().powi(2);
        WGS84_A_KM * (sigma - f / 2.0 * (x + y))
    }

    #[test]
    fn coincident_points() {
        let a = Location::new("a", 51.5, -0.12);
        assert_eq!(vincenty_km(&a, &a), 0.0);
    }

    #[test]
    fn london_paris_matches_lambert() {
        let london = Location::new("london", 51.5074, -0.1278);
        let paris = Location::new("paris", 48.8566, 2.3522);
        let v = vincenty_km(&london, &paris);
        let l = lambert_km(51.5074, -0.1278, 48.8566, 2.3522);
        assert!((v - l).abs() / l < 1e-3, "vincenty {v} lambert {l}");
        assert!((340.0..347.0).contains(&v), "{v}");
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = Location::new("a", rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0));
            let b = Location::new("b", rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0));
            let ab = vincenty_km(&a, &b);
            let ba = vincenty_km(&b, &a);
            assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0), "{ab} vs {ba}");
        }
    }

    #[test]
    fn random_pairs_agree_with_lambert() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (la1, lo1) = (rng.random_range(-70.0..70.0), rng.random_range(-50.0..50.0));
            let (la2, lo2) = (rng.random_range(-70.0..70.0), rng.random_range(-50.0..50.0));
            let v = vincenty_inverse(la1, lo1, la2, lo2).unwrap();
            let l = lambert_km(la1, lo1, la2, lo2);
            assert!((v - l).abs() / v.max(1.0) < 1e-3);
        }
    }

    #[test]
    fn near_antipodal_falls_back() {
        let a = Location::new("a", 0.0, 0.0);
        let b = Location::new("b", 0.5, 179.7);
        let d = vincenty_km(&a, &b);
        assert!(d.is_finite() && d > 19_000.0 && d < 20_100.0, "{d}");
    }

    #[test]
    fn distance_and_lag_matrices() {
        let locs = vec![
            Location::new("a", 51.50, -0.10),
            Location::new("b", 51.51, -0.10),
            Location::new("c", 51.50, -0.12),
        ];
        let d = distance_matrix(&locs);
        assert_eq!(d, d.transpose());
        assert!(d.diagonal().iter().all(|&v| v == 0.0));
        assert!((d[(0, 1)] - 1.113).abs() < 0.01);
        let lag = lag_matrix(3);
        assert_eq!(lag[(0, 2)], 2.0);
    }
}
