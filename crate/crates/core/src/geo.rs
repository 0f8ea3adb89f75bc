//! Spherical geometry used by the metrics: great-circle distance, the
//! Mollweide equal-area projection, planar convex hulls and polygon areas.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::GeoError;

/// IUGG mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// A longitude/latitude pair in WGS84 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    /// Builds a point, rejecting non-finite or out-of-range coordinates.
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        Ok(GeoPoint { lon, lat })
    }

    /// Builds a point from coordinates that may have drifted out of range
    /// (e.g. gaussian samples): latitude is clamped, longitude wrapped.
    pub fn wrapped(lon: f64, lat: f64) -> Self {
        let lat = lat.clamp(-90.0, 90.0);
        let lon = if (-180.0..=180.0).contains(&lon) {
            lon
        } else {
            (lon + 180.0).rem_euclid(360.0) - 180.0
        };
        GeoPoint { lon, lat }
    }
}

/// A point in projected (planar) kilometers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PlanarPoint { x, y }
    }
}

/// Great-circle distance in km, using the arctangent form of the haversine
/// formula so that both tiny and antipodal separations stay accurate.
pub fn geodesic_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Forward Mollweide projection (central meridian 0°), output in km.
pub fn mollweide_project(p: GeoPoint) -> PlanarPoint {
    let lam = p.lon.to_radians();
    let phi = p.lat.to_radians();
    let theta = mollweide_theta(phi);
    PlanarPoint {
        x: EARTH_RADIUS_KM * 2.0 * SQRT_2 / PI * lam * theta.cos(),
        y: EARTH_RADIUS_KM * SQRT_2 * theta.sin(),
    }
}

/// Solves 2θ + sin 2θ = π sin φ by Newton iteration.
fn mollweide_theta(phi: f64) -> f64 {
    if (FRAC_PI_2 - phi.abs()).abs() < 1e-12 {
        return phi.signum() * FRAC_PI_2;
    }
    let target = PI * phi.sin();
    let mut theta = phi;
    for _ in 0..100 {
        let f = 2.0 * theta + (2.0 * theta).sin() - target;
        let df = 2.0 + 2.0 * (2.0 * theta).cos();
        if df.abs() < 1e-300 {
            break;
        }
        let step = f / df;
        theta -= step;
        if step.abs() < 1e-10 {
            break;
        }
    }
    theta
}

/// A polygon in projected coordinates. Convex hulls are stored
/// counter-clockwise; fewer than three vertices means a degenerate polygon.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polygon {
    pub ring: Vec<PlanarPoint>,
}

impl Polygon {
    pub fn is_degenerate(&self) -> bool {
        self.ring.len() < 3
    }
}

fn cross(o: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Andrew's monotone chain. Collinear points are dropped from the ring, so
/// collinear input yields a two-vertex (zero-area) polygon.
pub fn convex_hull(points: &[PlanarPoint]) -> Polygon {
    let mut pts: Vec<PlanarPoint> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Polygon { ring: pts };
    }
    let mut hull: Vec<PlanarPoint> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    Polygon { ring: hull }
}

/// Shoelace area of a projected polygon, in km².
pub fn polygon_area(poly: &Polygon) -> f64 {
    if poly.is_degenerate() {
        return 0.0;
    }
    let ring = &poly.ring;
    let mut twice = 0.0;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        twice += a.x * b.y - b.x * a.y;
    }
    (twice / 2.0).abs()
}

/// A polygon whose vertices are geographic points.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPolygon {
    ring: Vec<GeoPoint>,
}

impl GeoPolygon {
    /// Normalizes orientation to counter-clockwise in lon/lat space.
    pub fn new(mut ring: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if ring.len() < 3 {
            return Err(GeoError::TooFewVertices(ring.len()));
        }
        let mut twice = 0.0;
        for i in 0..ring.len() {
            let a = ring[i];
            let b = ring[(i + 1) % ring.len()];
            twice += a.lon * b.lat - b.lon * a.lat;
        }
        if twice < 0.0 {
            ring.reverse();
        }
        Ok(GeoPolygon { ring })
    }

    pub fn ring(&self) -> &[GeoPoint] {
        &self.ring
    }

    pub fn project(&self) -> Polygon {
        Polygon { ring: self.ring.iter().map(|&p| mollweide_project(p)).collect() }
    }

    /// Area in km² via the equal-area projection.
    pub fn area(&self) -> f64 {
        polygon_area(&self.project())
    }
}
