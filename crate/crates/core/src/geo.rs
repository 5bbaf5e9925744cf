//! Web Mercator ground resolution and the survey lattice.
//!
//! Distances on the lattice use a local equirectangular approximation around
//! the grid center: one degree of latitude is [`METERS_PER_DEGREE`] meters and
//! one degree of longitude is `METERS_PER_DEGREE * cos(center.lat)` meters.
//! Over a ~1.3 km region at mid latitudes this is well under 0.1% off.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis used by the Web Mercator projection.
pub const MERCATOR_RADIUS_M: f64 = 6_378_137.0;
/// Mean Earth radius for great-circle distances.
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Latitude bound of the square Web Mercator world.
pub const MERCATOR_MAX_LAT: f64 = 85.05113;
/// Meridian length of one degree used for meter/degree offsets.
pub const METERS_PER_DEGREE: f64 = 111_320.0;
pub const MAX_ZOOM: u8 = 23;
/// Edge length of a Web Mercator base tile in pixels.
pub const TILE_SIZE_PX: f64 = 256.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate ({lat}, {lon}) is not a finite lat/lon pair in range")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("latitude {0} is outside the Web Mercator range (|lat| < {MERCATOR_MAX_LAT})")]
    LatitudeOutOfRange(f64),
    #[error("zoom {0} is outside [0, {MAX_ZOOM}]")]
    ZoomOutOfRange(i64),
    #[error("tile size must be at least one pixel")]
    EmptyTile,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidPoint {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }
}

/// Square survey lattice centered on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: GeoPoint,
    /// Half the side of the surveyed square, in meters.
    pub half_extent: f64,
    /// Distance between neighbouring lattice points, in meters.
    pub spacing: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GeoError> {
        self.center.validate()?;
        check_mercator_lat(self.center.lat)?;
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(GeoError::InvalidGrid(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if !(self.half_extent.is_finite() && self.half_extent >= 0.0) {
            return Err(GeoError::InvalidGrid(format!(
                "half extent must be non-negative, got {}",
                self.half_extent
            )));
        }
        Ok(())
    }

    /// Number of lattice points along one axis.
    pub fn points_per_axis(&self) -> usize {
        // Tolerate representation error when 2·h is an exact multiple of the spacing.
        let ratio = 2.0 * self.half_extent / self.spacing;
        (ratio + 1e-9).floor() as usize + 1
    }

    pub fn point_count(&self) -> usize {
        let n = self.points_per_axis();
        n * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileFootprint {
    pub zoom: u8,
    pub pixels: u32,
    pub meters_per_pixel: f64,
    pub width_m: f64,
}

fn check_mercator_lat(lat: f64) -> Result<(), GeoError> {
    if lat.is_finite() && lat.abs() < MERCATOR_MAX_LAT {
        Ok(())
    } else {
        Err(GeoError::LatitudeOutOfRange(lat))
    }
}

/// Meters covered by one pixel at `lat` and `zoom` on a 256 px tile pyramid.
pub fn ground_resolution(lat: f64, zoom: i64) -> Result<f64, GeoError> {
    check_mercator_lat(lat)?;
    if !(0..=MAX_ZOOM as i64).contains(&zoom) {
        return Err(GeoError::ZoomOutOfRange(zoom));
    }
    let equator = 2.0 * PI * MERCATOR_RADIUS_M / TILE_SIZE_PX;
    Ok(equator * lat.to_radians().cos() / f64::powi(2.0, zoom as i32))
}

pub fn tile_footprint(lat: f64, zoom: i64, pixels: u32) -> Result<TileFootprint, GeoError> {
    let meters_per_pixel = ground_resolution(lat, zoom)?;
    if pixels == 0 {
        return Err(GeoError::EmptyTile);
    }
    Ok(TileFootprint {
        zoom: zoom as u8,
        pixels,
        meters_per_pixel,
        width_m: meters_per_pixel * pixels as f64,
    })
}

/// Lattice points ordered row-major from the south-west corner: rows run
/// south to north, and each row runs west to east.
pub fn make_grid(spec: &GridSpec) -> Result<Vec<GeoPoint>, GeoError> {
    spec.validate()?;
    let n = spec.points_per_axis();
    let first = -((n - 1) as f64) / 2.0 * spec.spacing;
    let meters_per_lon_degree = METERS_PER_DEGREE * spec.center.lat.to_radians().cos();

    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        let north = first + row as f64 * spec.spacing;
        let lat = spec.center.lat + north / METERS_PER_DEGREE;
        for col in 0..n {
            let east = first + col as f64 * spec.spacing;
            let lon = spec.center.lon + east / meters_per_lon_degree;
            out.push(GeoPoint { lat, lon });
        }
    }
    Ok(out)
}

/// Great-circle distance on a sphere of radius [`MEAN_EARTH_RADIUS_M`].
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * MEAN_EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
