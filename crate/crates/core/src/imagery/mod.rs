//! Satellite and street-view imagery requests: canonical descriptors, the
//! on-disk cache, providers, rate limiting and cost accounting.

mod cache;
pub(crate) mod client;
mod limiter;
mod provider;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, MAX_ZOOM};

pub use cache::{CacheEntry, CacheStatus, ImageCache, ImageSource, Sidecar};
pub use client::{CachedImage, FetchOutcome, ImageryClient};
pub use limiter::{Permit, RateLimiter};
pub use provider::{FixtureProvider, ImageryProvider, NetworkProvider, ProviderResponse, DEFAULT_BASE_URL};

pub const DEFAULT_ZOOM: u8 = 21;
pub const DEFAULT_SIZE_PX: u32 = 640;
/// Largest image edge the static-map and street-view endpoints serve.
pub const MAX_SIZE_PX: u32 = 640;
pub const STREET_FOV: u16 = 90;
pub const STREET_HEADINGS: [u16; 4] = [0, 90, 180, 270];
pub const API_KEY_ENV: &str = "SPOTFINDER_API_KEY";

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("image size {0}px is outside 1..={MAX_SIZE_PX}")]
    Size(u32),
    #[error("heading {0} is not one of 0, 90, 180, 270")]
    Heading(u16),
    #[error("field of view {0} is outside 1..=120 degrees")]
    Fov(u16),
}

#[derive(Debug, Error)]
pub enum FetchError {
    /// Transient: timeouts, connection resets, 5xx.
    #[error("retryable fetch failure for {request}: {message}")]
    Retryable { request: String, message: String },
    /// Credential, quota or request-shape failures; retrying will not help.
    #[error("fatal fetch failure for {request}: {message}")]
    Fatal { request: String, message: String },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cached or fetched image for {request} is unusable: {message}")]
    Corrupt { request: String, message: String },
}

impl FetchError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, FetchError::Fatal { .. } | FetchError::Cache { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestKind {
    Satellite { zoom: u8 },
    Street { heading: u16, fov: u16 },
}

/// One square image request at a coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageryRequest {
    #[serde(flatten)]
    pub kind: RequestKind,
    pub point: GeoPoint,
    /// Edge length in pixels.
    pub size: u32,
}

/// Six decimals (about 0.11 m) keeps keys stable across float noise.
fn coord(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn check_size(size: u32) -> Result<(), ImageryError> {
    if size == 0 || size > MAX_SIZE_PX {
        return Err(ImageryError::Size(size));
    }
    Ok(())
}

impl ImageryRequest {
    pub fn satellite(point: GeoPoint, zoom: u8, size: u32) -> Result<Self, ImageryError> {
        point.validate()?;
        if zoom > MAX_ZOOM {
            return Err(GeoError::ZoomOutOfRange(zoom as i64).into());
        }
        check_size(size)?;
        Ok(ImageryRequest {
            kind: RequestKind::Satellite { zoom },
            point,
            size,
        })
    }

    pub fn street(point: GeoPoint, heading: u16, fov: u16, size: u32) -> Result<Self, ImageryError> {
        point.validate()?;
        if !STREET_HEADINGS.contains(&heading) {
            return Err(ImageryError::Heading(heading));
        }
        if fov == 0 || fov > 120 {
            return Err(ImageryError::Fov(fov));
        }
        check_size(size)?;
        Ok(ImageryRequest {
            kind: RequestKind::Street { heading, fov },
            point,
            size,
        })
    }

    pub fn is_street(&self) -> bool {
        matches!(self.kind, RequestKind::Street { .. })
    }

    /// Endpoint path plus ordered query, without any credential. Street
    /// requests ask for outdoor panoramas only.
    pub fn canonical(&self) -> String {
        let (lat, lon) = (coord(self.point.lat), coord(self.point.lon));
        let size = format!("{0}x{0}", self.size);
        match self.kind {
            RequestKind::Satellite { zoom } => {
                format!("staticmap?center={lat},{lon}&zoom={zoom}&size={size}&maptype=satellite")
            }
            RequestKind::Street { heading, fov } => {
                format!("streetview?location={lat},{lon}&size={size}&heading={heading}&fov={fov}&source=outdoor")
            }
        }
    }

    /// Zero-cost coverage probe for street requests.
    pub fn metadata_canonical(&self) -> Option<String> {
        self.is_street().then(|| {
            format!(
                "streetview/metadata?location={},{}&source=outdoor",
                coord(self.point.lat),
                coord(self.point.lon)
            )
        })
    }

    /// Hex SHA-256 of the canonical string.
    pub fn cache_key(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

impl fmt::Display for ImageryRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

pub fn build_satellite_request(point: GeoPoint, zoom: u8, size: u32) -> Result<ImageryRequest, ImageryError> {
    ImageryRequest::satellite(point, zoom, size)
}

/// The four street requests covering the full horizon at one coordinate.
pub fn build_street_requests(point: GeoPoint, size: u32) -> Result<[ImageryRequest; 4], ImageryError> {
    let mut out = [ImageryRequest::street(point, 0, STREET_FOV, size)?; 4];
    for (req, heading) in out.iter_mut().zip(STREET_HEADINGS) {
        *req = ImageryRequest::street(point, heading, STREET_FOV, size)?;
    }
    Ok(out)
}

/// Per-request prices in currency units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingModel {
    pub sat_price: f64,
    pub street_price: f64,
}

impl Default for PricingModel {
    /// Static maps at $2 and street view at $7 per thousand requests.
    fn default() -> Self {
        PricingModel {
            sat_price: 0.002,
            street_price: 0.007,
        }
    }
}

impl PricingModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.sat_price.is_finite() && self.street_price.is_finite() && self.sat_price >= 0.0 && self.street_price >= 0.0 {
            Ok(())
        } else {
            Err(format!("prices must be finite and non-negative: {self:?}"))
        }
    }
}

/// Billable requests issued to the network provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub sat_requests: u64,
    pub street_requests: u64,
    pub sat_price: f64,
    pub street_price: f64,
}

impl CostLedger {
    pub fn new(pricing: PricingModel) -> Self {
        CostLedger {
            sat_requests: 0,
            street_requests: 0,
            sat_price: pricing.sat_price,
            street_price: pricing.street_price,
        }
    }

    pub fn record(&mut self, request: &ImageryRequest) {
        if request.is_street() {
            self.street_requests += 1;
        } else {
            self.sat_requests += 1;
        }
    }

    pub fn requests(&self) -> u64 {
        self.sat_requests + self.street_requests
    }

    pub fn total(&self) -> f64 {
        self.sat_requests as f64 * self.sat_price + self.street_requests as f64 * self.street_price
    }

    /// Adds another ledger's counts, keeping this ledger's prices.
    pub fn absorb(&mut self, other: &CostLedger) {
        self.sat_requests += other.sat_requests;
        self.street_requests += other.street_requests;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub n_coordinates: u64,
    pub sat_requests: u64,
    pub street_requests: u64,
    pub requests: u64,
    pub cost: f64,
}

/// One satellite and four street requests per coordinate.
pub fn estimate_cost(n_coordinates: u64, pricing: &PricingModel) -> CostEstimate {
    let sat_requests = n_coordinates;
    let street_requests = STREET_HEADINGS.len() as u64 * n_coordinates;
    CostEstimate {
        n_coordinates,
        sat_requests,
        street_requests,
        requests: sat_requests + street_requests,
        cost: sat_requests as f64 * pricing.sat_price + street_requests as f64 * pricing.street_price,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn asu() -> GeoPoint {
        GeoPoint::new(33.4184, -111.9328).unwrap()
    }

    #[test]
    fn satellite_canonical_form() {
        let r = build_satellite_request(asu(), 21, 640).unwrap();
        assert_eq!(
            r.canonical(),
            "staticmap?center=33.418400,-111.932800&zoom=21&size=640x640&maptype=satellite"
        );
        assert!(r.canonical().ends_with("center=33.418400,-111.932800&zoom=21&size=640x640&maptype=satellite"));
        assert_eq!(r.canonical(), build_satellite_request(asu(), 21, 640).unwrap().canonical());
        assert!(!r.canonical().contains("key="));
        assert_eq!(r.cache_key().len(), 64);
    }

    #[test]
    fn size_and_zoom_limits() {
        assert!(matches!(ImageryRequest::street(asu(), 0, 90, 641), Err(ImageryError::Size(641))));
        assert!(matches!(build_street_requests(asu(), 641), Err(ImageryError::Size(641))));
        assert!(matches!(build_satellite_request(asu(), 21, 0), Err(ImageryError::Size(0))));
        assert!(matches!(build_satellite_request(asu(), 24, 640), Err(ImageryError::Geo(_))));
        assert!(matches!(ImageryRequest::street(asu(), 45, 90, 640), Err(ImageryError::Heading(45))));
    }

    #[test]
    fn four_street_headings_cover_the_horizon() {
        let reqs = build_street_requests(asu(), 640).unwrap();
        let mut headings = Vec::new();
        let mut fov_total = 0;
        for r in &reqs {
            match r.kind {
                RequestKind::Street { heading, fov } => {
                    headings.push(heading);
                    fov_total += fov;
                }
                _ => panic!("not a street request"),
            }
            assert_eq!(r.size, 640);
        }
        assert_eq!(headings, vec![0, 90, 180, 270]);
        assert_eq!(fov_total, 360);
    }

    #[test]
    fn distinct_points_give_distinct_keys() {
        let other = GeoPoint::new(33.4185, -111.9328).unwrap();
        let keys: HashSet<String> = build_street_requests(asu(), 640)
            .unwrap()
            .iter()
            .chain(build_street_requests(other, 640).unwrap().iter())
            .map(|r| r.cache_key())
            .collect();
        assert_eq!(keys.len(), 8);
    }

    #[test]
    fn negative_zero_renders_stably() {
        let a = ImageryRequest::satellite(GeoPoint::new(-0.0000001, 0.0).unwrap(), 21, 640).unwrap();
        let b = ImageryRequest::satellite(GeoPoint::new(0.0, 0.0).unwrap(), 21, 640).unwrap();
        assert_eq!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn cost_examples() {
        let p = PricingModel::default();
        let zero = estimate_cost(0, &p);
        assert_eq!((zero.requests, zero.cost), (0, 0.0));
        let one = estimate_cost(1, &p);
        assert_eq!(one.requests, 5);
        assert!((one.cost - 0.030).abs() < 1e-12);
        let asu = estimate_cost(1155, &p);
        assert_eq!(asu.requests, 5775);
        assert!((asu.cost - 34.65).abs() < 1e-9);
    }

    #[test]
    fn ledger_total() {
        let mut l = CostLedger::new(PricingModel::default());
        l.record(&build_satellite_request(asu(), 21, 640).unwrap());
        for r in build_street_requests(asu(), 640).unwrap() {
            l.record(&r);
        }
        assert_eq!((l.sat_requests, l.street_requests), (1, 4));
        assert!((l.total() - 0.030).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cost_is_linear(n in 0u64..10_000) {
            let p = PricingModel::default();
            let e = estimate_cost(n, &p);
            prop_assert_eq!(e.requests, 5 * n);
            prop_assert!((e.cost - n as f64 * estimate_cost(1, &p).cost).abs() < 1e-9);
        }
    }
}
