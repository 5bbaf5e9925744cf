//! Detector backends: satellite quadrant classification and street-level
//! instance detection, plus the confidence floor applied to their output.

mod external;
mod fixture;
mod heuristic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

pub use external::{ExternalProcessBackend, WireDetection, PROTOCOL_VERSION};
pub use fixture::{FixtureBackend, FixtureFile};
pub use heuristic::HeuristicBackend;

/// Default detection floor, inclusive.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.75;
/// Largest street image the backends accept, per side.
pub const MAX_STREET_PX: u32 = 640;

/// The three object classes that make a location usable for parkour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionClass {
    ShortWall,
    Railing,
    Stairs,
}

impl DetectionClass {
    pub const ALL: [DetectionClass; 3] = [
        DetectionClass::ShortWall,
        DetectionClass::Railing,
        DetectionClass::Stairs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectionClass::ShortWall => "short_wall",
            DetectionClass::Railing => "railing",
            DetectionClass::Stairs => "stairs",
        }
    }

    /// Parses the exact wire label used by backends.
    pub fn from_wire(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == label)
    }
}

impl std::fmt::Display for DetectionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: DetectionClass,
    pub confidence: f64,
    /// Pixel vertices `[x, y]`, y down. Not required to be simple.
    pub polygon: Vec<[f64; 2]>,
}

impl Detection {
    /// Checks the confidence range and that the polygon has at least three
    /// vertices inside a `width`×`height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if self.polygon.len() < 3 {
            return Err(format!("polygon has {} vertices, need at least 3", self.polygon.len()));
        }
        for &[x, y] in &self.polygon {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..=width as f64).contains(&x)
                && (0.0..=height as f64).contains(&y);
            if !inside {
                return Err(format!("vertex ({x}, {y}) outside {width}x{height} image"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    /// Provenance of the source image (cache key or file name).
    pub image: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(image: impl Into<String>) -> Self {
        DetectionSet {
            image: image.into(),
            detections: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn count(&self, class: DetectionClass) -> usize {
        self.detections.iter().filter(|d| d.class == class).count()
    }
}

/// Keeps detections with `confidence >= min_confidence`.
pub fn filter_confidence(set: &DetectionSet, min_confidence: f64) -> DetectionSet {
    DetectionSet {
        image: set.image.clone(),
        detections: set
            .detections
            .iter()
            .filter(|d| d.confidence >= min_confidence)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteScore {
    /// Top-left, top-right, bottom-left, bottom-right.
    pub quadrant_probs: [f64; 4],
    pub max_prob: f64,
}

impl SatelliteScore {
    pub fn from_probs(quadrant_probs: [f64; 4]) -> Self {
        let max_prob = quadrant_probs.iter().copied().fold(0.0, f64::max);
        SatelliteScore {
            quadrant_probs,
            max_prob,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend} has no fixture for image {image}")]
    MissingFixture { backend: String, image: String },
    #[error("backend {backend} returned unknown label {label:?} for image {image}")]
    UnknownLabel {
        backend: String,
        image: String,
        label: String,
    },
    #[error("backend {backend} returned an invalid result for image {image}: {reason}")]
    InvalidOutput {
        backend: String,
        image: String,
        reason: String,
    },
    #[error("backend {backend} failed on image {image}: {message}")]
    Failed {
        backend: String,
        image: String,
        message: String,
    },
    #[error("image {image} is {width}x{height}; {expected}")]
    BadInput {
        image: String,
        width: u32,
        height: u32,
        expected: String,
    },
}

/// Inference backend for both imagery kinds.
///
/// Implementations must be deterministic for a fixed backend identity and
/// input, so that replaying a survey from cache reproduces its records.
pub trait DetectorBackend: Send + Sync {
    /// Stable identity, recorded alongside results.
    fn id(&self) -> &str;

    /// Probability that a 256×256 satellite quadrant shows a usable spot.
    /// `image` is the provenance of the parent tile, `quadrant` its index.
    fn classify_quadrant(&self, tile: &Raster, image: &str, quadrant: usize) -> Result<f64, BackendError>;

    /// Raw, unfiltered detections for one street image.
    fn detect_street(&self, img: &Raster, image: &str) -> Result<Vec<Detection>, BackendError>;

    /// Whether one instance may serve concurrent callers. Backends that
    /// return false are serialized by the caller.
    fn shareable(&self) -> bool {
        true
    }
}

/// Classifies the four quadrants of a satellite tile and exposes the maximum.
pub fn classify_tile(
    quadrants: &crate::preprocess::QuadrantSet,
    backend: &dyn DetectorBackend,
) -> Result<SatelliteScore, BackendError> {
    let mut probs = [0.0; 4];
    for (i, tile) in quadrants.tiles.iter().enumerate() {
        if tile.dimensions() != (256, 256) {
            return Err(BackendError::BadInput {
                image: quadrants.parent.clone(),
                width: tile.width(),
                height: tile.height(),
                expected: "quadrants must be 256x256".into(),
            });
        }
        let p = backend.classify_quadrant(tile, &quadrants.parent, i)?;
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(BackendError::InvalidOutput {
                backend: backend.id().to_string(),
                image: quadrants.parent.clone(),
                reason: format!("quadrant {i} probability {p} outside [0, 1]"),
            });
        }
        probs[i] = p;
    }
    Ok(SatelliteScore::from_probs(probs))
}

/// Runs street detection, validates every detection against the image
/// bounds, and applies the inclusive confidence floor.
pub fn segment_street(
    img: &Raster,
    image: &str,
    backend: &dyn DetectorBackend,
    min_confidence: f64,
) -> Result<DetectionSet, BackendError> {
    let (w, h) = img.dimensions();
    if w > MAX_STREET_PX || h > MAX_STREET_PX {
        return Err(BackendError::BadInput {
            image: image.to_string(),
            width: w,
            height: h,
            expected: format!("street images are at most {MAX_STREET_PX}x{MAX_STREET_PX}"),
        });
    }
    let raw = backend.detect_street(img, image)?;
    for d in &raw {
        d.validate(w, h).map_err(|reason| BackendError::InvalidOutput {
            backend: backend.id().to_string(),
            image: image.to_string(),
            reason,
        })?;
    }
    let set = DetectionSet {
        image: image.to_string(),
        detections: raw,
    };
    Ok(filter_confidence(&set, min_confidence))
}
