use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::external::{decode_detections, WireDetection};
use super::{BackendError, Detection, DetectorBackend};
use crate::annotations::{self, AnnotatedImage, AnnotationError};
use crate::raster::Raster;

/// On-disk fixture document for [`FixtureBackend`].
///
/// ```json
/// { "schema_version": 1,
///   "satellite": { "<image>": [0.1, 0.9, 0.2, 0.3] },
///   "street": { "<image>": [ { "class": "railing", "confidence": 0.9,
///                              "polygon": [[0,0],[10,0],[10,10]] } ] } }
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    pub schema_version: u32,
    #[serde(default)]
    pub satellite: HashMap<String, [f64; 4]>,
    #[serde(default)]
    pub street: HashMap<String, Vec<WireDetection>>,
}

/// Replays recorded backend output keyed by image provenance.
///
/// Street lookups match either the exact provenance or a file name whose stem
/// equals it, so VIA projects annotating `<key>.png` replay under `<key>`.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    id: String,
    satellite: HashMap<String, [f64; 4]>,
    street: HashMap<String, Vec<Detection>>,
}

fn stem(name: &str) -> &str {
    match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    }
}

impl FixtureBackend {
    pub fn new(id: impl Into<String>) -> Self {
        FixtureBackend {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn with_satellite(mut self, image: impl Into<String>, probs: [f64; 4]) -> Self {
        self.satellite.insert(image.into(), probs);
        self
    }

    pub fn with_street(mut self, image: impl Into<String>, detections: Vec<Detection>) -> Self {
        self.street.insert(image.into(), detections);
        self
    }

    pub fn from_fixture_file(id: impl Into<String>, file: FixtureFile) -> Result<Self, BackendError> {
        let id = id.into();
        let mut street = HashMap::new();
        for (image, wire) in file.street {
            let dets = decode_detections(&id, &image, wire)?;
            street.insert(image, dets);
        }
        Ok(FixtureBackend {
            id,
            satellite: file.satellite,
            street,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let fail = |message: String| BackendError::Failed {
            backend: "fixture".into(),
            image: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let file: FixtureFile = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        Self::from_fixture_file("fixture", file)
    }

    /// Adds street fixtures from annotated images at a fixed confidence.
    pub fn extend_from_annotations(
        &mut self,
        images: &[AnnotatedImage],
        confidence: f64,
    ) -> Result<(), AnnotationError> {
        for img in images {
            let set = annotations::to_detection_set(img, confidence)?;
            self.street.insert(stem(&img.filename).to_string(), set.detections);
        }
        Ok(())
    }

    fn lookup_street(&self, image: &str) -> Option<&Vec<Detection>> {
        self.street.get(image).or_else(|| self.street.get(stem(image)))
    }
}

impl DetectorBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn classify_quadrant(&self, _tile: &Raster, image: &str, quadrant: usize) -> Result<f64, BackendError> {
        self.satellite
            .get(image)
            .map(|p| p[quadrant])
            .ok_or_else(|| BackendError::MissingFixture {
                backend: self.id.clone(),
                image: image.to_string(),
            })
    }

    fn detect_street(&self, _img: &Raster, image: &str) -> Result<Vec<Detection>, BackendError> {
        self.lookup_street(image)
            .cloned()
            .ok_or_else(|| BackendError::MissingFixture {
                backend: self.id.clone(),
                image: image.to_string(),
            })
    }
}
