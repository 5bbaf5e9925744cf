//! File-exchange protocol for detectors that run as a separate process.
//!
//! For every call the backend writes the input raster as PNG plus a request
//! document into a scratch directory, then runs
//! `<command...> <request.json> <response.json>` and reads the response.
//!
//! Request:
//! ```json
//! { "schema_version": 1, "image_path": "/tmp/.../input.png", "kind": "street" }
//! ```
//! `kind` is `"street"` or `"satellite_quadrant"`. Responses are
//! `{ "schema_version": 1, "detections": [ {"class", "confidence", "polygon"} ] }`
//! for street images and `{ "schema_version": 1, "probability": 0.4 }` for
//! quadrants. Classes outside `short_wall`, `railing`, `stairs` are errors.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{BackendError, Detection, DetectionClass, DetectorBackend};
use crate::raster::Raster;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class: String,
    pub confidence: f64,
    pub polygon: Vec<[f64; 2]>,
}

pub(crate) fn decode_detections(
    backend: &str,
    image: &str,
    wire: Vec<WireDetection>,
) -> Result<Vec<Detection>, BackendError> {
    wire.into_iter()
        .map(|w| {
            let class = DetectionClass::from_wire(&w.class).ok_or_else(|| BackendError::UnknownLabel {
                backend: backend.to_string(),
                image: image.to_string(),
                label: w.class.clone(),
            })?;
            Ok(Detection {
                class,
                confidence: w.confidence,
                polygon: w.polygon,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Request<'a> {
    schema_version: u32,
    image_path: &'a Path,
    kind: &'a str,
}

#[derive(Debug, Deserialize)]
struct Response {
    schema_version: u32,
    #[serde(default)]
    detections: Option<Vec<WireDetection>>,
    #[serde(default)]
    probability: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExternalProcessBackend {
    id: String,
    command: Vec<String>,
    scratch: PathBuf,
}

static CALLS: AtomicU64 = AtomicU64::new(0);

impl ExternalProcessBackend {
    /// `command[0]` is the program; remaining entries are leading arguments.
    pub fn new(id: impl Into<String>, command: Vec<String>, scratch: impl Into<PathBuf>) -> Self {
        assert!(!command.is_empty(), "external backend needs a command");
        ExternalProcessBackend {
            id: id.into(),
            command,
            scratch: scratch.into(),
        }
    }

    fn fail(&self, image: &str, message: impl Into<String>) -> BackendError {
        BackendError::Failed {
            backend: self.id.clone(),
            image: image.to_string(),
            message: message.into(),
        }
    }

    fn call(&self, img: &Raster, image: &str, kind: &str) -> Result<Response, BackendError> {
        let n = CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = self.scratch.join(format!("call-{}-{n}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| self.fail(image, e.to_string()))?;
        let result = self.call_in(&dir, img, image, kind);
        let _ = std::fs::remove_dir_all(&dir);
        result
    }

    fn call_in(&self, dir: &Path, img: &Raster, image: &str, kind: &str) -> Result<Response, BackendError> {
        let image_path = dir.join("input.png");
        let request_path = dir.join("request.json");
        let response_path = dir.join("response.json");
        let png = img.encode_png().map_err(|e| self.fail(image, e.to_string()))?;
        std::fs::write(&image_path, png).map_err(|e| self.fail(image, e.to_string()))?;
        let request = Request {
            schema_version: PROTOCOL_VERSION,
            image_path: &image_path,
            kind,
        };
        let body = serde_json::to_vec(&request).expect("request serializes");
        std::fs::write(&request_path, body).map_err(|e| self.fail(image, e.to_string()))?;

        let output = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&request_path)
            .arg(&response_path)
            .output()
            .map_err(|e| self.fail(image, format!("spawn {}: {e}", self.command[0])))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(self.fail(image, format!("exited with {}: {}", output.status, stderr.trim())));
        }
        let text = std::fs::read_to_string(&response_path)
            .map_err(|e| self.fail(image, format!("reading response: {e}")))?;
        let response: Response = serde_json::from_str(&text).map_err(|e| BackendError::InvalidOutput {
            backend: self.id.clone(),
            image: image.to_string(),
            reason: e.to_string(),
        })?;
        if response.schema_version != PROTOCOL_VERSION {
            return Err(BackendError::InvalidOutput {
                backend: self.id.clone(),
                image: image.to_string(),
                reason: format!("unsupported schema_version {}", response.schema_version),
            });
        }
        Ok(response)
    }
}

impl DetectorBackend for ExternalProcessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn classify_quadrant(&self, tile: &Raster, image: &str, _quadrant: usize) -> Result<f64, BackendError> {
        let r = self.call(tile, image, "satellite_quadrant")?;
        r.probability.ok_or_else(|| BackendError::InvalidOutput {
            backend: self.id.clone(),
            image: image.to_string(),
            reason: "response has no probability".into(),
        })
    }

    fn detect_street(&self, img: &Raster, image: &str) -> Result<Vec<Detection>, BackendError> {
        let r = self.call(img, image, "street")?;
        let wire = r.detections.ok_or_else(|| BackendError::InvalidOutput {
            backend: self.id.clone(),
            image: image.to_string(),
            reason: "response has no detections".into(),
        })?;
        decode_detections(&self.id, image, wire)
    }
}
