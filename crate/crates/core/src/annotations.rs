//! VGG Image Annotator (VIA 2.x) project parsing.
//!
//! Both the full project save (`{"_via_settings": .., "_via_img_metadata": {..}}`)
//! and the bare annotation export (the image map itself) are accepted. Each
//! image entry looks like
//!
//! ```json
//! "street_0.png1234": {
//!   "filename": "street_0.png", "size": 1234, "file_attributes": {},
//!   "regions": [ { "shape_attributes": { "name": "polygon",
//!                                        "all_points_x": [1, 9, 9],
//!                                        "all_points_y": [1, 1, 9] },
//!                  "region_attributes": { "type": "rail" } } ] }
//! ```

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::detectors::{Detection, DetectionClass, DetectionSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("malformed VIA JSON at byte {offset} (line {line}, column {column}): {message}")]
    Json {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("VIA project layout: {0}")]
    Layout(String),
    #[error("image {image}, region {region}: {message}")]
    Region {
        image: String,
        region: usize,
        message: String,
    },
    #[error("image {image}, region {region}: degenerate polygon: {reason}")]
    DegeneratePolygon {
        image: String,
        region: usize,
        reason: String,
    },
    #[error("image {image}: unmappable class labels {labels:?}")]
    UnmappableLabels { image: String, labels: Vec<String> },
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Vertices as `[x, y]` pixel pairs.
    pub polygon: Vec<[f64; 2]>,
    pub class_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub filename: String,
    pub size: Option<u64>,
    pub regions: Vec<Region>,
}

/// A region skipped during parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct ViaWarning {
    pub image: String,
    pub region: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViaProject {
    pub images: Vec<AnnotatedImage>,
    pub warnings: Vec<ViaWarning>,
}

/// Maps a free-form VIA label onto the closed class set, case-insensitively.
pub fn map_label(label: &str) -> Option<DetectionClass> {
    let norm = label.trim().to_lowercase().replace([' ', '-'], "_");
    match norm.as_str() {
        "wall" | "walls" | "short_wall" | "short_walls" | "small_wall" | "small_walls" => {
            Some(DetectionClass::ShortWall)
        }
        "rail" | "rails" | "railing" | "railings" => Some(DetectionClass::Railing),
        "stairs" | "stair" => Some(DetectionClass::Stairs),
        _ => None,
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    before + column.saturating_sub(1)
}

fn points(shape: &Map<String, Value>, key: &str) -> Result<Vec<f64>, String> {
    match shape.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| format!("{key} holds a non-numeric value {v}")))
            .collect(),
        Some(other) => Err(format!("{key} is not an array: {other}")),
        None => Err(format!("missing {key}")),
    }
}

/// Candidate label strings from region attributes, in document order.
/// String values count as labels; object values (checkbox attributes)
/// contribute their keys that are set to true.
fn label_candidates(attrs: &Map<String, Value>) -> Vec<String> {
    let mut out = Vec::new();
    for value in attrs.values() {
        match value {
            Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
            Value::Object(opts) => {
                out.extend(
                    opts.iter()
                        .filter(|(_, v)| v.as_bool() == Some(true))
                        .map(|(k, _)| k.clone()),
                );
            }
            _ => {}
        }
    }
    out
}

fn parse_region(image: &str, idx: usize, region: &Value) -> Result<Option<Region>, AnnotationError> {
    let err = |message: String| AnnotationError::Region {
        image: image.to_string(),
        region: idx,
        message,
    };
    let shape = region
        .get("shape_attributes")
        .and_then(Value::as_object)
        .ok_or_else(|| err("missing shape_attributes".into()))?;
    let name = shape.get("name").and_then(Value::as_str).unwrap_or("");
    if name != "polygon" {
        return Ok(None);
    }
    let xs = points(shape, "all_points_x").map_err(err)?;
    let ys = points(shape, "all_points_y").map_err(err)?;
    if xs.len() != ys.len() {
        return Err(err(format!(
            "all_points_x has {} values but all_points_y has {}",
            xs.len(),
            ys.len()
        )));
    }
    let degenerate = |reason: String| AnnotationError::DegeneratePolygon {
        image: image.to_string(),
        region: idx,
        reason,
    };
    if xs.len() < 3 {
        return Err(degenerate(format!("{} vertices, need at least 3", xs.len())));
    }
    if let Some(v) = xs.iter().chain(&ys).find(|v| !v.is_finite()) {
        return Err(degenerate(format!("non-finite vertex coordinate {v}")));
    }
    // Shoelace; zero means every vertex is collinear (or coincident).
    let n = xs.len();
    let twice_area: f64 = (0..n).map(|i| xs[i] * ys[(i + 1) % n] - xs[(i + 1) % n] * ys[i]).sum();
    if twice_area == 0.0 {
        return Err(degenerate("zero area".into()));
    }
    let attrs = region
        .get("region_attributes")
        .and_then(Value::as_object)
        .cloned()
        .unwrap_or_default();
    let candidates = label_candidates(&attrs);
    let class_label = candidates
        .iter()
        .find(|l| map_label(l).is_some())
        .or_else(|| candidates.first())
        .cloned()
        .ok_or_else(|| err("region has no class label".into()))?;
    Ok(Some(Region {
        polygon: xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect(),
        class_label,
    }))
}

/// Parses a VIA 2.x project or annotation export.
pub fn parse_via(project_text: &str) -> Result<ViaProject, AnnotationError> {
    let root: Value = serde_json::from_str(project_text).map_err(|e| AnnotationError::Json {
        offset: byte_offset(project_text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = root
        .as_object()
        .ok_or_else(|| AnnotationError::Layout("top level is not an object".into()))?;
    let entries = match root.get("_via_img_metadata") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(AnnotationError::Layout("_via_img_metadata is not an object".into())),
        None => root,
    };

    let mut project = ViaProject::default();
    for (key, entry) in entries {
        if key.starts_with("_via_") {
            continue;
        }
        let entry = entry
            .as_object()
            .ok_or_else(|| AnnotationError::Layout(format!("entry {key} is not an object")))?;
        let filename = entry
            .get("filename")
            .and_then(Value::as_str)
            .ok_or_else(|| AnnotationError::Layout(format!("entry {key} has no filename")))?
            .to_string();
        let size = entry.get("size").and_then(|v| match v {
            Value::Number(n) => n.as_u64(),
            Value::String(s) => s.parse().ok(),
            _ => None,
        });
        let regions = match entry.get("regions") {
            Some(Value::Array(r)) => r.as_slice(),
            None | Some(Value::Null) => &[],
            Some(_) => {
                return Err(AnnotationError::Layout(format!(
                    "entry {key}: regions must be an array (VIA 1.x object maps are not supported)"
                )))
            }
        };
        let mut parsed = Vec::with_capacity(regions.len());
        for (idx, region) in regions.iter().enumerate() {
            match parse_region(&filename, idx, region)? {
                Some(r) => parsed.push(r),
                None => {
                    let shape = region
                        .pointer("/shape_attributes/name")
                        .and_then(Value::as_str)
                        .unwrap_or("unnamed");
                    let w = ViaWarning {
                        image: filename.clone(),
                        region: idx,
                        message: format!("skipped {shape} region; only polygons are supported"),
                    };
                    log::warn!("{}: region {}: {}", w.image, w.region, w.message);
                    project.warnings.push(w);
                }
            }
        }
        project.images.push(AnnotatedImage {
            filename,
            size,
            regions: parsed,
        });
    }
    Ok(project)
}

/// Renders images as a VIA annotation export (the subset [`parse_via`] reads).
pub fn to_via_json(images: &[AnnotatedImage]) -> String {
    let mut map = Map::new();
    for img in images {
        let key = format!("{}{}", img.filename, img.size.map(|s| s.to_string()).unwrap_or_default());
        let regions: Vec<Value> = img
            .regions
            .iter()
            .map(|r| {
                json!({
                    "shape_attributes": {
                        "name": "polygon",
                        "all_points_x": r.polygon.iter().map(|p| p[0]).collect::<Vec<_>>(),
                        "all_points_y": r.polygon.iter().map(|p| p[1]).collect::<Vec<_>>(),
                    },
                    "region_attributes": { "type": r.class_label },
                })
            })
            .collect();
        let mut entry = json!({ "filename": img.filename, "regions": regions, "file_attributes": {} });
        if let Some(size) = img.size {
            entry["size"] = json!(size);
        }
        map.insert(key, entry);
    }
    serde_json::to_string_pretty(&Value::Object(map)).expect("json values serialize")
}

/// One detection per region at a fixed confidence.
pub fn to_detection_set(img: &AnnotatedImage, confidence: f64) -> Result<DetectionSet, AnnotationError> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(AnnotationError::Confidence(confidence));
    }
    let mut unmappable = Vec::new();
    let mut detections = Vec::with_capacity(img.regions.len());
    for r in &img.regions {
        match map_label(&r.class_label) {
            Some(class) => detections.push(Detection {
                class,
                confidence,
                polygon: r.polygon.clone(),
            }),
            None => unmappable.push(r.class_label.clone()),
        }
    }
    if !unmappable.is_empty() {
        return Err(AnnotationError::UnmappableLabels {
            image: img.filename.clone(),
            labels: unmappable,
        });
    }
    Ok(DetectionSet {
        image: img.filename.clone(),
        detections,
    })
}
