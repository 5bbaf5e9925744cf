use std::str::FromStr;

use serde_json::{json, Value};

use super::{CandidateStatus, SpotCandidate};

/// Axis-aligned lon/lat box, inclusive on every edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }
}

impl FromStr for BBox {
    type Err = String;

    /// `minLon,minLat,maxLon,maxLat`, the GeoJSON bbox order.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bbox {s:?}: {e}"))?;
        let [min_lon, min_lat, max_lon, max_lat] = parts[..] else {
            return Err(format!("bbox {s:?}: expected 4 comma-separated numbers"));
        };
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(format!("bbox {s:?}: non-finite value"));
        }
        if min_lon > max_lon || min_lat > max_lat {
            return Err(format!("bbox {s:?}: min exceeds max"));
        }
        if !(-90.0..=90.0).contains(&min_lat) || !(-90.0..=90.0).contains(&max_lat) {
            return Err(format!("bbox {s:?}: latitude out of range"));
        }
        if !(-180.0..=180.0).contains(&min_lon) || !(-180.0..=180.0).contains(&max_lon) {
            return Err(format!("bbox {s:?}: longitude out of range"));
        }
        Ok(BBox {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateFilter {
    pub survey_id: Option<String>,
    pub status: Option<CandidateStatus>,
    pub positive: Option<bool>,
    pub min_total: Option<u32>,
    pub bbox: Option<BBox>,
}

impl CandidateFilter {
    pub fn matches(&self, c: &SpotCandidate) -> bool {
        self.survey_id.as_ref().is_none_or(|s| *s == c.survey_id)
            && self.status.is_none_or(|s| s == c.status)
            && self.positive.is_none_or(|p| p == c.score.positive)
            && self.min_total.is_none_or(|m| c.score.counts.total >= m)
            && self.bbox.is_none_or(|b| b.contains(c.point.lat, c.point.lon))
    }
}

/// RFC 7946 FeatureCollection with one Point per candidate.
pub fn export_geojson(candidates: &[SpotCandidate]) -> Value {
    let features: Vec<Value> = candidates
        .iter()
        .map(|c| {
            let counts = &c.score.counts;
            json!({
                "type": "Feature",
                "id": c.id,
                "geometry": {
                    "type": "Point",
                    "coordinates": [c.point.lon, c.point.lat],
                },
                "properties": {
                    "id": c.id,
                    "survey_id": c.survey_id,
                    "grid_index": c.grid_index,
                    "status": c.status.as_str(),
                    "positive": c.score.positive,
                    "total_count": counts.total,
                    "short_wall": counts.short_wall,
                    "railing": counts.railing,
                    "stairs": counts.stairs,
                    "probability": c.score.probability,
                    "sat_max_prob": c.score.sat.map(|s| s.max_prob),
                    "verdict_note": c.verdict_note,
                },
            })
        })
        .collect();
    json!({
        "type": "FeatureCollection",
        "features": features,
    })
}

/// Candidate ids in feature order, or an error if the document is not a
/// FeatureCollection of Points carrying an `id` property.
pub fn feature_ids(doc: &Value) -> Result<Vec<String>, String> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err("not a FeatureCollection".into());
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or("missing features array")?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.get("type").and_then(Value::as_str) != Some("Feature") {
                return Err(format!("feature {i}: type is not Feature"));
            }
            let geom = f.get("geometry").ok_or(format!("feature {i}: no geometry"))?;
            if geom.get("type").and_then(Value::as_str) != Some("Point") {
                return Err(format!("feature {i}: geometry is not a Point"));
            }
            let coords = geom
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or(format!("feature {i}: no coordinates"))?;
            let (lon, lat) = match coords.as_slice() {
                [lon, lat] => (lon.as_f64(), lat.as_f64()),
                _ => (None, None),
            };
            match (lon, lat) {
                (Some(lon), Some(lat)) if (-180.0..=180.0).contains(&lon) && (-90.0..=90.0).contains(&lat) => {}
                _ => return Err(format!("feature {i}: coordinates must be [lon, lat]")),
            }
            f.pointer("/properties/id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or(format!("feature {i}: missing properties.id"))
        })
        .collect()
}
