//! Deterministic generators for the committed test fixtures.
//!
//! `tests/fixtures.rs` checks that the files under `tests/fixtures/` are
//! exactly what these functions produce; run it with `--ignored` to rewrite
//! them after a deliberate change.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use serde_json::{json, Map, Value};

use spotfinder_core::annotations::{to_via_json, AnnotatedImage, Region};
use spotfinder_core::clock::FixedClock;
use spotfinder_core::geo::{make_grid, GeoPoint, GridSpec};
use spotfinder_core::imagery::{build_satellite_request, build_street_requests, ImageCache, ImageSource};
use spotfinder_core::raster::Raster;
use spotfinder_core::scoring::{combine, ClassCounts, ScoringConfig};
use spotfinder_core::store::{
    candidate_id, CandidateStatus, CoordinateOutcome, SpotCandidate, SpotStore, SurveyRecord,
};
use spotfinder_core::imagery::{CostLedger, PricingModel};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap()
}

pub fn fixed_clock() -> Arc<FixedClock> {
    Arc::new(FixedClock(epoch()))
}

/// What a street heading holds in the 9-coordinate fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Heading {
    /// An image whose detections come from the VIA project.
    Via(u32),
    /// An image whose detections come from the backend fixture document,
    /// `(kept, below_floor)` detections around the 0.75 floor.
    Recorded(u32, u32),
    /// A cached "no coverage" answer.
    NoCoverage,
    /// Nothing in the fixture directory at all.
    Missing,
}

use Heading::*;

pub const SURVEY9_CENTER: (f64, f64) = (33.4184, -111.9328);
pub const SURVEY9_HALF_EXTENT: f64 = 40.0;
pub const SURVEY9_SPACING: f64 = 40.0;

/// Street content per lattice index (row-major from the south-west).
pub const SURVEY9: [[Heading; 4]; 9] = [
    [Via(4), Via(6), Via(5), Via(6)],              // 21: just over T
    [Via(5), Via(5), Via(5), Via(5)],              // 20: on the boundary
    [Via(9), Via(8), Via(10), Via(8)],             // 35
    [NoCoverage, Missing, NoCoverage, Missing],    // no street coverage
    [Recorded(3, 2), Recorded(3, 2), Recorded(3, 1), Recorded(3, 0)], // 12
    [Via(4), NoCoverage, Via(4), Missing],         // 8, partial coverage
    [Via(0), Via(0), Via(0), Via(0)],              // 0
    [Via(5), Via(5), Via(5), Via(4)],              // 19
    [Via(2), Via(1), Via(1), Via(1)],              // 5
];

pub const SURVEY9_SAT: [[f64; 4]; 9] = [
    [0.91, 0.40, 0.22, 0.63],
    [0.30, 0.55, 0.12, 0.08],
    [0.77, 0.81, 0.95, 0.66],
    [0.05, 0.02, 0.11, 0.09],
    [0.48, 0.51, 0.33, 0.20],
    [0.14, 0.27, 0.35, 0.61],
    [0.02, 0.03, 0.01, 0.04],
    [0.58, 0.44, 0.49, 0.71],
    [0.19, 0.26, 0.13, 0.08],
];

pub fn survey9_totals() -> [u32; 9] {
    SURVEY9.map(|hs| {
        hs.iter()
            .map(|h| match *h {
                Via(n) => n,
                Recorded(k, _) => k,
                NoCoverage | Missing => 0,
            })
            .sum()
    })
}

pub fn survey9_points() -> Vec<GeoPoint> {
    make_grid(&GridSpec {
        center: GeoPoint::new(SURVEY9_CENTER.0, SURVEY9_CENTER.1).unwrap(),
        half_extent: SURVEY9_HALF_EXTENT,
        spacing: SURVEY9_SPACING,
    })
    .unwrap()
}

/// Mildly textured image so that every fixture file is distinct.
fn image(seed: u32) -> Raster {
    let base = [(37 * seed % 200) as u8 + 30, (91 * seed % 200) as u8 + 30, (53 * seed % 200) as u8 + 30];
    Raster::from_fn(640, 640, |x, y| {
        let band = ((x / 80 + y / 80 + seed) % 4) as u8 * 12;
        [base[0].wrapping_add(band), base[1], base[2].wrapping_sub(band)]
    })
    .unwrap()
}

const LABELS: [&str; 3] = ["short wall", "Railing", "stairs"];
const CLASSES: [&str; 3] = ["short_wall", "railing", "stairs"];

fn polygon(k: u32) -> Vec<[f64; 2]> {
    let x = (20 + 60 * (k % 10)) as f64;
    let y = (40 + 90 * (k / 10)) as f64;
    vec![[x, y], [x + 40.0, y], [x + 40.0, y + 25.0], [x, y + 25.0]]
}

const SURVEY9_TOML: &str = r#"# Nine-coordinate survey served entirely from fixtures.
version = 1
survey_id = "survey9"
center = { lat = 33.4184, lon = -111.9328 }
half_extent_m = 40.0
spacing_m = 40.0
workers = 3
cache_dir = "cache"
store_dir = "store"

[rate_limit]
max_in_flight = 4
min_spacing_ms = 0

[provider]
kind = "fixture"
dir = "imagery"

[backend]
kind = "fixture"
file = "backend.json"
via = "street.via.json"
via_confidence = 0.9
"#;

/// Writes the 9-coordinate survey fixture: `survey.toml`, `imagery/`,
/// `backend.json` and `street.via.json`.
pub fn write_survey9(dir: &Path) {
    let imagery = ImageCache::new(dir.join("imagery"));
    let mut via: Vec<AnnotatedImage> = Vec::new();
    let mut sat_fixture = Map::new();
    let mut street_fixture = Map::new();

    for (i, point) in survey9_points().into_iter().enumerate() {
        let sat = build_satellite_request(point, 21, 640).unwrap();
        imagery.put_image(&sat, &image(i as u32 * 5), ImageSource::Fixture, epoch()).unwrap();
        sat_fixture.insert(sat.cache_key(), json!(SURVEY9_SAT[i]));

        for (h, req) in build_street_requests(point, 640).unwrap().iter().enumerate() {
            let key = req.cache_key();
            let seed = i as u32 * 5 + h as u32 + 1;
            match SURVEY9[i][h] {
                Via(n) => {
                    imagery.put_image(req, &image(seed), ImageSource::Fixture, epoch()).unwrap();
                    via.push(AnnotatedImage {
                        filename: format!("{key}.png"),
                        size: None,
                        regions: (0..n)
                            .map(|k| Region {
                                polygon: polygon(k),
                                class_label: LABELS[((k + seed) % 3) as usize].to_string(),
                            })
                            .collect(),
                    });
                }
                Recorded(kept, below) => {
                    imagery.put_image(req, &image(seed), ImageSource::Fixture, epoch()).unwrap();
                    let confs = [0.75, 0.9, 0.99];
                    let mut dets: Vec<Value> = (0..kept)
                        .map(|k| {
                            json!({"class": CLASSES[(k % 3) as usize], "confidence": confs[(k % 3) as usize], "polygon": polygon(k)})
                        })
                        .collect();
                    dets.extend((0..below).map(|k| {
                        let conf = [0.74, 0.5][(k % 2) as usize];
                        json!({"class": "railing", "confidence": conf, "polygon": polygon(kept + k)})
                    }));
                    street_fixture.insert(key, Value::Array(dets));
                }
                NoCoverage => {
                    imagery.put_no_coverage(req, "ZERO_RESULTS", ImageSource::Fixture, epoch()).unwrap();
                }
                Missing => {}
            }
        }
    }

    let backend = json!({
        "schema_version": 1,
        "satellite": sat_fixture,
        "street": street_fixture,
    });
    fs::write(dir.join("backend.json"), serde_json::to_string_pretty(&backend).unwrap() + "\n").unwrap();
    fs::write(dir.join("street.via.json"), to_via_json(&via) + "\n").unwrap();
    fs::write(dir.join("survey.toml"), SURVEY9_TOML).unwrap();
}

pub const PRECISION_SURVEY: &str = "asu";
pub const PRECISION_POSITIVES: u64 = 46;
pub const PRECISION_TRUE: u64 = 28;
pub const PRECISION_NEGATIVES: u64 = 14;

/// Writes a store holding 46 positive and 14 negative unverified
/// candidates, plus `verdicts.json` assigning 28 true and 18 false verdicts
/// to the positives.
pub fn write_precision46(dir: &Path) {
    let store_dir = dir.join("store");
    let _ = fs::remove_dir_all(&store_dir);
    let store = SpotStore::open_with_clock(&store_dir, fixed_clock()).unwrap();
    let center = GeoPoint::new(33.4184, -111.9328).unwrap();
    store
        .register_survey(SurveyRecord {
            id: PRECISION_SURVEY.into(),
            center,
            half_extent: 650.0,
            spacing: 39.874858,
            zoom: 21,
            n_coordinates: PRECISION_POSITIVES + PRECISION_NEGATIVES,
            ledger: CostLedger::new(PricingModel::default()),
            completed: true,
        })
        .unwrap();

    let scoring = ScoringConfig::default();
    let n = PRECISION_POSITIVES + PRECISION_NEGATIVES;
    let mut verdicts = Map::new();
    for i in 0..n {
        let positive = i % 4 != 3 || i >= 4 * PRECISION_NEGATIVES;
        let total = if positive { 21 + (i * 7 % 19) as u32 } else { 3 + (i % 15) as u32 };
        let counts = ClassCounts::new(total / 2, total / 3, total - total / 2 - total / 3);
        let score = combine(None, counts, &scoring).unwrap();
        assert_eq!(score.positive, positive);
        // 8 × 8 block of the lattice around the center, 40 m apart.
        let (row, col) = ((i / 8) as f64 - 3.5, (i % 8) as f64 - 3.5);
        let point = GeoPoint::new(
            center.lat + row * 40.0 / 111_320.0,
            center.lon + col * 40.0 / (111_320.0 * center.lat.to_radians().cos()),
        )
        .unwrap();
        let id = candidate_id(PRECISION_SURVEY, i);
        store
            .upsert_candidate(SpotCandidate {
                id: id.clone(),
                survey_id: PRECISION_SURVEY.into(),
                grid_index: i,
                point,
                score,
                outcome: CoordinateOutcome::Scored,
                imagery: vec![],
                backend: "fixture".into(),
                status: CandidateStatus::Candidate,
                verdict_note: None,
                created_at: epoch(),
                updated_at: epoch(),
            })
            .unwrap();
        if positive {
            // Spread the true verdicts evenly over the positives.
            let k = verdicts.len() as u64;
            let verdict = (k + 1) * PRECISION_TRUE / PRECISION_POSITIVES > k * PRECISION_TRUE / PRECISION_POSITIVES;
            verdicts.insert(id, json!(verdict));
        }
    }
    assert_eq!(verdicts.len() as u64, PRECISION_POSITIVES);
    fs::write(
        dir.join("verdicts.json"),
        serde_json::to_string_pretty(&Value::Object(verdicts)).unwrap() + "\n",
    )
    .unwrap();
}

/// Verdicts in file order: `(candidate id, verdict)`.
pub fn load_verdicts(dir: &Path) -> Vec<(String, bool)> {
    let text = fs::read_to_string(dir.join("verdicts.json")).unwrap();
    let map: Map<String, Value> = serde_json::from_str(&text).unwrap();
    map.into_iter().map(|(k, v)| (k, v.as_bool().unwrap())).collect()
}

/// Recursively copies a directory tree.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Every regular file under `dir`, relative path to contents, sorted.
pub fn tree_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
