//! Spot database: an append-only JSON Lines event log plus a derived
//! snapshot.
//!
//! Every mutation is appended to `events.jsonl` and synced before the
//! in-memory index changes, so replaying the log always reconstructs the
//! store. `snapshot.json` holds the state as of some sequence number and only
//! shortens replay. One writer at a time; readers share a read lock and see
//! whole events or nothing.
//!
//! Log line layout:
//! ```json
//! {"seq":3,"at":"2024-01-01T00:00:00Z","event":{"type":"verdict_set","id":"…","verdict":true,"note":null}}
//! ```

mod export;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::detectors::Detection;
use crate::geo::{haversine, GeoPoint};
use crate::imagery::CostLedger;
use crate::scoring::SpotScore;

pub use export::{export_geojson, feature_ids, BBox, CandidateFilter};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt event log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("no candidate with id {0}")]
    NotFound(String),
    #[error("unknown survey {0}")]
    UnknownSurvey(String),
    #[error("candidate {id} is already {status:?}")]
    AlreadyVerified { id: String, status: CandidateStatus },
    #[error("candidate {0} has been verified and can no longer be replaced")]
    Immutable(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Candidate,
    VerifiedTrue,
    VerifiedFalse,
}

impl CandidateStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "candidate" => Some(CandidateStatus::Candidate),
            "verified_true" => Some(CandidateStatus::VerifiedTrue),
            "verified_false" => Some(CandidateStatus::VerifiedFalse),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateStatus::Candidate => "candidate",
            CandidateStatus::VerifiedTrue => "verified_true",
            CandidateStatus::VerifiedFalse => "verified_false",
        }
    }

    pub fn is_verified(self) -> bool {
        self != CandidateStatus::Candidate
    }
}

/// How a surveyed coordinate was processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinateOutcome {
    Scored,
    /// No street heading had a panorama; counts are empty.
    NoCoverage,
    /// A backend or transient fetch failure prevented scoring.
    Skipped { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Ok,
    NoCoverage,
    Failed,
}

/// One of the five images behind a coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    /// `sat`, `street0` .. `street3`.
    pub slot: String,
    pub key: String,
    pub canonical_request: String,
    pub size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<u16>,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Filtered detections, street slots only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCandidate {
    pub id: String,
    pub survey_id: String,
    pub grid_index: u64,
    pub point: GeoPoint,
    pub score: SpotScore,
    pub outcome: CoordinateOutcome,
    pub imagery: Vec<ImageRef>,
    pub backend: String,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict_note: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SpotCandidate {
    pub fn image(&self, slot: &str) -> Option<&ImageRef> {
        self.imagery.iter().find(|i| i.slot == slot)
    }
}

/// Stable id from the survey id and the lattice index, so re-running a
/// survey addresses the same records.
pub fn candidate_id(survey_id: &str, grid_index: u64) -> String {
    let digest = Sha256::digest(format!("{survey_id}:{grid_index}").as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub id: String,
    pub center: GeoPoint,
    pub half_extent: f64,
    pub spacing: f64,
    pub zoom: u8,
    pub n_coordinates: u64,
    /// Billable requests summed over every run of the survey.
    pub ledger: CostLedger,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyStats {
    pub n_coordinates: u64,
    pub n_positive: u64,
    pub n_verified_true: u64,
    pub n_verified_false: u64,
    pub n_no_coverage: u64,
    pub n_skipped: u64,
    /// Verified true over all verified; absent until the first verdict.
    pub precision: Option<f64>,
}

impl SurveyStats {
    fn from_candidates<'a>(items: impl Iterator<Item = &'a SpotCandidate>) -> Self {
        let mut s = SurveyStats {
            n_coordinates: 0,
            n_positive: 0,
            n_verified_true: 0,
            n_verified_false: 0,
            n_no_coverage: 0,
            n_skipped: 0,
            precision: None,
        };
        for c in items {
            s.n_coordinates += 1;
            s.n_positive += c.score.positive as u64;
            match c.status {
                CandidateStatus::VerifiedTrue => s.n_verified_true += 1,
                CandidateStatus::VerifiedFalse => s.n_verified_false += 1,
                CandidateStatus::Candidate => {}
            }
            match c.outcome {
                CoordinateOutcome::NoCoverage => s.n_no_coverage += 1,
                CoordinateOutcome::Skipped { .. } => s.n_skipped += 1,
                CoordinateOutcome::Scored => {}
            }
        }
        let verified = s.n_verified_true + s.n_verified_false;
        s.precision = (verified > 0).then(|| s.n_verified_true as f64 / verified as f64);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SurveyRegistered { survey: SurveyRecord },
    CandidateUpserted { candidate: SpotCandidate },
    VerdictSet { id: String, verdict: bool, note: Option<String> },
    NoteUpdated { id: String, note: Option<String> },
    LedgerRecorded { survey_id: String, ledger: CostLedger },
    SurveyCompleted { survey_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub last_seq: u64,
    pub surveys: BTreeMap<String, SurveyRecord>,
    pub candidates: BTreeMap<String, SpotCandidate>,
}

impl StoreState {
    /// The single state transition shared by live writes and replay.
    fn apply(&mut self, line: &LogLine) {
        self.last_seq = line.seq;
        match &line.event {
            Event::SurveyRegistered { survey } => {
                self.surveys.insert(survey.id.clone(), survey.clone());
            }
            Event::CandidateUpserted { candidate } => {
                self.candidates.insert(candidate.id.clone(), candidate.clone());
            }
            Event::VerdictSet { id, verdict, note } => {
                if let Some(c) = self.candidates.get_mut(id) {
                    c.status = if *verdict {
                        CandidateStatus::VerifiedTrue
                    } else {
                        CandidateStatus::VerifiedFalse
                    };
                    if note.is_some() {
                        c.verdict_note = note.clone();
                    }
                    c.updated_at = line.at;
                }
            }
            Event::NoteUpdated { id, note } => {
                if let Some(c) = self.candidates.get_mut(id) {
                    c.verdict_note = note.clone();
                    c.updated_at = line.at;
                }
            }
            Event::LedgerRecorded { survey_id, ledger } => {
                if let Some(s) = self.surveys.get_mut(survey_id) {
                    s.ledger.absorb(ledger);
                }
            }
            Event::SurveyCompleted { survey_id } => {
                if let Some(s) = self.surveys.get_mut(survey_id) {
                    s.completed = true;
                }
            }
        }
    }
}

pub struct SpotStore {
    dir: PathBuf,
    state: RwLock<StoreState>,
    writer: Mutex<File>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for SpotStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpotStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

/// Reads every complete log line. A final line without its newline is a
/// torn write: it is dropped and its byte offset returned for truncation.
fn read_log(path: &Path) -> Result<(Vec<LogLine>, Option<u64>), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut offset = 0u64;
    let mut buf = String::new();
    let mut n = 0usize;
    loop {
        buf.clear();
        let read = reader.read_line(&mut buf).map_err(io_err(path))?;
        if read == 0 {
            return Ok((lines, None));
        }
        n += 1;
        if !buf.ends_with('\n') {
            log::warn!("{}: dropping torn final line {n}", path.display());
            return Ok((lines, Some(offset)));
        }
        let text = buf.trim();
        if !text.is_empty() {
            let line: LogLine = serde_json::from_str(text).map_err(|e| StoreError::CorruptLog {
                line: n,
                message: e.to_string(),
            })?;
            lines.push(line);
        }
        offset += read as u64;
    }
}

/// Rebuilds state purely from the event log, ignoring any snapshot.
pub fn replay_log(dir: &Path) -> Result<StoreState, StoreError> {
    let (lines, _) = read_log(&dir.join(EVENTS_FILE))?;
    let mut state = StoreState::default();
    for line in &lines {
        state.apply(line);
    }
    Ok(state)
}

impl SpotStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with_clock(dir, Arc::new(SystemClock))
    }

    pub fn open_with_clock(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut state = match fs::read_to_string(&snapshot_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreState::default(),
            Err(e) => return Err(io_err(&snapshot_path)(e)),
        };

        let log_path = dir.join(EVENTS_FILE);
        let (lines, torn_at) = read_log(&log_path)?;
        let base = state.last_seq;
        for line in lines.iter().filter(|l| l.seq > base) {
            state.apply(line);
        }
        let mut writer = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        if let Some(offset) = torn_at {
            writer.set_len(offset).map_err(io_err(&log_path))?;
        }
        writer.seek(SeekFrom::End(0)).map_err(io_err(&log_path))?;

        Ok(SpotStore {
            dir,
            state: RwLock::new(state),
            writer: Mutex::new(writer),
            clock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Validates under the writer lock, appends, then updates the index.
    fn commit<T>(
        &self,
        build: impl FnOnce(&StoreState) -> Result<(Event, T), StoreError>,
    ) -> Result<T, StoreError> {
        let mut writer = self.writer.lock().expect("store writer lock");
        let (event, out) = {
            let state = self.state.read().expect("store state lock");
            build(&state)?
        };
        let seq = self.state.read().expect("store state lock").last_seq + 1;
        let line = LogLine {
            seq,
            at: self.clock.now(),
            event,
        };
        let mut text = serde_json::to_string(&line).expect("events serialize");
        text.push('\n');
        let path = self.dir.join(EVENTS_FILE);
        writer.write_all(text.as_bytes()).map_err(io_err(&path))?;
        writer.sync_data().map_err(io_err(&path))?;
        self.state.write().expect("store state lock").apply(&line);
        Ok(out)
    }

    pub fn register_survey(&self, survey: SurveyRecord) -> Result<SurveyRecord, StoreError> {
        self.commit(|_| Ok((Event::SurveyRegistered { survey: survey.clone() }, survey)))
    }

    pub fn survey(&self, id: &str) -> Option<SurveyRecord> {
        self.state.read().expect("store state lock").surveys.get(id).cloned()
    }

    pub fn surveys(&self) -> Vec<SurveyRecord> {
        self.state.read().expect("store state lock").surveys.values().cloned().collect()
    }

    pub fn record_ledger(&self, survey_id: &str, ledger: CostLedger) -> Result<(), StoreError> {
        self.commit(|st| {
            if !st.surveys.contains_key(survey_id) {
                return Err(StoreError::UnknownSurvey(survey_id.to_string()));
            }
            Ok((
                Event::LedgerRecorded {
                    survey_id: survey_id.to_string(),
                    ledger,
                },
                (),
            ))
        })
    }

    pub fn complete_survey(&self, survey_id: &str) -> Result<(), StoreError> {
        self.commit(|st| {
            if !st.surveys.contains_key(survey_id) {
                return Err(StoreError::UnknownSurvey(survey_id.to_string()));
            }
            Ok((
                Event::SurveyCompleted {
                    survey_id: survey_id.to_string(),
                },
                (),
            ))
        })
    }

    /// Inserts or replaces by id. Verified records cannot be replaced.
    pub fn upsert_candidate(&self, candidate: SpotCandidate) -> Result<SpotCandidate, StoreError> {
        if candidate.id.is_empty() {
            return Err(StoreError::Invalid("candidate id is empty".into()));
        }
        candidate
            .point
            .validate()
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.commit(|st| {
            if !st.surveys.contains_key(&candidate.survey_id) {
                return Err(StoreError::UnknownSurvey(candidate.survey_id.clone()));
            }
            if let Some(existing) = st.candidates.get(&candidate.id) {
                if existing.status.is_verified() {
                    return Err(StoreError::Immutable(candidate.id.clone()));
                }
            }
            Ok((
                Event::CandidateUpserted {
                    candidate: candidate.clone(),
                },
                (),
            ))
        })?;
        Ok(self.get(&candidate.id).expect("just inserted"))
    }

    pub fn set_verdict(&self, id: &str, verdict: bool, note: Option<String>) -> Result<SpotCandidate, StoreError> {
        self.commit(|st| {
            let c = st.candidates.get(id).ok_or_else(|| StoreError::NotFound(id.to_string()))?;
            if c.status.is_verified() {
                return Err(StoreError::AlreadyVerified {
                    id: id.to_string(),
                    status: c.status,
                });
            }
            Ok((
                Event::VerdictSet {
                    id: id.to_string(),
                    verdict,
                    note,
                },
                (),
            ))
        })?;
        Ok(self.get(id).expect("verdict target exists"))
    }

    /// The note is the one field that stays editable after a verdict.
    pub fn update_note(&self, id: &str, note: Option<String>) -> Result<SpotCandidate, StoreError> {
        self.commit(|st| {
            if !st.candidates.contains_key(id) {
                return Err(StoreError::NotFound(id.to_string()));
            }
            Ok((
                Event::NoteUpdated {
                    id: id.to_string(),
                    note,
                },
                (),
            ))
        })?;
        Ok(self.get(id).expect("note target exists"))
    }

    pub fn get(&self, id: &str) -> Option<SpotCandidate> {
        self.state.read().expect("store state lock").candidates.get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.state.read().expect("store state lock").candidates.contains_key(id)
    }

    /// Matching candidates ordered by id.
    pub fn list(&self, filter: &CandidateFilter) -> Vec<SpotCandidate> {
        let st = self.state.read().expect("store state lock");
        st.candidates.values().filter(|c| filter.matches(c)).cloned().collect()
    }

    pub fn stats(&self, survey_id: &str) -> Result<SurveyStats, StoreError> {
        let st = self.state.read().expect("store state lock");
        if !st.surveys.contains_key(survey_id) {
            return Err(StoreError::UnknownSurvey(survey_id.to_string()));
        }
        Ok(SurveyStats::from_candidates(
            st.candidates.values().filter(|c| c.survey_id == survey_id),
        ))
    }

    /// Statistics over every survey in the store.
    pub fn stats_all(&self) -> SurveyStats {
        let st = self.state.read().expect("store state lock");
        SurveyStats::from_candidates(st.candidates.values())
    }

    pub fn export_geojson(&self, filter: &CandidateFilter) -> serde_json::Value {
        export_geojson(&self.list(filter))
    }

    pub fn state(&self) -> StoreState {
        self.state.read().expect("store state lock").clone()
    }

    /// Writes the current state to `snapshot.json` atomically.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        let _writer = self.writer.lock().expect("store writer lock");
        let body = {
            let st = self.state.read().expect("store state lock");
            serde_json::to_vec(&*st).expect("state serializes")
        };
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&body).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

/// Greedy thinning: highest probability first (ties by id), dropping any
/// candidate closer than `min_separation` meters to one already kept.
pub fn dedup(candidates: &[SpotCandidate], min_separation: f64) -> Vec<SpotCandidate> {
    let mut order: Vec<&SpotCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .probability
            .total_cmp(&a.score.probability)
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut kept: Vec<SpotCandidate> = Vec::new();
    for c in order {
        if kept.iter().all(|k| haversine(k.point, c.point) >= min_separation) {
            kept.push(c.clone());
        }
    }
    kept
}
