//! Survey orchestration: lattice, imagery, preprocessing, detection, scoring,
//! storage.
//!
//! Coordinates are processed in chunks on a worker pool; each chunk's results
//! are committed to the store in lattice order, so the event log of a run is
//! the same regardless of scheduling. A coordinate already stored as scored
//! or without coverage is skipped on re-runs, which makes an interrupted
//! survey resumable from the image cache.

pub mod config;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::detectors::{classify_tile, segment_street, BackendError, DetectionSet, DetectorBackend, SatelliteScore};
use crate::geo::{make_grid, GeoError, GeoPoint};
use crate::imagery::{
    build_satellite_request, build_street_requests, estimate_cost, CostEstimate, CostLedger, FetchError,
    FetchOutcome, ImageCache, ImageryClient, ImageryProvider, ImageryRequest, RequestKind,
};
use crate::preprocess::prepare_satellite;
use crate::scoring::{combine, count_hits, ClassCounts, SpotScore};
use crate::store::{
    candidate_id, CandidateStatus, CoordinateOutcome, ImageRef, ImageStatus, SpotCandidate, SpotStore, StoreError,
    SurveyRecord, SurveyStats,
};

pub use config::{BackendConfig, ProviderConfig, RateLimitConfig, SurveyConfig};

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("backend setup: {0}")]
    Backend(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("survey {survey_id} aborted after {committed} coordinates: {source}")]
    Aborted {
        survey_id: String,
        committed: u64,
        #[source]
        source: FetchError,
    },
    #[error("survey {0} is already registered with different parameters")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DryRunPlan {
    pub points_per_axis: u64,
    pub spacing_m: f64,
    #[serde(flatten)]
    pub estimate: CostEstimate,
}

/// Request and cost plan without touching the network or the store.
pub fn dry_run(config: &SurveyConfig) -> Result<DryRunPlan, SurveyError> {
    let spec = config.grid_spec()?;
    let n = make_grid(&spec)?.len() as u64;
    Ok(DryRunPlan {
        points_per_axis: spec.points_per_axis() as u64,
        spacing_m: spec.spacing,
        estimate: estimate_cost(n, &config.pricing),
    })
}

/// Cost plan for an externally supplied coordinate count.
pub fn dry_run_with_count(config: &SurveyConfig, n_coordinates: u64) -> Result<CostEstimate, SurveyError> {
    config.validate()?;
    Ok(estimate_cost(n_coordinates, &config.pricing))
}

pub struct SurveyDeps {
    pub provider: Arc<dyn ImageryProvider>,
    pub backend: Arc<dyn DetectorBackend>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Stop after this many newly processed coordinates, leaving the survey
    /// incomplete. Used to exercise resumption.
    pub stop_after: Option<u64>,
    /// Retries of transient fetch failures before a coordinate is skipped.
    pub fetch_retries: Option<u32>,
    pub retry_backoff: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub survey_id: String,
    pub n_coordinates: u64,
    /// Coordinates processed in this run.
    pub processed: u64,
    /// Coordinates found already complete in the store.
    pub resumed: u64,
    /// Every coordinate has a record and none is skipped.
    pub completed: bool,
    /// Billable requests issued during this run.
    pub ledger: CostLedger,
    /// Provider round trips in this run, billable or not.
    pub provider_calls: u64,
    pub stats: SurveyStats,
}

fn is_complete(c: &SpotCandidate) -> bool {
    !matches!(c.outcome, CoordinateOutcome::Skipped { .. })
}

fn slot_name(request: &ImageryRequest) -> String {
    match request.kind {
        RequestKind::Satellite { .. } => "sat".into(),
        RequestKind::Street { heading, .. } => format!("street{}", heading / 90),
    }
}

fn image_ref(request: &ImageryRequest, status: ImageStatus, reason: Option<String>) -> ImageRef {
    let heading = match request.kind {
        RequestKind::Street { heading, .. } => Some(heading),
        RequestKind::Satellite { .. } => None,
    };
    ImageRef {
        slot: slot_name(request),
        key: request.cache_key(),
        canonical_request: request.canonical(),
        size: request.size,
        heading,
        status,
        reason,
        detections: None,
    }
}

struct Pipeline<'a> {
    config: &'a SurveyConfig,
    client: &'a ImageryClient,
    backend: &'a dyn DetectorBackend,
    backend_lock: Mutex<()>,
}

/// Per-coordinate failure that does not stop the survey.
struct Skip(String);

impl From<BackendError> for Skip {
    fn from(e: BackendError) -> Self {
        Skip(e.to_string())
    }
}

impl Pipeline<'_> {
    /// Fatal fetch errors propagate; anything else becomes a skipped record.
    fn fetch(&self, request: &ImageryRequest) -> Result<Result<FetchOutcome, Skip>, FetchError> {
        match self.client.fetch(request) {
            Ok(out) => Ok(Ok(out)),
            Err(e) if e.is_fatal() => Err(e),
            Err(e) => Ok(Err(Skip(e.to_string()))),
        }
    }

    fn with_backend<T>(&self, f: impl FnOnce(&dyn DetectorBackend) -> T) -> T {
        let _guard = (!self.backend.shareable()).then(|| self.backend_lock.lock().expect("backend lock"));
        f(self.backend)
    }

    fn process(&self, point: GeoPoint) -> Result<(SpotScore, CoordinateOutcome, Vec<ImageRef>), FetchError> {
        let size = self.config.image_size();
        let sat_req = build_satellite_request(point, self.config.zoom, size).expect("validated config");
        let street_reqs = build_street_requests(point, size).expect("validated config");
        let mut imagery: Vec<ImageRef> = Vec::with_capacity(5);

        let empty = |sat: Option<SatelliteScore>| SpotScore {
            counts: ClassCounts::default(),
            sat,
            probability: 0.0,
            positive: false,
            mode: self.config.mode,
        };
        let skipped = |reason: String, sat, imagery| Ok((empty(sat), CoordinateOutcome::Skipped { reason }, imagery));

        let sat = match self.fetch(&sat_req)? {
            Err(Skip(reason)) => {
                imagery.push(image_ref(&sat_req, ImageStatus::Failed, Some(reason.clone())));
                return skipped(reason, None, imagery);
            }
            Ok(FetchOutcome::NoCoverage { reason, .. }) => {
                imagery.push(image_ref(&sat_req, ImageStatus::NoCoverage, Some(reason)));
                None
            }
            Ok(FetchOutcome::Image(img)) => {
                imagery.push(image_ref(&sat_req, ImageStatus::Ok, None));
                let key = sat_req.cache_key();
                let scored = prepare_satellite(&img.body, key.clone())
                    .map_err(|e| Skip(e.to_string()))
                    .and_then(|q| Ok(self.with_backend(|b| classify_tile(&q, b))?));
                match scored {
                    Ok(s) => Some(s),
                    Err(Skip(reason)) => return skipped(reason, None, imagery),
                }
            }
        };

        let mut sets: Vec<DetectionSet> = Vec::with_capacity(4);
        let mut covered = 0;
        for req in &street_reqs {
            let key = req.cache_key();
            match self.fetch(req)? {
                Err(Skip(reason)) => {
                    imagery.push(image_ref(req, ImageStatus::Failed, Some(reason.clone())));
                    return skipped(reason, sat, imagery);
                }
                Ok(FetchOutcome::NoCoverage { reason, .. }) => {
                    imagery.push(image_ref(req, ImageStatus::NoCoverage, Some(reason)));
                    sets.push(DetectionSet::empty(key));
                }
                Ok(FetchOutcome::Image(img)) => {
                    let set = match self.with_backend(|b| segment_street(&img.body, &key, b, self.config.min_confidence)) {
                        Ok(set) => set,
                        Err(e) => {
                            imagery.push(image_ref(req, ImageStatus::Ok, None));
                            return skipped(e.to_string(), sat, imagery);
                        }
                    };
                    let mut r = image_ref(req, ImageStatus::Ok, None);
                    r.detections = Some(set.detections.clone());
                    imagery.push(r);
                    sets.push(set);
                    covered += 1;
                }
            }
        }

        let counts = count_hits(&sets).expect("four heading sets");
        match combine(sat, counts, &self.config.scoring()) {
            Ok(score) if covered == 0 => Ok((score, CoordinateOutcome::NoCoverage, imagery)),
            Ok(score) => Ok((score, CoordinateOutcome::Scored, imagery)),
            Err(e) => skipped(e.to_string(), sat, imagery),
        }
    }
}

fn survey_record(config: &SurveyConfig, n: u64) -> Result<SurveyRecord, SurveyError> {
    Ok(SurveyRecord {
        id: config.survey_id.clone(),
        center: config.center,
        half_extent: config.half_extent_m,
        spacing: config.spacing()?,
        zoom: config.zoom,
        n_coordinates: n,
        ledger: CostLedger::new(config.pricing),
        completed: false,
    })
}

/// Registers the survey if new; an existing registration must match.
fn ensure_registered(store: &SpotStore, config: &SurveyConfig, n: u64) -> Result<(), SurveyError> {
    let fresh = survey_record(config, n)?;
    match store.survey(&config.survey_id) {
        None => {
            store.register_survey(fresh)?;
        }
        Some(existing) => {
            let same = existing.center == fresh.center
                && existing.half_extent == fresh.half_extent
                && existing.spacing == fresh.spacing
                && existing.zoom == fresh.zoom
                && existing.n_coordinates == fresh.n_coordinates;
            if !same {
                return Err(SurveyError::Mismatch(config.survey_id.clone()));
            }
        }
    }
    Ok(())
}

/// Runs (or resumes) a survey to completion, or until `stop_after`.
pub fn run_survey(
    config: &SurveyConfig,
    store: &SpotStore,
    deps: SurveyDeps,
    options: RunOptions,
) -> Result<RunReport, SurveyError> {
    config.validate()?;
    let points = make_grid(&config.grid_spec()?)?;
    let n = points.len() as u64;
    ensure_registered(store, config, n)?;

    let mut client = ImageryClient::new(
        deps.provider,
        ImageCache::new(&config.cache_dir),
        Arc::new(config.rate_limiter()),
        config.pricing,
    )
    .with_clock(deps.clock.clone());
    if let Some(retries) = options.fetch_retries {
        client = client.with_retries(retries, options.retry_backoff.unwrap_or(Duration::from_millis(500)));
    }
    let pipeline = Pipeline {
        config,
        client: &client,
        backend: deps.backend.as_ref(),
        backend_lock: Mutex::new(()),
    };

    let pending: Vec<(u64, GeoPoint)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u64, *p))
        .filter(|(i, _)| {
            store
                .get(&candidate_id(&config.survey_id, *i))
                .is_none_or(|c| !is_complete(&c))
        })
        .collect();
    let resumed = n - pending.len() as u64;
    let budget = options.stop_after.unwrap_or(u64::MAX).min(pending.len() as u64) as usize;
    let pending = &pending[..budget];

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| SurveyError::Config(format!("worker pool: {e}")))?;

    let mut processed = 0u64;
    let mut abort: Option<FetchError> = None;
    for chunk in pending.chunks(config.workers * 4) {
        let results: Vec<_> = pool.install(|| chunk.par_iter().map(|&(_, p)| pipeline.process(p)).collect());
        for (&(index, point), result) in chunk.iter().zip(results) {
            let (score, outcome, imagery) = match result {
                Ok(r) => r,
                Err(e) => {
                    abort = Some(e);
                    break;
                }
            };
            if let CoordinateOutcome::Skipped { reason } = &outcome {
                log::warn!("coordinate {index} skipped: {reason}");
            }
            let now = deps.clock.now();
            store.upsert_candidate(SpotCandidate {
                id: candidate_id(&config.survey_id, index),
                survey_id: config.survey_id.clone(),
                grid_index: index,
                point,
                score,
                outcome,
                imagery,
                backend: deps.backend.id().to_string(),
                status: CandidateStatus::Candidate,
                verdict_note: None,
                created_at: now,
                updated_at: now,
            })?;
            processed += 1;
        }
        if abort.is_some() {
            break;
        }
        log::info!("{}: {} of {} coordinates done", config.survey_id, resumed + processed, n);
    }

    let ledger = client.ledger();
    if ledger.requests() > 0 {
        store.record_ledger(&config.survey_id, ledger)?;
    }
    if let Some(source) = abort {
        store.checkpoint()?;
        return Err(SurveyError::Aborted {
            survey_id: config.survey_id.clone(),
            committed: resumed + processed,
            source,
        });
    }
    let stats = store.stats(&config.survey_id)?;
    let completed = stats.n_coordinates == n && stats.n_skipped == 0;
    if completed && !store.survey(&config.survey_id).is_some_and(|s| s.completed) {
        store.complete_survey(&config.survey_id)?;
    }
    store.checkpoint()?;
    Ok(RunReport {
        survey_id: config.survey_id.clone(),
        n_coordinates: n,
        processed,
        resumed,
        completed,
        ledger,
        provider_calls: client.provider_calls(),
        stats,
    })
}
