//! Survey configuration document (TOML).
//!
//! ```toml
//! version = 1
//! survey_id = "asu"
//! center = { lat = 33.4184, lon = -111.9328 }
//! half_extent_m = 650.0
//!
//! [provider]
//! kind = "network"
//!
//! [backend]
//! kind = "heuristic"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SurveyError;
use crate::annotations::parse_via;
use crate::detectors::{DetectorBackend, ExternalProcessBackend, FixtureBackend, HeuristicBackend, DEFAULT_MIN_CONFIDENCE};
use crate::geo::{tile_footprint, GeoPoint, GridSpec};
use crate::imagery::{
    FixtureProvider, ImageryProvider, NetworkProvider, PricingModel, RateLimiter, DEFAULT_BASE_URL,
    DEFAULT_SIZE_PX, DEFAULT_ZOOM, STREET_HEADINGS,
};
use crate::scoring::{ScoringConfig, ScoringMode, DEFAULT_SAT_THRESHOLD, DEFAULT_SAT_WEIGHT, DEFAULT_THRESHOLD};

pub const CONFIG_VERSION: u32 = 1;

fn default_zoom() -> u8 {
    DEFAULT_ZOOM
}
fn default_headings() -> Vec<u16> {
    STREET_HEADINGS.to_vec()
}
fn default_threshold() -> u32 {
    DEFAULT_THRESHOLD
}
fn default_sat_threshold() -> f64 {
    DEFAULT_SAT_THRESHOLD
}
fn default_sat_weight() -> f64 {
    DEFAULT_SAT_WEIGHT
}
fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}
fn default_workers() -> usize {
    4
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_store_dir() -> PathBuf {
    PathBuf::from("store")
}
fn default_base_url() -> String {
    DEFAULT_BASE_URL.to_string()
}
fn default_via_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitConfig {
    pub max_in_flight: usize,
    pub min_spacing_ms: u64,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        RateLimitConfig {
            max_in_flight: 4,
            min_spacing_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Live imagery API; the key comes from `SPOTFINDER_API_KEY`.
    Network {
        #[serde(default = "default_base_url")]
        base_url: String,
    },
    /// A directory laid out like the image cache.
    Fixture { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Recorded outputs: a fixture document and optionally a VIA project
    /// whose file names are `<cache key>.png`.
    Fixture {
        #[serde(default)]
        file: Option<PathBuf>,
        #[serde(default)]
        via: Option<PathBuf>,
        #[serde(default = "default_via_confidence")]
        via_confidence: f64,
    },
    Heuristic {},
    /// A model server speaking the file-based JSON protocol.
    External {
        id: String,
        command: Vec<String>,
        #[serde(default)]
        scratch: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyConfig {
    pub version: u32,
    pub survey_id: String,
    pub center: GeoPoint,
    pub half_extent_m: f64,
    #[serde(default = "default_zoom")]
    pub zoom: u8,
    /// Lattice spacing; defaults to the tile footprint at the center.
    #[serde(default)]
    pub spacing_m: Option<f64>,
    #[serde(default = "default_headings")]
    pub headings: Vec<u16>,
    #[serde(default = "default_threshold")]
    pub threshold: u32,
    #[serde(default = "default_sat_threshold")]
    pub sat_threshold: f64,
    #[serde(default)]
    pub mode: ScoringMode,
    #[serde(default = "default_sat_weight")]
    pub sat_weight: f64,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
    #[serde(default)]
    pub pricing: PricingModel,
    #[serde(default)]
    pub rate_limit: RateLimitConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_store_dir")]
    pub store_dir: PathBuf,
    pub provider: ProviderConfig,
    pub backend: BackendConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl SurveyConfig {
    pub fn load(path: &Path) -> Result<Self, SurveyError> {
        let text = std::fs::read_to_string(path).map_err(|e| SurveyError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, SurveyError> {
        let mut cfg: SurveyConfig = toml::from_str(text).map_err(|e| SurveyError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.cache_dir);
        resolve(base, &mut self.store_dir);
        if let ProviderConfig::Fixture { dir } = &mut self.provider {
            resolve(base, dir);
        }
        match &mut self.backend {
            BackendConfig::Fixture { file, via, .. } => {
                for p in [file, via].into_iter().flatten() {
                    resolve(base, p);
                }
            }
            BackendConfig::External { scratch, .. } => {
                if let Some(p) = scratch {
                    resolve(base, p);
                }
            }
            BackendConfig::Heuristic {} => {}
        }
    }

    pub fn validate(&self) -> Result<(), SurveyError> {
        let bad = |m: String| Err(SurveyError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.survey_id.is_empty() || self.survey_id.contains(|c: char| c.is_whitespace() || c == '/') {
            return bad(format!("survey_id {:?} must be non-empty without spaces or slashes", self.survey_id));
        }
        if self.headings != STREET_HEADINGS {
            return bad(format!("headings must be {STREET_HEADINGS:?}, got {:?}", self.headings));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return bad(format!("min_confidence {} outside [0, 1]", self.min_confidence));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.rate_limit.max_in_flight == 0 {
            return bad("rate_limit.max_in_flight must be at least 1".into());
        }
        if let BackendConfig::Fixture { via_confidence, .. } = self.backend {
            if !(0.0..=1.0).contains(&via_confidence) {
                return bad(format!("via_confidence {via_confidence} outside [0, 1]"));
            }
        }
        if let BackendConfig::External { command, .. } = &self.backend {
            if command.is_empty() {
                return bad("external backend command is empty".into());
            }
        }
        self.pricing.validate().map_err(SurveyError::Config)?;
        self.scoring().validate().map_err(|e| SurveyError::Config(e.to_string()))?;
        self.grid_spec()?.validate()?;
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            threshold: self.threshold,
            sat_threshold: self.sat_threshold,
            mode: self.mode,
            sat_weight: self.sat_weight,
        }
    }

    pub fn image_size(&self) -> u32 {
        DEFAULT_SIZE_PX
    }

    pub fn spacing(&self) -> Result<f64, SurveyError> {
        match self.spacing_m {
            Some(s) => Ok(s),
            None => Ok(tile_footprint(self.center.lat, self.zoom as i64, self.image_size())?.width_m),
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, SurveyError> {
        Ok(GridSpec {
            center: self.center,
            half_extent: self.half_extent_m,
            spacing: self.spacing()?,
        })
    }

    pub fn rate_limiter(&self) -> RateLimiter {
        RateLimiter::new(
            self.rate_limit.max_in_flight,
            Duration::from_millis(self.rate_limit.min_spacing_ms),
        )
    }

    pub fn build_provider(&self) -> Arc<dyn ImageryProvider> {
        match &self.provider {
            ProviderConfig::Network { base_url } => Arc::new(NetworkProvider::new(base_url.clone())),
            ProviderConfig::Fixture { dir } => Arc::new(FixtureProvider::new(dir.clone())),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn DetectorBackend>, SurveyError> {
        build_backend(&self.backend, &self.store_dir)
    }
}

/// Instantiates a configured backend. `work_dir` hosts the external
/// backend's scratch files when none is configured.
pub fn build_backend(config: &BackendConfig, work_dir: &Path) -> Result<Arc<dyn DetectorBackend>, SurveyError> {
    match config {
        BackendConfig::Heuristic {} => Ok(Arc::new(HeuristicBackend)),
        BackendConfig::External { id, command, scratch } => {
            let scratch = scratch.clone().unwrap_or_else(|| work_dir.join("backend-scratch"));
            Ok(Arc::new(ExternalProcessBackend::new(id.clone(), command.clone(), scratch)))
        }
        BackendConfig::Fixture {
            file,
            via,
            via_confidence,
        } => {
            let mut backend = match file {
                Some(path) => FixtureBackend::load(path).map_err(|e| SurveyError::Backend(e.to_string()))?,
                None => FixtureBackend::new("fixture"),
            };
            if let Some(path) = via {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| SurveyError::Backend(format!("{}: {e}", path.display())))?;
                let project = parse_via(&text).map_err(|e| SurveyError::Backend(format!("{}: {e}", path.display())))?;
                for w in &project.warnings {
                    log::warn!("{}: {w:?}", path.display());
                }
                backend
                    .extend_from_annotations(&project.images, *via_confidence)
                    .map_err(|e| SurveyError::Backend(e.to_string()))?;
            }
            Ok(Arc::new(backend))
        }
    }
}
