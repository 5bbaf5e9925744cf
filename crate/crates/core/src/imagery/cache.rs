use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{FetchError, ImageryRequest};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Network,
    Cache,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Ok,
    NoCoverage,
}

/// JSON metadata stored next to each cached raster as `<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub canonical_request: String,
    pub fetched_at: DateTime<Utc>,
    /// Where the entry originally came from (`network` or `fixture`).
    pub source: ImageSource,
    #[serde(default = "ok_status")]
    pub status: CacheStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<ImageryRequest>,
}

fn ok_status() -> CacheStatus {
    CacheStatus::Ok
}

#[derive(Debug, Clone)]
pub enum CacheEntry {
    Image { raster: Raster, sidecar: Sidecar },
    NoCoverage { sidecar: Sidecar },
}

/// One PNG raster plus one JSON sidecar per request, both named by the
/// request's cache key, under a single root directory.
#[derive(Debug, Clone)]
pub struct ImageCache {
    root: PathBuf,
}

fn io_err(path: &Path, source: std::io::Error) -> FetchError {
    FetchError::Cache {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

impl ImageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn raster_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.png"))
    }

    pub fn sidecar_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    pub fn sidecar(&self, key: &str) -> Result<Option<Sidecar>, FetchError> {
        let path = self.sidecar_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| FetchError::Corrupt {
            request: key.to_string(),
            message: format!("sidecar {}: {e}", path.display()),
        })
    }

    /// Raw PNG bytes of a cached raster, if present.
    pub fn raster_bytes(&self, key: &str) -> Result<Option<Vec<u8>>, FetchError> {
        let path = self.raster_path(key);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    /// Looks up a request. A raster without its sidecar counts as a miss,
    /// since the sidecar is written last.
    pub fn get(&self, request: &ImageryRequest) -> Result<Option<CacheEntry>, FetchError> {
        let key = request.cache_key();
        let Some(sidecar) = self.sidecar(&key)? else {
            return Ok(None);
        };
        if sidecar.canonical_request != request.canonical() {
            return Err(FetchError::Corrupt {
                request: request.canonical(),
                message: format!("sidecar for {key} describes {}", sidecar.canonical_request),
            });
        }
        match sidecar.status {
            CacheStatus::NoCoverage => Ok(Some(CacheEntry::NoCoverage { sidecar })),
            CacheStatus::Ok => {
                let Some(bytes) = self.raster_bytes(&key)? else {
                    return Ok(None);
                };
                let raster = Raster::decode(&bytes).map_err(|e| FetchError::Corrupt {
                    request: request.canonical(),
                    message: e.to_string(),
                })?;
                if raster.dimensions() != (request.size, request.size) {
                    return Err(FetchError::Corrupt {
                        request: request.canonical(),
                        message: format!(
                            "raster is {}x{}, request asked for {}x{}",
                            raster.width(),
                            raster.height(),
                            request.size,
                            request.size
                        ),
                    });
                }
                Ok(Some(CacheEntry::Image { raster, sidecar }))
            }
        }
    }

    fn ensure_root(&self) -> Result<(), FetchError> {
        fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))
    }

    fn write_sidecar(&self, key: &str, sidecar: &Sidecar) -> Result<(), FetchError> {
        let body = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
        write_atomic(&self.sidecar_path(key), &body)
    }

    pub fn put_image(
        &self,
        request: &ImageryRequest,
        raster: &Raster,
        source: ImageSource,
        fetched_at: DateTime<Utc>,
    ) -> Result<Sidecar, FetchError> {
        self.ensure_root()?;
        let key = request.cache_key();
        let png = raster.encode_png().map_err(|e| FetchError::Corrupt {
            request: request.canonical(),
            message: e.to_string(),
        })?;
        write_atomic(&self.raster_path(&key), &png)?;
        let sidecar = Sidecar {
            canonical_request: request.canonical(),
            fetched_at,
            source,
            status: CacheStatus::Ok,
            reason: None,
            request: Some(*request),
        };
        self.write_sidecar(&key, &sidecar)?;
        Ok(sidecar)
    }

    pub fn put_no_coverage(
        &self,
        request: &ImageryRequest,
        reason: &str,
        source: ImageSource,
        fetched_at: DateTime<Utc>,
    ) -> Result<Sidecar, FetchError> {
        self.ensure_root()?;
        let sidecar = Sidecar {
            canonical_request: request.canonical(),
            fetched_at,
            source,
            status: CacheStatus::NoCoverage,
            reason: Some(reason.to_string()),
            request: Some(*request),
        };
        self.write_sidecar(&request.cache_key(), &sidecar)?;
        Ok(sidecar)
    }

    /// Removes an entry; used to simulate eviction.
    pub fn evict(&self, key: &str) -> Result<(), FetchError> {
        for path in [self.raster_path(key), self.sidecar_path(key)] {
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Ok(())
    }
}
