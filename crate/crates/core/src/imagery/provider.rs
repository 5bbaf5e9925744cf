use std::path::PathBuf;
use std::time::Duration;

use serde::Deserialize;

use super::cache::{CacheEntry, ImageCache, ImageSource};
use super::{FetchError, ImageryRequest, API_KEY_ENV};
use crate::raster::Raster;

pub const DEFAULT_BASE_URL: &str = "https://maps.googleapis.com/maps/api/";

#[derive(Debug, Clone)]
pub enum ProviderResponse {
    Image(Raster),
    /// No imagery exists for the request; not billed, not an error.
    NoCoverage { reason: String },
}

pub trait ImageryProvider: Send + Sync {
    /// `Network` responses are billable; `Fixture` responses are free.
    fn source(&self) -> ImageSource;

    fn fetch(&self, request: &ImageryRequest) -> Result<ProviderResponse, FetchError>;
}

/// Serves images from a directory laid out like [`ImageCache`]. A request
/// with no entry there has no coverage.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dir: ImageCache,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureProvider {
            dir: ImageCache::new(dir),
        }
    }
}

impl ImageryProvider for FixtureProvider {
    fn source(&self) -> ImageSource {
        ImageSource::Fixture
    }

    fn fetch(&self, request: &ImageryRequest) -> Result<ProviderResponse, FetchError> {
        Ok(match self.dir.get(request)? {
            Some(CacheEntry::Image { raster, .. }) => ProviderResponse::Image(raster),
            Some(CacheEntry::NoCoverage { sidecar }) => ProviderResponse::NoCoverage {
                reason: sidecar.reason.unwrap_or_else(|| "no_coverage".into()),
            },
            None => ProviderResponse::NoCoverage {
                reason: "no_fixture".into(),
            },
        })
    }
}

#[derive(Debug, Deserialize)]
struct StreetMetadata {
    status: String,
}

/// HTTPS client for the static-map and street-view endpoints.
///
/// The credential is read from the environment on every dispatch and only
/// ever appended to the outgoing URL. Street requests are preceded by a
/// metadata probe; a status other than `OK` yields `NoCoverage` without a
/// billable image request.
#[derive(Debug)]
pub struct NetworkProvider {
    base_url: String,
    key_var: String,
    agent: ureq::Agent,
}

impl NetworkProvider {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base_url = base_url.into();
        if !base_url.ends_with('/') {
            base_url.push('/');
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build();
        NetworkProvider {
            base_url,
            key_var: API_KEY_ENV.to_string(),
            agent: config.into(),
        }
    }

    /// Reads the credential from `var` instead of `SPOTFINDER_API_KEY`.
    pub fn with_key_var(mut self, var: impl Into<String>) -> Self {
        self.key_var = var.into();
        self
    }

    fn credential(&self, request: &ImageryRequest) -> Result<String, FetchError> {
        match std::env::var(&self.key_var) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(FetchError::Fatal {
                request: request.canonical(),
                message: format!("credential variable {} is not set", self.key_var),
            }),
        }
    }

    fn get(&self, canonical: &str, key: &str, request: &ImageryRequest) -> Result<(u16, Vec<u8>), FetchError> {
        let url = format!("{}{}&key={}", self.base_url, canonical, key);
        let mut resp = self.agent.get(&url).call().map_err(|e| FetchError::Retryable {
            request: request.canonical(),
            message: redact(&e.to_string(), key),
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(20 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| FetchError::Retryable {
                request: request.canonical(),
                message: redact(&format!("reading body: {e}"), key),
            })?;
        Ok((status, body))
    }

    fn classify_status(status: u16, body: &[u8], request: &ImageryRequest, key: &str) -> Result<(), FetchError> {
        let message = || {
            let text = String::from_utf8_lossy(&body[..body.len().min(200)]);
            redact(&format!("HTTP {status}: {text}"), key)
        };
        match status {
            200..=299 => Ok(()),
            // Auth, quota and malformed requests.
            400..=499 => Err(FetchError::Fatal {
                request: request.canonical(),
                message: message(),
            }),
            _ => Err(FetchError::Retryable {
                request: request.canonical(),
                message: message(),
            }),
        }
    }

    fn probe_street(&self, request: &ImageryRequest, key: &str) -> Result<Option<String>, FetchError> {
        let Some(canonical) = request.metadata_canonical() else {
            return Ok(None);
        };
        let (status, body) = self.get(&canonical, key, request)?;
        Self::classify_status(status, &body, request, key)?;
        let meta: StreetMetadata = serde_json::from_slice(&body).map_err(|e| FetchError::Retryable {
            request: request.canonical(),
            message: format!("metadata response: {e}"),
        })?;
        match meta.status.as_str() {
            "OK" => Ok(None),
            "ZERO_RESULTS" | "NOT_FOUND" => Ok(Some(meta.status)),
            "UNKNOWN_ERROR" => Err(FetchError::Retryable {
                request: request.canonical(),
                message: "metadata status UNKNOWN_ERROR".into(),
            }),
            other => Err(FetchError::Fatal {
                request: request.canonical(),
                message: format!("metadata status {other}"),
            }),
        }
    }
}

/// Error text can echo the request URL.
fn redact(message: &str, key: &str) -> String {
    message.replace(key, "<redacted>")
}

impl ImageryProvider for NetworkProvider {
    fn source(&self) -> ImageSource {
        ImageSource::Network
    }

    fn fetch(&self, request: &ImageryRequest) -> Result<ProviderResponse, FetchError> {
        let key = self.credential(request)?;
        if let Some(reason) = self.probe_street(request, &key)? {
            return Ok(ProviderResponse::NoCoverage { reason });
        }
        let (status, body) = self.get(&request.canonical(), &key, request)?;
        Self::classify_status(status, &body, request, &key)?;
        let raster = Raster::decode(&body).map_err(|e| FetchError::Corrupt {
            request: request.canonical(),
            message: e.to_string(),
        })?;
        Ok(ProviderResponse::Image(raster))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::imagery::{build_street_requests, ImageryRequest};
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Minimal HTTP/1.1 responder: answers each request via `route` and
    /// records the request targets it saw.
    fn serve(route: impl Fn(&str) -> (u16, &'static str, Vec<u8>) + Send + 'static) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let target = line.split_whitespace().nth(1).unwrap_or("").to_string();
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                log.lock().unwrap().push(target.clone());
                let (status, ctype, body) = route(&target);
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
                let _ = stream.flush();
            }
        });
        (format!("http://{addr}/api/"), seen)
    }

    fn png(size: u32) -> Vec<u8> {
        Raster::filled(size, size, [10, 20, 30]).unwrap().encode_png().unwrap()
    }

    fn point() -> GeoPoint {
        GeoPoint::new(33.4184, -111.9328).unwrap()
    }

    #[test]
    fn satellite_fetch_appends_key_only_on_the_wire() {
        std::env::set_var("SPOTFINDER_TEST_KEY_SAT", "secret123");
        let (base, seen) = serve(|_| (200, "image/png", png(32)));
        let p = NetworkProvider::new(base).with_key_var("SPOTFINDER_TEST_KEY_SAT");
        let r = ImageryRequest::satellite(point(), 21, 32).unwrap();
        match p.fetch(&r).unwrap() {
            ProviderResponse::Image(img) => assert_eq!(img.dimensions(), (32, 32)),
            other => panic!("unexpected {other:?}"),
        }
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 1);
        assert!(seen[0].starts_with("/api/staticmap?center=33.418400,-111.932800"));
        assert!(seen[0].ends_with("&key=secret123"));
        assert!(!r.canonical().contains("secret123"));
    }

    #[test]
    fn echoed_credential_is_redacted_from_errors() {
        std::env::set_var("SPOTFINDER_TEST_KEY_ECHO", "hunter2secret");
        let (base, _) = serve(|target| (403, "text/plain", format!("denied {target}").into_bytes()));
        let p = NetworkProvider::new(base).with_key_var("SPOTFINDER_TEST_KEY_ECHO");
        let r = ImageryRequest::satellite(point(), 21, 32).unwrap();
        let err = p.fetch(&r).unwrap_err();
        assert!(matches!(err, FetchError::Fatal { .. }));
        let text = format!("{err} {err:?}");
        assert!(!text.contains("hunter2secret"), "{text}");
        assert!(text.contains("<redacted>"));
    }

    #[test]
    fn street_probe_gates_the_image_request() {
        std::env::set_var("SPOTFINDER_TEST_KEY_STREET", "k");
        let (base, seen) = serve(|target| {
            if target.contains("metadata") {
                (200, "application/json", br#"{"status":"ZERO_RESULTS"}"#.to_vec())
            } else {
                (200, "image/png", png(640))
            }
        });
        let p = NetworkProvider::new(base).with_key_var("SPOTFINDER_TEST_KEY_STREET");
        let r = build_street_requests(point(), 640).unwrap()[1];
        assert!(matches!(p.fetch(&r).unwrap(), ProviderResponse::NoCoverage { ref reason } if reason == "ZERO_RESULTS"));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn street_fetch_after_ok_probe() {
        std::env::set_var("SPOTFINDER_TEST_KEY_OK", "k");
        let (base, seen) = serve(|target| {
            if target.contains("metadata") {
                (200, "application/json", br#"{"status":"OK","pano_id":"x"}"#.to_vec())
            } else {
                (200, "image/png", png(640))
            }
        });
        let p = NetworkProvider::new(base).with_key_var("SPOTFINDER_TEST_KEY_OK");
        let r = build_street_requests(point(), 640).unwrap()[2];
        assert!(matches!(p.fetch(&r).unwrap(), ProviderResponse::Image(_)));
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].contains("heading=180"));
    }

    #[test]
    fn status_classification() {
        std::env::set_var("SPOTFINDER_TEST_KEY_ERR", "k");
        let (base, _) = serve(|target| {
            if target.contains("zoom=20") {
                (403, "text/plain", b"denied".to_vec())
            } else {
                (503, "text/plain", b"busy".to_vec())
            }
        });
        let p = NetworkProvider::new(base).with_key_var("SPOTFINDER_TEST_KEY_ERR");
        let denied = ImageryRequest::satellite(point(), 20, 32).unwrap();
        assert!(matches!(p.fetch(&denied), Err(FetchError::Fatal { .. })));
        let busy = ImageryRequest::satellite(point(), 21, 32).unwrap();
        assert!(matches!(p.fetch(&busy), Err(FetchError::Retryable { .. })));
    }

    #[test]
    fn missing_credential_is_fatal() {
        let p = NetworkProvider::new("http://127.0.0.1:9/").with_key_var("SPOTFINDER_TEST_KEY_UNSET_VAR");
        let r = ImageryRequest::satellite(point(), 21, 32).unwrap();
        assert!(matches!(p.fetch(&r), Err(FetchError::Fatal { .. })));
    }

    #[test]
    fn fixture_provider_reports_missing_as_no_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let p = FixtureProvider::new(dir.path());
        let r = ImageryRequest::satellite(point(), 21, 32).unwrap();
        assert!(matches!(p.fetch(&r).unwrap(), ProviderResponse::NoCoverage { .. }));
    }
}
