use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};

use super::cache::{CacheEntry, ImageCache, ImageSource};
use super::limiter::RateLimiter;
use super::provider::{ImageryProvider, ProviderResponse};
use super::{CostLedger, FetchError, ImageryRequest, PricingModel};
use crate::clock::{Clock, SystemClock};
use crate::raster::Raster;

#[derive(Debug, Clone)]
pub struct CachedImage {
    pub request: ImageryRequest,
    pub body: Raster,
    pub fetched_at: DateTime<Utc>,
    pub source: ImageSource,
}

#[derive(Debug, Clone)]
pub enum FetchOutcome {
    Image(CachedImage),
    NoCoverage {
        request: ImageryRequest,
        reason: String,
        source: ImageSource,
    },
}

impl FetchOutcome {
    pub fn source(&self) -> ImageSource {
        match self {
            FetchOutcome::Image(img) => img.source,
            FetchOutcome::NoCoverage { source, .. } => *source,
        }
    }
}

/// Cache-first fetching with per-key single flight, retry of transient
/// failures, rate limiting of network dispatches, and a cost ledger that
/// counts only billable network images.
pub struct ImageryClient {
    provider: Arc<dyn ImageryProvider>,
    cache: ImageCache,
    limiter: Arc<RateLimiter>,
    ledger: Mutex<CostLedger>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    provider_calls: AtomicU64,
    max_retries: u32,
    retry_backoff: Duration,
    clock: Arc<dyn Clock>,
}

impl ImageryClient {
    pub fn new(
        provider: Arc<dyn ImageryProvider>,
        cache: ImageCache,
        limiter: Arc<RateLimiter>,
        pricing: PricingModel,
    ) -> Self {
        ImageryClient {
            provider,
            cache,
            limiter,
            ledger: Mutex::new(CostLedger::new(pricing)),
            key_locks: Mutex::new(HashMap::new()),
            provider_calls: AtomicU64::new(0),
            max_retries: 2,
            retry_backoff: Duration::from_millis(500),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.retry_backoff = backoff;
        self
    }

    /// Timestamps written into cache sidecars.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn cache(&self) -> &ImageCache {
        &self.cache
    }

    pub fn ledger(&self) -> CostLedger {
        *self.ledger.lock().expect("ledger lock")
    }

    /// Provider round trips so far, billable or not.
    pub fn provider_calls(&self) -> u64 {
        self.provider_calls.load(Ordering::SeqCst)
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .expect("key lock map")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    fn call_provider(&self, request: &ImageryRequest) -> Result<ProviderResponse, FetchError> {
        let network = self.provider.source() == ImageSource::Network;
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = network.then(|| self.limiter.acquire());
                self.provider_calls.fetch_add(1, Ordering::SeqCst);
                self.provider.fetch(request)
            };
            match result {
                Err(FetchError::Retryable { ref message, .. }) if attempt < self.max_retries => {
                    attempt += 1;
                    log::warn!("retry {attempt}/{} for {request}: {message}", self.max_retries);
                    std::thread::sleep(self.retry_backoff * attempt);
                }
                other => return other,
            }
        }
    }

    pub fn fetch(&self, request: &ImageryRequest) -> Result<FetchOutcome, FetchError> {
        let lock = self.key_lock(&request.cache_key());
        let _guard = lock.lock().expect("key lock");

        match self.cache.get(request)? {
            Some(CacheEntry::Image { raster, sidecar }) => {
                return Ok(FetchOutcome::Image(CachedImage {
                    request: *request,
                    body: raster,
                    fetched_at: sidecar.fetched_at,
                    source: ImageSource::Cache,
                }))
            }
            Some(CacheEntry::NoCoverage { sidecar }) => {
                return Ok(FetchOutcome::NoCoverage {
                    request: *request,
                    reason: sidecar.reason.unwrap_or_else(|| "no_coverage".into()),
                    source: ImageSource::Cache,
                })
            }
            None => {}
        }

        let source = self.provider.source();
        let now = self.clock.now();
        match self.call_provider(request)? {
            ProviderResponse::Image(raster) => {
                if raster.dimensions() != (request.size, request.size) {
                    return Err(FetchError::Corrupt {
                        request: request.canonical(),
                        message: format!("provider returned {}x{}", raster.width(), raster.height()),
                    });
                }
                if source == ImageSource::Network {
                    self.ledger.lock().expect("ledger lock").record(request);
                }
                self.cache.put_image(request, &raster, source, now)?;
                Ok(FetchOutcome::Image(CachedImage {
                    request: *request,
                    body: raster,
                    fetched_at: now,
                    source,
                }))
            }
            ProviderResponse::NoCoverage { reason } => {
                self.cache.put_no_coverage(request, &reason, source, now)?;
                Ok(FetchOutcome::NoCoverage {
                    request: *request,
                    reason,
                    source,
                })
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::imagery::{build_satellite_request, build_street_requests, FixtureProvider};
    use proptest::prelude::*;
    use std::sync::atomic::AtomicU32;

    /// Billable in-memory provider serving solid images; the first
    /// `fail_first` calls fail transiently.
    pub(crate) struct FakeNetwork {
        pub calls: AtomicU64,
        pub fail_first: AtomicU32,
    }

    impl FakeNetwork {
        pub fn new() -> Self {
            FakeNetwork { calls: AtomicU64::new(0), fail_first: AtomicU32::new(0) }
        }
    }

    impl ImageryProvider for FakeNetwork {
        fn source(&self) -> ImageSource {
            ImageSource::Network
        }
        fn fetch(&self, request: &ImageryRequest) -> Result<ProviderResponse, FetchError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_first.load(Ordering::SeqCst) > 0 {
                self.fail_first.fetch_sub(1, Ordering::SeqCst);
                return Err(FetchError::Retryable { request: request.canonical(), message: "flaky".into() });
            }
            Ok(ProviderResponse::Image(Raster::filled(request.size, request.size, [5, 6, 7]).unwrap()))
        }
    }

    fn client(provider: Arc<dyn ImageryProvider>, dir: &std::path::Path) -> ImageryClient {
        ImageryClient::new(
            provider,
            ImageCache::new(dir),
            Arc::new(RateLimiter::new(4, Duration::ZERO)),
            PricingModel::default(),
        )
        .with_retries(2, Duration::ZERO)
    }

    fn p(i: u32) -> GeoPoint {
        GeoPoint::new(33.0 + i as f64 * 1e-4, -111.0).unwrap()
    }

    #[test]
    fn second_fetch_hits_cache_and_leaves_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(Arc::new(FakeNetwork::new()), dir.path());
        let r = build_satellite_request(p(0), 21, 64).unwrap();
        assert_eq!(c.fetch(&r).unwrap().source(), ImageSource::Network);
        let ledger = c.ledger();
        assert_eq!(ledger.sat_requests, 1);
        assert_eq!(c.fetch(&r).unwrap().source(), ImageSource::Cache);
        assert_eq!(c.ledger(), ledger);
        assert_eq!(c.provider_calls(), 1);
    }

    #[test]
    fn missing_fixture_is_no_coverage_and_free() {
        let dir = tempfile::tempdir().unwrap();
        let fixtures = tempfile::tempdir().unwrap();
        let c = client(Arc::new(FixtureProvider::new(fixtures.path())), dir.path());
        let r = build_street_requests(p(0), 640).unwrap()[0];
        assert!(matches!(c.fetch(&r).unwrap(), FetchOutcome::NoCoverage { .. }));
        assert_eq!(c.ledger().requests(), 0);
        // Recorded in the cache, so the provider is not asked again.
        assert!(matches!(c.fetch(&r).unwrap(), FetchOutcome::NoCoverage { source: ImageSource::Cache, .. }));
        assert_eq!(c.provider_calls(), 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let net = Arc::new(FakeNetwork::new());
        net.fail_first.store(2, Ordering::SeqCst);
        let c = client(net.clone(), dir.path());
        let r = build_satellite_request(p(0), 21, 64).unwrap();
        assert!(c.fetch(&r).is_ok());
        assert_eq!(net.calls.load(Ordering::SeqCst), 3);

        net.fail_first.store(5, Ordering::SeqCst);
        let r2 = build_satellite_request(p(1), 21, 64).unwrap();
        assert!(matches!(c.fetch(&r2), Err(FetchError::Retryable { .. })));
    }

    #[test]
    fn concurrent_fetches_of_one_key_hit_the_network_once() {
        let dir = tempfile::tempdir().unwrap();
        let net = Arc::new(FakeNetwork::new());
        let c = Arc::new(client(net.clone(), dir.path()));
        let r = build_satellite_request(p(0), 21, 64).unwrap();
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let c = c.clone();
                std::thread::spawn(move || c.fetch(&r).unwrap())
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(net.calls.load(Ordering::SeqCst), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn network_fetches_equal_distinct_requests(picks in prop::collection::vec((0u32..4, 0usize..5), 1..25)) {
            let dir = tempfile::tempdir().unwrap();
            let net = Arc::new(FakeNetwork::new());
            let c = client(net.clone(), dir.path());
            let mut distinct = std::collections::HashSet::new();
            for (pt, slot) in picks {
                let r = if slot == 4 {
                    build_satellite_request(p(pt), 21, 32).unwrap()
                } else {
                    build_street_requests(p(pt), 32).unwrap()[slot]
                };
                distinct.insert(r.canonical());
                c.fetch(&r).unwrap();
            }
            prop_assert_eq!(net.calls.load(Ordering::SeqCst), distinct.len() as u64);
            prop_assert_eq!(c.ledger().requests(), distinct.len() as u64);
        }
    }
}
