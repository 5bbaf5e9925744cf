use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_MIN_SPACING: Duration = Duration::from_millis(100);

#[derive(Debug)]
struct State {
    in_flight: usize,
    next_slot: Option<Instant>,
}

/// Caps concurrent dispatches and enforces a minimum gap between dispatch
/// start times. Shared by every fetch in the process.
#[derive(Debug)]
pub struct RateLimiter {
    max_in_flight: usize,
    min_spacing: Duration,
    state: Mutex<State>,
    freed: Condvar,
}

impl Default for RateLimiter {
    fn default() -> Self {
        RateLimiter::new(DEFAULT_MAX_IN_FLIGHT, DEFAULT_MIN_SPACING)
    }
}

/// Held for the duration of one dispatch.
#[derive(Debug)]
pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().expect("limiter lock");
        st.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, min_spacing: Duration) -> Self {
        assert!(max_in_flight > 0, "rate limiter needs at least one slot");
        RateLimiter {
            max_in_flight,
            min_spacing,
            state: Mutex::new(State {
                in_flight: 0,
                next_slot: None,
            }),
            freed: Condvar::new(),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn min_spacing(&self) -> Duration {
        self.min_spacing
    }

    /// Blocks until a slot is free and this caller's dispatch time arrives.
    pub fn acquire(&self) -> Permit<'_> {
        let start = {
            let mut st = self.state.lock().expect("limiter lock");
            while st.in_flight >= self.max_in_flight {
                st = self.freed.wait(st).expect("limiter lock");
            }
            st.in_flight += 1;
            let now = Instant::now();
            let start = st.next_slot.map_or(now, |t| t.max(now));
            st.next_slot = Some(start + self.min_spacing);
            start
        };
        let now = Instant::now();
        if start > now {
            std::thread::sleep(start - now);
        }
        Permit { limiter: self }
    }
}
