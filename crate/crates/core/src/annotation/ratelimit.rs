use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Sliding-window limiter: at most `capacity` grants in any window of
/// length `window`.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    grants: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: u32) -> Self {
        Self::new(requests_per_minute.max(1) as usize, Duration::from_secs(60))
    }

    pub fn new(capacity: usize, window: Duration) -> Self {
        RateLimiter {
            capacity: capacity.max(1),
            window,
            grants: Mutex::new(VecDeque::new()),
        }
    }

    /// Records a grant at `now` if capacity allows, otherwise returns how
    /// long to wait before asking again.
    pub fn try_acquire_at(&self, now: Instant) -> Result<(), Duration> {
        let mut grants = self.grants.lock().expect("rate limiter poisoned");
        while let Some(&oldest) = grants.front() {
            if now.saturating_duration_since(oldest) >= self.window {
                grants.pop_front();
            } else {
                break;
            }
        }
        if grants.len() < self.capacity {
            grants.push_back(now);
            Ok(())
        } else {
            let oldest = *grants.front().expect("non-empty at capacity");
            Err((oldest + self.window).saturating_duration_since(now))
        }
    }

    /// Blocks the calling thread until a grant is available.
    pub fn acquire(&self) {
        loop {
            match self.try_acquire_at(Instant::now()) {
                Ok(()) => return,
                Err(wait) => std::thread::sleep(wait.max(Duration::from_millis(1))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blocks_at_capacity_until_window_passes() {
        let rl = RateLimiter::new(2, Duration::from_secs(60));
        let t0 = Instant::now();
        assert!(rl.try_acquire_at(t0).is_ok());
        assert!(rl.try_acquire_at(t0 + Duration::from_secs(10)).is_ok());
        let wait = rl.try_acquire_at(t0 + Duration::from_secs(20)).unwrap_err();
        assert_eq!(wait, Duration::from_secs(40));
        assert!(rl.try_acquire_at(t0 + Duration::from_secs(60)).is_ok());
    }

    proptest! {
        // Replays requests arriving at random offsets, each retrying at the
        // suggested wait, and checks every 60 s window of grants.
        #[test]
        fn window_never_exceeds_capacity(
            capacity in 1usize..6,
            mut arrivals in prop::collection::vec(0u64..300_000, 1..60),
        ) {
            arrivals.sort_unstable();
            let rl = RateLimiter::new(capacity, Duration::from_secs(60));
            let t0 = Instant::now();
            let mut clock = Duration::ZERO;
            let mut granted = Vec::new();
            for ms in arrivals {
                clock = clock.max(Duration::from_millis(ms));
                loop {
                    match rl.try_acquire_at(t0 + clock) {
                        Ok(()) => break,
                        Err(w) => clock += w,
                    }
                }
                granted.push(clock);
            }
            for (i, start) in granted.iter().enumerate() {
                let in_window = granted[i..]
                    .iter()
                    .take_while(|g| **g < *start + Duration::from_secs(60))
                    .count();
                prop_assert!(in_window <= capacity);
            }
        }
    }
}
