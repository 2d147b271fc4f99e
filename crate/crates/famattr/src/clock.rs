//! Monotonic wall-clock deadlines for the feasibility search.

use std::time::{Duration, Instant};

use famattr_core::csp::{Clock, Deadline};

#[derive(Clone, Copy, Debug, Default)]
pub struct WallClock;

pub struct WallDeadline {
    start: Instant,
    limit: Duration,
    polls: u32,
    expired: bool,
}

impl Deadline for WallDeadline {
    fn expired(&mut self) -> bool {
        // Reading the clock on every node is wasteful; poll every 64 nodes.
        self.polls = self.polls.wrapping_add(1);
        if !self.expired && self.polls.is_multiple_of(64) {
            self.expired = self.start.elapsed() > self.limit;
        }
        self.expired
    }

    fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

impl Clock for WallClock {
    type Deadline = WallDeadline;

    fn start(&self, limit_ms: f64) -> WallDeadline {
        WallDeadline {
            start: Instant::now(),
            limit: Duration::from_secs_f64(limit_ms.max(0.0) / 1e3),
            polls: 0,
            expired: false,
        }
    }
}
