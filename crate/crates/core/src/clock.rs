//! Injected monotonic time.
//!
//! The state machines never read the ambient clock. Callers pass a
//! [`MonoTime`] obtained from a [`Clock`], which is either the process
//! clock or a manually stepped one in tests.

use std::ops::{Add, Sub};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// A point on a monotonic timeline, measured from an arbitrary origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MonoTime(Duration);

impl MonoTime {
    pub const ZERO: MonoTime = MonoTime(Duration::ZERO);

    pub fn from_duration(d: Duration) -> Self {
        MonoTime(d)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        MonoTime(Duration::from_secs_f64(secs))
    }

    pub fn from_millis(ms: u64) -> Self {
        MonoTime(Duration::from_millis(ms))
    }

    pub fn as_duration(self) -> Duration {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0.as_secs_f64()
    }

    /// Time elapsed since `earlier`, zero if `earlier` is in the future.
    pub fn since(self, earlier: MonoTime) -> Duration {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<Duration> for MonoTime {
    type Output = MonoTime;
    fn add(self, rhs: Duration) -> MonoTime {
        MonoTime(self.0 + rhs)
    }
}

impl Sub<Duration> for MonoTime {
    type Output = MonoTime;
    fn sub(self, rhs: Duration) -> MonoTime {
        MonoTime(self.0.saturating_sub(rhs))
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> MonoTime;
}

/// Process clock anchored at construction.
#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> MonoTime {
        MonoTime(self.origin.elapsed())
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn new(start: MonoTime) -> Self {
        ManualClock {
            now: Mutex::new(start.0),
        }
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock().unwrap() += by;
    }

    /// Moves the clock to `t`. Moving backwards is ignored.
    pub fn set(&self, t: MonoTime) {
        let mut now = self.now.lock().unwrap();
        if t.0 > *now {
            *now = t.0;
        }
    }
}

impl Clock for ManualClock {
    fn now(&self) -> MonoTime {
        MonoTime(*self.now.lock().unwrap())
    }
}
