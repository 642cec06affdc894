//! Clock abstraction so the service and agents can run under a virtual clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::model::Timestamp;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall clock, microseconds since the Unix epoch. Survives process restarts,
/// which keeps journaled timestamps monotone across recovery.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Timestamp(d.as_micros() as i64)
    }
}

/// Manually advanced clock shared by every clone.
#[derive(Debug, Default, Clone)]
pub struct VirtualClock {
    micros: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock { micros: Arc::new(AtomicI64::new(start.0)) }
    }

    /// Moves the clock forward; never backwards.
    pub fn set(&self, t: Timestamp) {
        self.micros.fetch_max(t.0, Ordering::SeqCst);
    }

    pub fn advance_secs(&self, secs: f64) {
        let now = self.now();
        self.set(now.plus_secs(secs));
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.micros.load(Ordering::SeqCst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_is_shared_and_monotone() {
        let c = VirtualClock::new(Timestamp(5));
        let d = c.clone();
        d.advance_secs(1.0);
        assert_eq!(c.now(), Timestamp(1_000_005));
        c.set(Timestamp(0));
        assert_eq!(d.now(), Timestamp(1_000_005));
    }

    #[test]
    fn system_clock_moves() {
        let a = SystemClock.now();
        assert!(a.0 > 0);
        assert!(SystemClock.now() >= a);
    }
}
