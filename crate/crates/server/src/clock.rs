//! Millisecond clock shared by a service's tasks.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Wall-clock time plus an adjustable offset. The offset stays zero unless
/// the service runs with a simulated clock.
#[derive(Debug, Clone, Default)]
pub struct Clock {
    offset_ms: Arc<AtomicI64>,
    simulated: bool,
}

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Clock {
    pub fn system() -> Self {
        Self::default()
    }

    pub fn simulated() -> Self {
        Self {
            offset_ms: Arc::default(),
            simulated: true,
        }
    }

    pub fn is_simulated(&self) -> bool {
        self.simulated
    }

    pub fn now(&self) -> u64 {
        let t = wall_ms() as i64 + self.offset_ms.load(Ordering::Relaxed);
        t.max(0) as u64
    }

    /// Moves a simulated clock so that `now()` reads `t`. Ignored otherwise.
    pub fn set(&self, t: u64) -> bool {
        if !self.simulated {
            return false;
        }
        self.offset_ms.store(t as i64 - wall_ms() as i64, Ordering::Relaxed);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulated_clock_jumps() {
        let c = Clock::simulated();
        assert!(c.set(1_000));
        let t = c.now();
        assert!((1_000..1_000 + 5_000).contains(&t));
        let s = Clock::system();
        assert!(!s.set(1_000));
        assert!(s.now() > 1_600_000_000_000);
    }
}
