//! Cycle counter and monotonic clock.

use std::time::{Duration, Instant};

/// Reads the time-stamp counter. On targets without one, falls back to a
/// nanosecond count from the monotonic clock.
#[inline(always)]
pub fn cycles() -> u64 {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        // lfence keeps the read from drifting into the timed region
        std::arch::x86_64::_mm_lfence();
        let t = std::arch::x86_64::_rdtsc();
        std::arch::x86_64::_mm_lfence();
        t
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        use std::sync::OnceLock;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClockError {
    #[error("cycle counter went backwards ({0} -> {1})")]
    NonMonotonic(u64, u64),
    #[error("cycle counter did not advance over {0:?}")]
    Stalled(Duration),
}

/// Calibrated cycle counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleClock {
    /// Cost of one back-to-back pair of reads; subtracted from every
    /// timed region.
    pub overhead: u64,
    pub cycles_per_ns: f64,
}

impl CycleClock {
    /// Measures read overhead (median of `reads` back-to-back pairs) and
    /// the counter frequency against the monotonic clock. Fails if any
    /// read goes backwards.
    pub fn calibrate(reads: usize) -> Result<Self, ClockError> {
        let mut deltas = Vec::with_capacity(reads);
        let mut last = cycles();
        for _ in 0..reads {
            let a = cycles();
            let b = cycles();
            if a < last || b < a {
                return Err(ClockError::NonMonotonic(last.max(a), a.min(b)));
            }
            deltas.push(b - a);
            last = b;
        }
        deltas.sort_unstable();
        let overhead = deltas.get(deltas.len() / 2).copied().unwrap_or(0);

        let window = Duration::from_millis(20);
        let (t0, c0) = (Instant::now(), cycles());
        while t0.elapsed() < window {
            std::hint::spin_loop();
        }
        let (elapsed, c1) = (t0.elapsed(), cycles());
        if c1 <= c0 {
            return Err(ClockError::Stalled(elapsed));
        }
        Ok(Self {
            overhead,
            cycles_per_ns: (c1 - c0) as f64 / elapsed.as_nanos() as f64,
        })
    }

    /// Cycles between two reads with the read overhead removed.
    #[inline(always)]
    pub fn span(&self, start: u64, end: u64) -> u64 {
        end.saturating_sub(start).saturating_sub(self.overhead)
    }

    pub fn ns_to_cycles(&self, ns: f64) -> u64 {
        (ns * self.cycles_per_ns).round() as u64
    }

    /// Busy-waits for `cycles_to_spin` counter ticks. With `share_core`
    /// the core is offered to other runnable threads while waiting; the
    /// deadline is wall-clock either way.
    #[inline]
    pub fn spin_for(&self, cycles_to_spin: u64, share_core: bool) {
        let end = cycles().wrapping_add(cycles_to_spin);
        while cycles() < end {
            if share_core {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }
}

/// Nanoseconds on the monotonic clock since `epoch`.
#[inline]
pub fn ns_since(epoch: Instant) -> u64 {
    epoch.elapsed().as_nanos() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_identity() {
        let clock = CycleClock::calibrate(10_000).unwrap();
        assert!(clock.cycles_per_ns > 0.0);
        // an empty timed region costs about nothing once overhead is removed
        let mut spans: Vec<u64> = (0..1000)
            .map(|_| {
                let a = cycles();
                let b = cycles();
                clock.span(a, b)
            })
            .collect();
        spans.sort_unstable();
        assert!(spans[500] <= clock.overhead / 2 + 1, "median {} overhead {}", spans[500], clock.overhead);
    }

    #[test]
    fn spin_for_takes_at_least_the_requested_time() {
        let clock = CycleClock::calibrate(1000).unwrap();
        let t = Instant::now();
        clock.spin_for(clock.ns_to_cycles(200_000.0), false);
        assert!(t.elapsed() >= Duration::from_micros(190));
    }
}
