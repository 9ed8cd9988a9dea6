//! Per-thread accounting of live tensor bytes and executed multiply-accumulates.
//!
//! Every [`Tensor`](crate::Tensor) registers its payload on construction and
//! releases it on drop, so the meter sees exactly what the engine keeps alive.
//! Counters are thread-local: a measurement only observes work done on the
//! thread that started it.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn track_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

#[inline]
pub(crate) fn track_free(bytes: usize) {
    // Tensors may be dropped on a thread other than the one that built them.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

#[inline]
pub(crate) fn add_macs(n: u64) {
    MACS.with(|m| m.set(m.get().wrapping_add(n)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Multiply-accumulates executed on this thread since it started.
pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

/// Tracks the high-water mark of live tensor bytes above the level at `start`.
///
/// Probes do not nest: starting a probe resets the shared high-water mark.
#[derive(Debug)]
pub struct PeakProbe {
    baseline: usize,
    macs_at_start: u64,
}

impl PeakProbe {
    pub fn start() -> Self {
        let baseline = live_bytes();
        PEAK.with(|p| p.set(baseline));
        Self {
            baseline,
            macs_at_start: macs(),
        }
    }

    /// Peak bytes allocated above the baseline since `start`.
    pub fn peak_bytes(&self) -> usize {
        PEAK.with(Cell::get).saturating_sub(self.baseline)
    }

    /// Bytes still live above the baseline.
    pub fn retained_bytes(&self) -> usize {
        live_bytes().saturating_sub(self.baseline)
    }

    pub fn macs(&self) -> u64 {
        macs().wrapping_sub(self.macs_at_start)
    }
}
