//! Live-float accounting for [`Tensor`](crate::Tensor) allocations.
//!
//! Every tensor constructor registers its element count with a thread-local
//! counter and every drop releases it. [`meter_scope`] reports the highest
//! number of floats that were live at once during a computation, measured
//! relative to what was already live on entry, so parameters and inputs
//! allocated beforehand are excluded.
//!
//! The counters are per thread. Code whose memory is being measured must run
//! on the calling thread.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static PROBES: RefCell<BTreeMap<&'static str, usize>> = const { RefCell::new(BTreeMap::new()) };
}

/// Snapshot of the calling thread's meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemMeter {
    pub current_live_floats: usize,
    pub peak_live_floats: usize,
}

impl MemMeter {
    pub fn snapshot() -> Self {
        MemMeter {
            current_live_floats: CURRENT.with(Cell::get),
            peak_live_floats: PEAK.with(Cell::get),
        }
    }
}

pub(crate) fn acquire(n: usize) {
    let now = CURRENT.with(|c| {
        let v = c.get() + n;
        c.set(v);
        v
    });
    PEAK.with(|p| {
        if now > p.get() {
            p.set(now)
        }
    });
}

pub(crate) fn release(n: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(n)));
}

/// Runs `f` and returns its result together with the peak number of
/// additional floats that were live at any point while it ran.
///
/// Scopes nest: an outer scope still observes the peak reached inside an
/// inner one.
pub fn meter_scope<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.with(Cell::get);
    let outer_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let inner_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(outer_peak.max(inner_peak)));
    (out, inner_peak - base)
}

/// Like [`meter_scope`], but also folds the observed peak into a named probe
/// (keeping the maximum across calls). Used to attribute memory to a
/// specific sublayer, e.g. the feed-forward hidden activations.
pub fn probe<R>(label: &'static str, f: impl FnOnce() -> R) -> R {
    let (out, peak) = meter_scope(f);
    PROBES.with(|p| {
        let mut map = p.borrow_mut();
        let e = map.entry(label).or_insert(0);
        *e = (*e).max(peak);
    });
    out
}

/// Returns and clears the maximum peak recorded under `label`.
pub fn take_probe(label: &'static str) -> usize {
    PROBES.with(|p| p.borrow_mut().remove(label).unwrap_or(0))
}
