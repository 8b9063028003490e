//! Live tensor byte accounting.
//!
//! Every tensor buffer reports its size here when created and when dropped.
//! The meter is thread-local: a measurement scope only sees allocations made
//! on its own thread, so independent scopes can run on separate threads.

use std::cell::Cell;

/// Snapshot of the meter for the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    pub current: usize,
    pub peak: usize,
    pub allocs: u64,
    pub frees: u64,
}

thread_local! {
    static METER: Cell<MemoryMeter> = const { Cell::new(MemoryMeter { current: 0, peak: 0, allocs: 0, frees: 0 }) };
}

pub(crate) fn on_alloc(bytes: usize) {
    METER.with(|m| {
        let mut s = m.get();
        s.current += bytes;
        s.peak = s.peak.max(s.current);
        s.allocs += 1;
        m.set(s);
    });
}

pub(crate) fn on_free(bytes: usize) {
    METER.with(|m| {
        let mut s = m.get();
        // A buffer dropped on a thread other than its creator can underflow.
        s.current = s.current.saturating_sub(bytes);
        s.frees += 1;
        m.set(s);
    });
}

/// Current state of this thread's meter.
pub fn snapshot() -> MemoryMeter {
    METER.with(|m| m.get())
}

/// Bytes of live tensors on this thread.
pub fn live_bytes() -> usize {
    snapshot().current
}

/// Runs `f` and reports the peak tensor bytes allocated above the level
/// live at entry.
///
/// Scopes nest: an inner scope reports only its own peak, and the enclosing
/// scope still observes the inner peak afterwards.
pub fn measure_scope<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let entry = snapshot();
    METER.with(|m| {
        let mut s = m.get();
        s.peak = s.current;
        m.set(s);
    });
    let out = f();
    let inner = snapshot();
    let peak = inner.peak.saturating_sub(entry.current);
    METER.with(|m| {
        let mut s = m.get();
        s.peak = entry.peak.max(inner.peak);
        m.set(s);
    });
    (out, peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_tensor_peak() {
        let before = live_bytes();
        let ((), peak) = measure_scope(|| {
            let t = Tensor::zeros(&[1000]);
            drop(t);
        });
        assert_eq!(peak, 4000);
        assert_eq!(live_bytes(), before);
    }

    #[test]
    fn concurrent_tensors_peak() {
        let ((), peak) = measure_scope(|| {
            let a = Tensor::zeros(&[1000]);
            let b = Tensor::zeros(&[1000]);
            drop((a, b));
        });
        assert_eq!(peak, 8000);
    }

    #[test]
    fn nested_scope_reports_inner_peak() {
        let (inner, outer) = measure_scope(|| {
            let _big = Tensor::zeros(&[5000]);
            let ((), inner) = measure_scope(|| {
                let _small = Tensor::zeros(&[10]);
            });
            inner
        });
        assert_eq!(inner, 40);
        assert_eq!(outer, 20_040);
    }

    #[test]
    fn peak_is_monotone_and_bounds_current() {
        let ((), _) = measure_scope(|| {
            let mut last_peak = 0;
            let mut held = Vec::new();
            for i in 1..20 {
                held.push(Tensor::zeros(&[i * 7]));
                if i % 3 == 0 {
                    held.remove(0);
                }
                let s = snapshot();
                assert!(s.peak >= s.current);
                assert!(s.peak >= last_peak);
                last_peak = s.peak;
            }
        });
    }

    #[test]
    fn shared_views_are_not_double_counted() {
        let ((), peak) = measure_scope(|| {
            let a = Tensor::zeros(&[10, 10]);
            let b = a.clone();
            let c = a.reshape(&[100]).unwrap();
            drop((a, b, c));
        });
        assert_eq!(peak, 400);
    }
}
