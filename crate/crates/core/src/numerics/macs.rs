//! Per-thread multiply-accumulate counter.
//!
//! Affine maps, convolutions and attention products report their nominal MAC
//! count here. Normalizations, activations, interpolation and elementwise
//! arithmetic are not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn record(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// Current value on this thread.
pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Returns the count accumulated on this thread and resets it.
pub fn take() -> u64 {
    COUNTER.with(|c| c.replace(0))
}

/// Runs `f` and returns its result with the MACs it recorded on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let r = f();
    (r, read() - before)
}
