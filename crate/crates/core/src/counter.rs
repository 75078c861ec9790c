//! Per-thread multiply-accumulate counter.
//!
//! Every dense kernel in the crate reports the multiply-accumulates it issues,
//! so analytic cost models can be checked against what the code actually does.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn record(n: usize) {
    MACS.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

/// Multiply-accumulates counted on this thread since the last reset.
pub fn read() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the MACs it issued.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
