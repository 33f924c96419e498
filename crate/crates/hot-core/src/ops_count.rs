//! Operation counters for complexity checks.
//!
//! Forward paths report how many key/query/pair visits they perform. Tests
//! read the counters at two input sizes and assert the growth ratio, which
//! pins the polynomial degree of each implementation without relying on
//! wall-clock timing.

use std::cell::Cell;

thread_local! {
    static PAIR_VISITS: Cell<u64> = const { Cell::new(0) };
    static KEY_VISITS: Cell<u64> = const { Cell::new(0) };
    static QUERY_VISITS: Cell<u64> = const { Cell::new(0) };
    static GATHER_VISITS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Counter {
    /// Query/key pairs examined by pairwise attention.
    PairVisits,
    /// Keys folded into decoupled kernel sums.
    KeyVisits,
    /// Queries resolved against precomputed sums.
    QueryVisits,
    /// Single-input gathers performed by lightweight linear layers.
    GatherVisits,
}

fn cell(c: Counter) -> &'static std::thread::LocalKey<Cell<u64>> {
    match c {
        Counter::PairVisits => &PAIR_VISITS,
        Counter::KeyVisits => &KEY_VISITS,
        Counter::QueryVisits => &QUERY_VISITS,
        Counter::GatherVisits => &GATHER_VISITS,
    }
}

/// Adds `by` to a counter on the current thread.
pub fn bump(c: Counter, by: u64) {
    cell(c).with(|v| v.set(v.get() + by));
}

/// Reads a counter on the current thread.
pub fn read(c: Counter) -> u64 {
    cell(c).with(|v| v.get())
}

/// Zeroes every counter on the current thread.
pub fn reset_all() {
    for c in [
        Counter::PairVisits,
        Counter::KeyVisits,
        Counter::QueryVisits,
        Counter::GatherVisits,
    ] {
        cell(c).with(|v| v.set(0));
    }
}
