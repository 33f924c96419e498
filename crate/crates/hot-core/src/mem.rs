//! Heap usage accounting shared with an instrumenting global allocator.
//!
//! The binary crate installs a counting allocator that reports every
//! allocation and deallocation here. Library code charges large tensor
//! buffers against an optional budget before allocating, so an oversized
//! run fails deterministically instead of thrashing the machine.

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static CAP: AtomicUsize = AtomicUsize::new(0);

/// Called by the global allocator after a successful allocation.
pub fn on_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Called by the global allocator on deallocation.
pub fn on_dealloc(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently allocated, as observed by the instrumenting allocator.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last reset.
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the current usage.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Sets a heap budget in bytes; zero disables the budget.
pub fn set_budget(bytes: usize) {
    CAP.store(bytes, Ordering::Relaxed);
}

/// Payload carried by the panic raised when the heap budget is exceeded.
#[derive(Debug, Clone, Copy)]
pub struct BudgetExceeded {
    pub requested: usize,
    pub in_use: usize,
    pub budget: usize,
}

/// Charges a prospective allocation against the budget.
///
/// Panics with a [`BudgetExceeded`] payload when a budget is set and the
/// request would cross it. Callers that opt into budgets catch the panic
/// and record the size as out of memory.
pub fn charge(bytes: usize) {
    let cap = CAP.load(Ordering::Relaxed);
    if cap == 0 {
        return;
    }
    let in_use = CURRENT.load(Ordering::Relaxed);
    if in_use.saturating_add(bytes) > cap {
        std::panic::panic_any(BudgetExceeded {
            requested: bytes,
            in_use,
            budget: cap,
        });
    }
}

/// Allocates a zeroed f64 buffer after charging it against the budget.
pub fn alloc_f64(len: usize) -> Vec<f64> {
    charge(len * std::mem::size_of::<f64>());
    vec![0.0; len]
}

/// Allocates a zeroed usize buffer after charging it against the budget.
pub fn alloc_usize(len: usize) -> Vec<usize> {
    charge(len * std::mem::size_of::<usize>());
    vec![0usize; len]
}
