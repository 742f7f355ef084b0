//! Byte accounting for matrix buffers.
//!
//! Only [`Matrix`](super::Matrix) storage is counted. Every buffer created
//! while a scope is open on the current thread is charged to all open
//! scopes; the buffer carries handles to those scopes so that releasing it
//! later (on any thread) credits the same counters.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    pub peak_live_bytes: usize,
    pub total_allocated_bytes: usize,
    pub allocation_count: usize,
}

#[derive(Debug, Default)]
struct ScopeCounters {
    live: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
    count: AtomicUsize,
}

impl ScopeCounters {
    fn charge(&self, bytes: usize) {
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
        self.total.fetch_add(bytes, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
    }

    fn credit(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::Relaxed);
    }

    fn snapshot(&self) -> AllocStats {
        AllocStats {
            peak_live_bytes: self.peak.load(Ordering::Relaxed),
            total_allocated_bytes: self.total.load(Ordering::Relaxed),
            allocation_count: self.count.load(Ordering::Relaxed),
        }
    }
}

thread_local! {
    static SCOPES: RefCell<Vec<Arc<ScopeCounters>>> = const { RefCell::new(Vec::new()) };
}

/// Receipt held by a matrix buffer for the scopes that were charged for it.
#[derive(Debug, Default)]
pub(crate) struct AllocToken {
    bytes: usize,
    scopes: Vec<Arc<ScopeCounters>>,
}

impl AllocToken {
    pub(crate) fn charge(bytes: usize) -> Self {
        let scopes = SCOPES.with(|s| {
            let s = s.borrow();
            for scope in s.iter() {
                scope.charge(bytes);
            }
            s.clone()
        });
        AllocToken { bytes, scopes }
    }
}

impl Drop for AllocToken {
    fn drop(&mut self) {
        for scope in &self.scopes {
            scope.credit(self.bytes);
        }
    }
}

struct ScopeGuard;

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPES.with(|s| {
            s.borrow_mut().pop();
        });
    }
}

/// Run `work` and report the matrix buffer traffic it caused on this thread.
///
/// Scopes nest: an inner scope reports only its own traffic, while the
/// enclosing scope sees everything.
pub fn with_alloc_tracking<R>(work: impl FnOnce() -> R) -> (R, AllocStats) {
    let counters = Arc::new(ScopeCounters::default());
    SCOPES.with(|s| s.borrow_mut().push(counters.clone()));
    let guard = ScopeGuard;
    let out = work();
    drop(guard);
    (out, counters.snapshot())
}
