//! Peak heap probe.
//!
//! Install the counting allocator in the binary:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: glnet::memory::CountingAlloc = glnet::memory::CountingAlloc;
//! ```
//!
//! Readings cover every thread, so measurements need an otherwise quiet
//! process.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::Relaxed};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Relaxed) + n;
    PEAK.fetch_max(now, Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        // SAFETY: forwarded unchanged to the system allocator
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            INSTALLED.store(true, Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        // SAFETY: forwarded unchanged to the system allocator
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            INSTALLED.store(true, Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        // SAFETY: `ptr` came from this allocator with `layout`
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        // SAFETY: `ptr` came from this allocator with `layout`
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Relaxed);
            }
        }
        p
    }
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn installed() -> bool {
    // any allocation flips the flag once the allocator is live
    drop(Box::new(0u8));
    INSTALLED.load(Relaxed)
}

/// Live heap bytes.
pub fn current_bytes() -> usize {
    CURRENT.load(Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReading {
    /// Highest live heap during the measured run.
    pub raw_peak: u64,
    /// Live heap when the measured run started.
    pub idle: u64,
    /// `raw_peak - idle`: the transient working set of the run.
    pub delta: u64,
}

/// Runs `thunk` once as warm-up, then again under the probe, and returns the
/// second result with its reading.
pub fn measure_peak_memory<R>(mut thunk: impl FnMut() -> R) -> Result<(R, MemoryReading)> {
    if !installed() {
        return Err(Error::Unsupported("the counting allocator is not installed"));
    }
    drop(thunk());
    let idle = CURRENT.load(Relaxed);
    PEAK.store(idle, Relaxed);
    let out = thunk();
    let raw_peak = PEAK.load(Relaxed).max(idle);
    Ok((
        out,
        MemoryReading {
            raw_peak: raw_peak as u64,
            idle: idle as u64,
            delta: (raw_peak - idle) as u64,
        },
    ))
}

/// Single measured run without warm-up, for per-file reports.
pub fn measure_once<R>(thunk: impl FnOnce() -> R) -> Option<(R, MemoryReading)> {
    if !installed() {
        return None;
    }
    let idle = CURRENT.load(Relaxed);
    PEAK.store(idle, Relaxed);
    let out = thunk();
    let raw_peak = PEAK.load(Relaxed).max(idle);
    Some((
        out,
        MemoryReading {
            raw_peak: raw_peak as u64,
            idle: idle as u64,
            delta: (raw_peak - idle) as u64,
        },
    ))
}
