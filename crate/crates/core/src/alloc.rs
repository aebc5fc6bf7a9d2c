//! Heap tuning for the optimization loops.
//!
//! Every iteration allocates and frees the same set of multi-megabyte
//! activation buffers. With glibc's defaults those go straight back to the
//! kernel and every reuse pays a page fault per 4 KiB, which costs more than
//! the convolutions on some virtualized hosts. Keeping freed memory in the
//! process heap removes that cost.

use std::sync::Once;

static RETAIN: Once = Once::new();

/// Idempotent; a no-op off glibc.
pub fn retain_freed_memory() {
    RETAIN.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tunables and is called once
        // before the large allocations it affects.
        unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
