//! Process-level tuning for long training and evaluation runs.

/// Keeps freed tensor buffers inside the heap instead of handing them back
/// to the kernel.
///
/// With glibc defaults every buffer above 128 KiB is a fresh `mmap`, so each
/// layer of each forward pass pays for page faults on memory it just freed.
/// Call once at startup; a no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        // Largest value glibc accepts on 64-bit targets.
        const MMAP_THRESHOLD: libc::c_int = 32 << 20;
        const TRIM_THRESHOLD: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator parameters; it is called
        // before any other thread exists.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, MMAP_THRESHOLD);
            libc::mallopt(libc::M_TRIM_THRESHOLD, TRIM_THRESHOLD);
        }
    }
}
