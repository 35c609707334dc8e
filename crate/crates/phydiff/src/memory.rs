/// Resident set size in bytes, from `/proc/self/statm` (Linux only).
pub fn resident_bytes() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = s.split_whitespace().nth(1)?.parse().ok()?;
    // statm counts pages; 4 KiB on every platform this is expected to run on.
    Some(pages * 4096)
}
