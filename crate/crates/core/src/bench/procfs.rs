//! Process CPU and memory from `/proc` (Linux only).

use std::fs;

/// Kernel clock ticks per second used by `/proc/<pid>/stat` on Linux.
const CLOCK_TICKS_PER_S: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcSample {
    pub cpu_seconds: f64,
    pub rss_bytes: u64,
}

/// `None` when introspection is unavailable on this platform.
pub fn sample_process() -> Option<ProcSample> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesized command name, which may contain spaces
    let rest = stat.rsplit_once(')')?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // utime and stime are fields 14 and 15 of the full line
    let utime: f64 = fields.get(11)?.parse().ok()?;
    let stime: f64 = fields.get(12)?.parse().ok()?;
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let rss_kb: u64 = status
        .lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))?
        .split_whitespace()
        .next()?
        .parse()
        .ok()?;
    Some(ProcSample {
        cpu_seconds: (utime + stime) / CLOCK_TICKS_PER_S,
        rss_bytes: rss_kb * 1024,
    })
}

pub fn available_cores() -> u32 {
    std::thread::available_parallelism().map_or(1, |n| n.get() as u32)
}

/// `MemTotal` from `/proc/meminfo`.
pub fn total_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemTotal:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
