//! Query-level trace (QLT) ingestion.
//!
//! A trace is a CSV text file with one query per line:
//!
//! ```text
//! timestamp_us,OP,hex_key,value_size,column_family
//! 1000,GET,6b657931,0,default
//! ```
//!
//! `OP` is one of `PUT`, `GET`, `DELETE`, `SEEK`, `MERGE`. A header line
//! starting with `timestamp` and lines starting with `#` are ignored, as are
//! blank lines. Files ending in `.gz` are decompressed transparently.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default window length used when summarizing traces.
pub const DEFAULT_WINDOW_US: u64 = 10_000_000;

/// Maximum tolerated fraction of malformed lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unreadable trace source: {0}")]
    UnreadableSource(#[source] io::Error),
    #[error("trace format error: {malformed} of {lines} lines malformed (first at line {first_line}: {first_reason})")]
    FormatError {
        malformed: u64,
        lines: u64,
        first_line: u64,
        first_reason: String,
    },
    #[error("window length must be positive, got {0}")]
    InvalidWindow(i64),
    #[error("trace contains no records")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    Put,
    Get,
    Delete,
    Seek,
    Merge,
}

impl Op {
    pub const ALL: [Op; 5] = [Op::Put, Op::Get, Op::Delete, Op::Seek, Op::Merge];

    /// Whether the op carries a value payload.
    pub fn writes_value(self) -> bool {
        matches!(self, Op::Put | Op::Merge)
    }

    pub fn is_write(self) -> bool {
        matches!(self, Op::Put | Op::Merge | Op::Delete)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Put => "PUT",
            Op::Get => "GET",
            Op::Delete => "DELETE",
            Op::Seek => "SEEK",
            Op::Merge => "MERGE",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PUT" => Ok(Op::Put),
            "GET" => Ok(Op::Get),
            "DELETE" => Ok(Op::Delete),
            "SEEK" => Ok(Op::Seek),
            "MERGE" => Ok(Op::Merge),
            other => Err(format!("unknown op {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_us: u64,
    pub op: Op,
    pub key: Vec<u8>,
    pub value_size: u64,
    pub column_family: String,
}

impl TraceRecord {
    pub fn new(timestamp_us: u64, op: Op, key: impl Into<Vec<u8>>, value_size: u64) -> Self {
        TraceRecord {
            timestamp_us,
            op,
            key: key.into(),
            value_size,
            column_family: "default".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceFormat {
    #[default]
    CsvQlt,
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, used to key
/// per-key counters without retaining raw keys.
pub fn key_hash(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Opens a trace file, decompressing when the path ends in `.gz`.
pub fn open_trace(path: &Path) -> Result<Box<dyn BufRead>, TraceError> {
    let file = File::open(path).map_err(TraceError::UnreadableSource)?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Lazily parses a trace. See [`TraceReader`].
pub fn parse_trace<R: BufRead>(source: R, format: TraceFormat) -> TraceReader<R> {
    match format {
        TraceFormat::CsvQlt => TraceReader::new(source),
    }
}

/// Streaming CSV QLT parser.
///
/// Malformed lines are skipped and counted. When the stream is exhausted and
/// more than 1% of the data lines were malformed the iterator yields a final
/// `FormatError`.
pub struct TraceReader<R> {
    source: R,
    buf: String,
    line_no: u64,
    data_lines: u64,
    malformed: u64,
    first_bad: Option<(u64, String)>,
    last_ts: u64,
    done: bool,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(source: R) -> Self {
        TraceReader {
            source,
            buf: String::new(),
            line_no: 0,
            data_lines: 0,
            malformed: 0,
            first_bad: None,
            last_ts: 0,
            done: false,
        }
    }

    pub fn malformed_lines(&self) -> u64 {
        self.malformed
    }

    pub fn data_lines(&self) -> u64 {
        self.data_lines
    }

    fn finish(&mut self) -> Option<Result<TraceRecord, TraceError>> {
        self.done = true;
        if self.data_lines > 0
            && self.malformed as f64 / self.data_lines as f64 > MAX_MALFORMED_FRACTION
        {
            let (first_line, first_reason) = self.first_bad.clone().unwrap_or_default();
            return Some(Err(TraceError::FormatError {
                malformed: self.malformed,
                lines: self.data_lines,
                first_line,
                first_reason,
            }));
        }
        None
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            self.buf.clear();
            match self.source.read_line(&mut self.buf) {
                Ok(0) => return self.finish(),
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(TraceError::UnreadableSource(e)));
                }
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if self.line_no == 1 && line.to_ascii_lowercase().starts_with("timestamp") {
                continue;
            }
            self.data_lines += 1;
            match parse_line(line, self.last_ts) {
                Ok(rec) => {
                    self.last_ts = rec.timestamp_us;
                    return Some(Ok(rec));
                }
                Err(reason) => {
                    self.malformed += 1;
                    if self.first_bad.is_none() {
                        self.first_bad = Some((self.line_no, reason));
                    }
                }
            }
        }
    }
}

fn parse_line(line: &str, last_ts: u64) -> Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 4 || fields.len() > 5 {
        return Err(format!("expected 4 or 5 fields, got {}", fields.len()));
    }
    let timestamp_us: u64 = fields[0]
        .parse()
        .map_err(|_| format!("bad timestamp {:?}", fields[0]))?;
    if timestamp_us < last_ts {
        return Err(format!("timestamp {timestamp_us} goes backwards"));
    }
    let op: Op = fields[1].parse()?;
    let key = hex::decode(fields[2]).map_err(|e| format!("bad hex key: {e}"))?;
    let value_size: u64 = fields[3]
        .parse()
        .map_err(|_| format!("bad value size {:?}", fields[3]))?;
    if !op.writes_value() && value_size != 0 {
        return Err(format!("{op} must have value_size 0"));
    }
    let column_family = match fields.get(4) {
        Some(cf) if !cf.is_empty() => (*cf).to_string(),
        _ => "default".to_string(),
    };
    Ok(TraceRecord {
        timestamp_us,
        op,
        key,
        value_size,
        column_family,
    })
}

/// Writes records in the CSV QLT format accepted by [`parse_trace`].
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: bool) -> io::Result<Self> {
        if header {
            writeln!(out, "timestamp_us,op,key,value_size,column_family")?;
        }
        Ok(TraceWriter { out })
    }

    pub fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{}",
            rec.timestamp_us,
            rec.op,
            hex::encode(&rec.key),
            rec.value_size,
            rec.column_family
        )
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SizeStats {
    pub mean: f64,
    pub median: f64,
    pub mode: f64,
}

impl SizeStats {
    /// Exact statistics over an integer-bucketed histogram. Mode ties resolve
    /// toward the smaller size.
    pub fn from_histogram(hist: &BTreeMap<u64, u64>) -> SizeStats {
        let total: u64 = hist.values().sum();
        if total == 0 {
            return SizeStats::default();
        }
        let sum: f64 = hist.iter().map(|(s, c)| *s as f64 * *c as f64).sum();
        let mut mode = (0u64, 0u64);
        for (size, count) in hist {
            if *count > mode.1 {
                mode = (*size, *count);
            }
        }
        SizeStats {
            mean: sum / total as f64,
            median: histogram_median(hist, total),
            mode: mode.0 as f64,
        }
    }
}

fn histogram_median(hist: &BTreeMap<u64, u64>, total: u64) -> f64 {
    // 0-based ranks of the middle element(s)
    let lo_rank = (total - 1) / 2;
    let hi_rank = total / 2;
    let mut seen = 0u64;
    let mut lo = None;
    for (size, count) in hist {
        let next = seen + count;
        if lo.is_none() && lo_rank < next {
            lo = Some(*size);
        }
        if hi_rank < next {
            return (lo.unwrap_or(*size) as f64 + *size as f64) / 2.0;
        }
        seen = next;
    }
    unreachable!("median rank beyond histogram total")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindowSummary {
    pub window_start_us: u64,
    pub window_len_us: u64,
    pub op_counts: BTreeMap<Op, u64>,
    pub key_size_stats: SizeStats,
    /// Computed over value-carrying ops (`Put`, `Merge`) only.
    pub value_size_stats: SizeStats,
    pub total_accesses: u64,
    pub distinct_keys: u64,
}

#[derive(Default)]
struct WindowAcc {
    op_counts: BTreeMap<Op, u64>,
    key_sizes: BTreeMap<u64, u64>,
    value_sizes: BTreeMap<u64, u64>,
    keys: HashSet<u64>,
    total: u64,
}

impl WindowAcc {
    fn add(&mut self, rec: &TraceRecord) {
        *self.op_counts.entry(rec.op).or_default() += 1;
        *self.key_sizes.entry(rec.key.len() as u64).or_default() += 1;
        if rec.op.writes_value() {
            *self.value_sizes.entry(rec.value_size).or_default() += 1;
        }
        self.keys.insert(key_hash(&rec.key));
        self.total += 1;
    }

    fn finish(self, start: u64, len: u64) -> TimeWindowSummary {
        TimeWindowSummary {
            window_start_us: start,
            window_len_us: len,
            op_counts: self.op_counts,
            key_size_stats: SizeStats::from_histogram(&self.key_sizes),
            value_size_stats: SizeStats::from_histogram(&self.value_sizes),
            total_accesses: self.total,
            distinct_keys: self.keys.len() as u64,
        }
    }
}

/// Tiles `[0, last timestamp]` with windows of `window_len_us`, emitting empty
/// windows where no records fall. Records are expected in timestamp order.
pub fn summarize_windows<I>(records: I, window_len_us: i64) -> Result<Vec<TimeWindowSummary>, TraceError>
where
    I: IntoIterator,
    I::Item: Borrow<TraceRecord>,
{
    if window_len_us <= 0 {
        return Err(TraceError::InvalidWindow(window_len_us));
    }
    let len = window_len_us as u64;
    let mut out = Vec::new();
    let mut current = 0u64;
    let mut acc = WindowAcc::default();
    let mut any = false;
    for rec in records {
        let rec = rec.borrow();
        any = true;
        let idx = rec.timestamp_us / len;
        while current < idx {
            let done = std::mem::take(&mut acc);
            out.push(done.finish(current * len, len));
            current += 1;
        }
        acc.add(rec);
    }
    if any {
        out.push(acc.finish(current * len, len));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub key_size_histogram: BTreeMap<u64, u64>,
    /// Value sizes of value-carrying ops (`Put`, `Merge`).
    pub value_size_histogram: BTreeMap<u64, u64>,
    /// Access counts keyed by [`key_hash`].
    pub per_key_access_counts: BTreeMap<u64, u64>,
    pub op_counts: BTreeMap<Op, u64>,
    pub op_ratios: BTreeMap<Op, f64>,
    pub duration_us: u64,
    pub total_records: u64,
}

impl TraceStats {
    pub fn distinct_keys(&self) -> u64 {
        self.per_key_access_counts.len() as u64
    }

    /// Per-key access counts sorted in descending order.
    pub fn ranked_access_counts(&self) -> Vec<u64> {
        let mut counts: Vec<u64> = self.per_key_access_counts.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        counts
    }
}

pub fn aggregate_stats<I>(records: I) -> Result<TraceStats, TraceError>
where
    I: IntoIterator,
    I::Item: Borrow<TraceRecord>,
{
    let mut key_sizes = BTreeMap::new();
    let mut value_sizes = BTreeMap::new();
    let mut per_key = BTreeMap::new();
    let mut op_counts: BTreeMap<Op, u64> = BTreeMap::new();
    let mut first = None;
    let mut last = 0u64;
    let mut total = 0u64;
    for rec in records {
        let rec = rec.borrow();
        first.get_or_insert(rec.timestamp_us);
        last = last.max(rec.timestamp_us);
        *key_sizes.entry(rec.key.len() as u64).or_insert(0u64) += 1;
        if rec.op.writes_value() {
            *value_sizes.entry(rec.value_size).or_insert(0u64) += 1;
        }
        *per_key.entry(key_hash(&rec.key)).or_insert(0u64) += 1;
        *op_counts.entry(rec.op).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(TraceError::EmptyTrace);
    }
    let op_ratios = op_counts
        .iter()
        .map(|(op, c)| (*op, *c as f64 / total as f64))
        .collect();
    Ok(TraceStats {
        key_size_histogram: key_sizes,
        value_size_histogram: value_sizes,
        per_key_access_counts: per_key,
        op_counts,
        op_ratios,
        duration_us: last,
        total_records: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse_all(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
        parse_trace(Cursor::new(text.as_bytes()), TraceFormat::CsvQlt).collect()
    }

    #[test]
    fn parses_documented_line() {
        let recs = parse_all("1000,GET,6b657931,0,default\n").unwrap();
        assert_eq!(recs, vec![TraceRecord::new(1000, Op::Get, b"key1".to_vec(), 0)]);
    }

    #[test]
    fn empty_file_yields_nothing() {
        assert!(parse_all("").unwrap().is_empty());
    }

    #[test]
    fn header_comments_and_default_cf() {
        let text = "timestamp_us,op,key,value_size,column_family\n# note\n\n5,PUT,61,10\n";
        let recs = parse_all(text).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].column_family, "default");
        assert_eq!(recs[0].value_size, 10);
    }

    #[test]
    fn sparse_malformed_lines_are_skipped() {
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&format!("{i},PUT,61,1,default\n"));
        }
        text.push_str("garbage\n");
        let mut reader = parse_trace(Cursor::new(text.as_bytes()), TraceFormat::CsvQlt);
        let recs: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(recs.len(), 200);
        assert_eq!(reader.malformed_lines(), 1);
    }

    #[test]
    fn dense_malformed_lines_fail() {
        let text = "1,PUT,61,1\n2,GET,zz,0\n3,GET,61,7\n";
        match parse_all(text) {
            Err(TraceError::FormatError { malformed, lines, first_line, .. }) => {
                assert_eq!((malformed, lines, first_line), (2, 3, 2));
            }
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn backwards_timestamp_is_malformed() {
        let r = parse_line("5,PUT,61,1", 10);
        assert!(r.is_err());
    }

    #[test]
    fn single_window() {
        let recs: Vec<_> = (0..100).map(|_| TraceRecord::new(0, Op::Put, b"k".to_vec(), 8)).collect();
        let w = summarize_windows(&recs, 1_000_000).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].op_counts, BTreeMap::from([(Op::Put, 100)]));
        assert_eq!(w[0].total_accesses, 100);
        assert_eq!(w[0].distinct_keys, 1);
    }

    #[test]
    fn boundary_tiling_and_empty_windows() {
        let recs = vec![
            TraceRecord::new(500_000, Op::Get, b"a".to_vec(), 0),
            TraceRecord::new(1_500_000, Op::Get, b"b".to_vec(), 0),
            TraceRecord::new(3_200_000, Op::Get, b"c".to_vec(), 0),
        ];
        let w = summarize_windows(&recs, 1_000_000).unwrap();
        let counts: Vec<u64> = w.iter().map(|w| w.total_accesses).collect();
        assert_eq!(counts, vec![1, 1, 0, 1]);
        for (i, win) in w.iter().enumerate() {
            assert_eq!(win.window_start_us, i as u64 * 1_000_000);
        }
    }

    #[test]
    fn invalid_window_rejected() {
        let recs: Vec<TraceRecord> = Vec::new();
        assert!(matches!(summarize_windows(&recs, 0), Err(TraceError::InvalidWindow(0))));
    }

    #[test]
    fn window_size_stats() {
        let recs = vec![
            TraceRecord::new(0, Op::Put, vec![0; 4], 10),
            TraceRecord::new(1, Op::Put, vec![1; 4], 30),
            TraceRecord::new(2, Op::Put, vec![2; 8], 30),
            TraceRecord::new(3, Op::Get, vec![2; 8], 0),
        ];
        let w = summarize_windows(&recs, 10).unwrap();
        let v = w[0].value_size_stats;
        assert!((v.mean - 70.0 / 3.0).abs() < 1e-12);
        assert_eq!((v.median, v.mode), (30.0, 30.0));
        let k = w[0].key_size_stats;
        assert_eq!((k.mean, k.median, k.mode), (6.0, 6.0, 4.0));
        assert_eq!(w[0].distinct_keys, 3);
    }

    #[test]
    fn single_put_stats() {
        let s = aggregate_stats([TraceRecord::new(0, Op::Put, b"a".to_vec(), 100)]).unwrap();
        assert_eq!(s.op_ratios, BTreeMap::from([(Op::Put, 1.0)]));
        assert_eq!(s.value_size_histogram, BTreeMap::from([(100, 1)]));
    }

    #[test]
    fn empty_trace_rejected() {
        let recs: Vec<TraceRecord> = Vec::new();
        assert!(matches!(aggregate_stats(&recs), Err(TraceError::EmptyTrace)));
    }

    #[test]
    fn fixed_size_half_write_trace() {
        let recs: Vec<_> = (0..1000u64)
            .map(|i| {
                let key = format!("{:016}", i % 97).into_bytes();
                if i % 2 == 0 {
                    TraceRecord::new(i, Op::Put, key, 128)
                } else {
                    TraceRecord::new(i, Op::Get, key, 0)
                }
            })
            .collect();
        let s = aggregate_stats(&recs).unwrap();
        assert_eq!(s.key_size_histogram, BTreeMap::from([(16, 1000)]));
        assert_eq!(s.value_size_histogram, BTreeMap::from([(128, 500)]));
        assert_eq!(s.op_ratios, BTreeMap::from([(Op::Put, 0.5), (Op::Get, 0.5)]));
    }

    #[test]
    fn median_even_and_mode_tie() {
        let h = BTreeMap::from([(2, 2), (5, 2)]);
        let s = SizeStats::from_histogram(&h);
        assert_eq!(s.median, 3.5);
        assert_eq!(s.mode, 2.0);
    }
}

/// Record iterator that stops at the first error and keeps it for later.
struct Checked<'a, R> {
    inner: TraceReader<R>,
    err: &'a mut Option<TraceError>,
}

impl<R: BufRead> Iterator for Checked<'_, R> {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        if self.err.is_some() {
            return None;
        }
        match self.inner.next()? {
            Ok(rec) => Some(rec),
            Err(e) => {
                *self.err = Some(e);
                None
            }
        }
    }
}

/// Statistics and window summaries of a trace file, in two streaming passes.
pub fn read_trace_file(path: &Path, window_len_us: u64) -> Result<(TraceStats, Vec<TimeWindowSummary>), TraceError> {
    let mut err = None;
    let stats = aggregate_stats(Checked {
        inner: parse_trace(open_trace(path)?, TraceFormat::CsvQlt),
        err: &mut err,
    });
    if let Some(e) = err {
        return Err(e);
    }
    let stats = stats?;
    let windows = summarize_windows(
        Checked {
            inner: parse_trace(open_trace(path)?, TraceFormat::CsvQlt),
            err: &mut err,
        },
        i64::try_from(window_len_us).unwrap_or(i64::MAX),
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok((stats, windows?))
}
