//! CSV traces and JSON summaries.
//!
//! Numbers are written with fixed precision so that identical runs give
//! byte-identical files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dynqos_core::scenario::RunSummary;
use dynqos_core::{ScenarioConfig, TraceRecord};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// CSV header, in `TraceRecord` field order.
pub const COLUMNS: [&str; 14] = [
    "time_ms",
    "state",
    "signals",
    "ul_buffer_bits",
    "ul_hol_delay_ms",
    "rtt_ms",
    "cam_latency_ms",
    "cam_rate_mbps",
    "uav_goodput_mbps",
    "bg_goodput_mbps",
    "s_k",
    "p_lat",
    "p_cs",
    "tracking_error",
];

/// Output selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    /// Per-interval trace.
    Csv,
    /// Run summary.
    Json,
}

/// Failure to write an output file.
#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    /// Filesystem error on `path`.
    #[error("{path}: {source}")]
    Io {
        /// File or directory involved.
        path: PathBuf,
        /// Cause.
        source: io::Error,
    },
    /// CSV encoding failed.
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    /// JSON encoding failed.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn fixed(v: f64, places: usize) -> String {
    format!("{v:.places$}")
}

fn opt(v: Option<f64>, places: usize) -> String {
    v.map_or_else(String::new, |v| fixed(v, places))
}

/// Writes the trace as CSV with a header row.
pub fn write_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<(), EmitError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            fixed(r.time_ms, 1),
            r.state.to_string(),
            r.signals.to_string(),
            r.ul_buffer_bits.to_string(),
            fixed(r.ul_hol_delay_ms, 3),
            opt(r.rtt_ms, 3),
            opt(r.cam_latency_ms, 3),
            fixed(r.cam_rate_mbps, 3),
            fixed(r.uav_goodput_mbps, 3),
            fixed(r.bg_goodput_mbps, 3),
            fixed(r.s_k, 3),
            opt(r.p_lat, 4),
            fixed(r.p_cs, 4),
            fixed(r.tracking_error, 4),
        ])?;
    }
    w.flush().map_err(|source| EmitError::Io {
        path: PathBuf::from("<csv>"),
        source,
    })?;
    Ok(())
}

/// CSV bytes of a trace.
pub fn csv_bytes(records: &[TraceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory cannot fail");
    buf
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Summary file contents: run identity plus the aggregates.
#[derive(Debug, Serialize)]
pub struct SummaryDocument<'a> {
    /// Scenario name.
    pub scenario: &'a str,
    /// Seed used.
    pub seed: u64,
    /// Simulated time (ms).
    pub duration_ms: f64,
    /// Trace rows.
    pub rows: usize,
    /// SHA-256 of the CSV trace.
    pub trace_sha256: String,
    /// Aggregates.
    #[serde(flatten)]
    pub summary: &'a RunSummary,
}

/// Pretty-printed JSON summary, newline-terminated.
pub fn summary_json(
    name: &str,
    config: &ScenarioConfig,
    records: &[TraceRecord],
    summary: &RunSummary,
) -> Result<String, EmitError> {
    let doc = SummaryDocument {
        scenario: name,
        seed: config.seed,
        duration_ms: config.duration_ms,
        rows: records.len(),
        trace_sha256: sha256_hex(&csv_bytes(records)),
        summary,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// Writes `trace.csv` and/or `summary.json` into `dir`, creating it.
/// Returns the paths written.
pub fn write_outputs(
    dir: &Path,
    name: &str,
    config: &ScenarioConfig,
    records: &[TraceRecord],
    summary: &RunSummary,
    formats: &[Format],
) -> Result<Vec<PathBuf>, EmitError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmitError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        let path = dir.join("trace.csv");
        fs::write(&path, csv_bytes(records)).map_err(io_err(&path))?;
        written.push(path);
    }
    if formats.contains(&Format::Json) {
        let path = dir.join("summary.json");
        fs::write(&path, summary_json(name, config, records, summary)?).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
