//! One parameter varied over a list of values, runs spread over threads.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use dynqos_core::scenario::{run, RunSummary};
use dynqos_core::TraceRecord;

use crate::config::{load_str, override_key, Scenario};
use crate::emit::{csv_bytes, sha256_hex, EmitError};
use crate::Overrides;

/// Outcome of one sweep point.
#[derive(Debug)]
pub struct SweepRun {
    /// Parameter value as given (a TOML literal).
    pub value: String,
    /// Loaded scenario, or why it could not be built or run.
    pub outcome: Result<(Scenario, Vec<TraceRecord>, RunSummary), String>,
}

fn one(text: &str, origin: &str, param: &str, value: &str, overrides: Overrides) -> SweepRun {
    let outcome = override_key(text, param, value)
        .and_then(|t| {
            load_str(&t, &format!("{origin} [{param} = {value}]")).map_err(|e| e.to_string())
        })
        .and_then(|mut s| {
            overrides.apply(&mut s.config);
            let (records, summary) = run(&s.config).map_err(|e| e.to_string())?;
            Ok((s, records, summary))
        });
    SweepRun {
        value: value.to_owned(),
        outcome,
    }
}

/// Runs the scenario in `text` once per value of `param`, on up to
/// `threads` threads. Results keep the order of `values`.
pub fn sweep(
    text: &str,
    origin: &str,
    param: &str,
    values: &[String],
    overrides: Overrides,
    threads: usize,
) -> Vec<SweepRun> {
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, values.len().max(1));
    let mut done: Vec<(usize, SweepRun)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(v) = values.get(i) else { break };
                        mine.push((i, one(text, origin, param, v, overrides)));
                    }
                    mine
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row per sweep point: verdict and whole-run aggregates.
pub fn write_table<W: Write>(param: &str, runs: &[SweepRun], out: W) -> Result<(), EmitError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record([
        param,
        "verdict",
        "diverged_at_ms",
        "max_tracking_error",
        "mean_rtt_ms",
        "mean_uav_goodput_mbps",
        "mean_bg_goodput_mbps",
        "transitions",
        "trace_sha256",
        "error",
    ])?;
    let f3 = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.3}"));
    for r in runs {
        match &r.outcome {
            Ok((_, records, summary)) => w.write_record([
                r.value.clone(),
                format!("{:?}", summary.verdict).to_lowercase(),
                f3(summary.diverged_at_ms),
                format!("{:.4}", summary.max_tracking_error),
                f3(mean(records.iter().filter_map(|x| x.rtt_ms))),
                f3(mean(records.iter().map(|x| x.uav_goodput_mbps))),
                f3(mean(records.iter().map(|x| x.bg_goodput_mbps))),
                summary.transitions.len().to_string(),
                sha256_hex(&csv_bytes(records)),
                String::new(),
            ])?,
            Err(e) => {
                let mut row = vec![r.value.clone()];
                row.extend(std::iter::repeat_n(String::new(), 8));
                row.push(e.clone());
                w.write_record(row)?
            }
        }
    }
    w.flush().map_err(|source| EmitError::Io {
        path: "<sweep table>".into(),
        source,
    })?;
    Ok(())
}
