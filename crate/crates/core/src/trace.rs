//! Trace and batch-summary CSV output. Floats are written with Rust's
//! shortest round-trip formatting, so re-parsing recovers them exactly and
//! identical runs produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::sim::{BatchSummary, SimTrace};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Write a trace as CSV rows
/// `step,time,vehicle_id,x,y,vx,vy,heading,accel,steer,risk`.
///
/// The risk column is populated only on the ego's rows; control columns are
/// empty for replayed vehicles. Terminal metrics are appended as `#`
/// comment lines. `timestamp`, when given, is emitted as a leading comment
/// (suppressed for byte-reproducible output).
pub fn write_trace(
    trace: &SimTrace,
    path: &Path,
    timestamp: Option<&str>,
) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        if let Some(ts) = timestamp {
            writeln!(w, "# generated: {ts}")?;
        }
        writeln!(w, "step,time,vehicle_id,x,y,vx,vy,heading,accel,steer,risk")?;
        for rec in &trace.records {
            for row in &rec.rows {
                // Ego rows are the ones carrying controls from the MPC;
                // the aggregated risk belongs to the ego row only.
                let is_ego = row.id == ego_id(trace);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    rec.step,
                    rec.time,
                    row.id,
                    row.x,
                    row.y,
                    row.vx,
                    row.vy,
                    row.heading,
                    opt(row.accel),
                    opt(row.steer),
                    if is_ego { opt(rec.ego_risk) } else { String::new() },
                )?;
            }
        }
        let m = &trace.metrics;
        writeln!(w, "# avg_speed: {}", m.avg_speed)?;
        writeln!(w, "# long_dist: {}", m.long_dist)?;
        writeln!(w, "# min_distance: {}", m.min_distance)?;
        writeln!(w, "# collision: {}", m.collision)?;
        writeln!(w, "# safety_bound: {}", m.safety_bound)?;
        w.flush()
    };
    write().map_err(io_err)
}

fn ego_id(trace: &SimTrace) -> u32 {
    // The ego is the vehicle whose rows carry a steering entry; fall back
    // to the first row's id for traces without any controls.
    trace
        .records
        .first()
        .and_then(|rec| rec.rows.iter().find(|r| r.steer.is_some()))
        .map(|r| r.id)
        .unwrap_or_default()
}

/// Write per-trial batch results as
/// `trial,seed,avg_speed,long_dist,min_dist,collision` with mean/min/max
/// summary comment lines.
pub fn write_batch_summary(
    traces: &[SimTrace],
    seeds: &[u64],
    summary: &BatchSummary,
    path: &Path,
    timestamp: Option<&str>,
) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        if let Some(ts) = timestamp {
            writeln!(w, "# generated: {ts}")?;
        }
        writeln!(w, "trial,seed,avg_speed,long_dist,min_dist,collision")?;
        for (i, (trace, seed)) in traces.iter().zip(seeds.iter()).enumerate() {
            let m = &trace.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                i, seed, m.avg_speed, m.long_dist, m.min_distance, m.collision
            )?;
        }
        writeln!(
            w,
            "# avg_speed mean={} min={} max={}",
            summary.avg_speed.0, summary.avg_speed.1, summary.avg_speed.2
        )?;
        writeln!(
            w,
            "# long_dist mean={} min={} max={}",
            summary.long_dist.0, summary.long_dist.1, summary.long_dist.2
        )?;
        writeln!(
            w,
            "# min_dist mean={} min={} max={}",
            summary.min_distance.0, summary.min_distance.1, summary.min_distance.2
        )?;
        writeln!(w, "# collisions: {}", summary.collisions)?;
        w.flush()
    };
    write().map_err(io_err)
}
