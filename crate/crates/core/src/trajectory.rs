//! Vehicle-track CSV parsing for dataset replay. The schema is one row per
//! vehicle per frame: `vehicle_id,frame,x,y,vx,vy,length,width`, SI units,
//! frames strictly increasing per vehicle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::sim::ReplayFrame;
use crate::vehicle::VehicleGeometry;

pub const TRAJECTORY_HEADER: &str = "vehicle_id,frame,x,y,vx,vy,length,width";

/// One row of the trajectory schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub vehicle_id: u32,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

/// All records of one vehicle, frame-sorted, with derived geometry
/// (wheelbase taken as 0.6 of the body length).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStream {
    pub vehicle_id: u32,
    pub records: Vec<TrajectoryRecord>,
    pub geometry: VehicleGeometry,
}

impl TrajectoryStream {
    pub fn replay_frames(&self) -> Vec<ReplayFrame> {
        self.records
            .iter()
            .map(|r| ReplayFrame {
                frame: r.frame,
                x: r.x,
                y: r.y,
                vx: r.vx,
                vy: r.vy,
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("row 1: expected header \"{TRAJECTORY_HEADER}\", found \"{found}\"")]
    BadHeader { found: String },
    #[error("row {row}: expected 8 fields, found {found}")]
    FieldCount { row: usize, found: usize },
    #[error("row {row}: field \"{column}\" is not numeric: \"{value}\"")]
    NonNumeric {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: duplicate frame {frame} for vehicle {vehicle_id}")]
    DuplicateFrame {
        row: usize,
        vehicle_id: u32,
        frame: usize,
    },
    #[error("row {row}: frame {frame} for vehicle {vehicle_id} is not increasing (previous {prev})")]
    NonMonotoneFrame {
        row: usize,
        vehicle_id: u32,
        frame: usize,
        prev: usize,
    },
    #[error("row {row}: vehicle {vehicle_id} has non-positive dimensions {length}x{width}")]
    BadDimensions {
        row: usize,
        vehicle_id: u32,
        length: f64,
        width: f64,
    },
}

/// Parse a trajectory CSV into per-vehicle streams, ordered by vehicle id.
pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryStream>, TrajectoryError> {
    let text = fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trajectories(&text)
}

pub fn parse_trajectories(text: &str) -> Result<Vec<TrajectoryStream>, TrajectoryError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == TRAJECTORY_HEADER => {}
        Some((_, header)) => {
            return Err(TrajectoryError::BadHeader {
                found: header.to_string(),
            })
        }
        None => {
            return Err(TrajectoryError::BadHeader {
                found: String::new(),
            })
        }
    }

    let mut streams: BTreeMap<u32, TrajectoryStream> = BTreeMap::new();
    for (idx, line) in lines {
        let row = idx + 1; // 1-based, header is row 1
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(TrajectoryError::FieldCount {
                row,
                found: fields.len(),
            });
        }
        let numeric = |column: &'static str, value: &str| -> Result<f64, TrajectoryError> {
            value.trim().parse().map_err(|_| TrajectoryError::NonNumeric {
                row,
                column,
                value: value.to_string(),
            })
        };
        let vehicle_id = fields[0].trim().parse::<u32>().map_err(|_| {
            TrajectoryError::NonNumeric {
                row,
                column: "vehicle_id",
                value: fields[0].to_string(),
            }
        })?;
        let frame = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| TrajectoryError::NonNumeric {
                row,
                column: "frame",
                value: fields[1].to_string(),
            })?;
        let record = TrajectoryRecord {
            vehicle_id,
            frame,
            x: numeric("x", fields[2])?,
            y: numeric("y", fields[3])?,
            vx: numeric("vx", fields[4])?,
            vy: numeric("vy", fields[5])?,
            length: numeric("length", fields[6])?,
            width: numeric("width", fields[7])?,
        };
        if record.length <= 0.0 || record.width <= 0.0 {
            return Err(TrajectoryError::BadDimensions {
                row,
                vehicle_id,
                length: record.length,
                width: record.width,
            });
        }
        match streams.get_mut(&vehicle_id) {
            None => {
                streams.insert(
                    vehicle_id,
                    TrajectoryStream {
                        vehicle_id,
                        geometry: VehicleGeometry::from_body(record.length, record.width),
                        records: vec![record],
                    },
                );
            }
            Some(stream) => {
                let prev = stream.records.last().expect("non-empty").frame;
                if frame == prev {
                    return Err(TrajectoryError::DuplicateFrame {
                        row,
                        vehicle_id,
                        frame,
                    });
                }
                if frame < prev {
                    return Err(TrajectoryError::NonMonotoneFrame {
                        row,
                        vehicle_id,
                        frame,
                        prev,
                    });
                }
                stream.records.push(record);
            }
        }
    }
    Ok(streams.into_values().collect())
}
