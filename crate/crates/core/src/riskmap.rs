//! Counterfactual risk maps: rasterize the aggregated perceived risk over a
//! spatial grid by placing the ego vehicle at every cell center, extract the
//! zero-level contour, and export the result.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{aggregate_risk, EgoNoise, NoisyAgentState, RiskError, RiskParams};

/// Rectangular grid specification. Cell (i, j) covers
/// `[x_min + i*dx, x_min + (i+1)*dx] x [y_min + j*dy, y_min + (j+1)*dy]`
/// and is evaluated at its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Cell count along x.
    pub nx: usize,
    /// Cell count along y.
    pub ny: usize,
}

impl GridSpec {
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_max - self.x_min) / self.nx as f64,
            (self.y_max - self.y_min) / self.ny as f64,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            self.x_min + (i as f64 + 0.5) * dx,
            self.y_min + (j as f64 + 0.5) * dy,
        )
    }

    pub fn validate(&self) -> Result<(), RiskMapError> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) || self.nx < 2 || self.ny < 2 {
            return Err(RiskMapError::InvalidGrid);
        }
        Ok(())
    }
}

/// Grid of counterfactual aggregated-risk values, row-major with the x index
/// outermost: `values[i * ny + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMapGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Velocity assumed for the counterfactual ego.
    pub ego_velocity: (f64, f64),
}

impl RiskMapGrid {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.ny + j]
    }
}

#[derive(Debug, Error)]
pub enum RiskMapError {
    #[error("grid bounds must be increasing and cell counts at least 2")]
    InvalidGrid,
    #[error("risk map needs at least one neighbor")]
    NoNeighbors,
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Evaluate the aggregated risk for a counterfactual ego placed at every
/// cell center with velocity `ego_vel`. Cells are evaluated in parallel.
pub fn compute_risk_map(
    spec: &GridSpec,
    ego_vel: (f64, f64),
    ego_noise: &EgoNoise,
    others: &[NoisyAgentState],
    per_pair_params: &[RiskParams],
) -> Result<RiskMapGrid, RiskMapError> {
    spec.validate()?;
    if others.is_empty() {
        return Err(RiskMapError::NoNeighbors);
    }
    if others.len() != per_pair_params.len() {
        return Err(RiskError::PairParamsMismatch {
            others: others.len(),
            params: per_pair_params.len(),
        }
        .into());
    }
    let ny = spec.ny;
    let mut values = vec![0.0f64; spec.nx * spec.ny];
    values
        .par_chunks_mut(ny)
        .enumerate()
        .for_each(|(i, column)| {
            for (j, cell) in column.iter_mut().enumerate() {
                let center = spec.cell_center(i, j);
                let ego = NoisyAgentState::new(center, ego_vel, ego_noise.pos_cov, ego_noise.vel_cov);
                // Neighbor list is non-empty and lengths were checked above.
                *cell = aggregate_risk(&ego, others, per_pair_params)
                    .expect("lengths checked")
                    .expect("non-empty neighbors");
            }
        });
    Ok(RiskMapGrid {
        spec: *spec,
        values,
        ego_velocity: ego_vel,
    })
}

/// A contour polyline in world coordinates; closed when the first and last
/// vertex coincide.
pub type Polyline = Vec<(f64, f64)>;

// Edge of the node lattice, identified by its lower-left node and direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum EdgeKey {
    Horizontal(usize, usize), // between nodes (i,j) and (i+1,j)
    Vertical(usize, usize),   // between nodes (i,j) and (i,j+1)
}

/// Extract the zero level set with marching squares over the lattice of
/// cell centers, interpolating crossings linearly along lattice edges.
/// Returns an empty list when the grid does not change sign.
pub fn extract_zero_contour(grid: &RiskMapGrid) -> Vec<Polyline> {
    let nx = grid.spec.nx;
    let ny = grid.spec.ny;
    let inside = |i: usize, j: usize| grid.value(i, j) > 0.0;

    let crossing = |a: (usize, usize), b: (usize, usize)| -> (f64, f64) {
        let va = grid.value(a.0, a.1);
        let vb = grid.value(b.0, b.1);
        let t = va / (va - vb);
        let pa = grid.spec.cell_center(a.0, a.1);
        let pb = grid.spec.cell_center(b.0, b.1);
        (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
    };

    // Collect one or two segments (as edge-key pairs) per marching cell.
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let corners = [
                inside(i, j),
                inside(i + 1, j),
                inside(i + 1, j + 1),
                inside(i, j + 1),
            ];
            let code = corners
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, c)| acc | ((*c as u8) << k));
            let bottom = EdgeKey::Horizontal(i, j);
            let top = EdgeKey::Horizontal(i, j + 1);
            let left = EdgeKey::Vertical(i, j);
            let right = EdgeKey::Vertical(i + 1, j);
            match code {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 | 10 => {
                    // Saddle: decide connectivity from the sign of the cell
                    // center, estimated as the mean of the four corners.
                    let avg = (grid.value(i, j)
                        + grid.value(i + 1, j)
                        + grid.value(i + 1, j + 1)
                        + grid.value(i, j + 1))
                        / 4.0;
                    let center_inside = avg > 0.0;
                    let connect_like_diag = (code == 5) == center_inside;
                    if connect_like_diag {
                        // Positive corners joined through the center.
                        if code == 5 {
                            segments.push((left, top));
                            segments.push((bottom, right));
                        } else {
                            segments.push((left, bottom));
                            segments.push((right, top));
                        }
                    } else if code == 5 {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // Chain segments that share lattice edges into polylines.
    use std::collections::BTreeMap;
    let mut adjacency: BTreeMap<EdgeKey, Vec<usize>> = BTreeMap::new();
    for (idx, (a, b)) in segments.iter().enumerate() {
        adjacency.entry(*a).or_default().push(idx);
        adjacency.entry(*b).or_default().push(idx);
    }
    let edge_point = |e: EdgeKey| match e {
        EdgeKey::Horizontal(i, j) => crossing((i, j), (i + 1, j)),
        EdgeKey::Vertical(i, j) => crossing((i, j), (i, j + 1)),
    };

    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        // Walk in both directions from the starting segment.
        let mut chain = vec![segments[start].0, segments[start].1];
        used[start] = true;
        loop {
            let tail = *chain.last().unwrap();
            let next = adjacency[&tail].iter().find(|idx| !used[**idx]).copied();
            match next {
                Some(idx) => {
                    used[idx] = true;
                    let (a, b) = segments[idx];
                    chain.push(if a == tail { b } else { a });
                }
                None => break,
            }
        }
        loop {
            let head = chain[0];
            let next = adjacency[&head].iter().find(|idx| !used[**idx]).copied();
            match next {
                Some(idx) => {
                    used[idx] = true;
                    let (a, b) = segments[idx];
                    chain.insert(0, if a == head { b } else { a });
                }
                None => break,
            }
        }
        polylines.push(chain.into_iter().map(edge_point).collect());
    }
    polylines
}

fn float_fmt(v: f64) -> String {
    format!("{v}")
}

/// Write the grid as CSV rows `x,y,risk` (header included, one row per
/// cell, x-major order).
pub fn export_grid_csv(grid: &RiskMapGrid, path: &Path) -> Result<(), RiskMapError> {
    let io_err = |source| RiskMapError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "x,y,risk")?;
        for i in 0..grid.spec.nx {
            for j in 0..grid.spec.ny {
                let (x, y) = grid.spec.cell_center(i, j);
                writeln!(w, "{},{},{}", float_fmt(x), float_fmt(y), float_fmt(grid.value(i, j)))?;
            }
        }
        w.flush()
    };
    write().map_err(io_err)
}

/// Write the grid as a binary 16-bit PGM (P5, maxval 65535, big-endian).
///
/// Risk values are mapped affinely so the minimum maps to 0 and the maximum
/// to 65535; the header comment `# affine: offset=<o> scale=<s>` records the
/// map (`risk = sample/scale + offset`). A constant grid is written as all
/// zeros with `scale=0`. Rows run from the top of the image (largest y) down.
pub fn export_grid_pgm(grid: &RiskMapGrid, path: &Path) -> Result<(), RiskMapError> {
    let io_err = |source| RiskMapError::Io {
        path: path.display().to_string(),
        source,
    };
    let lo = grid.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };

    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "P5")?;
        writeln!(w, "# affine: offset={} scale={}", float_fmt(lo), float_fmt(scale))?;
        writeln!(w, "{} {}", grid.spec.nx, grid.spec.ny)?;
        writeln!(w, "65535")?;
        for j in (0..grid.spec.ny).rev() {
            for i in 0..grid.spec.nx {
                let sample = ((grid.value(i, j) - lo) * scale).round().clamp(0.0, 65535.0) as u16;
                w.write_all(&sample.to_be_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(io_err)
}
