//! Brute-force visibility by dense line sampling.

use coopgrid::config::{GridConfig, SensorConfig};
use coopgrid::mass::Class;

/// Visibility of every cell by sampling the ego-to-center segment at
/// `factor` points per cell of distance. A sample blocks the ray when it
/// falls inside a sight-blocking cell other than the endpoints.
pub fn supersampled_visibility(
    classes: &[Class],
    grid: &GridConfig,
    sensor: &SensorConfig,
    factor: usize,
) -> Vec<bool> {
    let (ego_row, ego_col) = grid.ego_cell();
    let half_fov = sensor.fov_deg.to_radians() / 2.0;
    let res = grid.meters_per_cell;
    let mut visible = vec![false; grid.height * grid.width];
    for row in 0..grid.height {
        for col in 0..grid.width {
            let forward = (ego_row as f64 - row as f64) * res;
            let left = (ego_col as f64 - col as f64) * res;
            if forward.hypot(left) > sensor.max_range_m + 1e-12 {
                continue;
            }
            if left.atan2(forward).abs() > half_fov + 1e-12 {
                continue;
            }
            visible[row * grid.width + col] =
                segment_clear(classes, grid, (ego_row, ego_col), (row, col), factor);
        }
    }
    visible
}

/// Visibility of every cell by exact segment-cell intersection: all row and
/// column boundary crossings are enumerated and sorted, and each interval
/// between consecutive crossings is classified by its midpoint. Crossings
/// closer than 1e-9 merge into a corner touch, which skips the cells met
/// only at a point. Exact counterpart of [`supersampled_visibility`].
pub fn exact_crossing_visibility(
    classes: &[Class],
    grid: &GridConfig,
    sensor: &SensorConfig,
) -> Vec<bool> {
    let (ego_row, ego_col) = grid.ego_cell();
    let half_fov = sensor.fov_deg.to_radians() / 2.0;
    let res = grid.meters_per_cell;
    let mut visible = vec![false; grid.height * grid.width];
    for row in 0..grid.height {
        for col in 0..grid.width {
            let forward = (ego_row as f64 - row as f64) * res;
            let left = (ego_col as f64 - col as f64) * res;
            if forward.hypot(left) > sensor.max_range_m + 1e-12 {
                continue;
            }
            if left.atan2(forward).abs() > half_fov + 1e-12 {
                continue;
            }
            visible[row * grid.width + col] =
                segment_clear_exact(classes, grid, (ego_row, ego_col), (row, col));
        }
    }
    visible
}

fn segment_clear_exact(
    classes: &[Class],
    grid: &GridConfig,
    source: (usize, usize),
    target: (usize, usize),
) -> bool {
    if source == target {
        return true;
    }
    let (r0, c0) = (source.0 as f64, source.1 as f64);
    let dr = target.0 as f64 - r0;
    let dc = target.1 as f64 - c0;
    let mut crossings = vec![0.0f64, 1.0];
    if dr != 0.0 {
        let n = dr.abs() as i64;
        for k in 0..n {
            crossings.push((k as f64 + 0.5) / dr.abs());
        }
    }
    if dc != 0.0 {
        let n = dc.abs() as i64;
        for k in 0..n {
            crossings.push((k as f64 + 0.5) / dc.abs());
        }
    }
    crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in crossings.windows(2) {
        if pair[1] - pair[0] < 1e-9 {
            continue;
        }
        let t = (pair[0] + pair[1]) / 2.0;
        let cell = ((r0 + t * dr).round() as usize, (c0 + t * dc).round() as usize);
        if cell == source || cell == target {
            continue;
        }
        if classes[cell.0 * grid.width + cell.1].blocks_sight() {
            return false;
        }
    }
    true
}

fn segment_clear(
    classes: &[Class],
    grid: &GridConfig,
    source: (usize, usize),
    target: (usize, usize),
    factor: usize,
) -> bool {
    if source == target {
        return true;
    }
    let (r0, c0) = (source.0 as f64, source.1 as f64);
    let dr = target.0 as f64 - r0;
    let dc = target.1 as f64 - c0;
    let samples = (dr.abs().hypot(dc.abs()).ceil() as usize).max(1) * factor;
    for j in 1..samples {
        let t = j as f64 / samples as f64;
        let rr = r0 + t * dr;
        let cc = c0 + t * dc;
        // A sample exactly on a cell boundary says nothing about interiors.
        if (rr - rr.floor() - 0.5).abs() < 1e-9 || (cc - cc.floor() - 0.5).abs() < 1e-9 {
            continue;
        }
        let row = rr.round() as i64;
        let col = cc.round() as i64;
        if row < 0 || col < 0 || row >= grid.height as i64 || col >= grid.width as i64 {
            continue;
        }
        let cell = (row as usize, col as usize);
        if cell == source || cell == target {
            continue;
        }
        if classes[cell.0 * grid.width + cell.1].blocks_sight() {
            return false;
        }
    }
    true
}
