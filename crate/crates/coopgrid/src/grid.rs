//! Ego-centered semantic grids of mass functions.
//!
//! A grid covers the area ahead of the ego vehicle: the ego-vehicle center
//! sits in the middle of the bottom row, rows extend forward (row 0 is
//! farthest), columns extend laterally (column index grows to the right).
//! Each cell holds a [`MassFunction`].
//!
//! # File format
//!
//! A grid file is a one-line ASCII header followed by raw cell data:
//!
//! ```text
//! evgrid v1 height=<H> width=<W> meters_per_cell=<f64> ego_row=<r> ego_col=<c> classes=pedestrian,car,road-lines,road,other,omega\n
//! ```
//!
//! then `H·W·6` little-endian `f32` values, cells in row-major order, the six
//! channels of a cell consecutive in class order. The class list in the
//! header is fixed and checked on read.

use crate::mass::{MassFunction, CLASS_NAMES, NUM_CHANNELS};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Default grid height in cells (forward extent).
pub const DEFAULT_HEIGHT: usize = 80;
/// Default grid width in cells (lateral extent).
pub const DEFAULT_WIDTH: usize = 120;
/// Default cell edge length in meters.
pub const DEFAULT_METERS_PER_CELL: f64 = 0.5;

const MAGIC: &str = "evgrid v1";

/// Round half up: ties go toward positive infinity.
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Dense ego-centered grid of mass functions with resolution metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    height: usize,
    width: usize,
    meters_per_cell: f64,
    ego_cell: (usize, usize),
    cells: Vec<MassFunction>,
}

impl SemanticGrid {
    /// Grid of the given shape with every cell set to `fill`.
    pub fn filled(
        height: usize,
        width: usize,
        meters_per_cell: f64,
        ego_cell: (usize, usize),
        fill: MassFunction,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter("grid dimensions must be positive".into()));
        }
        if meters_per_cell.is_nan() || meters_per_cell <= 0.0 {
            return Err(Error::Parameter("meters_per_cell must be positive".into()));
        }
        if ego_cell.0 >= height || ego_cell.1 >= width {
            return Err(Error::Parameter(format!(
                "ego cell {:?} outside {}x{} grid",
                ego_cell, height, width
            )));
        }
        Ok(Self { height, width, meters_per_cell, ego_cell, cells: vec![fill; height * width] })
    }

    /// All-vacuous grid with the default geometry: 80x120 cells, 0.5 m per
    /// cell, ego in the middle of the bottom row.
    pub fn default_vacuous() -> Self {
        Self::filled(
            DEFAULT_HEIGHT,
            DEFAULT_WIDTH,
            DEFAULT_METERS_PER_CELL,
            (DEFAULT_HEIGHT - 1, DEFAULT_WIDTH / 2),
            MassFunction::vacuous(),
        )
        .expect("default geometry is valid")
    }

    /// All-vacuous grid matching the shape and metadata of `self`.
    pub fn like_vacuous(&self) -> Self {
        self.like_filled(MassFunction::vacuous())
    }

    /// Grid matching the shape and metadata of `self` with every cell `fill`.
    pub fn like_filled(&self, fill: MassFunction) -> Self {
        Self {
            height: self.height,
            width: self.width,
            meters_per_cell: self.meters_per_cell,
            ego_cell: self.ego_cell,
            cells: vec![fill; self.cells.len()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn meters_per_cell(&self) -> f64 {
        self.meters_per_cell
    }

    pub fn ego_cell(&self) -> (usize, usize) {
        self.ego_cell
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub fn cell(&self, row: usize, col: usize) -> &MassFunction {
        &self.cells[self.index(row, col)]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut MassFunction {
        let i = self.index(row, col);
        &mut self.cells[i]
    }

    pub fn cells(&self) -> &[MassFunction] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [MassFunction] {
        &mut self.cells
    }

    /// True when dimensions, resolution, and ego cell all match.
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.meters_per_cell == other.meters_per_cell
            && self.ego_cell == other.ego_cell
    }

    fn check_geometry(&self, other: &Self) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(Error::Dimension(format!(
                "{}x{} (ego {:?}) vs {}x{} (ego {:?})",
                self.height, self.width, self.ego_cell, other.height, other.width, other.ego_cell
            )));
        }
        Ok(())
    }

    /// Cell-wise fusion; metadata preserved.
    pub fn fuse_grids(&self, other: &Self) -> Result<Self> {
        self.check_geometry(other)?;
        let cells = self
            .cells
            .iter()
            .zip(other.cells.iter())
            .map(|(a, b)| a.fuse(b))
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            meters_per_cell: self.meters_per_cell,
            ego_cell: self.ego_cell,
            cells,
        })
    }

    /// Max absolute channel difference over all cells.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.cells
            .iter()
            .zip(other.cells.iter())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Ego-frame position of a cell center in meters: x forward, y left.
    ///
    /// Row `ego_row` is at x = 0; columns right of the ego column have
    /// negative y.
    pub fn cell_center_ego(&self, row: usize, col: usize) -> (f64, f64) {
        let forward = (self.ego_cell.0 as f64 - row as f64) * self.meters_per_cell;
        let left = (self.ego_cell.1 as f64 - col as f64) * self.meters_per_cell;
        (forward, left)
    }

    /// Fractional (row, col) whose center sits at the given ego-frame point.
    pub fn ego_to_fractional_cell(&self, forward: f64, left: f64) -> (f64, f64) {
        let row = self.ego_cell.0 as f64 - forward / self.meters_per_cell;
        let col = self.ego_cell.1 as f64 - left / self.meters_per_cell;
        (row, col)
    }

    /// Nearest cell to a fractional (row, col), ties rounded half up;
    /// `None` outside the grid.
    pub fn nearest_cell(&self, frac_row: f64, frac_col: f64) -> Option<(usize, usize)> {
        let row = round_half_up(frac_row);
        let col = round_half_up(frac_col);
        if row < 0.0 || col < 0.0 || row >= self.height as f64 || col >= self.width as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Writes the grid file format described in the module docs.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = format!(
            "{} height={} width={} meters_per_cell={} ego_row={} ego_col={} classes={}\n",
            MAGIC,
            self.height,
            self.width,
            self.meters_per_cell,
            self.ego_cell.0,
            self.ego_cell.1,
            CLASS_NAMES.join(",")
        );
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.cells.len() * NUM_CHANNELS * 4);
        for cell in &self.cells {
            for &m in cell.masses() {
                buf.extend_from_slice(&(m as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    /// Reads the grid file format described in the module docs.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                return Err(Error::Format("missing header line".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            if header.len() > 4096 {
                return Err(Error::Format("unterminated header line".into()));
            }
            header.push(byte[0]);
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut height = None;
        let mut width = None;
        let mut meters_per_cell = None;
        let mut ego_row = None;
        let mut ego_col = None;
        let mut classes = None;
        let mut magic_ok = false;
        let mut fields = header.split_whitespace();
        if fields.next() == Some("evgrid") && fields.next() == Some("v1") {
            magic_ok = true;
        }
        if !magic_ok {
            return Err(Error::Format(format!("bad magic, expected `{MAGIC}`")));
        }
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field `{field}`")))?;
            match key {
                "height" => height = Some(parse_usize(key, value)?),
                "width" => width = Some(parse_usize(key, value)?),
                "meters_per_cell" => {
                    meters_per_cell = Some(value.parse::<f64>().map_err(|_| {
                        Error::Format(format!("bad meters_per_cell `{value}`"))
                    })?)
                }
                "ego_row" => ego_row = Some(parse_usize(key, value)?),
                "ego_col" => ego_col = Some(parse_usize(key, value)?),
                "classes" => classes = Some(value.to_string()),
                _ => return Err(Error::Format(format!("unknown header key `{key}`"))),
            }
        }
        let (Some(height), Some(width), Some(meters_per_cell), Some(ego_row), Some(ego_col)) =
            (height, width, meters_per_cell, ego_row, ego_col)
        else {
            return Err(Error::Format("incomplete header".into()));
        };
        let expected_classes = CLASS_NAMES.join(",");
        if classes.as_deref() != Some(expected_classes.as_str()) {
            return Err(Error::Format(format!(
                "class order `{}` does not match `{expected_classes}`",
                classes.unwrap_or_default()
            )));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let expected_len = height * width * NUM_CHANNELS * 4;
        if data.len() != expected_len {
            return Err(Error::Format(format!(
                "cell payload is {} bytes, expected {expected_len}",
                data.len()
            )));
        }
        let mut grid = SemanticGrid::filled(
            height,
            width,
            meters_per_cell,
            (ego_row, ego_col),
            MassFunction::vacuous(),
        )?;
        for (i, chunk) in data.chunks_exact(NUM_CHANNELS * 4).enumerate() {
            let mut masses = [0.0f64; NUM_CHANNELS];
            for (k, bytes) in chunk.chunks_exact(4).enumerate() {
                masses[k] = f32::from_le_bytes(bytes.try_into().unwrap()) as f64;
            }
            grid.cells[i] = MassFunction::new(masses)
                .map_err(|e| Error::Format(format!("cell {i}: {e}")))?;
        }
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad {key} `{value}`")))
}
