//! Short-term visual memory over semantic grids.
//!
//! The buffer keeps the most recent fused perception in the current ego
//! frame. Each step it is updated in a fixed order: `transform` re-expresses
//! the remembered cells under the ego motion, `age` discounts them toward
//! ignorance and enforces a hard age cutoff, and `integrate` fuses the new
//! perception in, producing the grid the rest of the stack consumes.
//! [`MemoryBuffer::advance`] runs the three in that order.
//!
//! Per-cell age counters track steps since the cell was last observed;
//! 'observed' means the incoming perception had mass off ignorance
//! (omega below [`AGE_RESET_OMEGA`]).

use crate::grid::SemanticGrid;
use crate::mass::MassFunction;
use crate::world::Motion;
use crate::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Incoming cells with omega below this count as observed and reset age.
pub const AGE_RESET_OMEGA: f64 = 0.99;

/// Remembered perception plus per-cell ages and ageing parameters.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    grid: SemanticGrid,
    ages: Vec<u32>,
    age_gamma: f64,
    max_age_steps: u32,
}

impl MemoryBuffer {
    /// Empty memory matching the geometry of `like`.
    pub fn new(like: &SemanticGrid, age_gamma: f64, max_age_steps: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&age_gamma) {
            return Err(Error::Parameter(format!("age_gamma {age_gamma} outside [0, 1]")));
        }
        Ok(Self {
            grid: like.like_vacuous(),
            ages: vec![0; like.num_cells()],
            age_gamma,
            max_age_steps,
        })
    }

    pub fn grid(&self) -> &SemanticGrid {
        &self.grid
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn age_gamma(&self) -> f64 {
        self.age_gamma
    }

    pub fn max_age_steps(&self) -> u32 {
        self.max_age_steps
    }

    /// Re-express every remembered cell in the ego frame after `motion`.
    /// Sources scatter to their nearest destination cell; collisions fuse
    /// and keep the smaller age; destinations nothing lands on are vacuous.
    pub fn transform(&mut self, motion: Motion) {
        let (sin, cos) = motion.dtheta.sin_cos();
        let mut grid = self.grid.like_vacuous();
        let mut ages = vec![0u32; self.ages.len()];
        let mut filled = vec![false; self.ages.len()];
        let height = self.grid.height();
        let width = self.grid.width();
        for row in 0..height {
            for col in 0..width {
                let src = self.grid.cell(row, col);
                if src.omega() == 1.0 {
                    continue;
                }
                let (f, l) = self.grid.cell_center_ego(row, col);
                let nf = cos * f + sin * l - motion.dx;
                let nl = -sin * f + cos * l - motion.dy;
                let (fr, fc) = self.grid.ego_to_fractional_cell(nf, nl);
                let Some((dr, dc)) = self.grid.nearest_cell(fr, fc) else {
                    continue;
                };
                let idx = self.grid.index(dr, dc);
                let age = self.ages[self.grid.index(row, col)];
                if filled[idx] {
                    *grid.cell_mut(dr, dc) = grid.cell(dr, dc).fuse(src);
                    ages[idx] = ages[idx].min(age);
                } else {
                    *grid.cell_mut(dr, dc) = *src;
                    ages[idx] = age;
                    filled[idx] = true;
                }
            }
        }
        self.grid = grid;
        self.ages = ages;
    }

    /// Discount every cell toward ignorance and advance the age counters;
    /// cells at or past the cutoff become vacuous.
    pub fn age(&mut self) {
        for (cell, age) in self.grid.cells_mut().iter_mut().zip(&mut self.ages) {
            *age = age.saturating_add(1).min(self.max_age_steps);
            if *age >= self.max_age_steps {
                *cell = MassFunction::vacuous();
                continue;
            }
            *cell = cell.discount(self.age_gamma).expect("validated age_gamma");
        }
    }

    /// Fuse the current perception into memory and return the fused grid.
    /// Ages reset where the perception carried information.
    pub fn integrate(&mut self, perception: &SemanticGrid) -> Result<SemanticGrid> {
        let fused = self.grid.fuse_grids(perception)?;
        self.grid = fused.clone();
        for (idx, cell) in perception.cells().iter().enumerate() {
            if cell.omega() < AGE_RESET_OMEGA {
                self.ages[idx] = 0;
            }
        }
        Ok(fused)
    }

    /// One full memory step in the canonical order.
    pub fn advance(&mut self, motion: Motion, perception: &SemanticGrid) -> Result<SemanticGrid> {
        self.transform(motion);
        self.age();
        self.integrate(perception)
    }

    /// Serialize as an age table followed by the grid file. The age table
    /// comes first because the grid payload runs to the end of the stream.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "ages v1 gamma={} max={} cells={}",
            self.age_gamma,
            self.max_age_steps,
            self.ages.len()
        )?;
        for age in &self.ages {
            writeln!(w, "{age}")?;
        }
        self.grid.write_to(&mut w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = header.trim_end();
        let rest = header
            .strip_prefix("ages v1 ")
            .ok_or_else(|| Error::Format(format!("bad age table header `{header}`")))?;
        let mut age_gamma = None;
        let mut max_age = None;
        let mut cells = None;
        for part in rest.split_whitespace() {
            if let Some(v) = part.strip_prefix("gamma=") {
                age_gamma = v.parse::<f64>().ok();
            } else if let Some(v) = part.strip_prefix("max=") {
                max_age = v.parse::<u32>().ok();
            } else if let Some(v) = part.strip_prefix("cells=") {
                cells = v.parse::<usize>().ok();
            }
        }
        let (age_gamma, max_age_steps, cells) = match (age_gamma, max_age, cells) {
            (Some(g), Some(m), Some(c)) => (g, m, c),
            _ => return Err(Error::Format(format!("bad age table header `{header}`"))),
        };
        let mut ages = Vec::with_capacity(cells);
        for _ in 0..cells {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("age table truncated".into()));
            }
            ages.push(
                line.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::Format(format!("bad age entry: {e}")))?,
            );
        }
        let grid = SemanticGrid::read_from(&mut reader)?;
        if ages.len() != grid.num_cells() {
            return Err(Error::Format(format!(
                "age table has {} entries for {} cells",
                ages.len(),
                grid.num_cells()
            )));
        }
        let mut buf = Self::new(&grid, age_gamma, max_age_steps)?;
        buf.grid = grid;
        buf.ages = ages;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}
