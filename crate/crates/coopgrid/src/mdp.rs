//! Request-for-perception decision process.
//!
//! Each step the ego picks a bounding box over its own grid and asks nearby
//! traffic to share what they see there. The granted excerpt of the true
//! scene arrives one step later and is fused into memory. The reward prices
//! what was learned: per cell, the filtered mass gained on each class, minus
//! a per-cell request cost; per request, a base cost that makes boxes below
//! roughly `k_min_cells` of fully informative cells not worth sending. An
//! empty box is "no cooperation" and draws a flat penalty.
//!
//! Geometry is fit-anchored: the box anchor range shrinks with box size so
//! the realized rectangle always fits inside the grid and its area fraction
//! matches `w·h`.

use crate::config::{ExperimentConfig, GridConfig, RewardConfig, SensorConfig};
use crate::grid::{round_half_up, SemanticGrid};
use crate::mass::NUM_CLASSES;
use crate::memory::MemoryBuffer;
use crate::world::{observe, world_init, world_step, EgoState, ObservationBundle, WorldState};
use crate::{Error, Result};

/// Normalized request box: `u, v` anchor (column, row), `w, h` size, all in
/// [0, 1]. A box whose rounded height or width is zero cells encodes the
/// empty request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBoxAction {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBoxAction {
    /// Requests the whole grid.
    pub const BROADCAST: Self = Self { u: 0.0, v: 0.0, w: 1.0, h: 1.0 };

    /// Canonical empty request.
    pub const EMPTY: Self = Self { u: 0.0, v: 0.0, w: 0.0, h: 0.0 };

    pub fn new(u: f64, v: f64, w: f64, h: f64) -> Result<Self> {
        for (name, value) in [("u", u), ("v", v), ("w", w), ("h", h)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Parameter(format!(
                    "action component {name} = {value} outside [0, 1]"
                )));
            }
        }
        Ok(Self { u, v, w, h })
    }

    /// Components clamped into [0, 1], NaN mapped to 0.
    pub fn clamped(u: f64, v: f64, w: f64, h: f64) -> Self {
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        Self { u: c(u), v: c(v), w: c(w), h: c(h) }
    }
}

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl CellRect {
    pub fn num_cells(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }
}

/// Cell rectangle a box maps to, `None` for the empty request.
///
/// Height and width round to whole cell spans first; the anchor then ranges
/// over the positions where that span still fits. All rounding is half-up.
pub fn box_rect(a: BoundingBoxAction, height: usize, width: usize) -> Option<CellRect> {
    let hc = round_half_up(a.h * (height as f64 - 1.0));
    let wc = round_half_up(a.w * (width as f64 - 1.0));
    if hc < 1.0 || wc < 1.0 {
        return None;
    }
    let (hc, wc) = (hc as usize, wc as usize);
    let row0 = round_half_up(a.v * (height - 1 - hc) as f64) as usize;
    let col0 = round_half_up(a.u * (width - 1 - wc) as f64) as usize;
    Some(CellRect { row0, col0, row1: row0 + hc, col1: col0 + wc })
}

/// Row-major linear indices of the cells a box requests.
pub fn cells_of(a: BoundingBoxAction, height: usize, width: usize) -> Vec<usize> {
    let Some(rect) = box_rect(a, height, width) else {
        return Vec::new();
    };
    let mut cells = Vec::with_capacity(rect.num_cells());
    for row in rect.row0..=rect.row1 {
        for col in rect.col0..=rect.col1 {
            cells.push(row * width + col);
        }
    }
    cells
}

/// Copy of `complete` restricted to the requested box, vacuous elsewhere.
pub fn extract_mask(complete: &SemanticGrid, a: BoundingBoxAction) -> SemanticGrid {
    let mut grid = complete.like_vacuous();
    if let Some(rect) = box_rect(a, complete.height(), complete.width()) {
        for row in rect.row0..=rect.row1 {
            for col in rect.col0..=rect.col1 {
                *grid.cell_mut(row, col) = *complete.cell(row, col);
            }
        }
    }
    grid
}

/// Reward shaping parameters.
///
/// `r_obj` holds the per-cell class rewards normalized so the largest is 1
/// and the last (the catch-all static class) is 0; `r_min` is the smallest
/// nonzero entry and prices the per-cell request cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub eta: f64,
    pub k_min_cells: u32,
    pub w_exp: f64,
    pub r_obj: [f64; NUM_CLASSES],
    pub r_min: f64,
    pub no_coop_penalty: f64,
    pub alpha: f64,
    pub beta_f: f64,
    pub beta_l: f64,
    pub zeta: f64,
}

/// Parameters from the default per-square-meter class rewards on the
/// default half-meter grid.
pub fn default_reward_params() -> RewardParams {
    RewardParams::from_config(&RewardConfig::default(), crate::grid::DEFAULT_METERS_PER_CELL)
        .expect("default reward config is valid")
}

impl RewardParams {
    /// Per-cell rewards from per-square-meter densities: scale by the cell
    /// area, then normalize by the maximum.
    pub fn from_config(cfg: &RewardConfig, meters_per_cell: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.eta) {
            return Err(Error::Parameter(format!("eta {} outside [0, 1]", cfg.eta)));
        }
        if cfg.w_exp.is_nan() || cfg.w_exp <= 0.0 {
            return Err(Error::Parameter(format!("w_exp {} must be positive", cfg.w_exp)));
        }
        if !(0.0..1.0).contains(&cfg.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1)", cfg.alpha)));
        }
        for (name, value) in [("beta_f", cfg.beta_f), ("beta_l", cfg.beta_l)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Parameter(format!("{name} {value} outside [0, 1]")));
            }
        }
        if cfg.zeta.is_nan() || cfg.zeta <= 0.0 || cfg.zeta > 1.0 {
            return Err(Error::Parameter(format!("zeta {} outside (0, 1]", cfg.zeta)));
        }
        if meters_per_cell.is_nan() || meters_per_cell <= 0.0 {
            return Err(Error::Parameter(format!(
                "meters_per_cell {meters_per_cell} must be positive"
            )));
        }
        let cell_area = meters_per_cell * meters_per_cell;
        let mut r_obj = cfg.r_obj_per_m2;
        for r in &mut r_obj {
            if r.is_nan() || *r < 0.0 {
                return Err(Error::Parameter(format!("class reward {r} must be nonnegative")));
            }
            *r *= cell_area;
        }
        for k in 0..NUM_CLASSES - 1 {
            if r_obj[k] < r_obj[k + 1] {
                return Err(Error::Parameter(
                    "per-class rewards must be nonincreasing".into(),
                ));
            }
        }
        if r_obj[NUM_CLASSES - 1] != 0.0 {
            return Err(Error::Parameter(
                "the last per-class reward must be zero".into(),
            ));
        }
        let max = r_obj.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::Parameter("at least one class reward must be positive".into()));
        }
        for r in &mut r_obj {
            *r /= max;
        }
        let r_min = r_obj[NUM_CLASSES - 2];
        Ok(Self {
            eta: cfg.eta,
            k_min_cells: cfg.k_min_cells,
            w_exp: cfg.w_exp,
            r_obj,
            r_min,
            no_coop_penalty: cfg.penalty,
            alpha: cfg.alpha,
            beta_f: cfg.beta_f,
            beta_l: cfg.beta_l,
            zeta: cfg.zeta,
        })
    }
}

/// Precomputed spatial filter S = S_F · S_L over the ego-centered grid.
///
/// S_F fades cells whose row distance from the ego exceeds the onset
/// fraction `alpha` of the maximum; S_L fades cells outside a narrow
/// forward cone of half-width controlled by `zeta`. Both floors are
/// `1 − beta`, so values stay in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilterGrid {
    height: usize,
    width: usize,
    ego_cell: (usize, usize),
    values: Vec<f64>,
}

impl SpatialFilterGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ego_cell(&self) -> (usize, usize) {
        self.ego_cell
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn build_spatial_filter(
    p: &RewardParams,
    height: usize,
    width: usize,
    ego_cell: (usize, usize),
) -> Result<SpatialFilterGrid> {
    if p.zeta <= 0.0 {
        return Err(Error::Parameter(format!("zeta {} must be positive", p.zeta)));
    }
    if height == 0 || width == 0 || ego_cell.0 >= height || ego_cell.1 >= width {
        return Err(Error::Parameter(format!(
            "ego cell {ego_cell:?} outside {height}x{width} grid"
        )));
    }
    let max_f = ego_cell.0.max(height - 1 - ego_cell.0) as f64;
    let mut values = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let f = (row as f64 - ego_cell.0 as f64).abs();
            let l = (col as f64 - ego_cell.1 as f64).abs();
            let s_f = if max_f > 0.0 {
                1.0 - (p.beta_f / (1.0 - p.alpha)) * (f / max_f - p.alpha).max(0.0)
            } else {
                1.0
            };
            // |cos(atan2(l, f))| computed as f / hypot(f, l): identical for
            // f, l >= 0 and exact on both axes.
            let cone = if l == 0.0 { 1.0 } else { f / f.hypot(l) };
            let s_l = 1.0 - (p.beta_l / p.zeta) * (p.zeta - cone).max(0.0);
            values.push(s_f * s_l);
        }
    }
    Ok(SpatialFilterGrid { height, width, ego_cell, values })
}

/// Per-cell reward for the transition from belief `g_tilde_next` to the
/// post-grant fusion `g_next`: a flat request cost plus the filtered,
/// exponentiated mass gained on each rewarded class.
pub fn reward_density(
    g_next: &SemanticGrid,
    g_tilde_next: &SemanticGrid,
    s: &SpatialFilterGrid,
    p: &RewardParams,
) -> Result<Vec<f64>> {
    if !g_next.same_geometry(g_tilde_next)
        || g_next.height() != s.height
        || g_next.width() != s.width
    {
        return Err(Error::Dimension(format!(
            "density inputs disagree: {}x{}, {}x{}, filter {}x{}",
            g_next.height(),
            g_next.width(),
            g_tilde_next.height(),
            g_tilde_next.width(),
            s.height,
            s.width
        )));
    }
    let base = -p.eta * p.r_min;
    let mut density = Vec::with_capacity(g_next.num_cells());
    for (i, (after, before)) in g_next.cells().iter().zip(g_tilde_next.cells()).enumerate() {
        let mut gain = 0.0;
        for k in 0..NUM_CLASSES {
            let delta = (after.mass(k) - before.mass(k)).max(0.0);
            gain += p.r_obj[k] * delta.powf(p.w_exp);
        }
        density.push(base + s.values[i] * gain);
    }
    Ok(density)
}

/// Request reward: the empty request draws the flat no-cooperation penalty;
/// any other box pays a base cost worth `k_min_cells` fully informative
/// minimum-value cells plus the density summed over its cells.
pub fn reward(
    a: BoundingBoxAction,
    density: &[f64],
    p: &RewardParams,
    height: usize,
    width: usize,
) -> f64 {
    let Some(rect) = box_rect(a, height, width) else {
        return p.no_coop_penalty;
    };
    let base = -(p.k_min_cells as f64) * (1.0 - p.eta) * p.r_min;
    let mut sum = 0.0;
    for row in rect.row0..=rect.row1 {
        let start = row * width + rect.col0;
        sum += density[start..start + (rect.col1 - rect.col0 + 1)].iter().sum::<f64>();
    }
    base + sum
}

/// What one environment step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    /// Cells the request covered (0 for the empty request).
    pub requested_cells: usize,
    /// Sensor output at the new time, with ego motion and controls.
    pub observation: ObservationBundle,
    /// Belief after memory update but before the grant was fused.
    pub g_tilde: SemanticGrid,
    /// Belief after the granted excerpt was fused.
    pub g: SemanticGrid,
}

/// Next-step quantities visible to a planner before committing to a request.
#[derive(Debug, Clone)]
pub struct EnvPeek {
    pub complete_next: SemanticGrid,
    pub g_tilde_next: SemanticGrid,
}

/// World, ego, memory, and reward machinery for one episode.
///
/// The spatial filter is ego-centered and therefore constant over the
/// episode; it is built once at construction.
#[derive(Debug, Clone)]
pub struct Environment {
    world: WorldState,
    ego: EgoState,
    memory: MemoryBuffer,
    grid_cfg: GridConfig,
    sensor_cfg: SensorConfig,
    params: RewardParams,
    filter: SpatialFilterGrid,
    complete: SemanticGrid,
    scenario_id: String,
    time: usize,
}

impl Environment {
    /// Seeded episode start. The first observation is integrated into
    /// memory so the initial belief reflects the initial view.
    pub fn new(seed: u64, cfg: &ExperimentConfig) -> Result<Self> {
        let (world, ego) = world_init(seed, cfg)?;
        let bundle = observe(&world, &ego, &cfg.grid, &cfg.sensor);
        let mut memory =
            MemoryBuffer::new(&bundle.partial, cfg.memory.age_gamma, cfg.memory.max_age_steps)?;
        memory.integrate(&bundle.partial)?;
        let params = RewardParams::from_config(&cfg.reward, cfg.grid.meters_per_cell)?;
        let filter =
            build_spatial_filter(&params, cfg.grid.height, cfg.grid.width, cfg.grid.ego_cell())?;
        Ok(Self {
            world,
            ego,
            memory,
            grid_cfg: cfg.grid.clone(),
            sensor_cfg: cfg.sensor.clone(),
            params,
            filter,
            complete: bundle.complete,
            scenario_id: cfg.scenario.template.clone(),
            time: 0,
        })
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Scenario template label this episode was built from.
    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    /// Current fused belief grid.
    pub fn belief(&self) -> &SemanticGrid {
        self.memory.grid()
    }

    /// Complete (fully informed) grid at the current time.
    pub fn complete(&self) -> &SemanticGrid {
        &self.complete
    }

    pub fn memory(&self) -> &MemoryBuffer {
        &self.memory
    }

    pub fn ego(&self) -> &EgoState {
        &self.ego
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    pub fn filter(&self) -> &SpatialFilterGrid {
        &self.filter
    }

    pub fn grid_config(&self) -> &GridConfig {
        &self.grid_cfg
    }

    /// Advance one step with request `a`, granted at the new time.
    ///
    /// The world moves, memory is re-expressed under the ego motion, aged,
    /// and updated with the new partial view to give the pre-grant belief;
    /// the requested excerpt of the new complete grid is then fused in, and
    /// the reward prices the difference.
    pub fn step(&mut self, a: BoundingBoxAction) -> Result<StepOutcome> {
        world_step(&mut self.world, &mut self.ego);
        let bundle = observe(&self.world, &self.ego, &self.grid_cfg, &self.sensor_cfg);
        let g_tilde = self.memory.advance(bundle.motion, &bundle.partial)?;
        let mask = extract_mask(&bundle.complete, a);
        let g = self.memory.integrate(&mask)?;
        let density = reward_density(&g, &g_tilde, &self.filter, &self.params)?;
        let reward = reward(a, &density, &self.params, self.grid_cfg.height, self.grid_cfg.width);
        let requested_cells = box_rect(a, self.grid_cfg.height, self.grid_cfg.width)
            .map_or(0, |r| r.num_cells());
        self.complete = bundle.complete.clone();
        self.time += 1;
        Ok(StepOutcome { reward, requested_cells, observation: bundle, g_tilde, g })
    }

    /// Next-step complete grid and pre-grant belief without advancing.
    ///
    /// Works on clones, so the stepped environment will see exactly these
    /// quantities regardless of how often it is called.
    pub fn peek_next(&self) -> Result<EnvPeek> {
        let mut world = self.world.clone();
        let mut ego = self.ego.clone();
        world_step(&mut world, &mut ego);
        let bundle = observe(&world, &ego, &self.grid_cfg, &self.sensor_cfg);
        let mut memory = self.memory.clone();
        let g_tilde_next = memory.advance(bundle.motion, &bundle.partial)?;
        Ok(EnvPeek { complete_next: bundle.complete, g_tilde_next })
    }

    /// Reward a candidate would earn on the peeked transition.
    pub fn reward_on_peek(&self, peek: &EnvPeek, a: BoundingBoxAction) -> Result<f64> {
        let mask = extract_mask(&peek.complete_next, a);
        let g = peek.g_tilde_next.fuse_grids(&mask)?;
        let density = reward_density(&g, &peek.g_tilde_next, &self.filter, &self.params)?;
        Ok(reward(a, &density, &self.params, self.grid_cfg.height, self.grid_cfg.width))
    }
}

/// Fraction of the grid a request covers, in percent.
pub fn request_size_percent(a: BoundingBoxAction, height: usize, width: usize) -> f64 {
    let covered = box_rect(a, height, width).map_or(0, |r| r.num_cells());
    100.0 * covered as f64 / (height * width) as f64
}
