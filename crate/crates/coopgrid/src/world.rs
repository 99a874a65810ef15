//! Deterministic 2D driving microworld.
//!
//! A seedable stand-in for a full driving simulator. The static scene is a
//! cross intersection: two 8 m roads meeting at the world center, dashed
//! center lines, zebra crosswalks on every arm, and buildings filling the
//! four corner blocks up to the road edge. Cars follow straight lanes at
//! constant speed, pedestrians random-walk on the road surface, and the ego
//! vehicle drives a scripted route (south approach, right turn, eastbound).
//!
//! Each step the world emits an [`ObservationBundle`]: the fully informed
//! top-down semantic grid around the ego, the occlusion-limited partial view
//! of the same scene, the ego motion since the previous step, and the driving
//! controls. Buildings, cars, and pedestrians block line of sight; road
//! surface and painted lines do not. The ego vehicle itself is not drawn, so
//! it never occludes its own view.
//!
//! All randomness flows through a counter-based generator stored in
//! [`WorldState`]; identical seeds give bit-identical trajectories, and
//! cloning the state forks the future deterministically.

use crate::config::{ExperimentConfig, GridConfig, ScenarioConfig, SensorConfig};
use crate::grid::SemanticGrid;
use crate::mass::{Class, MassFunction};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulation timestep, seconds.
pub const DT_S: f64 = 0.1;

/// Side length of the square world, meters.
pub const WORLD_SIZE_M: f64 = 200.0;

const CENTER_M: f64 = WORLD_SIZE_M / 2.0;
const ROAD_HALF_WIDTH_M: f64 = 4.0;
const ARM_LENGTH_M: f64 = 85.0;
const LANE_OFFSET_M: f64 = 2.0;
const CROSSWALK_NEAR_M: f64 = 5.0;
const CROSSWALK_FAR_M: f64 = 6.5;
const CENTER_LINE_CLEAR_M: f64 = 6.5;
const DASH_PERIOD_M: f64 = 2.0;
const LAYOUT_RES_M: f64 = 0.5;

const CAR_LENGTH_M: f64 = 3.0;
const CAR_WIDTH_M: f64 = 1.8;
const PED_LENGTH_M: f64 = 0.7;
const PED_WIDTH_M: f64 = 1.6;

const CAR_SPAWN_NEAR_M: f64 = 12.0;
const CAR_SPAWN_FAR_M: f64 = 70.0;
const CAR_MIN_GAP_M: f64 = 10.0;
const PED_SPAWN_NEAR_M: f64 = 6.5;
const PED_SPAWN_FAR_M: f64 = 45.0;
const PED_TURN_JITTER_RAD: f64 = 0.3;
const PED_ROAD_MARGIN_M: f64 = 0.4;

const EGO_ACCEL_MPS2: f64 = 1.5;
const MAX_ACCEL_MPS2: f64 = 3.0;
const MAX_YAW_RATE_RAD_S: f64 = 2.0;
const EGO_TURN_RADIUS_M: f64 = 4.0;

/// Static scene class for one layout cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticClass {
    Road,
    RoadLines,
    Other,
}

impl StaticClass {
    pub fn class(self) -> Class {
        match self {
            StaticClass::Road => Class::Road,
            StaticClass::RoadLines => Class::RoadLines,
            StaticClass::Other => Class::Other,
        }
    }
}

/// Immutable world-frame raster of the static scene.
#[derive(Debug, Clone)]
pub struct StaticLayout {
    cells_per_side: usize,
    classes: Vec<StaticClass>,
}

impl StaticLayout {
    fn build() -> Self {
        let cells_per_side = (WORLD_SIZE_M / LAYOUT_RES_M) as usize;
        let mut classes = Vec::with_capacity(cells_per_side * cells_per_side);
        for iy in 0..cells_per_side {
            for ix in 0..cells_per_side {
                let x = (ix as f64 + 0.5) * LAYOUT_RES_M;
                let y = (iy as f64 + 0.5) * LAYOUT_RES_M;
                classes.push(classify_static(x, y));
            }
        }
        Self { cells_per_side, classes }
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    /// Class of the layout cell containing a world point; out-of-bounds
    /// points read as buildings.
    pub fn class_at(&self, x: f64, y: f64) -> StaticClass {
        let ix = (x / LAYOUT_RES_M).floor();
        let iy = (y / LAYOUT_RES_M).floor();
        let side = self.cells_per_side as f64;
        if ix < 0.0 || iy < 0.0 || ix >= side || iy >= side {
            return StaticClass::Other;
        }
        self.classes[iy as usize * self.cells_per_side + ix as usize]
    }
}

fn on_vertical_road(x: f64, y: f64) -> bool {
    (x - CENTER_M).abs() <= ROAD_HALF_WIDTH_M && (y - CENTER_M).abs() <= ARM_LENGTH_M
}

fn on_horizontal_road(x: f64, y: f64) -> bool {
    (y - CENTER_M).abs() <= ROAD_HALF_WIDTH_M && (x - CENTER_M).abs() <= ARM_LENGTH_M
}

fn dash_painted(along: f64) -> bool {
    (along / DASH_PERIOD_M).floor().rem_euclid(2.0) == 0.0
}

fn in_crosswalk_band(dist: f64) -> bool {
    (CROSSWALK_NEAR_M..=CROSSWALK_FAR_M).contains(&dist.abs())
}

fn classify_static(x: f64, y: f64) -> StaticClass {
    let dx = x - CENTER_M;
    let dy = y - CENTER_M;
    if on_vertical_road(x, y) {
        // Zebra stripes run across the arm, painted on alternate meters.
        if in_crosswalk_band(dy) && (x.floor() as i64).rem_euclid(2) == 0 {
            return StaticClass::RoadLines;
        }
        if (-0.5..0.0).contains(&dx) && dy.abs() > CENTER_LINE_CLEAR_M && dash_painted(y) {
            return StaticClass::RoadLines;
        }
        return StaticClass::Road;
    }
    if on_horizontal_road(x, y) {
        if in_crosswalk_band(dx) && (y.floor() as i64).rem_euclid(2) == 0 {
            return StaticClass::RoadLines;
        }
        if (-0.5..0.0).contains(&dy) && dx.abs() > CENTER_LINE_CLEAR_M && dash_painted(x) {
            return StaticClass::RoadLines;
        }
        return StaticClass::Road;
    }
    StaticClass::Other
}

/// One scripted car: straight-lane travel toward a terminal waypoint.
#[derive(Debug, Clone)]
pub struct CarState {
    pub position: (f64, f64),
    pub heading: f64,
    pub speed: f64,
    /// (length along heading, width across), meters.
    pub footprint: (f64, f64),
    pub waypoints: Vec<(f64, f64)>,
    pub waypoint_index: usize,
}

/// One random-walking pedestrian, bounded to the road surface.
#[derive(Debug, Clone)]
pub struct PedestrianState {
    pub position: (f64, f64),
    pub heading: f64,
    /// Maximum step per tick, meters.
    pub step_max_m: f64,
    /// Heading jitter half-range per tick, radians.
    pub turn_jitter_rad: f64,
    pub footprint: (f64, f64),
}

/// Full simulation state apart from the ego vehicle.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub layout: StaticLayout,
    pub cars: Vec<CarState>,
    pub pedestrians: Vec<PedestrianState>,
    pub time: u32,
    pub rng: ChaCha8Rng,
}

/// Ego motion between consecutive steps, expressed in the new ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Motion {
    pub const ZERO: Motion = Motion { dx: 0.0, dy: 0.0, dtheta: 0.0 };
}

/// Driving controls emitted by the scripted ego route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    /// Normalized acceleration in [-1, 1].
    pub accel: f64,
    /// Normalized steering in [-1, 1].
    pub steer: f64,
    /// World-frame vector to the active waypoint, meters.
    pub direction: (f64, f64),
}

impl Controls {
    pub const ZERO: Controls = Controls { accel: 0.0, steer: 0.0, direction: (0.0, 0.0) };
}

#[derive(Debug, Clone)]
enum RouteSegment {
    Straight { from: (f64, f64), to: (f64, f64) },
    /// Clockwise arc; angles measured from the arc center.
    ArcCw { center: (f64, f64), radius: f64, start_angle: f64 },
}

impl RouteSegment {
    fn length(&self) -> f64 {
        match self {
            RouteSegment::Straight { from, to } => (to.0 - from.0).hypot(to.1 - from.1),
            RouteSegment::ArcCw { radius, .. } => radius * std::f64::consts::FRAC_PI_2,
        }
    }

    /// Pose and pursued waypoint at arc length s into the segment.
    fn pose_at(&self, s: f64) -> ((f64, f64), f64, (f64, f64)) {
        match self {
            RouteSegment::Straight { from, to } => {
                let len = self.length();
                let t = if len > 0.0 { s / len } else { 0.0 };
                let pos = (from.0 + (to.0 - from.0) * t, from.1 + (to.1 - from.1) * t);
                let theta = (to.1 - from.1).atan2(to.0 - from.0);
                (pos, theta, *to)
            }
            RouteSegment::ArcCw { center, radius, start_angle } => {
                let phi = start_angle - s / radius;
                let pos = (center.0 + radius * phi.cos(), center.1 + radius * phi.sin());
                let theta = normalize_angle(phi - std::f64::consts::FRAC_PI_2);
                let end_phi = start_angle - std::f64::consts::FRAC_PI_2;
                let end = (center.0 + radius * end_phi.cos(), center.1 + radius * end_phi.sin());
                (pos, theta, end)
            }
        }
    }
}

/// Scripted ego route: a polyline with circular corner arcs, traversed with a
/// capped-acceleration speed profile.
#[derive(Debug, Clone)]
pub struct EgoRoute {
    segments: Vec<RouteSegment>,
    cumulative: Vec<f64>,
    cruise_speed: f64,
}

impl EgoRoute {
    fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn pose_at(&self, s: f64) -> ((f64, f64), f64, (f64, f64)) {
        let s = s.clamp(0.0, self.total_length());
        let mut seg_start = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            let seg_end = self.cumulative[i];
            if s <= seg_end || i + 1 == self.segments.len() {
                return seg.pose_at(s - seg_start);
            }
            seg_start = seg_end;
        }
        unreachable!("cumulative covers the route")
    }
}

/// Ego vehicle state: pose, scripted route progress, and the emitted
/// controls and motion.
#[derive(Debug, Clone)]
pub struct EgoState {
    /// (x, y, heading) in the world frame.
    pub pose: (f64, f64, f64),
    pub speed: f64,
    pub route: EgoRoute,
    pub route_s: f64,
    pub motion: Motion,
    pub controls: Controls,
}

/// Everything the perception stack sees at one timestep.
#[derive(Debug, Clone)]
pub struct ObservationBundle {
    pub partial: SemanticGrid,
    pub complete: SemanticGrid,
    pub motion: Motion,
    pub controls: Controls,
}

pub(crate) fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

fn default_route(cruise_speed: f64) -> EgoRoute {
    let lane_e = CENTER_M + LANE_OFFSET_M;
    let lane_s = CENTER_M - LANE_OFFSET_M;
    let turn_start_y = CENTER_M - ROAD_HALF_WIDTH_M - EGO_TURN_RADIUS_M + LANE_OFFSET_M;
    let segments = vec![
        RouteSegment::Straight { from: (lane_e, CENTER_M - 26.0), to: (lane_e, turn_start_y) },
        RouteSegment::ArcCw {
            center: (lane_e + EGO_TURN_RADIUS_M, turn_start_y),
            radius: EGO_TURN_RADIUS_M,
            start_angle: std::f64::consts::PI,
        },
        RouteSegment::Straight {
            from: (lane_e + EGO_TURN_RADIUS_M, lane_s),
            to: (CENTER_M + 50.0, lane_s),
        },
    ];
    let mut cumulative = Vec::with_capacity(segments.len());
    let mut acc = 0.0;
    for seg in &segments {
        acc += seg.length();
        cumulative.push(acc);
    }
    EgoRoute { segments, cumulative, cruise_speed }
}

fn spawn_cars(rng: &mut ChaCha8Rng, scenario: &ScenarioConfig) -> Vec<CarState> {
    // Lane id: arm (N, S, E, W) x direction (inbound, outbound); right-hand
    // traffic fixes the lateral lane offset.
    let mut cars: Vec<(usize, f64, CarState)> = Vec::new();
    for _ in 0..scenario.cars {
        for _attempt in 0..50 {
            let lane = rng.gen_range(0..8usize);
            let dist = rng.gen_range(CAR_SPAWN_NEAR_M..CAR_SPAWN_FAR_M);
            if cars
                .iter()
                .any(|(l, d, _)| *l == lane && (d - dist).abs() < CAR_MIN_GAP_M)
            {
                continue;
            }
            let speed = scenario.car_speed_mps * rng.gen_range(0.7..1.1);
            let (position, target) = lane_geometry(lane, dist);
            let heading = (target.1 - position.1).atan2(target.0 - position.0);
            cars.push((
                lane,
                dist,
                CarState {
                    position,
                    heading,
                    speed,
                    footprint: (CAR_LENGTH_M, CAR_WIDTH_M),
                    waypoints: vec![target],
                    waypoint_index: 0,
                },
            ));
            break;
        }
    }
    cars.into_iter().map(|(_, _, c)| c).collect()
}

/// Start position and terminal waypoint for a car `dist` meters out on one
/// of the eight lanes.
fn lane_geometry(lane: usize, dist: f64) -> ((f64, f64), (f64, f64)) {
    let c = CENTER_M;
    let o = LANE_OFFSET_M;
    let a = ARM_LENGTH_M;
    match lane {
        // North arm: inbound southbound (west lane), outbound northbound.
        0 => ((c - o, c + dist), (c - o, c - a)),
        1 => ((c + o, c + dist), (c + o, c + a)),
        // South arm: inbound northbound (east lane), outbound southbound.
        2 => ((c + o, c - dist), (c + o, c + a)),
        3 => ((c - o, c - dist), (c - o, c - a)),
        // East arm: inbound westbound (north lane), outbound eastbound.
        4 => ((c + dist, c + o), (c - a, c + o)),
        5 => ((c + dist, c - o), (c + a, c - o)),
        // West arm: inbound eastbound (south lane), outbound westbound.
        6 => ((c - dist, c - o), (c + a, c - o)),
        _ => ((c - dist, c + o), (c - a, c + o)),
    }
}

fn spawn_pedestrians(rng: &mut ChaCha8Rng, scenario: &ScenarioConfig, crossing: bool) -> Vec<PedestrianState> {
    let mut peds = Vec::with_capacity(scenario.pedestrians);
    for idx in 0..scenario.pedestrians {
        if crossing && idx == 0 {
            // Pin the first pedestrian to a zebra-stripe cell center on the
            // south crosswalk, walking across.
            peds.push(PedestrianState {
                position: (CENTER_M + 0.25, CENTER_M - 5.75),
                heading: std::f64::consts::FRAC_PI_2,
                step_max_m: scenario.pedestrian_step_m,
                turn_jitter_rad: PED_TURN_JITTER_RAD,
                footprint: (PED_LENGTH_M, PED_WIDTH_M),
            });
            continue;
        }
        let arm = rng.gen_range(0..4usize);
        let dist = rng.gen_range(PED_SPAWN_NEAR_M..PED_SPAWN_FAR_M);
        let side = if rng.gen_range(0..2) == 0 { -1.0 } else { 1.0 };
        let lateral = side * rng.gen_range(2.6..3.5);
        let position = match arm {
            0 => (CENTER_M + lateral, CENTER_M + dist),
            1 => (CENTER_M + lateral, CENTER_M - dist),
            2 => (CENTER_M + dist, CENTER_M + lateral),
            _ => (CENTER_M - dist, CENTER_M + lateral),
        };
        let heading = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        peds.push(PedestrianState {
            position,
            heading,
            step_max_m: scenario.pedestrian_step_m,
            turn_jitter_rad: PED_TURN_JITTER_RAD,
            footprint: (PED_LENGTH_M, PED_WIDTH_M),
        });
    }
    peds
}

fn pedestrian_walkable(x: f64, y: f64) -> bool {
    let m = PED_ROAD_MARGIN_M;
    let dx = (x - CENTER_M).abs();
    let dy = (y - CENTER_M).abs();
    (dx <= ROAD_HALF_WIDTH_M - m && dy <= ARM_LENGTH_M - m)
        || (dy <= ROAD_HALF_WIDTH_M - m && dx <= ARM_LENGTH_M - m)
}

/// Build a reproducible world and ego from a seed and scenario.
pub fn world_init(seed: u64, cfg: &ExperimentConfig) -> Result<(WorldState, EgoState)> {
    cfg.validate()?;
    let scenario = &cfg.scenario;
    let (crossing, zero_agents) = match scenario.template.as_str() {
        "default" => (false, false),
        "zero-agents" => (false, true),
        "crossing" => (true, false),
        other => {
            return Err(Error::Config(format!("unknown scenario template `{other}`")))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cars, pedestrians) = if zero_agents {
        (Vec::new(), Vec::new())
    } else {
        let mut scenario = scenario.clone();
        if crossing && scenario.pedestrians == 0 {
            scenario.pedestrians = 1;
        }
        (spawn_cars(&mut rng, &scenario), spawn_pedestrians(&mut rng, &scenario, crossing))
    };
    let world = WorldState {
        layout: StaticLayout::build(),
        cars,
        pedestrians,
        time: 0,
        rng,
    };
    let route = default_route(scenario.ego_speed_mps);
    let ((x, y), theta, _) = route.pose_at(0.0);
    let ego = EgoState {
        pose: (x, y, theta),
        speed: 0.75 * scenario.ego_speed_mps,
        route,
        route_s: 0.0,
        motion: Motion::ZERO,
        controls: Controls::ZERO,
    };
    Ok((world, ego))
}

/// Advance the world and ego by one timestep.
pub fn world_step(world: &mut WorldState, ego: &mut EgoState) {
    for car in &mut world.cars {
        step_car(car);
    }
    for ped in &mut world.pedestrians {
        step_pedestrian(ped, &mut world.rng);
    }
    step_ego(ego);
    world.time += 1;
}

fn step_car(car: &mut CarState) {
    if car.waypoint_index >= car.waypoints.len() {
        return;
    }
    let target = car.waypoints[car.waypoint_index];
    let to = (target.0 - car.position.0, target.1 - car.position.1);
    let dist = to.0.hypot(to.1);
    let step = car.speed * DT_S;
    if dist <= step {
        car.position = target;
        car.waypoint_index += 1;
        return;
    }
    if dist > 0.0 {
        car.heading = to.1.atan2(to.0);
        car.position.0 += to.0 / dist * step;
        car.position.1 += to.1 / dist * step;
    }
    car.position.0 = car.position.0.clamp(0.0, WORLD_SIZE_M);
    car.position.1 = car.position.1.clamp(0.0, WORLD_SIZE_M);
}

fn step_pedestrian(ped: &mut PedestrianState, rng: &mut ChaCha8Rng) {
    let jitter = rng.gen_range(-ped.turn_jitter_rad..=ped.turn_jitter_rad);
    let step = rng.gen_range(0.0..=ped.step_max_m);
    ped.heading = normalize_angle(ped.heading + jitter);
    let candidate = (
        ped.position.0 + step * ped.heading.cos(),
        ped.position.1 + step * ped.heading.sin(),
    );
    if pedestrian_walkable(candidate.0, candidate.1) {
        ped.position = candidate;
    } else {
        ped.heading = normalize_angle(ped.heading + std::f64::consts::PI);
    }
}

fn step_ego(ego: &mut EgoState) {
    let prev_pose = ego.pose;
    let prev_speed = ego.speed;
    let remaining = ego.route.total_length() - ego.route_s;
    let speed = if remaining <= 0.0 {
        0.0
    } else {
        (prev_speed + EGO_ACCEL_MPS2 * DT_S).min(ego.route.cruise_speed)
    };
    ego.route_s = (ego.route_s + speed * DT_S).min(ego.route.total_length());
    ego.speed = if ego.route_s >= ego.route.total_length() { 0.0 } else { speed };
    let ((x, y), theta, waypoint) = ego.route.pose_at(ego.route_s);
    ego.pose = (x, y, theta);
    ego.motion = motion_between(prev_pose, ego.pose);
    let accel = ((speed - prev_speed) / DT_S / MAX_ACCEL_MPS2).clamp(-1.0, 1.0);
    let steer = (ego.motion.dtheta / DT_S / MAX_YAW_RATE_RAD_S).clamp(-1.0, 1.0);
    ego.controls = Controls {
        accel,
        steer,
        direction: (waypoint.0 - x, waypoint.1 - y),
    };
}

/// Rigid motion from one pose to the next, with the translation expressed in
/// the new ego frame (x forward, y left).
pub fn motion_between(prev: (f64, f64, f64), next: (f64, f64, f64)) -> Motion {
    let (px, py, ptheta) = prev;
    let (nx, ny, ntheta) = next;
    let (wx, wy) = (nx - px, ny - py);
    let (sin, cos) = ntheta.sin_cos();
    Motion {
        dx: cos * wx + sin * wy,
        dy: -sin * wx + cos * wy,
        dtheta: normalize_angle(ntheta - ptheta),
    }
}

/// Per-cell semantic classes of the ego-centered view, dynamic agents
/// painted over the static layout (cars first, pedestrians on top).
pub fn render_class_raster(world: &WorldState, ego: &EgoState, grid: &GridConfig) -> Vec<Class> {
    let (ex, ey, etheta) = ego.pose;
    let (sin, cos) = etheta.sin_cos();
    let (ego_row, ego_col) = grid.ego_cell();
    let res = grid.meters_per_cell;
    let cell_world = |row: usize, col: usize| -> (f64, f64) {
        let forward = (ego_row as f64 - row as f64) * res;
        let left = (ego_col as f64 - col as f64) * res;
        (ex + cos * forward - sin * left, ey + sin * forward + cos * left)
    };
    let mut classes = Vec::with_capacity(grid.height * grid.width);
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (wx, wy) = cell_world(row, col);
            classes.push(world.layout.class_at(wx, wy).class());
        }
    }
    let mut paint = |pos: (f64, f64), heading: f64, footprint: (f64, f64), class: Class| {
        let (half_len, half_wid) = (footprint.0 / 2.0, footprint.1 / 2.0);
        let (hsin, hcos) = heading.sin_cos();
        // Bounding disc of the footprint in cell units.
        let radius = (half_len.hypot(half_wid) / res).ceil() as i64 + 1;
        let dxw = pos.0 - ex;
        let dyw = pos.1 - ey;
        let forward = cos * dxw + sin * dyw;
        let left = -sin * dxw + cos * dyw;
        let center_row = ego_row as f64 - forward / res;
        let center_col = ego_col as f64 - left / res;
        let row_lo = ((center_row.floor() as i64) - radius).max(0);
        let row_hi = ((center_row.ceil() as i64) + radius).min(grid.height as i64 - 1);
        let col_lo = ((center_col.floor() as i64) - radius).max(0);
        let col_hi = ((center_col.ceil() as i64) + radius).min(grid.width as i64 - 1);
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let (wx, wy) = cell_world(row as usize, col as usize);
                let rx = wx - pos.0;
                let ry = wy - pos.1;
                let along = hcos * rx + hsin * ry;
                let across = -hsin * rx + hcos * ry;
                if along.abs() <= half_len && across.abs() <= half_wid {
                    classes[row as usize * grid.width + col as usize] = class;
                }
            }
        }
    };
    for car in &world.cars {
        paint(car.position, car.heading, car.footprint, Class::Car);
    }
    for ped in &world.pedestrians {
        paint(ped.position, ped.heading, ped.footprint, Class::Pedestrian);
    }
    classes
}

fn mass_table(noise_discount: f64) -> [MassFunction; 5] {
    Class::ALL.map(|c| {
        MassFunction::certain(c)
            .discount(noise_discount)
            .expect("validated discount factor")
    })
}

/// Fully informed ego-centered grid: every cell carries its true class
/// discounted by the sensor noise.
pub fn render_complete(
    world: &WorldState,
    ego: &EgoState,
    grid: &GridConfig,
    sensor: &SensorConfig,
) -> SemanticGrid {
    let classes = render_class_raster(world, ego, grid);
    grid_from_classes(&classes, grid, sensor, None)
}

/// Occlusion-limited ego-centered grid: cells outside the field of view,
/// beyond range, or behind a sight-blocking cell are fully ignorant.
pub fn render_partial(
    world: &WorldState,
    ego: &EgoState,
    grid: &GridConfig,
    sensor: &SensorConfig,
) -> SemanticGrid {
    let classes = render_class_raster(world, ego, grid);
    let visible = visibility_map(&classes, grid, sensor);
    grid_from_classes(&classes, grid, sensor, Some(&visible))
}

fn grid_from_classes(
    classes: &[Class],
    grid: &GridConfig,
    sensor: &SensorConfig,
    visible: Option<&[bool]>,
) -> SemanticGrid {
    let table = mass_table(sensor.noise_discount);
    let mut out = SemanticGrid::filled(
        grid.height,
        grid.width,
        grid.meters_per_cell,
        grid.ego_cell(),
        MassFunction::vacuous(),
    )
    .expect("validated grid geometry");
    for (idx, &class) in classes.iter().enumerate() {
        if visible.is_none_or(|v| v[idx]) {
            out.cells_mut()[idx] = table[class.index()];
        }
    }
    out
}

/// Per-cell visibility for the current scene: inside the forward FOV wedge,
/// within range, and with a clear line of sight to the cell center.
pub fn visibility_map(classes: &[Class], grid: &GridConfig, sensor: &SensorConfig) -> Vec<bool> {
    let (ego_row, ego_col) = grid.ego_cell();
    let half_fov = sensor.fov_deg.to_radians() / 2.0;
    let res = grid.meters_per_cell;
    let blocking: Vec<bool> = classes.iter().map(|c| c.blocks_sight()).collect();
    let mut visible = vec![false; grid.height * grid.width];
    for row in 0..grid.height {
        for col in 0..grid.width {
            let forward = (ego_row as f64 - row as f64) * res;
            let left = (ego_col as f64 - col as f64) * res;
            let range = forward.hypot(left);
            if range > sensor.max_range_m + 1e-12 {
                continue;
            }
            if left.atan2(forward).abs() > half_fov + 1e-12 {
                continue;
            }
            if line_of_sight_clear(&blocking, grid, (ego_row, ego_col), (row, col)) {
                visible[row * grid.width + col] = true;
            }
        }
    }
    visible
}

/// Grid traversal from the source cell center to the target cell center.
/// Returns false iff a strictly intermediate traversed cell blocks sight.
/// Exact corner crossings advance both axes, skipping the diagonal
/// neighbors touched only at a point.
///
/// Crossing ordinates are computed fresh per step as (k + 0.5) / |d|, never
/// accumulated: center-to-center rays make them rationals whose true ties
/// are then detected exactly, while distinct crossings differ by far more
/// than rounding error.
pub fn line_of_sight_clear(
    blocking: &[bool],
    grid: &GridConfig,
    source: (usize, usize),
    target: (usize, usize),
) -> bool {
    if source == target {
        return true;
    }
    let dr = target.0 as f64 - source.0 as f64;
    let dc = target.1 as f64 - source.1 as f64;
    let step_r: i64 = if dr > 0.0 { 1 } else { -1 };
    let step_c: i64 = if dc > 0.0 { 1 } else { -1 };
    let (abs_r, abs_c) = (dr.abs(), dc.abs());
    // Parameter t runs 0 to 1 along the segment; the k-th boundary on an
    // axis sits at t = (k + 0.5) / |d|.
    let cross = |k: i64, abs_d: f64| -> f64 {
        if abs_d == 0.0 { f64::INFINITY } else { (k as f64 + 0.5) / abs_d }
    };
    let mut k_r: i64 = 0;
    let mut k_c: i64 = 0;
    let mut row = source.0 as i64;
    let mut col = source.1 as i64;
    let (tr, tc) = (target.0 as i64, target.1 as i64);
    let max_iter = (tr - row).abs() + (tc - col).abs() + 2;
    for _ in 0..max_iter {
        if row == tr && col == tc {
            return true;
        }
        let t_r = cross(k_r, abs_r);
        let t_c = cross(k_c, abs_c);
        if t_r < t_c {
            row += step_r;
            k_r += 1;
        } else if t_c < t_r {
            col += step_c;
            k_c += 1;
        } else {
            row += step_r;
            col += step_c;
            k_r += 1;
            k_c += 1;
        }
        if (row, col) == (tr, tc) {
            return true;
        }
        if blocking[row as usize * grid.width + col as usize] {
            return false;
        }
    }
    true
}

/// Render both grid views plus the current motion and controls.
pub fn observe(
    world: &WorldState,
    ego: &EgoState,
    grid: &GridConfig,
    sensor: &SensorConfig,
) -> ObservationBundle {
    ObservationBundle {
        partial: render_partial(world, ego, grid, sensor),
        complete: render_complete(world, ego, grid, sensor),
        motion: ego.motion,
        controls: ego.controls,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn same_seed_same_world() {
        let (mut w1, mut e1) = world_init(42, &cfg()).unwrap();
        let (mut w2, mut e2) = world_init(42, &cfg()).unwrap();
        for _ in 0..20 {
            world_step(&mut w1, &mut e1);
            world_step(&mut w2, &mut e2);
        }
        assert_eq!(e1.pose, e2.pose);
        for (a, b) in w1.cars.iter().zip(&w2.cars) {
            assert_eq!(a.position, b.position);
        }
        for (a, b) in w1.pedestrians.iter().zip(&w2.pedestrians) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn zero_agents_template_is_static_only() {
        let mut c = cfg();
        c.scenario.template = "zero-agents".into();
        let (w, _) = world_init(42, &c).unwrap();
        assert!(w.cars.is_empty());
        assert!(w.pedestrians.is_empty());
    }

    #[test]
    fn crossing_template_puts_pedestrian_on_crosswalk() {
        let mut c = cfg();
        c.scenario.template = "crossing".into();
        let (w, _) = world_init(7, &c).unwrap();
        let p = &w.pedestrians[0];
        assert_eq!(w.layout.class_at(p.position.0, p.position.1), StaticClass::RoadLines);
    }

    #[test]
    fn car_advances_along_heading() {
        let mut car = CarState {
            position: (102.0, 50.0),
            heading: std::f64::consts::FRAC_PI_2,
            speed: 10.0,
            footprint: (CAR_LENGTH_M, CAR_WIDTH_M),
            waypoints: vec![(102.0, 185.0)],
            waypoint_index: 0,
        };
        step_car(&mut car);
        assert_abs_diff_eq!(car.position.1, 51.0, epsilon = 1e-12);
        assert_abs_diff_eq!(car.position.0, 102.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_speed_agents_stay_put() {
        let mut c = cfg();
        c.scenario.car_speed_mps = 0.0;
        c.scenario.pedestrian_step_m = 0.0;
        let (mut w, mut e) = world_init(3, &c).unwrap();
        let cars0: Vec<_> = w.cars.iter().map(|c| c.position).collect();
        let peds0: Vec<_> = w.pedestrians.iter().map(|p| p.position).collect();
        world_step(&mut w, &mut e);
        for (c, c0) in w.cars.iter().zip(&cars0) {
            assert_eq!(c.position, *c0);
        }
        for (p, p0) in w.pedestrians.iter().zip(&peds0) {
            assert_eq!(p.position, *p0);
        }
        assert!(e.motion.dx > 0.0);
    }

    #[test]
    fn motion_matches_pose_difference() {
        let (mut w, mut e) = world_init(11, &cfg()).unwrap();
        let mut prev = e.pose;
        for _ in 0..80 {
            world_step(&mut w, &mut e);
            let m = motion_between(prev, e.pose);
            assert_abs_diff_eq!(m.dx, e.motion.dx, epsilon = 1e-9);
            assert_abs_diff_eq!(m.dy, e.motion.dy, epsilon = 1e-9);
            assert_abs_diff_eq!(m.dtheta, e.motion.dtheta, epsilon = 1e-9);
            // Invert: the new-frame displacement maps back to world space.
            let (sin, cos) = e.pose.2.sin_cos();
            let wx = cos * m.dx - sin * m.dy;
            let wy = sin * m.dx + cos * m.dy;
            assert_abs_diff_eq!(prev.0 + wx, e.pose.0, epsilon = 1e-9);
            assert_abs_diff_eq!(prev.1 + wy, e.pose.1, epsilon = 1e-9);
            prev = e.pose;
        }
    }

    #[test]
    fn ego_turns_right_through_route() {
        let (mut w, mut e) = world_init(1, &cfg()).unwrap();
        let theta0 = e.pose.2;
        for _ in 0..500 {
            world_step(&mut w, &mut e);
        }
        assert_abs_diff_eq!(theta0, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(e.pose.2, 0.0, epsilon = 1e-9);
        assert_eq!(e.speed, 0.0);
        let before_end = e.pose;
        world_step(&mut w, &mut e);
        assert_eq!(e.pose, before_end);
        assert_eq!(e.motion, Motion::ZERO);
    }

    #[test]
    fn complete_grid_of_empty_world_is_static_discounted() {
        let mut c = cfg();
        c.scenario.template = "zero-agents".into();
        let (w, e) = world_init(5, &c).unwrap();
        let g = render_complete(&w, &e, &c.grid, &c.sensor);
        for cell in g.cells() {
            assert_abs_diff_eq!(cell.omega(), 0.01, epsilon = 1e-12);
            let k = cell.argmax_class();
            assert!(matches!(k, Class::Road | Class::RoadLines | Class::Other));
            assert_abs_diff_eq!(cell.mass(k.index()), 0.99, epsilon = 1e-12);
        }
    }

    #[test]
    fn axis_aligned_car_covers_six_by_four_cells() {
        let mut c = cfg();
        c.scenario.template = "zero-agents".into();
        let (mut w, e) = world_init(5, &c).unwrap();
        // Ego heads north, so grid axes align with world axes. Center the
        // car on a cell corner: 3.0x1.8 m covers exactly 6x4 cell centers.
        let (ex, ey, _) = e.pose;
        w.cars.push(CarState {
            position: (ex - 0.25, ey + 10.25),
            heading: std::f64::consts::FRAC_PI_2,
            speed: 0.0,
            footprint: (CAR_LENGTH_M, CAR_WIDTH_M),
            waypoints: vec![],
            waypoint_index: 0,
        });
        let classes = render_class_raster(&w, &e, &c.grid);
        let car_cells = classes.iter().filter(|&&k| k == Class::Car).count();
        assert_eq!(car_cells, 24);
        let rows: Vec<usize> = (0..c.grid.height)
            .filter(|&r| (0..c.grid.width).any(|col| classes[r * c.grid.width + col] == Class::Car))
            .collect();
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn partial_marks_invisible_cells_vacuous_and_copies_visible() {
        let (w, e) = world_init(9, &cfg()).unwrap();
        let c = cfg();
        let complete = render_complete(&w, &e, &c.grid, &c.sensor);
        let partial = render_partial(&w, &e, &c.grid, &c.sensor);
        let mut vacuous = 0;
        for (p, q) in partial.cells().iter().zip(complete.cells()) {
            if p.omega() == 1.0 {
                vacuous += 1;
            } else {
                assert_eq!(p.masses(), q.masses());
            }
        }
        assert!(vacuous > 0, "occlusions and FOV must hide some cells");
    }

    #[test]
    fn cell_directly_ahead_is_visible_and_behind_is_not() {
        let (w, e) = world_init(9, &cfg()).unwrap();
        let c = cfg();
        let classes = render_class_raster(&w, &e, &c.grid);
        let vis = visibility_map(&classes, &c.grid, &c.sensor);
        let (ego_row, ego_col) = c.grid.ego_cell();
        // 5 m ahead on open road.
        assert!(vis[(ego_row - 10) * c.grid.width + ego_col]);
        // Far corner: 39.5 m forward, 30 m left is beyond the 40 m range.
        assert!(!vis[0]);
        // Outside the 135 degree wedge: directly left at the ego row is at
        // bearing 90.
        assert!(!vis[ego_row * c.grid.width]);
    }

    #[test]
    fn occlusion_blocks_cells_behind_walls() {
        let mut c = cfg();
        c.scenario.template = "zero-agents".into();
        let (w, mut e) = world_init(5, &c).unwrap();
        // Face east from the south approach: the corner block wall sits a
        // few cells straight ahead, so the vertical ray is exactly the
        // straight-ahead column.
        e.pose = (102.0, 74.0, 0.0);
        let classes = render_class_raster(&w, &e, &c.grid);
        let vis = visibility_map(&classes, &c.grid, &c.sensor);
        let (ego_row, ego_col) = c.grid.ego_cell();
        let first_wall = (0..ego_row)
            .rev()
            .find(|&row| classes[row * c.grid.width + ego_col] == Class::Other)
            .expect("building wall ahead");
        // The wall face itself is visible; everything behind it is not.
        assert!(vis[first_wall * c.grid.width + ego_col]);
        for row in 0..first_wall {
            assert!(!vis[row * c.grid.width + ego_col]);
        }
    }

    #[test]
    fn observe_is_pure() {
        let (w, e) = world_init(13, &cfg()).unwrap();
        let c = cfg();
        let a = observe(&w, &e, &c.grid, &c.sensor);
        let b = observe(&w, &e, &c.grid, &c.sensor);
        assert_eq!(a.partial.max_abs_diff(&b.partial), 0.0);
        assert_eq!(a.complete.max_abs_diff(&b.complete), 0.0);
    }
}
