//! Synthetic class rasters for visibility and fusion tests.

use coopgrid::config::GridConfig;
use coopgrid::mass::Class;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Random scene of rotated rectangular blockers over open road. Positions,
/// sizes, and orientations are continuous, so edges land at generic angles
/// rather than on cell boundaries.
pub fn random_blocker_scene(seed: u64, grid: &GridConfig, blockers: usize) -> Vec<Class> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = vec![Class::Road; grid.height * grid.width];
    let (h, w) = (grid.height as f64, grid.width as f64);
    for _ in 0..blockers {
        let class = match rng.gen_range(0..3u32) {
            0 => Class::Other,
            1 => Class::Car,
            _ => Class::Pedestrian,
        };
        // Center in cell coordinates, kept off the ego cell neighborhood.
        let cr = rng.gen_range(0.0..h * 0.85);
        let cc = rng.gen_range(0.0..w);
        let half_a: f64 = rng.gen_range(0.6..4.0);
        let half_b: f64 = rng.gen_range(0.6..4.0);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        let radius = half_a.hypot(half_b).ceil() as i64 + 1;
        for row in (cr as i64 - radius).max(0)..=(cr as i64 + radius).min(grid.height as i64 - 1) {
            for col in (cc as i64 - radius).max(0)..=(cc as i64 + radius).min(grid.width as i64 - 1)
            {
                let dr = row as f64 - cr;
                let dc = col as f64 - cc;
                let along = cos * dc + sin * dr;
                let across = -sin * dc + cos * dr;
                if along.abs() <= half_a && across.abs() <= half_b {
                    classes[row as usize * grid.width + col as usize] = class;
                }
            }
        }
    }
    let (ego_row, ego_col) = grid.ego_cell();
    classes[ego_row * grid.width + ego_col] = Class::Road;
    classes
}
