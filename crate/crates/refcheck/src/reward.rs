//! Brute-force request reward, written out term by term.
//!
//! Everything is recomputed inline from the parameter definitions: the box
//! arithmetic, the spatial filter at each cell, and the per-cell gain sum.
//! No precomputed filter grid, no density vector, no shared helpers, so a
//! bookkeeping mistake in the main crate cannot hide here.

use coopgrid::grid::SemanticGrid;
use coopgrid::mdp::{BoundingBoxAction, RewardParams};

/// Reward of request `a` on the transition from `g_tilde_next` to `g_next`.
pub fn brute_force_reward(
    a: BoundingBoxAction,
    g_next: &SemanticGrid,
    g_tilde_next: &SemanticGrid,
    p: &RewardParams,
) -> f64 {
    let height = g_next.height() as i64;
    let width = g_next.width() as i64;
    let (ego_row, ego_col) = g_next.ego_cell();
    let hc = (a.h * (height - 1) as f64 + 0.5).floor() as i64;
    let wc = (a.w * (width - 1) as f64 + 0.5).floor() as i64;
    if hc < 1 || wc < 1 {
        return p.no_coop_penalty;
    }
    let row0 = (a.v * (height - 1 - hc) as f64 + 0.5).floor() as i64;
    let col0 = (a.u * (width - 1 - wc) as f64 + 0.5).floor() as i64;
    let max_f = ego_row.max(g_next.height() - 1 - ego_row) as f64;
    let mut total = -(p.k_min_cells as f64) * (1.0 - p.eta) * p.r_min;
    for row in row0..=row0 + hc {
        for col in col0..=col0 + wc {
            let f = (row as f64 - ego_row as f64).abs();
            let l = (col as f64 - ego_col as f64).abs();
            let s_f = if max_f > 0.0 {
                1.0 - p.beta_f / (1.0 - p.alpha) * f64::max(0.0, f / max_f - p.alpha)
            } else {
                1.0
            };
            let s_l = 1.0 - p.beta_l / p.zeta * f64::max(0.0, p.zeta - l.atan2(f).cos().abs());
            let after = g_next.cell(row as usize, col as usize);
            let before = g_tilde_next.cell(row as usize, col as usize);
            let mut gain = 0.0;
            for k in 0..5 {
                let d = after.mass(k) - before.mass(k);
                if d > 0.0 {
                    gain += p.r_obj[k] * d.powf(p.w_exp);
                }
            }
            total += -p.eta * p.r_min + s_f * s_l * gain;
        }
    }
    total
}
