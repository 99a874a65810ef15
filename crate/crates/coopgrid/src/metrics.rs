//! Episode records and evaluation metrics: information gain per class
//! group, request size, mean reward, mass score, and change accuracy.
//!
//! Gains are grouped as P (pedestrian), C (car), and R (road lines plus
//! road); the remaining class carries no reward and is excluded.  Each step
//! records both the mass actually gained by the granted request and the
//! mass a full-grid grant would have gained against the same pre-grant
//! belief, so gain percentages are comparable across policies on paired
//! seeds.  Episode CSV files round-trip exactly: evaluation always reads
//! records back from serialized form.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::SemanticGrid;
use crate::mass::NUM_CHANNELS;
use crate::mdp::{BoundingBoxAction, Environment};
use crate::policy::Policy;
use crate::{Error, Result};

/// Number of reported class groups: P, C, R.
pub const NUM_GROUPS: usize = 3;

/// Group labels in report order.
pub const GROUP_NAMES: [&str; NUM_GROUPS] = ["p", "c", "r"];

/// Class channels contributing to each group.
const GROUP_CLASSES: [&[usize]; NUM_GROUPS] = [&[0], &[1], &[2, 3]];

/// One environment step as seen by the evaluation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: BoundingBoxAction,
    pub reward: f64,
    /// Cells the granted request covered.
    pub request_cells: usize,
    /// Mass gained by the grant, per group.
    pub gained: [f64; NUM_GROUPS],
    /// Mass a full-grid grant would have gained, per group.
    pub achievable: [f64; NUM_GROUPS],
    /// Mean unknown mass before the grant was fused.
    pub mean_omega_before: f64,
    /// Mean unknown mass after the grant was fused.
    pub mean_omega_after: f64,
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub scenario: String,
    pub policy_id: String,
    pub height: usize,
    pub width: usize,
    pub steps: Vec<StepRecord>,
}

/// How per-episode gains aggregate into a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainNormalization {
    /// 100 * sum(gained) / sum(achievable) over all steps.
    RatioOfSums,
    /// Mean over steps of the per-step percentage, skipping steps where
    /// nothing was achievable.
    PerStepMean,
}

/// Blur applied to true changes before overlap scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKernel {
    None,
    /// 5x5 Gaussian, sigma 5/6.
    Gaussian5,
    /// 11x11 Gaussian, sigma 11/6.
    Gaussian11,
}

impl BlurKernel {
    pub const ALL: [BlurKernel; 3] =
        [BlurKernel::None, BlurKernel::Gaussian5, BlurKernel::Gaussian11];

    pub fn name(&self) -> &'static str {
        match self {
            BlurKernel::None => "none",
            BlurKernel::Gaussian5 => "gaussian5",
            BlurKernel::Gaussian11 => "gaussian11",
        }
    }

    /// Kernel side length and standard deviation; the identity kernel for
    /// the no-blur case.
    fn shape(&self) -> (usize, f64) {
        match self {
            BlurKernel::None => (1, 1.0),
            BlurKernel::Gaussian5 => (5, 5.0 / 6.0),
            BlurKernel::Gaussian11 => (11, 11.0 / 6.0),
        }
    }
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Information gain percentage per group, in [`GROUP_NAMES`] order.
    pub info_gain_pct: [f64; NUM_GROUPS],
    /// Mean request size as a percentage of the grid.
    pub request_size_pct: f64,
    pub mean_reward: f64,
    pub mass_score: Option<f64>,
    /// (positive%, negative%) per blur kernel, when computed.
    pub change_accuracy: Vec<(BlurKernel, f64, f64)>,
}

/// Runs one episode: the policy picks a request from the current belief,
/// the environment steps, and the record keeps per-step rewards and per
/// group both the granted and the broadcast-achievable mass gains.
/// Deterministic given the environment and `seed`, which reseeds any policy
/// randomness.
pub fn run_episode(
    mut env: Environment,
    policy: &mut Policy,
    steps: usize,
    seed: u64,
) -> Result<EpisodeRecord> {
    if steps == 0 {
        return Err(Error::Parameter("episode length must be at least 1".into()));
    }
    policy.reset(seed);
    let (height, width) = (env.belief().height(), env.belief().width());
    let scenario = env.scenario_id().to_string();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let choice = policy.decide(&env)?;
        let outcome = env.step(choice.action)?;
        let full = outcome.g_tilde.fuse_grids(&outcome.observation.complete)?;
        let mut gained = [0.0; NUM_GROUPS];
        let mut achievable = [0.0; NUM_GROUPS];
        for (g, classes) in GROUP_CLASSES.iter().enumerate() {
            for &k in *classes {
                for (after, before) in outcome.g.cells().iter().zip(outcome.g_tilde.cells()) {
                    gained[g] += (after.mass(k) - before.mass(k)).max(0.0);
                }
                for (after, before) in full.cells().iter().zip(outcome.g_tilde.cells()) {
                    achievable[g] += (after.mass(k) - before.mass(k)).max(0.0);
                }
            }
        }
        records.push(StepRecord {
            action: choice.action,
            reward: outcome.reward,
            request_cells: outcome.requested_cells,
            gained,
            achievable,
            mean_omega_before: mean_omega(&outcome.g_tilde),
            mean_omega_after: mean_omega(&outcome.g),
        });
    }
    Ok(EpisodeRecord {
        seed,
        scenario,
        policy_id: policy.id().to_string(),
        height,
        width,
        steps: records,
    })
}

fn mean_omega(grid: &SemanticGrid) -> f64 {
    grid.cells().iter().map(|c| c.omega()).sum::<f64>() / grid.num_cells() as f64
}

/// Information gain per group, request size, and mean reward under the
/// default ratio-of-sums normalization.
pub fn info_gain_metrics(records: &[EpisodeRecord]) -> Result<MetricsReport> {
    info_gain_metrics_with(records, GainNormalization::RatioOfSums)
}

/// [`info_gain_metrics`] with an explicit normalization.  Records are
/// sorted by (scenario, policy, seed) before the reduction, so the result
/// does not depend on input order.
pub fn info_gain_metrics_with(
    records: &[EpisodeRecord],
    normalization: GainNormalization,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Parameter("no episode records to evaluate".into()));
    }
    let mut ordered: Vec<&EpisodeRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.scenario, &a.policy_id, a.seed).cmp(&(&b.scenario, &b.policy_id, b.seed))
    });

    let mut info_gain_pct = [0.0; NUM_GROUPS];
    for (g, pct) in info_gain_pct.iter_mut().enumerate() {
        *pct = match normalization {
            GainNormalization::RatioOfSums => {
                let mut gained = 0.0;
                let mut achievable = 0.0;
                for rec in &ordered {
                    for step in &rec.steps {
                        gained += step.gained[g];
                        achievable += step.achievable[g];
                    }
                }
                percent_ratio(gained, achievable)
            }
            GainNormalization::PerStepMean => {
                let mut total = 0.0;
                let mut counted = 0usize;
                for rec in &ordered {
                    for step in &rec.steps {
                        if step.achievable[g] > 0.0 {
                            total += percent_ratio(step.gained[g], step.achievable[g]);
                            counted += 1;
                        }
                    }
                }
                if counted == 0 {
                    100.0
                } else {
                    total / counted as f64
                }
            }
        };
    }

    let mut cells = 0.0;
    let mut reward_total = 0.0;
    let mut num_steps = 0usize;
    let mut total_cells = 0.0;
    for rec in &ordered {
        for step in &rec.steps {
            cells += step.request_cells as f64;
            reward_total += step.reward;
            total_cells += (rec.height * rec.width) as f64;
            num_steps += 1;
        }
    }
    if num_steps == 0 {
        return Err(Error::Parameter("episode records contain no steps".into()));
    }
    Ok(MetricsReport {
        info_gain_pct,
        request_size_pct: 100.0 * cells / total_cells,
        mean_reward: reward_total / num_steps as f64,
        mass_score: None,
        change_accuracy: Vec::new(),
    })
}

/// A gain ratio as a percentage; an empty normalizer means nothing could be
/// gained, which counts as fully achieved.  The ratio is formed before the
/// percent scaling so equal numerator and denominator give exactly 100.
fn percent_ratio(gained: f64, achievable: f64) -> f64 {
    if achievable == 0.0 {
        100.0
    } else {
        100.0 * (gained / achievable)
    }
}

/// Mean mass assigned to the true channel: for each cell the inferred mass
/// on the channel the one-hot truth selects, averaged over cells.
pub fn mass_score(true_binary: &SemanticGrid, inferred: &SemanticGrid) -> Result<f64> {
    if !true_binary.same_geometry(inferred) {
        return Err(Error::Dimension(format!(
            "truth {}x{} does not match inferred {}x{}",
            true_binary.height(),
            true_binary.width(),
            inferred.height(),
            inferred.width()
        )));
    }
    let mut total = 0.0;
    for (i, (truth, inf)) in true_binary.cells().iter().zip(inferred.cells()).enumerate() {
        let mut ones = 0;
        for k in 0..NUM_CHANNELS {
            let m = truth.mass(k);
            if m == 1.0 {
                ones += 1;
            } else if m != 0.0 {
                return Err(Error::Mass(format!(
                    "truth cell {i} channel {k} has mass {m}, not 0 or 1"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::Mass(format!("truth cell {i} is not one-hot")));
        }
        for k in 0..NUM_CHANNELS {
            total += truth.mass(k) * inf.mass(k);
        }
    }
    Ok(total / true_binary.num_cells() as f64)
}

/// Drivable-surface mass per cell: road lines plus road.
pub fn road_field(grid: &SemanticGrid) -> Vec<f64> {
    grid.cells().iter().map(|c| c.mass(2) + c.mass(3)).collect()
}

/// Overlap between predicted and true per-cell changes of a scalar field
/// over time, reported separately for increases and decreases.
///
/// True change fields are blurred, then rescaled so a perfect predictor
/// scores exactly 100 under the same overlap sum; predictions are compared
/// against the rescaled blurred truth.  Returns (positive%, negative%).
pub fn change_accuracy(
    true_seq: &[Vec<f64>],
    pred_seq: &[Vec<f64>],
    height: usize,
    width: usize,
    blur: BlurKernel,
) -> Result<(f64, f64)> {
    if true_seq.len() < 2 || true_seq.len() != pred_seq.len() {
        return Err(Error::Parameter(format!(
            "need equal-length sequences of at least 2 fields, got {} and {}",
            true_seq.len(),
            pred_seq.len()
        )));
    }
    let cells = height * width;
    for field in true_seq.iter().chain(pred_seq) {
        if field.len() != cells {
            return Err(Error::Dimension(format!(
                "field length {} does not match {height}x{width}",
                field.len()
            )));
        }
    }

    // Accumulate overlap sums over all consecutive differences.
    let mut true_pos = 0.0;
    let mut true_neg = 0.0;
    let mut overlap_pos = 0.0;
    let mut overlap_neg = 0.0;
    let mut pred_overlap_pos = 0.0;
    let mut pred_overlap_neg = 0.0;
    for t in 1..true_seq.len() {
        let change: Vec<f64> = true_seq[t]
            .iter()
            .zip(&true_seq[t - 1])
            .map(|(now, prev)| now - prev)
            .collect();
        let pred_change: Vec<f64> = pred_seq[t]
            .iter()
            .zip(&pred_seq[t - 1])
            .map(|(now, prev)| now - prev)
            .collect();
        let blurred = blur_field(&change, height, width, blur);
        for i in 0..cells {
            let p = change[i].max(0.0);
            let n = (-change[i]).max(0.0);
            let bp = blurred[i].max(0.0);
            let bn = (-blurred[i]).max(0.0);
            true_pos += p;
            true_neg += n;
            overlap_pos += p * bp;
            overlap_neg += n * bn;
            pred_overlap_pos += pred_change[i].max(0.0) * bp;
            pred_overlap_neg += (-pred_change[i]).max(0.0) * bn;
        }
    }
    Ok((
        overlap_percent(true_pos, overlap_pos, pred_overlap_pos),
        overlap_percent(true_neg, overlap_neg, pred_overlap_neg),
    ))
}

/// 100 * pred_overlap * scale / true_total, where scale makes the truth's
/// own overlap equal its total.  No true changes counts as fully detected;
/// a blur that cancels all true overlap leaves nothing creditable.
fn overlap_percent(true_total: f64, true_overlap: f64, pred_overlap: f64) -> f64 {
    if true_total == 0.0 {
        return 100.0;
    }
    if true_overlap == 0.0 {
        return 0.0;
    }
    100.0 * pred_overlap * (true_total / true_overlap) / true_total
}

/// Convolves a field with the kernel under zero padding.
fn blur_field(field: &[f64], height: usize, width: usize, blur: BlurKernel) -> Vec<f64> {
    let (size, sigma) = blur.shape();
    if size == 1 {
        return field.to_vec();
    }
    let kernel = gaussian_kernel(size, sigma);
    let radius = (size / 2) as isize;
    let mut out = vec![0.0; field.len()];
    for r in 0..height as isize {
        for c in 0..width as isize {
            let mut acc = 0.0;
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (sr, sc) = (r + dr, c + dc);
                    if sr >= 0 && sr < height as isize && sc >= 0 && sc < width as isize {
                        let k = kernel[((dr + radius) * size as isize + dc + radius) as usize];
                        acc += k * field[(sr * width as isize + sc) as usize];
                    }
                }
            }
            out[(r * width as isize + c) as usize] = acc;
        }
    }
    out
}

/// Square Gaussian kernel normalized to unit sum.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let radius = (size / 2) as isize;
    let mut kernel = Vec::with_capacity(size * size);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let d2 = (dr * dr + dc * dc) as f64;
            kernel.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    kernel
}

/// Lower endpoint of a bootstrap confidence interval for the mean: the
/// `quantile` quantile of resampled means.  Deterministic given the seed.
pub fn bootstrap_mean_quantile(
    values: &[f64],
    resamples: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Parameter("no values to bootstrap".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Parameter(format!("quantile {quantile} outside [0, 1]")));
    }
    if resamples == 0 {
        return Err(Error::Parameter("resamples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let total: f64 = (0..n).map(|_| values[rng.gen_range(0..n)]).sum();
        means.push(total / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let idx = ((resamples - 1) as f64 * quantile).round() as usize;
    Ok(means[idx])
}

/// Episode CSV column order.
pub const EPISODE_CSV_HEADER: [&str; 20] = [
    "seed",
    "scenario",
    "policy",
    "step",
    "u",
    "v",
    "w",
    "h",
    "reward",
    "request_cells",
    "gained_p",
    "gained_c",
    "gained_r",
    "achievable_p",
    "achievable_c",
    "achievable_r",
    "mean_omega_before",
    "mean_omega_after",
    "height",
    "width",
];

/// Serializes a float with 9 significant digits.
pub fn csv_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes episode records as CSV, one row per step.
pub fn write_episode_csv(out: &mut impl Write, records: &[EpisodeRecord]) -> Result<()> {
    writeln!(out, "{}", EPISODE_CSV_HEADER.join(","))?;
    for rec in records {
        for (t, step) in rec.steps.iter().enumerate() {
            let fields = [
                rec.seed.to_string(),
                rec.scenario.clone(),
                rec.policy_id.clone(),
                t.to_string(),
                csv_float(step.action.u),
                csv_float(step.action.v),
                csv_float(step.action.w),
                csv_float(step.action.h),
                csv_float(step.reward),
                step.request_cells.to_string(),
                csv_float(step.gained[0]),
                csv_float(step.gained[1]),
                csv_float(step.gained[2]),
                csv_float(step.achievable[0]),
                csv_float(step.achievable[1]),
                csv_float(step.achievable[2]),
                csv_float(step.mean_omega_before),
                csv_float(step.mean_omega_after),
                rec.height.to_string(),
                rec.width.to_string(),
            ];
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

/// Reads episode records back from CSV; consecutive rows with the same
/// (seed, scenario, policy) form one episode, steps in row order.
pub fn read_episode_csv(input: &mut impl BufRead) -> Result<Vec<EpisodeRecord>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("episode CSV is empty".into()))??;
    if header != EPISODE_CSV_HEADER.join(",") {
        return Err(Error::Format(format!("unexpected episode CSV header: {header}")));
    }
    let mut records: Vec<EpisodeRecord> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != EPISODE_CSV_HEADER.len() {
            return Err(Error::Format(format!(
                "episode CSV row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                EPISODE_CSV_HEADER.len()
            )));
        }
        let parse_f = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|e| {
                Error::Format(format!(
                    "episode CSV row {} column {}: {e}",
                    lineno + 2,
                    EPISODE_CSV_HEADER[idx]
                ))
            })
        };
        let parse_u = |idx: usize| -> Result<u64> {
            fields[idx].parse::<u64>().map_err(|e| {
                Error::Format(format!(
                    "episode CSV row {} column {}: {e}",
                    lineno + 2,
                    EPISODE_CSV_HEADER[idx]
                ))
            })
        };
        let seed = parse_u(0)?;
        let scenario = fields[1].to_string();
        let policy_id = fields[2].to_string();
        let step = StepRecord {
            action: BoundingBoxAction::clamped(
                parse_f(4)?,
                parse_f(5)?,
                parse_f(6)?,
                parse_f(7)?,
            ),
            reward: parse_f(8)?,
            request_cells: parse_u(9)? as usize,
            gained: [parse_f(10)?, parse_f(11)?, parse_f(12)?],
            achievable: [parse_f(13)?, parse_f(14)?, parse_f(15)?],
            mean_omega_before: parse_f(16)?,
            mean_omega_after: parse_f(17)?,
        };
        let height = parse_u(18)? as usize;
        let width = parse_u(19)? as usize;
        let same_episode = records.last().is_some_and(|r: &EpisodeRecord| {
            r.seed == seed && r.scenario == scenario && r.policy_id == policy_id
        });
        if same_episode {
            records.last_mut().unwrap().steps.push(step);
        } else {
            records.push(EpisodeRecord {
                seed,
                scenario,
                policy_id,
                height,
                width,
                steps: vec![step],
            });
        }
    }
    Ok(records)
}
