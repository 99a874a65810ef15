//! Request policies over the cooperative-perception MDP.
//!
//! Fixed baselines (broadcast, silent, random), an ignorance-scoring greedy
//! policy, a cheating oracle that scores candidates against the true
//! next-step reward, and a small affine policy trained with the
//! cross-entropy method.  Greedy and oracle scorers share one code path:
//! each builds a per-cell density once, then every candidate is scored by
//! the box-reward function over that density, with ties broken by smallest
//! area then lowest (row, column) anchor.  Scoring sums exactly the cells
//! the reward function sums, in the same order, so exact ties between
//! symmetric candidates resolve identically on every route.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::checkpoint::ArrayStore;
use crate::config::CemConfig;
use crate::grid::SemanticGrid;
use crate::mass::NUM_CLASSES;
use crate::mdp::{
    box_rect, reward, reward_density, BoundingBoxAction, EnvPeek, Environment, RewardParams,
    SpatialFilterGrid,
};
use crate::vae::pooled_features;
use crate::{Error, Result};

/// Number of raw policy outputs: box coordinates (u, v, w, h) plus the
/// request gate.
pub const POLICY_OUTPUTS: usize = 5;

/// Everything a (non-cheating) policy may look at when choosing a request.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    /// Current knowledge after memory integration, before any grant.
    pub g_tilde: &'a SemanticGrid,
    /// Ego-centered spatial weighting of cell value.
    pub filter: &'a SpatialFilterGrid,
    /// Reward coefficients shared with the environment.
    pub params: &'a RewardParams,
    /// Optional precomputed features (e.g. a learned belief state); policies
    /// that need features fall back to pooled grid features when absent.
    pub features: Option<&'a [f64]>,
}

impl<'a> PolicyInput<'a> {
    /// View of an environment's current state.
    pub fn from_env(env: &'a Environment) -> Self {
        Self { g_tilde: env.belief(), filter: env.filter(), params: env.params(), features: None }
    }

    fn check_dims(&self) -> Result<()> {
        if self.g_tilde.height() != self.filter.height()
            || self.g_tilde.width() != self.filter.width()
        {
            return Err(Error::Dimension(format!(
                "grid {}x{} does not match filter {}x{}",
                self.g_tilde.height(),
                self.g_tilde.width(),
                self.filter.height(),
                self.filter.width()
            )));
        }
        Ok(())
    }
}

/// A chosen request plus the policy's own value estimate for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub action: BoundingBoxAction,
    /// Diagnostic score; fixed policies report 0, scorers their argmax value,
    /// the parametric policy its request-gate activation.
    pub score: f64,
}

/// Always requests the full grid.
pub fn broadcast_policy(_input: &PolicyInput) -> PolicyOutput {
    PolicyOutput { action: BoundingBoxAction::BROADCAST, score: 0.0 }
}

/// Never requests anything.
pub fn silent_policy(_input: &PolicyInput) -> PolicyOutput {
    PolicyOutput { action: BoundingBoxAction::EMPTY, score: 0.0 }
}

/// Coin-flips between no request and a uniformly random box.
pub fn random_policy<R: Rng + ?Sized>(_input: &PolicyInput, rng: &mut R) -> PolicyOutput {
    if rng.gen_bool(0.5) {
        return PolicyOutput { action: BoundingBoxAction::EMPTY, score: 0.0 };
    }
    let u = rng.gen::<f64>();
    let v = rng.gen::<f64>();
    let w = rng.gen::<f64>();
    let h = rng.gen::<f64>();
    PolicyOutput { action: BoundingBoxAction::clamped(u, v, w, h), score: 0.0 }
}

/// Default candidate set: boxes centered on an 8 row by 12 column anchor
/// lattice at four square sizes, plus the empty request (385 candidates).
pub fn default_candidates() -> Vec<BoundingBoxAction> {
    const SIZES: [f64; 4] = [0.125, 0.25, 0.5, 1.0];
    let mut out = Vec::with_capacity(8 * 12 * SIZES.len() + 1);
    for i in 0..8 {
        let v = (i as f64 + 0.5) / 8.0;
        for j in 0..12 {
            let u = (j as f64 + 0.5) / 12.0;
            for s in SIZES {
                out.push(BoundingBoxAction::clamped(u, v, s, s));
            }
        }
    }
    out.push(BoundingBoxAction::EMPTY);
    out
}

/// Expected per-cell class reward under a uniform class prior: the plain
/// mean of the per-class coefficients.
pub fn expected_class_reward(params: &RewardParams) -> f64 {
    params.r_obj.iter().sum::<f64>() / NUM_CLASSES as f64
}

/// Scores candidates by expected ignorance-resolution value: each covered
/// cell contributes its spatial weight times its unknown mass (raised to the
/// reward exponent) times the expected class reward, minus the per-cell and
/// per-request base costs.  Uses the default [`expected_class_reward`].
pub fn greedy_ignorance_policy(
    input: &PolicyInput,
    candidates: &[BoundingBoxAction],
) -> Result<PolicyOutput> {
    greedy_ignorance_policy_with(input, candidates, expected_class_reward(input.params))
}

/// [`greedy_ignorance_policy`] with an explicit expected per-cell class
/// reward.
pub fn greedy_ignorance_policy_with(
    input: &PolicyInput,
    candidates: &[BoundingBoxAction],
    expected_class_reward: f64,
) -> Result<PolicyOutput> {
    input.check_dims()?;
    let p = input.params;
    let density: Vec<f64> = input
        .g_tilde
        .cells()
        .iter()
        .zip(input.filter.values())
        .map(|(cell, s)| s * cell.omega().powf(p.w_exp) * expected_class_reward - p.eta * p.r_min)
        .collect();
    scored_argmax(candidates, &density, p, input.g_tilde.height(), input.g_tilde.width())
}

/// Scores candidates by their true next-step reward, using the peeked
/// complete grid that a real agent never sees.  Fusing the full complete
/// grid once gives a per-cell gain density valid for every box, because a
/// granted excerpt is vacuous (hence fusion-neutral) outside its box.
pub fn oracle_greedy_policy(
    input: &PolicyInput,
    peek: &EnvPeek,
    candidates: &[BoundingBoxAction],
) -> Result<PolicyOutput> {
    let g_full = peek.g_tilde_next.fuse_grids(&peek.complete_next)?;
    let density = reward_density(&g_full, &peek.g_tilde_next, input.filter, input.params)?;
    scored_argmax(
        candidates,
        &density,
        input.params,
        peek.g_tilde_next.height(),
        peek.g_tilde_next.width(),
    )
}

/// Argmax over candidates of the box reward implied by a per-cell density.
/// The empty request scores the flat no-cooperation penalty.  Ties break
/// toward the smallest area, then the lowest (row, column) anchor, so the
/// choice is a total deterministic function of the candidate list.
fn scored_argmax(
    candidates: &[BoundingBoxAction],
    density: &[f64],
    params: &RewardParams,
    height: usize,
    width: usize,
) -> Result<PolicyOutput> {
    if candidates.is_empty() {
        return Err(Error::Parameter("candidate set is empty".into()));
    }
    if density.len() != height * width {
        return Err(Error::Dimension(format!(
            "density length {} does not match {height}x{width}",
            density.len()
        )));
    }
    let mut best: Option<(PolicyOutput, usize, usize, usize)> = None;
    for &action in candidates {
        let score = reward(action, density, params, height, width);
        if !score.is_finite() {
            return Err(Error::Numerical(format!("candidate score {score} is not finite")));
        }
        let (area, row0, col0) = match box_rect(action, height, width) {
            Some(r) => (r.num_cells(), r.row0, r.col0),
            None => (0, 0, 0),
        };
        let better = match &best {
            None => true,
            Some((b, b_area, b_row, b_col)) => match score.total_cmp(&b.score) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => (area, row0, col0) < (*b_area, *b_row, *b_col),
            },
        };
        if better {
            best = Some((PolicyOutput { action, score }, area, row0, col0));
        }
    }
    Ok(best.expect("nonempty candidates produce a best").0)
}

/// Affine map from features to box coordinates and a request gate.
///
/// Outputs are `o = W [features; 1]`; the action is the sigmoid of the four
/// box outputs when the gate output is positive, the empty request
/// otherwise.  The gate activation doubles as the reported score.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricPolicy {
    feature_dim: usize,
    /// Row-major [`POLICY_OUTPUTS`] x (feature_dim + 1); last column is bias.
    weights: Vec<f64>,
}

impl ParametricPolicy {
    /// All-zero weights: gates closed, so the policy starts silent.
    pub fn zeros(feature_dim: usize) -> Self {
        Self { feature_dim, weights: vec![0.0; POLICY_OUTPUTS * (feature_dim + 1)] }
    }

    pub fn from_weights(feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let expected = POLICY_OUTPUTS * (feature_dim + 1);
        if weights.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} weights for feature dim {feature_dim}, got {}",
                weights.len()
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!("policy weight {bad} is not finite")));
        }
        Ok(Self { feature_dim, weights })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Raw affine outputs for a feature vector.
    fn outputs(&self, features: &[f64]) -> Result<[f64; POLICY_OUTPUTS]> {
        if features.len() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "expected {} features, got {}",
                self.feature_dim,
                features.len()
            )));
        }
        let cols = self.feature_dim + 1;
        let mut out = [0.0; POLICY_OUTPUTS];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * cols..(r + 1) * cols];
            *o = row[self.feature_dim]
                + row[..self.feature_dim].iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
        }
        Ok(out)
    }

    /// Chooses a request from a feature vector.
    pub fn act(&self, features: &[f64]) -> Result<PolicyOutput> {
        let o = self.outputs(features)?;
        let gate = o[POLICY_OUTPUTS - 1];
        let action = if gate > 0.0 {
            BoundingBoxAction::clamped(sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2]), sigmoid(o[3]))
        } else {
            BoundingBoxAction::EMPTY
        };
        Ok(PolicyOutput { action, score: gate })
    }

    /// Chooses a request from a policy input, preferring provided features
    /// and falling back to pooled grid features.
    pub fn decide(&self, input: &PolicyInput) -> Result<PolicyOutput> {
        match input.features {
            Some(f) => self.act(f),
            None => self.act(&pooled_features(input.g_tilde)),
        }
    }

    /// Serializes the weights in the flat named-array checkpoint format.
    pub fn write_to(&self, out: &mut impl std::io::Write) -> Result<()> {
        let mut store = ArrayStore::new();
        store.push(
            "policy.weights",
            vec![POLICY_OUTPUTS, self.feature_dim + 1],
            self.weights.clone(),
        )?;
        store.write_to(out)
    }

    pub fn read_from(input: &mut impl std::io::BufRead) -> Result<Self> {
        let store = ArrayStore::read_from(input)?;
        let array = store
            .get("policy.weights")
            .ok_or_else(|| Error::Format("checkpoint has no policy.weights array".into()))?;
        if array.shape.len() != 2 || array.shape[0] != POLICY_OUTPUTS || array.shape[1] == 0 {
            return Err(Error::Format(format!(
                "policy.weights shape {:?} is not [{POLICY_OUTPUTS}, features+1]",
                array.shape
            )));
        }
        Self::from_weights(array.shape[1] - 1, array.data.clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(&mut std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Result of a cross-entropy-method training run.
#[derive(Debug, Clone)]
pub struct CemOutcome {
    /// Best candidate seen over the whole run, by mean episode return.
    pub policy: ParametricPolicy,
    /// Mean episode return of `policy` on the training evaluation seeds.
    pub best_return: f64,
    /// Mean episode return of the all-zero initialization on the same seeds.
    pub init_return: f64,
    /// Mean elite return per generation.
    pub elite_trace: Vec<f64>,
}

/// Initial per-weight standard deviation of the search distribution.
const CEM_INIT_STD: f64 = 1.5;
/// Floor keeping the search distribution from collapsing early.
const CEM_STD_FLOOR: f64 = 0.05;

/// Cross-entropy-method search over [`ParametricPolicy`] weights.
///
/// Every candidate is scored by its mean return over the same fixed set of
/// evaluation episodes (seeds drawn once from `seed`), so the objective is
/// deterministic and the run reproducible.  Population rollouts run in
/// parallel; generations are sequential.  Returns the best candidate seen,
/// which for zero generations is the all-zero initialization.
pub fn train_cem<F, X>(
    make_env: F,
    feature_extractor: X,
    cfg: &CemConfig,
    steps: usize,
    seed: u64,
) -> Result<CemOutcome>
where
    F: Fn(u64) -> Result<Environment> + Sync,
    X: Fn(&PolicyInput) -> Vec<f64> + Sync,
{
    if cfg.population == 0 || cfg.population > 64 {
        return Err(Error::Parameter(format!(
            "population {} outside 1..=64",
            cfg.population
        )));
    }
    if cfg.generations > 100 {
        return Err(Error::Parameter(format!("generations {} exceed 100", cfg.generations)));
    }
    if !(cfg.elite_fraction > 0.0 && cfg.elite_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "elite fraction {} outside (0, 1]",
            cfg.elite_fraction
        )));
    }
    if cfg.episodes_per_eval == 0 {
        return Err(Error::Parameter("episodes_per_eval must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Parameter("episode length must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_seeds: Vec<u64> = (0..cfg.episodes_per_eval).map(|_| rng.gen()).collect();

    let feature_dim = {
        let probe = make_env(eval_seeds[0])?;
        feature_extractor(&PolicyInput::from_env(&probe)).len()
    };
    let dim = POLICY_OUTPUTS * (feature_dim + 1);

    let evaluate = |weights: &[f64]| -> Result<f64> {
        let policy = ParametricPolicy::from_weights(feature_dim, weights.to_vec())?;
        let mut total = 0.0;
        for &ep_seed in &eval_seeds {
            let mut env = make_env(ep_seed)?;
            for _ in 0..steps {
                let features = feature_extractor(&PolicyInput::from_env(&env));
                let out = policy.act(&features)?;
                total += env.step(out.action)?.reward;
            }
        }
        let mean = total / eval_seeds.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!(
                "mean episode return {mean} is not finite"
            )));
        }
        Ok(mean)
    };

    let mut mean = vec![0.0; dim];
    let mut std = vec![CEM_INIT_STD; dim];
    let init_return = evaluate(&mean)?;
    let mut best_weights = mean.clone();
    let mut best_return = init_return;
    let mut elite_trace = Vec::with_capacity(cfg.generations);
    let elite_n = ((cfg.population as f64 * cfg.elite_fraction).ceil() as usize)
        .clamp(1, cfg.population);

    for generation in 0..cfg.generations {
        let population: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                mean.iter()
                    .zip(&std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let returns: Vec<f64> = population
            .par_iter()
            .enumerate()
            .map(|(i, weights)| {
                evaluate(weights).map_err(|e| {
                    Error::Numerical(format!("generation {generation} candidate {i}: {e}"))
                })
            })
            .collect::<Result<_>>()?;

        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
        let elites = &order[..elite_n];
        elite_trace.push(elites.iter().map(|&i| returns[i]).sum::<f64>() / elite_n as f64);

        for d in 0..dim {
            let m = elites.iter().map(|&i| population[i][d]).sum::<f64>() / elite_n as f64;
            let var = elites.iter().map(|&i| (population[i][d] - m).powi(2)).sum::<f64>()
                / elite_n as f64;
            mean[d] = m;
            std[d] = var.sqrt().max(CEM_STD_FLOOR);
        }
        for i in 0..cfg.population {
            if returns[i] > best_return {
                best_return = returns[i];
                best_weights.clone_from(&population[i]);
            }
        }
    }

    Ok(CemOutcome {
        policy: ParametricPolicy::from_weights(feature_dim, best_weights)?,
        best_return,
        init_return,
        elite_trace,
    })
}

/// A runnable policy with whatever state it needs, unified for episode
/// drivers and the command line.
#[derive(Debug, Clone)]
pub enum Policy {
    Broadcast,
    Silent,
    Random(Box<ChaCha8Rng>),
    /// Ignorance-greedy over the default candidate set.
    Greedy,
    /// True-reward oracle over the default candidate set; peeks the
    /// environment's next step.
    Oracle,
    Parametric(ParametricPolicy),
}

impl Policy {
    /// Coin-flip policy with its own stream; `reset` reseeds it per episode.
    pub fn random(seed: u64) -> Self {
        Policy::Random(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Stable identifier used in episode records and file names.
    pub fn id(&self) -> &'static str {
        match self {
            Policy::Broadcast => "broadcast",
            Policy::Silent => "silent",
            Policy::Random(_) => "random",
            Policy::Greedy => "greedy",
            Policy::Oracle => "oracle",
            Policy::Parametric(_) => "parametric",
        }
    }

    /// Reseeds internal randomness; policies without any are unaffected.
    pub fn reset(&mut self, seed: u64) {
        if let Policy::Random(rng) = self {
            **rng = ChaCha8Rng::seed_from_u64(seed);
        }
    }

    /// Chooses the next request for an environment's current state.
    pub fn decide(&mut self, env: &Environment) -> Result<PolicyOutput> {
        let input = PolicyInput::from_env(env);
        match self {
            Policy::Broadcast => Ok(broadcast_policy(&input)),
            Policy::Silent => Ok(silent_policy(&input)),
            Policy::Random(rng) => Ok(random_policy(&input, rng)),
            Policy::Greedy => greedy_ignorance_policy(&input, &default_candidates()),
            Policy::Oracle => {
                let peek = env.peek_next()?;
                oracle_greedy_policy(&input, &peek, &default_candidates())
            }
            Policy::Parametric(p) => p.decide(&input),
        }
    }
}
