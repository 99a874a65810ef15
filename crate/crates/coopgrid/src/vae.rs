//! Latent sequence models over pooled grid features.
//!
//! A diagonal-Gaussian state-space model (transition, emission, observation,
//! and mask heads) is paired with a recurrent recognition model (belief
//! update, belief head, smoothing head).  Four Monte-Carlo losses connect
//! them: a jumpy two-point loss, a sequential smoothing loss, and a locally
//! predictable loss with and without request actions.  The predictable loss
//! splits into encoder, reconstruction, and prediction terms whose sum is the
//! total.
//!
//! All loss evaluations are pure given an explicit noise bundle, and every
//! loss has an analytic-gradient twin backed by a reverse-mode tape whose
//! primitives carry hand-derived backward rules.  An exact Kalman
//! filter/smoother over linear-Gaussian systems provides the reference
//! likelihood that the Monte-Carlo losses must upper-bound.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::SemanticGrid;
use crate::mass::NUM_CHANNELS;
use crate::mdp::BoundingBoxAction;
use crate::{Error, Result};

/// ln(2π), the per-dimension normal log-partition constant.
const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Smallest admissible emission variance; keeps Gaussian densities at most 1
/// per dimension so dropping emission terms can only loosen a bound upward.
pub const MIN_EMISSION_VARIANCE: f64 = 1.0 / (2.0 * PI);

/// Dimension of a request action encoded as (u, v, w, h).
pub const ACTION_DIM: usize = 4;

/// Dimension of the per-step ego-motion input (dx, dy, dtheta).
pub const MOTION_DIM: usize = 3;

/// Dimension of the per-step driving-controls input (accel, steer, direction).
pub const CONTROL_DIM: usize = 3;

/// Side length of the square pooling blocks used to encode grids.
pub const POOL_BLOCK: usize = 8;

/// Default split index: the first 40% of a sequence (rounded up) is always
/// observed, the remainder is left for prediction.
pub fn default_t_min(seq_len: usize) -> usize {
    ((0.4 * seq_len as f64).ceil() as usize).max(1)
}

// ---------------------------------------------------------------------------
// Diagonal Gaussians
// ---------------------------------------------------------------------------

/// Diagonal Gaussian over a real vector, parameterized by mean and log
/// standard deviation per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a distribution after checking that both vectors are finite and
    /// of equal length.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Dimension(format!(
                "mean has {} entries but log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "non-finite entry in diagonal Gaussian".into(),
            ));
        }
        Ok(Self { mean, log_std })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    /// Number of dimensions.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// KL divergence between two diagonal Gaussians of equal dimension.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension(format!(
            "kl_diag between {} and {} dimensions",
            q.dim(),
            p.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let var_q = (2.0 * q.log_std[i]).exp();
        let var_p = (2.0 * p.log_std[i]).exp();
        let diff = q.mean[i] - p.mean[i];
        total += p.log_std[i] - q.log_std[i] + (var_q + diff * diff) / (2.0 * var_p) - 0.5;
    }
    Ok(total)
}

/// Reparameterized draw: mean + exp(log_std) * noise, elementwise.
pub fn sample(g: &DiagGaussian, noise: &[f64]) -> Vec<f64> {
    assert_eq!(g.dim(), noise.len(), "noise length must match dimension");
    g.mean
        .iter()
        .zip(&g.log_std)
        .zip(noise)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect()
}

// ---------------------------------------------------------------------------
// Loss inputs
// ---------------------------------------------------------------------------

/// One step of recognition input: pooled perception features plus the ego
/// motion since the previous step and the current driving controls.
#[derive(Debug, Clone)]
pub struct ObsStep {
    pub features: Vec<f64>,
    pub motion: [f64; MOTION_DIM],
    pub controls: [f64; CONTROL_DIM],
}

impl ObsStep {
    /// Features with zero motion and controls, for feature-only sequences.
    pub fn bare(features: Vec<f64>) -> Self {
        Self {
            features,
            motion: [0.0; MOTION_DIM],
            controls: [0.0; CONTROL_DIM],
        }
    }
}

/// Pre-drawn standard-normal noise, one vector per step; losses evaluated on
/// the same bundle are bit-identical.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub eps: Vec<Vec<f64>>,
}

impl NoiseBundle {
    /// All-zero noise: every draw collapses to its mean.
    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            eps: vec![vec![0.0; dim]; len],
        }
    }

    /// Fresh standard-normal noise for `len` steps of dimension `dim`.
    pub fn standard<R: Rng + ?Sized>(len: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            eps: (0..len)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
        }
    }
}

/// One (x, y) training sequence for the toy trainer.
#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub xs: Vec<ObsStep>,
    pub ys: Vec<Vec<f64>>,
}

/// Additive split of the predictable loss; `total` is always the exact sum
/// of the three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub encoder: f64,
    pub decoder: f64,
    pub prediction: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(encoder: f64, decoder: f64, prediction: f64) -> Self {
        Self {
            encoder,
            decoder,
            prediction,
            total: encoder + decoder + prediction,
        }
    }
}

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

/// Vector-valued evaluation tape.  Forward values are computed on node
/// creation; one backward sweep accumulates exact adjoints for every node.
struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    val: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    AddScalar(usize),
    MatVec { w: usize, x: usize, rows: usize, cols: usize },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Gather { src: usize, idx: Vec<usize> },
}

/// Numerically stable logistic function; exactly 0 or 1 in saturation.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> usize {
        let grad = vec![0.0; val.len()];
        self.nodes.push(Node { val, grad, op });
        self.nodes.len() - 1
    }

    fn leaf(&mut self, val: Vec<f64>) -> usize {
        self.push(val, Op::Leaf)
    }

    fn val(&self, id: usize) -> &[f64] {
        &self.nodes[id].val
    }

    fn grad(&self, id: usize) -> &[f64] {
        &self.nodes[id].grad
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x + y);
        self.push(val, Op::Add(a, b))
    }

    fn sub(&mut self, a: usize, b: usize) -> usize {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x - y);
        self.push(val, Op::Sub(a, b))
    }

    fn mul(&mut self, a: usize, b: usize) -> usize {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x * y);
        self.push(val, Op::Mul(a, b))
    }

    fn mul_const(&mut self, a: usize, c: Vec<f64>) -> usize {
        let val = zip_map(&self.nodes[a].val, &c, |x, y| x * y);
        self.push(val, Op::MulConst(a, c))
    }

    fn scale(&mut self, a: usize, s: f64) -> usize {
        let val = self.nodes[a].val.iter().map(|x| x * s).collect();
        self.push(val, Op::Scale(a, s))
    }

    fn add_scalar(&mut self, a: usize, s: f64) -> usize {
        let val = self.nodes[a].val.iter().map(|x| x + s).collect();
        self.push(val, Op::AddScalar(a))
    }

    fn matvec(&mut self, w: usize, x: usize, rows: usize, cols: usize) -> usize {
        debug_assert_eq!(self.nodes[w].val.len(), rows * cols);
        debug_assert_eq!(self.nodes[x].val.len(), cols);
        let mut val = vec![0.0; rows];
        for (r, out) in val.iter_mut().enumerate() {
            let row = &self.nodes[w].val[r * cols..(r + 1) * cols];
            *out = row
                .iter()
                .zip(&self.nodes[x].val)
                .map(|(a, b)| a * b)
                .sum();
        }
        self.push(val, Op::MatVec { w, x, rows, cols })
    }

    fn sigmoid(&mut self, a: usize) -> usize {
        let val = self.nodes[a].val.iter().map(|&x| sigmoid(x)).collect();
        self.push(val, Op::Sigmoid(a))
    }

    fn tanh(&mut self, a: usize) -> usize {
        let val = self.nodes[a].val.iter().map(|x| x.tanh()).collect();
        self.push(val, Op::Tanh(a))
    }

    fn exp(&mut self, a: usize) -> usize {
        let val = self.nodes[a].val.iter().map(|x| x.exp()).collect();
        self.push(val, Op::Exp(a))
    }

    fn log(&mut self, a: usize) -> usize {
        let val = self.nodes[a].val.iter().map(|x| x.ln()).collect();
        self.push(val, Op::Log(a))
    }

    fn concat(&mut self, parts: &[usize]) -> usize {
        let mut val = Vec::new();
        for &p in parts {
            val.extend_from_slice(&self.nodes[p].val);
        }
        self.push(val, Op::Concat(parts.to_vec()))
    }

    fn sum(&mut self, a: usize) -> usize {
        let val = vec![self.nodes[a].val.iter().sum()];
        self.push(val, Op::Sum(a))
    }

    fn gather(&mut self, src: usize, idx: Vec<usize>) -> usize {
        let val = idx.iter().map(|&i| self.nodes[src].val[i]).collect();
        self.push(val, Op::Gather { src, idx })
    }

    /// Chained addition of scalar nodes; `ids` must be non-empty.
    fn add_many(&mut self, ids: &[usize]) -> usize {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    /// Accumulates adjoints of every node reachable from `root`, seeding the
    /// scalar root with 1.
    fn backward(&mut self, root: usize) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        assert_eq!(self.nodes[root].val.len(), 1, "backward root must be scalar");
        self.nodes[root].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g;
                        head[*b].grad[j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g;
                        head[*b].grad[j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let av = head[*a].val[j];
                        let bv = head[*b].val[j];
                        head[*a].grad[j] += g * bv;
                        head[*b].grad[j] += g * av;
                    }
                }
                Op::MulConst(a, c) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g * c[j];
                    }
                }
                Op::Scale(a, s) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g * s;
                    }
                }
                Op::AddScalar(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = head[*x].val.clone();
                    let wv = head[*w].val.clone();
                    for r in 0..*rows {
                        let g = node.grad[r];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..*cols {
                            head[*w].grad[r * cols + c] += g * xv[c];
                            head[*x].grad[c] += g * wv[r * cols + c];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let y = node.val[j];
                        head[*a].grad[j] += g * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let y = node.val[j];
                        head[*a].grad[j] += g * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g * node.val[j];
                    }
                }
                Op::Log(a) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*a].grad[j] += g / head[*a].val[j];
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = head[p].val.len();
                        for j in 0..len {
                            head[p].grad[j] += node.grad[offset + j];
                        }
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let g = node.grad[0];
                    for pg in head[*a].grad.iter_mut() {
                        *pg += g;
                    }
                }
                Op::Gather { src, idx } => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        head[*src].grad[idx[j]] += g;
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

/// Named view of one parameter array: (name, shape, data).
pub type ArrayView<'a> = (String, Vec<usize>, &'a [f64]);

/// Affine layer y = Wx + b with row-major W.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// All-zero layer.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    /// Gaussian init scaled by 1/sqrt(cols), zero bias.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (cols.max(1) as f64).sqrt();
        Self {
            rows,
            cols,
            w: (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            b: vec![0.0; rows],
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        out.push((format!("{prefix}.w"), vec![self.rows, self.cols], &self.w));
        out.push((format!("{prefix}.b"), vec![self.rows], &self.b));
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> DenseNodes {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        reg.push(w);
        reg.push(b);
        DenseNodes {
            w,
            b,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

#[derive(Clone, Copy)]
struct DenseNodes {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl DenseNodes {
    fn fwd(&self, tape: &mut Tape, x: usize) -> usize {
        let mv = tape.matvec(self.w, x, self.rows, self.cols);
        tape.add(mv, self.b)
    }
}

/// Conditional Gaussian head in recurrent-cell form: the carried state is
/// gated through forget/input gates, the mean is the updated cell state, and
/// the log standard deviation reads the output-gated tanh of that mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedGaussian {
    pub state_dim: usize,
    pub aux_dim: usize,
    pub forget: Dense,
    pub input: Dense,
    pub cand: Dense,
    pub output: Dense,
    pub log_std: Dense,
}

impl GatedGaussian {
    /// All-zero head.
    pub fn zeros(state_dim: usize, aux_dim: usize) -> Self {
        let u = state_dim + aux_dim;
        Self {
            state_dim,
            aux_dim,
            forget: Dense::zeros(state_dim, u),
            input: Dense::zeros(state_dim, u),
            cand: Dense::zeros(state_dim, u),
            output: Dense::zeros(state_dim, u),
            log_std: Dense::zeros(state_dim, state_dim),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(state_dim: usize, aux_dim: usize, rng: &mut R) -> Self {
        let u = state_dim + aux_dim;
        Self {
            state_dim,
            aux_dim,
            forget: Dense::randn(state_dim, u, rng),
            input: Dense::randn(state_dim, u, rng),
            cand: Dense::randn(state_dim, u, rng),
            output: Dense::randn(state_dim, u, rng),
            log_std: Dense::randn(state_dim, state_dim, rng),
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        self.forget.push_arrays(&format!("{prefix}.forget"), out);
        self.input.push_arrays(&format!("{prefix}.input"), out);
        self.cand.push_arrays(&format!("{prefix}.cand"), out);
        self.output.push_arrays(&format!("{prefix}.output"), out);
        self.log_std.push_arrays(&format!("{prefix}.log_std"), out);
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        self.forget.push_arrays_mut(out);
        self.input.push_arrays_mut(out);
        self.cand.push_arrays_mut(out);
        self.output.push_arrays_mut(out);
        self.log_std.push_arrays_mut(out);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> GatedGaussianNodes {
        GatedGaussianNodes {
            forget: self.forget.register(tape, reg),
            input: self.input.register(tape, reg),
            cand: self.cand.register(tape, reg),
            output: self.output.register(tape, reg),
            log_std: self.log_std.register(tape, reg),
        }
    }
}

#[derive(Clone, Copy)]
struct GatedGaussianNodes {
    forget: DenseNodes,
    input: DenseNodes,
    cand: DenseNodes,
    output: DenseNodes,
    log_std: DenseNodes,
}

impl GatedGaussianNodes {
    /// Returns (mean, log_std) node ids for the conditional given `state`
    /// and optional `aux` conditioning.
    fn fwd(&self, tape: &mut Tape, state: usize, aux: Option<usize>) -> (usize, usize) {
        let u = match aux {
            Some(a) => tape.concat(&[state, a]),
            None => state,
        };
        let f_pre = self.forget.fwd(tape, u);
        let f = tape.sigmoid(f_pre);
        let i_pre = self.input.fwd(tape, u);
        let i = tape.sigmoid(i_pre);
        let c_pre = self.cand.fwd(tape, u);
        let c = tape.tanh(c_pre);
        let keep = tape.mul(f, state);
        let write = tape.mul(i, c);
        let mean = tape.add(keep, write);
        let o_pre = self.output.fwd(tape, u);
        let o = tape.sigmoid(o_pre);
        let tm = tape.tanh(mean);
        let gated = tape.mul(o, tm);
        let log_std = self.log_std.fwd(tape, gated);
        (mean, log_std)
    }
}

/// Gated feature map: sigmoid gate times tanh features, then two parallel
/// affine heads for mean and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DMapGaussian {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub gate: Dense,
    pub cand: Dense,
    pub mean: Dense,
    pub log_std: Dense,
}

impl DMapGaussian {
    /// All-zero head.
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            gate: Dense::zeros(hidden_dim, in_dim),
            cand: Dense::zeros(hidden_dim, in_dim),
            mean: Dense::zeros(out_dim, hidden_dim),
            log_std: Dense::zeros(out_dim, hidden_dim),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            gate: Dense::randn(hidden_dim, in_dim, rng),
            cand: Dense::randn(hidden_dim, in_dim, rng),
            mean: Dense::randn(out_dim, hidden_dim, rng),
            log_std: Dense::randn(out_dim, hidden_dim, rng),
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        self.gate.push_arrays(&format!("{prefix}.gate"), out);
        self.cand.push_arrays(&format!("{prefix}.cand"), out);
        self.mean.push_arrays(&format!("{prefix}.mean"), out);
        self.log_std.push_arrays(&format!("{prefix}.log_std"), out);
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        self.gate.push_arrays_mut(out);
        self.cand.push_arrays_mut(out);
        self.mean.push_arrays_mut(out);
        self.log_std.push_arrays_mut(out);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> DMapGaussianNodes {
        DMapGaussianNodes {
            gate: self.gate.register(tape, reg),
            cand: self.cand.register(tape, reg),
            mean: self.mean.register(tape, reg),
            log_std: self.log_std.register(tape, reg),
        }
    }
}

#[derive(Clone, Copy)]
struct DMapGaussianNodes {
    gate: DenseNodes,
    cand: DenseNodes,
    mean: DenseNodes,
    log_std: DenseNodes,
}

impl DMapGaussianNodes {
    fn fwd(&self, tape: &mut Tape, x: usize) -> (usize, usize) {
        let g_pre = self.gate.fwd(tape, x);
        let g = tape.sigmoid(g_pre);
        let c_pre = self.cand.fwd(tape, x);
        let c = tape.tanh(c_pre);
        let hidden = tape.mul(g, c);
        let mean = self.mean.fwd(tape, hidden);
        let log_std = self.log_std.fwd(tape, hidden);
        (mean, log_std)
    }
}

/// Mean-only gated feature map (for emissions with fixed variance).
#[derive(Debug, Clone, PartialEq)]
pub struct DMapMean {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub gate: Dense,
    pub cand: Dense,
    pub mean: Dense,
}

impl DMapMean {
    /// All-zero map.
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            gate: Dense::zeros(hidden_dim, in_dim),
            cand: Dense::zeros(hidden_dim, in_dim),
            mean: Dense::zeros(out_dim, hidden_dim),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            gate: Dense::randn(hidden_dim, in_dim, rng),
            cand: Dense::randn(hidden_dim, in_dim, rng),
            mean: Dense::randn(out_dim, hidden_dim, rng),
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        self.gate.push_arrays(&format!("{prefix}.gate"), out);
        self.cand.push_arrays(&format!("{prefix}.cand"), out);
        self.mean.push_arrays(&format!("{prefix}.mean"), out);
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        self.gate.push_arrays_mut(out);
        self.cand.push_arrays_mut(out);
        self.mean.push_arrays_mut(out);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> DMapMeanNodes {
        DMapMeanNodes {
            gate: self.gate.register(tape, reg),
            cand: self.cand.register(tape, reg),
            mean: self.mean.register(tape, reg),
        }
    }
}

#[derive(Clone, Copy)]
struct DMapMeanNodes {
    gate: DenseNodes,
    cand: DenseNodes,
    mean: DenseNodes,
}

impl DMapMeanNodes {
    fn fwd(&self, tape: &mut Tape, x: usize) -> usize {
        let g_pre = self.gate.fwd(tape, x);
        let g = tape.sigmoid(g_pre);
        let c_pre = self.cand.fwd(tape, x);
        let c = tape.tanh(c_pre);
        let hidden = tape.mul(g, c);
        self.mean.fwd(tape, hidden)
    }
}

/// Updating network: a forget gate on the carried state plus an additive
/// gated feature map, both driven by the conditioning input only.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedUpdate {
    pub state_dim: usize,
    pub aux_dim: usize,
    pub hidden_dim: usize,
    pub forget: Dense,
    pub gate: Dense,
    pub cand: Dense,
    pub proj: Dense,
}

impl GatedUpdate {
    /// All-zero update.
    pub fn zeros(state_dim: usize, aux_dim: usize, hidden_dim: usize) -> Self {
        Self {
            state_dim,
            aux_dim,
            hidden_dim,
            forget: Dense::zeros(state_dim, aux_dim),
            gate: Dense::zeros(hidden_dim, aux_dim),
            cand: Dense::zeros(hidden_dim, aux_dim),
            proj: Dense::zeros(state_dim, hidden_dim),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(
        state_dim: usize,
        aux_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            state_dim,
            aux_dim,
            hidden_dim,
            forget: Dense::randn(state_dim, aux_dim, rng),
            gate: Dense::randn(hidden_dim, aux_dim, rng),
            cand: Dense::randn(hidden_dim, aux_dim, rng),
            proj: Dense::randn(state_dim, hidden_dim, rng),
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        self.forget.push_arrays(&format!("{prefix}.forget"), out);
        self.gate.push_arrays(&format!("{prefix}.gate"), out);
        self.cand.push_arrays(&format!("{prefix}.cand"), out);
        self.proj.push_arrays(&format!("{prefix}.proj"), out);
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        self.forget.push_arrays_mut(out);
        self.gate.push_arrays_mut(out);
        self.cand.push_arrays_mut(out);
        self.proj.push_arrays_mut(out);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> GatedUpdateNodes {
        GatedUpdateNodes {
            forget: self.forget.register(tape, reg),
            gate: self.gate.register(tape, reg),
            cand: self.cand.register(tape, reg),
            proj: self.proj.register(tape, reg),
        }
    }
}

#[derive(Clone, Copy)]
struct GatedUpdateNodes {
    forget: DenseNodes,
    gate: DenseNodes,
    cand: DenseNodes,
    proj: DenseNodes,
}

impl GatedUpdateNodes {
    fn fwd(&self, tape: &mut Tape, state: usize, aux: usize) -> usize {
        let f_pre = self.forget.fwd(tape, aux);
        let f = tape.sigmoid(f_pre);
        let keep = tape.mul(f, state);
        let g_pre = self.gate.fwd(tape, aux);
        let g = tape.sigmoid(g_pre);
        let c_pre = self.cand.fwd(tape, aux);
        let c = tape.tanh(c_pre);
        let hidden = tape.mul(g, c);
        let write = self.proj.fwd(tape, hidden);
        tape.add(keep, write)
    }
}

/// Biasless affine conditional Gaussian: mean = Wx with a constant diagonal
/// log standard deviation, representing linear-Gaussian maps exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussian {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl AffineGaussian {
    /// Builds and validates dimensions.
    pub fn new(in_dim: usize, out_dim: usize, w: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if w.len() != in_dim * out_dim || log_std.len() != out_dim {
            return Err(Error::Dimension(
                "affine Gaussian weight or log_std size mismatch".into(),
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            w,
            log_std,
        })
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        out.push((
            format!("{prefix}.w"),
            vec![self.out_dim, self.in_dim],
            &self.w,
        ));
        out.push((
            format!("{prefix}.log_std"),
            vec![self.out_dim],
            &self.log_std,
        ));
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        out.push(&mut self.w);
        out.push(&mut self.log_std);
    }
}

/// Biasless affine mean map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMean {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
}

impl AffineMean {
    /// Builds and validates dimensions.
    pub fn new(in_dim: usize, out_dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != in_dim * out_dim {
            return Err(Error::Dimension("affine mean weight size mismatch".into()));
        }
        Ok(Self { in_dim, out_dim, w })
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        out.push((
            format!("{prefix}.w"),
            vec![self.out_dim, self.in_dim],
            &self.w,
        ));
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        out.push(&mut self.w);
    }
}

/// Gated recurrent cell for the belief hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub update: Dense,
    pub reset: Dense,
    pub cand: Dense,
}

impl GruCell {
    /// All-zero cell.
    pub fn zeros(hidden_dim: usize, input_dim: usize) -> Self {
        let u = hidden_dim + input_dim;
        Self {
            hidden_dim,
            input_dim,
            update: Dense::zeros(hidden_dim, u),
            reset: Dense::zeros(hidden_dim, u),
            cand: Dense::zeros(hidden_dim, u),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(hidden_dim: usize, input_dim: usize, rng: &mut R) -> Self {
        let u = hidden_dim + input_dim;
        Self {
            hidden_dim,
            input_dim,
            update: Dense::randn(hidden_dim, u, rng),
            reset: Dense::randn(hidden_dim, u, rng),
            cand: Dense::randn(hidden_dim, u, rng),
        }
    }

    fn push_arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayView<'a>>) {
        self.update.push_arrays(&format!("{prefix}.update"), out);
        self.reset.push_arrays(&format!("{prefix}.reset"), out);
        self.cand.push_arrays(&format!("{prefix}.cand"), out);
    }

    fn push_arrays_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        self.update.push_arrays_mut(out);
        self.reset.push_arrays_mut(out);
        self.cand.push_arrays_mut(out);
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> GruNodes {
        GruNodes {
            update: self.update.register(tape, reg),
            reset: self.reset.register(tape, reg),
            cand: self.cand.register(tape, reg),
        }
    }
}

#[derive(Clone, Copy)]
struct GruNodes {
    update: DenseNodes,
    reset: DenseNodes,
    cand: DenseNodes,
}

impl GruNodes {
    fn fwd(&self, tape: &mut Tape, h: usize, x: usize) -> usize {
        let xh = tape.concat(&[x, h]);
        let u_pre = self.update.fwd(tape, xh);
        let u = tape.sigmoid(u_pre);
        let r_pre = self.reset.fwd(tape, xh);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let xrh = tape.concat(&[x, rh]);
        let n_pre = self.cand.fwd(tape, xrh);
        let n = tape.tanh(n_pre);
        let ones = tape.leaf(vec![1.0; tape.val(u).len()]);
        let one_minus_u = tape.sub(ones, u);
        let keep = tape.mul(one_minus_u, h);
        let write = tape.mul(u, n);
        tape.add(keep, write)
    }
}

// ---------------------------------------------------------------------------
// Generative parameters
// ---------------------------------------------------------------------------

/// Latent transition head: either the gated recurrent-cell form or an exact
/// linear-Gaussian map.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TransitionMap {
    Gated(GatedGaussian),
    Linear(AffineGaussian),
}

/// Emission head mapping a latent state to the complete-percept feature mean.
#[derive(Debug, Clone, PartialEq)]
pub enum EmissionMap {
    DMap(DMapMean),
    Linear(AffineMean),
}

/// Observation head mapping (previous partial percept, complete percept,
/// latent state, action) to the partial-percept feature mean.  The gated
/// form chains two updating networks: a frame/visibility update conditioned
/// on (y, z), then a transmission update conditioned on the mask-map output.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ObservationMap {
    Gated(TwoStepUpdate),
    Linear(AffineMean),
}

/// The two chained updating networks of the gated observation head.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepUpdate {
    pub visibility: GatedUpdate,
    pub transmit: GatedUpdate,
}

/// Per-step reconstruction objective for the complete percept.
#[derive(Debug, Clone, PartialEq)]
pub enum EmissionObjective {
    /// Gaussian likelihood with fixed variance `alpha_y` (bound-compatible).
    Gaussian,
    /// Class-weighted cross entropy on channel-argmax targets, scaled per
    /// pooled block by one minus its ignorance share.
    WeightedClassEntropy { weights: [f64; NUM_CHANNELS] },
}

/// Default cross-entropy class weights, ordered as the grid channels
/// (pedestrian, car, road lines, road, other, ignorance).
pub const DEFAULT_CLASS_WEIGHTS: [f64; NUM_CHANNELS] = [100.0, 10.0, 1.0, 0.2, 0.1, 1.0];

/// Generative model parameters: transition, emission, observation, and mask
/// heads plus the fixed emission variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeParams {
    pub latent_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub transition: TransitionMap,
    pub emission: EmissionMap,
    pub observation: ObservationMap,
    pub mask: GatedUpdate,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub y_objective: EmissionObjective,
}

impl GenerativeParams {
    /// Randomly initialized gated heads with variances 1/2.
    pub fn new_gated(latent_dim: usize, x_dim: usize, y_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || x_dim == 0 || y_dim == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = (2 * latent_dim).max(2);
        let params = Self {
            latent_dim,
            x_dim,
            y_dim,
            transition: TransitionMap::Gated(GatedGaussian::randn(latent_dim, 0, &mut rng)),
            emission: EmissionMap::DMap(DMapMean::randn(latent_dim, hidden, y_dim, &mut rng)),
            observation: ObservationMap::Gated(TwoStepUpdate {
                visibility: GatedUpdate::randn(x_dim, y_dim + latent_dim, hidden, &mut rng),
                transmit: GatedUpdate::randn(x_dim, y_dim, hidden, &mut rng),
            }),
            mask: GatedUpdate::randn(y_dim, ACTION_DIM, hidden, &mut rng),
            alpha_x: 0.5,
            alpha_y: 0.5,
            y_objective: EmissionObjective::Gaussian,
        };
        params.validate()?;
        Ok(params)
    }

    /// Exact linear-Gaussian representation of `sys`; requires uniform
    /// emission noise so the fixed scalar variances are faithful.
    pub fn from_linear_system(sys: &LinearGaussianSystem) -> Result<Self> {
        let alpha_x = uniform_entry(&sys.noise_x, "x emission noise")?;
        let alpha_y = uniform_entry(&sys.noise_y, "y emission noise")?;
        let d = sys.latent_dim;
        let obs_in = sys.x_dim + sys.y_dim + d + ACTION_DIM;
        let mut obs_w = vec![0.0; sys.x_dim * obs_in];
        for r in 0..sys.x_dim {
            for c in 0..d {
                obs_w[r * obs_in + sys.x_dim + sys.y_dim + c] = sys.emit_x[r * d + c];
            }
        }
        let params = Self {
            latent_dim: d,
            x_dim: sys.x_dim,
            y_dim: sys.y_dim,
            transition: TransitionMap::Linear(AffineGaussian::new(
                d,
                d,
                sys.transition.clone(),
                sys.transition_noise.iter().map(|q| 0.5 * q.ln()).collect(),
            )?),
            emission: EmissionMap::Linear(AffineMean::new(d, sys.y_dim, sys.emit_y.clone())?),
            observation: ObservationMap::Linear(AffineMean::new(obs_in, sys.x_dim, obs_w)?),
            mask: GatedUpdate::zeros(sys.y_dim, ACTION_DIM, 1),
            alpha_x,
            alpha_y,
            y_objective: EmissionObjective::Gaussian,
        };
        params.validate()?;
        Ok(params)
    }

    /// Recovers the linear-Gaussian system represented by all-linear heads.
    /// Fails if any head is gated or the observation head reads anything but
    /// the latent state.
    pub fn to_linear_system(&self) -> Result<LinearGaussianSystem> {
        let transition = match &self.transition {
            TransitionMap::Linear(a) => a,
            TransitionMap::Gated(_) => {
                return Err(Error::Parameter("transition head is not linear".into()))
            }
        };
        let emission = match &self.emission {
            EmissionMap::Linear(a) => a,
            EmissionMap::DMap(_) => {
                return Err(Error::Parameter("emission head is not linear".into()))
            }
        };
        let observation = match &self.observation {
            ObservationMap::Linear(a) => a,
            ObservationMap::Gated(_) => {
                return Err(Error::Parameter("observation head is not linear".into()))
            }
        };
        let d = self.latent_dim;
        let obs_in = self.x_dim + self.y_dim + d + ACTION_DIM;
        let mut emit_x = vec![0.0; self.x_dim * d];
        for r in 0..self.x_dim {
            for c in 0..obs_in {
                let w = observation.w[r * obs_in + c];
                let z0 = self.x_dim + self.y_dim;
                if c >= z0 && c < z0 + d {
                    emit_x[r * d + (c - z0)] = w;
                } else if w.abs() > 1e-12 {
                    return Err(Error::Parameter(
                        "observation head reads more than the latent state".into(),
                    ));
                }
            }
        }
        LinearGaussianSystem::new(
            d,
            self.x_dim,
            self.y_dim,
            transition.w.clone(),
            transition.log_std.iter().map(|s| (2.0 * s).exp()).collect(),
            emit_x,
            vec![self.alpha_x; self.x_dim],
            emission.w.clone(),
            vec![self.alpha_y; self.y_dim],
        )
    }

    /// Checks variances and internal dimension consistency.
    pub fn validate(&self) -> Result<()> {
        for (name, alpha) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)] {
            if !alpha.is_finite() || alpha < MIN_EMISSION_VARIANCE - 1e-12 {
                return Err(Error::Parameter(format!(
                    "{name} = {alpha} must be at least 1/(2*pi)"
                )));
            }
        }
        let d = self.latent_dim;
        let ok = match &self.transition {
            TransitionMap::Gated(g) => g.state_dim == d && g.aux_dim == 0,
            TransitionMap::Linear(a) => a.in_dim == d && a.out_dim == d,
        } && match &self.emission {
            EmissionMap::DMap(m) => m.in_dim == d && m.out_dim == self.y_dim,
            EmissionMap::Linear(a) => a.in_dim == d && a.out_dim == self.y_dim,
        } && match &self.observation {
            ObservationMap::Gated(t) => {
                t.visibility.state_dim == self.x_dim
                    && t.visibility.aux_dim == self.y_dim + d
                    && t.transmit.state_dim == self.x_dim
                    && t.transmit.aux_dim == self.y_dim
            }
            ObservationMap::Linear(a) => {
                a.in_dim == self.x_dim + self.y_dim + d + ACTION_DIM && a.out_dim == self.x_dim
            }
        } && self.mask.state_dim == self.y_dim
            && self.mask.aux_dim == ACTION_DIM;
        if !ok {
            return Err(Error::Dimension(
                "generative head dimensions are inconsistent".into(),
            ));
        }
        if let EmissionObjective::WeightedClassEntropy { .. } = &self.y_objective {
            if !self.y_dim.is_multiple_of(NUM_CHANNELS) {
                return Err(Error::Dimension(format!(
                    "class-entropy objective needs y_dim divisible by {NUM_CHANNELS}, got {}",
                    self.y_dim
                )));
            }
        }
        Ok(())
    }

    /// Named parameter arrays in canonical flattening order.
    pub fn arrays(&self) -> Vec<ArrayView<'_>> {
        let mut out = Vec::new();
        match &self.transition {
            TransitionMap::Gated(g) => g.push_arrays("transition", &mut out),
            TransitionMap::Linear(a) => a.push_arrays("transition", &mut out),
        }
        match &self.emission {
            EmissionMap::DMap(m) => m.push_arrays("emission", &mut out),
            EmissionMap::Linear(a) => a.push_arrays("emission", &mut out),
        }
        match &self.observation {
            ObservationMap::Gated(t) => {
                t.visibility.push_arrays("observation.visibility", &mut out);
                t.transmit.push_arrays("observation.transmit", &mut out);
            }
            ObservationMap::Linear(a) => a.push_arrays("observation", &mut out),
        }
        self.mask.push_arrays("mask", &mut out);
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        match &mut self.transition {
            TransitionMap::Gated(g) => g.push_arrays_mut(&mut out),
            TransitionMap::Linear(a) => a.push_arrays_mut(&mut out),
        }
        match &mut self.emission {
            EmissionMap::DMap(m) => m.push_arrays_mut(&mut out),
            EmissionMap::Linear(a) => a.push_arrays_mut(&mut out),
        }
        match &mut self.observation {
            ObservationMap::Gated(t) => {
                t.visibility.push_arrays_mut(&mut out);
                t.transmit.push_arrays_mut(&mut out);
            }
            ObservationMap::Linear(a) => a.push_arrays_mut(&mut out),
        }
        self.mask.push_arrays_mut(&mut out);
        out
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.arrays().iter().map(|(_, _, a)| a.len()).sum()
    }

    /// Concatenated parameters in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, _, a) in self.arrays() {
            out.extend_from_slice(a);
        }
        out
    }

    /// Writes back a flat parameter vector of exactly `flat_len` entries.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        set_flat_arrays(self.arrays_mut(), flat)
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> GenNodes {
        let transition = match &self.transition {
            TransitionMap::Gated(g) => TransitionNodes::Gated(g.register(tape, reg)),
            TransitionMap::Linear(a) => TransitionNodes::Linear(register_affine(tape, reg, a)),
        };
        let emission = match &self.emission {
            EmissionMap::DMap(m) => EmissionNodes::DMap(m.register(tape, reg)),
            EmissionMap::Linear(a) => EmissionNodes::Linear(register_affine_mean(tape, reg, a)),
        };
        let observation = match &self.observation {
            ObservationMap::Gated(t) => ObservationNodes::Gated {
                visibility: t.visibility.register(tape, reg),
                transmit: t.transmit.register(tape, reg),
            },
            ObservationMap::Linear(a) => {
                ObservationNodes::Linear(register_affine_mean(tape, reg, a))
            }
        };
        let mask = self.mask.register(tape, reg);
        GenNodes {
            transition,
            emission,
            observation,
            mask,
        }
    }
}

fn uniform_entry(values: &[f64], what: &str) -> Result<f64> {
    let first = *values.first().ok_or_else(|| {
        Error::Parameter(format!("{what} must have at least one entry"))
    })?;
    if values.iter().any(|v| (v - first).abs() > 1e-12) {
        return Err(Error::Parameter(format!(
            "{what} must be uniform to map onto a single fixed variance"
        )));
    }
    Ok(first)
}

fn set_flat_arrays(mut arrays: Vec<&mut Vec<f64>>, flat: &[f64]) -> Result<()> {
    let total: usize = arrays.iter().map(|a| a.len()).sum();
    if flat.len() != total {
        return Err(Error::Dimension(format!(
            "flat vector has {} entries, parameters require {total}",
            flat.len()
        )));
    }
    let mut offset = 0;
    for a in arrays.iter_mut() {
        let len = a.len();
        a.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    Ok(())
}

struct AffineNodes {
    w: usize,
    log_std: usize,
    rows: usize,
    cols: usize,
}

fn register_affine(tape: &mut Tape, reg: &mut Vec<usize>, a: &AffineGaussian) -> AffineNodes {
    let w = tape.leaf(a.w.clone());
    let log_std = tape.leaf(a.log_std.clone());
    reg.push(w);
    reg.push(log_std);
    AffineNodes {
        w,
        log_std,
        rows: a.out_dim,
        cols: a.in_dim,
    }
}

struct AffineMeanNodes {
    w: usize,
    rows: usize,
    cols: usize,
}

fn register_affine_mean(tape: &mut Tape, reg: &mut Vec<usize>, a: &AffineMean) -> AffineMeanNodes {
    let w = tape.leaf(a.w.clone());
    reg.push(w);
    AffineMeanNodes {
        w,
        rows: a.out_dim,
        cols: a.in_dim,
    }
}

enum TransitionNodes {
    Gated(GatedGaussianNodes),
    Linear(AffineNodes),
}

impl TransitionNodes {
    fn fwd(&self, tape: &mut Tape, z: usize) -> (usize, usize) {
        match self {
            Self::Gated(g) => g.fwd(tape, z, None),
            Self::Linear(a) => {
                let mean = tape.matvec(a.w, z, a.rows, a.cols);
                (mean, a.log_std)
            }
        }
    }
}

enum EmissionNodes {
    DMap(DMapMeanNodes),
    Linear(AffineMeanNodes),
}

impl EmissionNodes {
    fn fwd(&self, tape: &mut Tape, z: usize) -> usize {
        match self {
            Self::DMap(m) => m.fwd(tape, z),
            Self::Linear(a) => tape.matvec(a.w, z, a.rows, a.cols),
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum ObservationNodes {
    Gated {
        visibility: GatedUpdateNodes,
        transmit: GatedUpdateNodes,
    },
    Linear(AffineMeanNodes),
}

struct GenNodes {
    transition: TransitionNodes,
    emission: EmissionNodes,
    observation: ObservationNodes,
    mask: GatedUpdateNodes,
}

impl GenNodes {
    /// Mask-map mean for (action, complete percept).
    fn mask_mean(&self, tape: &mut Tape, action: usize, y: usize) -> usize {
        self.mask.fwd(tape, y, action)
    }

    /// Observation mean for (previous partial percept, complete percept,
    /// latent state, action).
    fn observation_mean(
        &self,
        tape: &mut Tape,
        x_prev: usize,
        y: usize,
        z: usize,
        action: usize,
    ) -> usize {
        match &self.observation {
            ObservationNodes::Gated {
                visibility,
                transmit,
            } => {
                let aux1 = tape.concat(&[y, z]);
                let staged = visibility.fwd(tape, x_prev, aux1);
                let m_mean = self.mask_mean(tape, action, y);
                transmit.fwd(tape, staged, m_mean)
            }
            ObservationNodes::Linear(a) => {
                let input = tape.concat(&[x_prev, y, z, action]);
                tape.matvec(a.w, input, a.rows, a.cols)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Recognition parameters
// ---------------------------------------------------------------------------

/// Recurrent belief core: an input MLP over (x_t, x_{t-1}, v_t) feeding a
/// gated recurrent cell.  The belief state is the concatenation
/// (x_t, hidden, controls), in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefNet {
    pub x_dim: usize,
    pub hidden_dim: usize,
    pub input_mlp: Dense,
    pub gru: GruCell,
}

impl BeliefNet {
    /// All-zero core.
    pub fn zeros(x_dim: usize, hidden_dim: usize) -> Self {
        Self {
            x_dim,
            hidden_dim,
            input_mlp: Dense::zeros(hidden_dim, 2 * x_dim + MOTION_DIM),
            gru: GruCell::zeros(hidden_dim, hidden_dim),
        }
    }

    /// Random init.
    pub fn randn<R: Rng + ?Sized>(x_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            x_dim,
            hidden_dim,
            input_mlp: Dense::randn(hidden_dim, 2 * x_dim + MOTION_DIM, rng),
            gru: GruCell::randn(hidden_dim, hidden_dim, rng),
        }
    }
}

/// Belief head producing q(z_t | b_t): a gated feature map, or a per-step
/// table of distributions for exact-posterior experiments.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum BeliefHead {
    DMap(DMapGaussian),
    Tabular(Vec<DiagGaussian>),
}

/// Smoothing head producing q(z_k | b_k, z_{k+1}): the recurrent-cell form
/// conditioned on (z_{k+1}, b_k), or a per-step affine table.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SmoothingHead {
    Gated(GatedGaussian),
    Tabular(TabularSmoothing),
}

/// Per-step affine smoothing conditionals: mean = offset_k + gain_k * z_{k+1}
/// elementwise, with constant per-step log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSmoothing {
    pub gain: Vec<Vec<f64>>,
    pub offset: Vec<Vec<f64>>,
    pub log_std: Vec<Vec<f64>>,
}

/// Recognition model parameters: belief core plus belief and smoothing heads.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionParams {
    pub latent_dim: usize,
    pub x_dim: usize,
    pub hidden_dim: usize,
    pub belief: BeliefNet,
    pub belief_head: BeliefHead,
    pub smoothing: SmoothingHead,
}

impl RecognitionParams {
    /// Randomly initialized recurrent recognition model.
    pub fn new_gated(latent_dim: usize, x_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || x_dim == 0 || hidden_dim == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = x_dim + hidden_dim + CONTROL_DIM;
        let head_hidden = (2 * latent_dim).max(2);
        Ok(Self {
            latent_dim,
            x_dim,
            hidden_dim,
            belief: BeliefNet::randn(x_dim, hidden_dim, &mut rng),
            belief_head: BeliefHead::DMap(DMapGaussian::randn(nb, head_hidden, latent_dim, &mut rng)),
            smoothing: SmoothingHead::Gated(GatedGaussian::randn(latent_dim, nb, &mut rng)),
        })
    }

    /// Per-step tabular heads from explicit belief marginals and smoothing
    /// conditionals.  `beliefs[k-1]` is q(z_k | x_{1..=k}); smoothing entry
    /// `k-1` conditions z_k on z_{k+1}.
    pub fn tabular(
        beliefs: Vec<DiagGaussian>,
        smoothing: TabularSmoothing,
        latent_dim: usize,
        x_dim: usize,
    ) -> Result<Self> {
        if beliefs.iter().any(|g| g.dim() != latent_dim) {
            return Err(Error::Dimension("tabular belief dimension mismatch".into()));
        }
        let n = smoothing.gain.len();
        if smoothing.offset.len() != n || smoothing.log_std.len() != n {
            return Err(Error::Dimension(
                "tabular smoothing tables differ in length".into(),
            ));
        }
        if smoothing
            .gain
            .iter()
            .chain(smoothing.offset.iter())
            .chain(smoothing.log_std.iter())
            .any(|v| v.len() != latent_dim)
        {
            return Err(Error::Dimension(
                "tabular smoothing entry dimension mismatch".into(),
            ));
        }
        Ok(Self {
            latent_dim,
            x_dim,
            hidden_dim: 1,
            belief: BeliefNet::zeros(x_dim, 1),
            belief_head: BeliefHead::Tabular(beliefs),
            smoothing: SmoothingHead::Tabular(smoothing),
        })
    }

    /// Exact-posterior tabular heads for a diagonal linear-Gaussian system,
    /// from its filtered marginals.  Requires diagonal transition and
    /// filtered covariances; fails otherwise.
    pub fn tabular_from_kalman(
        kalman: &KalmanResult,
        sys: &LinearGaussianSystem,
        x_dim: usize,
    ) -> Result<Self> {
        let d = sys.latent_dim;
        for r in 0..d {
            for c in 0..d {
                if r != c && sys.transition[r * d + c].abs() > 1e-12 {
                    return Err(Error::Parameter(
                        "tabular heads need a diagonal transition matrix".into(),
                    ));
                }
            }
        }
        let diag_of = |g: &FullGaussian| -> Result<Vec<f64>> {
            for r in 0..d {
                for c in 0..d {
                    if r != c && g.cov[r * d + c].abs() > 1e-9 {
                        return Err(Error::Numerical(
                            "filtered covariance is not diagonal".into(),
                        ));
                    }
                }
            }
            Ok((0..d).map(|i| g.cov[i * d + i]).collect())
        };
        let mut beliefs = Vec::with_capacity(kalman.filtered.len());
        for g in &kalman.filtered {
            let var = diag_of(g)?;
            beliefs.push(DiagGaussian::new(
                g.mean.clone(),
                var.iter().map(|v| 0.5 * v.ln()).collect(),
            )?);
        }
        let steps = kalman.filtered.len();
        let mut gain = Vec::new();
        let mut offset = Vec::new();
        let mut log_std = Vec::new();
        for k in 0..steps.saturating_sub(1) {
            let mean_k = &kalman.filtered[k].mean;
            let var_k = diag_of(&kalman.filtered[k])?;
            let mut gk = vec![0.0; d];
            let mut ok = vec![0.0; d];
            let mut sk = vec![0.0; d];
            for j in 0..d {
                let f = sys.transition[j * d + j];
                let pred = f * f * var_k[j] + sys.transition_noise[j];
                let g = var_k[j] * f / pred;
                gk[j] = g;
                ok[j] = mean_k[j] - g * f * mean_k[j];
                let var = var_k[j] - g * g * pred;
                if var <= 0.0 {
                    return Err(Error::Numerical(
                        "non-positive smoothing variance in tabular construction".into(),
                    ));
                }
                sk[j] = 0.5 * var.ln();
            }
            gain.push(gk);
            offset.push(ok);
            log_std.push(sk);
        }
        Self::tabular(
            beliefs,
            TabularSmoothing {
                gain,
                offset,
                log_std,
            },
            d,
            x_dim,
        )
    }

    /// Belief state dimension: (x_t, hidden, controls).
    pub fn belief_dim(&self) -> usize {
        self.x_dim + self.hidden_dim + CONTROL_DIM
    }

    /// Checks internal dimension consistency.
    pub fn validate(&self) -> Result<()> {
        let nb = self.belief_dim();
        let ok = self.belief.x_dim == self.x_dim
            && self.belief.hidden_dim == self.hidden_dim
            && match &self.belief_head {
                BeliefHead::DMap(m) => m.in_dim == nb && m.out_dim == self.latent_dim,
                BeliefHead::Tabular(table) => table.iter().all(|g| g.dim() == self.latent_dim),
            }
            && match &self.smoothing {
                SmoothingHead::Gated(g) => {
                    g.state_dim == self.latent_dim && g.aux_dim == nb
                }
                SmoothingHead::Tabular(t) => t
                    .gain
                    .iter()
                    .chain(t.offset.iter())
                    .chain(t.log_std.iter())
                    .all(|v| v.len() == self.latent_dim),
            };
        if !ok {
            return Err(Error::Dimension(
                "recognition head dimensions are inconsistent".into(),
            ));
        }
        Ok(())
    }

    /// Belief states b_1..b_T for an input sequence (pure evaluation).
    pub fn belief_states(&self, xs: &[ObsStep]) -> Result<Vec<Vec<f64>>> {
        check_features(xs, self.x_dim)?;
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let nodes = self.register(&mut tape, &mut reg);
        let ids = belief_seq(&mut tape, &nodes, xs, xs.len());
        Ok(ids.into_iter().map(|id| tape.val(id).to_vec()).collect())
    }

    /// Named parameter arrays in canonical flattening order.
    pub fn arrays(&self) -> Vec<ArrayView<'_>> {
        let mut out = Vec::new();
        self.belief.input_mlp.push_arrays("belief.mlp", &mut out);
        self.belief.gru.push_arrays("belief.gru", &mut out);
        match &self.belief_head {
            BeliefHead::DMap(m) => m.push_arrays("belief_head", &mut out),
            BeliefHead::Tabular(table) => {
                for (i, g) in table.iter().enumerate() {
                    out.push((
                        format!("belief_head.k{}.mean", i + 1),
                        vec![g.mean.len()],
                        &g.mean,
                    ));
                    out.push((
                        format!("belief_head.k{}.log_std", i + 1),
                        vec![g.log_std.len()],
                        &g.log_std,
                    ));
                }
            }
        }
        match &self.smoothing {
            SmoothingHead::Gated(g) => g.push_arrays("smoothing", &mut out),
            SmoothingHead::Tabular(t) => {
                for i in 0..t.gain.len() {
                    out.push((
                        format!("smoothing.k{}.gain", i + 1),
                        vec![t.gain[i].len()],
                        &t.gain[i],
                    ));
                    out.push((
                        format!("smoothing.k{}.offset", i + 1),
                        vec![t.offset[i].len()],
                        &t.offset[i],
                    ));
                    out.push((
                        format!("smoothing.k{}.log_std", i + 1),
                        vec![t.log_std[i].len()],
                        &t.log_std[i],
                    ));
                }
            }
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        self.belief.input_mlp.push_arrays_mut(&mut out);
        self.belief.gru.push_arrays_mut(&mut out);
        match &mut self.belief_head {
            BeliefHead::DMap(m) => m.push_arrays_mut(&mut out),
            BeliefHead::Tabular(table) => {
                for g in table.iter_mut() {
                    out.push(&mut g.mean);
                    out.push(&mut g.log_std);
                }
            }
        }
        match &mut self.smoothing {
            SmoothingHead::Gated(g) => g.push_arrays_mut(&mut out),
            SmoothingHead::Tabular(t) => {
                for ((g, o), s) in t
                    .gain
                    .iter_mut()
                    .zip(t.offset.iter_mut())
                    .zip(t.log_std.iter_mut())
                {
                    out.push(g);
                    out.push(o);
                    out.push(s);
                }
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.arrays().iter().map(|(_, _, a)| a.len()).sum()
    }

    /// Concatenated parameters in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, _, a) in self.arrays() {
            out.extend_from_slice(a);
        }
        out
    }

    /// Writes back a flat parameter vector of exactly `flat_len` entries.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        set_flat_arrays(self.arrays_mut(), flat)
    }

    fn register(&self, tape: &mut Tape, reg: &mut Vec<usize>) -> RecNodes {
        let mlp = self.belief.input_mlp.register(tape, reg);
        let gru = self.belief.gru.register(tape, reg);
        let belief_head = match &self.belief_head {
            BeliefHead::DMap(m) => BeliefHeadNodes::DMap(m.register(tape, reg)),
            BeliefHead::Tabular(table) => {
                let mut ids = Vec::with_capacity(table.len());
                for g in table {
                    let mean = tape.leaf(g.mean.clone());
                    let log_std = tape.leaf(g.log_std.clone());
                    reg.push(mean);
                    reg.push(log_std);
                    ids.push((mean, log_std));
                }
                BeliefHeadNodes::Tabular(ids)
            }
        };
        let smoothing = match &self.smoothing {
            SmoothingHead::Gated(g) => SmoothingNodes::Gated(g.register(tape, reg)),
            SmoothingHead::Tabular(t) => {
                let mut ids = Vec::with_capacity(t.gain.len());
                for i in 0..t.gain.len() {
                    let gain = tape.leaf(t.gain[i].clone());
                    let offset = tape.leaf(t.offset[i].clone());
                    let log_std = tape.leaf(t.log_std[i].clone());
                    reg.push(gain);
                    reg.push(offset);
                    reg.push(log_std);
                    ids.push((gain, offset, log_std));
                }
                SmoothingNodes::Tabular(ids)
            }
        };
        RecNodes {
            mlp,
            gru,
            belief_head,
            smoothing,
            x_dim: self.x_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

enum BeliefHeadNodes {
    DMap(DMapGaussianNodes),
    Tabular(Vec<(usize, usize)>),
}

enum SmoothingNodes {
    Gated(GatedGaussianNodes),
    Tabular(Vec<(usize, usize, usize)>),
}

struct RecNodes {
    mlp: DenseNodes,
    gru: GruNodes,
    belief_head: BeliefHeadNodes,
    smoothing: SmoothingNodes,
    x_dim: usize,
    hidden_dim: usize,
}

impl RecNodes {
    /// Belief head at absolute step `k` (1-based).
    fn belief_head_at(&self, tape: &mut Tape, b: usize, k: usize) -> Result<(usize, usize)> {
        match &self.belief_head {
            BeliefHeadNodes::DMap(m) => Ok(m.fwd(tape, b)),
            BeliefHeadNodes::Tabular(ids) => ids.get(k - 1).copied().ok_or_else(|| {
                Error::Parameter(format!("tabular belief head has no entry for step {k}"))
            }),
        }
    }

    /// Smoothing head for z_k given z_{k+1} at absolute step `k` (1-based).
    fn smoothing_at(
        &self,
        tape: &mut Tape,
        b: usize,
        z_next: usize,
        k: usize,
    ) -> Result<(usize, usize)> {
        match &self.smoothing {
            SmoothingNodes::Gated(g) => Ok(g.fwd(tape, z_next, Some(b))),
            SmoothingNodes::Tabular(ids) => {
                let &(gain, offset, log_std) = ids.get(k - 1).ok_or_else(|| {
                    Error::Parameter(format!("tabular smoothing has no entry for step {k}"))
                })?;
                let scaled = tape.mul(gain, z_next);
                let mean = tape.add(offset, scaled);
                Ok((mean, log_std))
            }
        }
    }
}

/// Belief node ids b_1..b_upto.
fn belief_seq(tape: &mut Tape, rec: &RecNodes, xs: &[ObsStep], upto: usize) -> Vec<usize> {
    let mut beliefs = Vec::with_capacity(upto);
    let mut h = tape.leaf(vec![0.0; rec.hidden_dim]);
    let mut x_prev = tape.leaf(vec![0.0; rec.x_dim]);
    for step in xs.iter().take(upto) {
        let x = tape.leaf(step.features.clone());
        let v = tape.leaf(step.motion.to_vec());
        let mlp_in = tape.concat(&[x, x_prev, v]);
        let pre = rec.mlp.fwd(tape, mlp_in);
        let features = tape.tanh(pre);
        h = rec.gru.fwd(tape, h, features);
        let c = tape.leaf(step.controls.to_vec());
        beliefs.push(tape.concat(&[x, h, c]));
        x_prev = x;
    }
    beliefs
}

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

/// Signed scalar-term accumulator: tape nodes plus a parameter-free constant.
struct TermAcc {
    nodes: Vec<usize>,
    constant: f64,
}

impl TermAcc {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            constant: 0.0,
        }
    }

    fn add(&mut self, tape: &mut Tape, node: usize, constant: f64, sign: f64) {
        let signed = if sign == 1.0 {
            node
        } else {
            tape.scale(node, sign)
        };
        self.nodes.push(signed);
        self.constant += sign * constant;
    }

    fn node(&self, tape: &mut Tape) -> Option<usize> {
        if self.nodes.is_empty() {
            None
        } else {
            Some(tape.add_many(&self.nodes))
        }
    }

    fn value(&self, tape: &Tape, node: Option<usize>) -> f64 {
        node.map_or(0.0, |id| tape.val(id)[0]) + self.constant
    }
}

/// NLL of `v` under a Gaussian with learned (mean, log_std) nodes; returns
/// (scalar node, parameter-free constant).
fn nll_learned(tape: &mut Tape, v: usize, mean: usize, log_std: usize) -> (usize, f64) {
    let dim = tape.val(v).len();
    let diff = tape.sub(v, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv = tape.exp(neg);
    let z = tape.mul(diff, inv);
    let sq = tape.mul(z, z);
    let half_sum = tape.sum(sq);
    let half = tape.scale(half_sum, 0.5);
    let s = tape.sum(log_std);
    let node = tape.add(half, s);
    (node, 0.5 * LN_2PI * dim as f64)
}

/// NLL of `v` under a Gaussian with a learned mean and fixed variance.
fn nll_fixed(tape: &mut Tape, v: usize, mean: usize, alpha: f64) -> (usize, f64) {
    let dim = tape.val(v).len();
    let diff = tape.sub(v, mean);
    let sq = tape.mul(diff, diff);
    let total = tape.sum(sq);
    let node = tape.scale(total, 0.5 / alpha);
    (node, 0.5 * dim as f64 * (LN_2PI + alpha.ln()))
}

/// Standard-normal NLL of `v`.
fn nll_standard(tape: &mut Tape, v: usize) -> (usize, f64) {
    let dim = tape.val(v).len();
    let sq = tape.mul(v, v);
    let total = tape.sum(sq);
    let node = tape.scale(total, 0.5);
    (node, 0.5 * LN_2PI * dim as f64)
}

/// Reparameterized draw node: mean + exp(log_std) * eps.
fn sample_node(tape: &mut Tape, mean: usize, log_std: usize, eps: &[f64]) -> usize {
    let std = tape.exp(log_std);
    let scaled = tape.mul_const(std, eps.to_vec());
    tape.add(mean, scaled)
}

/// Per-step y reconstruction term under the configured objective.
fn y_emission_term(
    tape: &mut Tape,
    gen: &GenerativeParams,
    nodes: &GenNodes,
    z: usize,
    y: &[f64],
) -> (usize, f64) {
    let mean = nodes.emission.fwd(tape, z);
    match &gen.y_objective {
        EmissionObjective::Gaussian => {
            let y_leaf = tape.leaf(y.to_vec());
            nll_fixed(tape, y_leaf, mean, gen.alpha_y)
        }
        EmissionObjective::WeightedClassEntropy { weights } => {
            let blocks = y.len() / NUM_CHANNELS;
            let mut terms = Vec::new();
            for block in 0..blocks {
                let idx: Vec<usize> = (0..NUM_CHANNELS).map(|ch| ch * blocks + block).collect();
                let target = (0..NUM_CHANNELS)
                    .max_by(|&a, &b| y[idx[a]].partial_cmp(&y[idx[b]]).unwrap())
                    .unwrap();
                let weight = weights[target] * (1.0 - y[idx[NUM_CHANNELS - 1]]);
                if weight <= 0.0 {
                    continue;
                }
                let logits = tape.gather(mean, idx);
                let shift = tape
                    .val(logits)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let shifted = tape.add_scalar(logits, -shift);
                let exps = tape.exp(shifted);
                let total = tape.sum(exps);
                let log_total = tape.log(total);
                let lse = tape.add_scalar(log_total, shift);
                let chosen = tape.gather(logits, vec![target]);
                let ce = tape.sub(lse, chosen);
                terms.push(tape.scale(ce, weight));
            }
            if terms.is_empty() {
                let zero = tape.leaf(vec![0.0]);
                (zero, 0.0)
            } else {
                (tape.add_many(&terms), 0.0)
            }
        }
    }
}

fn check_features(xs: &[ObsStep], x_dim: usize) -> Result<()> {
    if xs.iter().any(|s| s.features.len() != x_dim) {
        return Err(Error::Dimension(format!(
            "observation features must have {x_dim} entries"
        )));
    }
    Ok(())
}

fn check_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<()> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension(format!("{what} must have {dim} entries")));
    }
    Ok(())
}

fn check_noise(noise: &NoiseBundle, len: usize, dim: usize) -> Result<()> {
    if noise.eps.len() < len {
        return Err(Error::Dimension(format!(
            "noise bundle has {} steps, need {len}",
            noise.eps.len()
        )));
    }
    if noise.eps.iter().take(len).any(|e| e.len() != dim) {
        return Err(Error::Dimension(format!(
            "noise vectors must have {dim} entries"
        )));
    }
    Ok(())
}

fn check_models(gen: &GenerativeParams, rec: &RecognitionParams) -> Result<()> {
    gen.validate()?;
    rec.validate()?;
    if gen.latent_dim != rec.latent_dim {
        return Err(Error::Dimension(format!(
            "generative latent dim {} differs from recognition latent dim {}",
            gen.latent_dim, rec.latent_dim
        )));
    }
    if gen.x_dim != rec.x_dim {
        return Err(Error::Dimension(format!(
            "generative x dim {} differs from recognition x dim {}",
            gen.x_dim, rec.x_dim
        )));
    }
    Ok(())
}

/// Gradient pair (generative flat, recognition flat).
type Grads = (Vec<f64>, Vec<f64>);

/// x-emission conditioning for the predictable losses.
enum XContext<'a> {
    /// Action-free: x is reconstructed from (y, z) alone at every step.
    Plain,
    /// Action-conditioned: x_k is reconstructed from (x_{k-1}, y_k, z_k,
    /// a_k) for k >= 2 and the mask excerpt m_k from (a_k, y_k).
    Action {
        masks: &'a [Vec<f64>],
        actions: &'a [BoundingBoxAction],
    },
}

fn action_vec(a: &BoundingBoxAction) -> Vec<f64> {
    vec![a.u, a.v, a.w, a.h]
}

/// Shared core of the predictable losses.  Returns the breakdown and, when
/// `with_grad`, gradients with respect to the flat generative and
/// recognition parameters.
#[allow(clippy::too_many_arguments)]
fn lpvae_core(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    ctx: XContext<'_>,
    t: usize,
    noise: &NoiseBundle,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Grads>)> {
    check_models(gen, rec)?;
    let steps = xs.len();
    if steps == 0 || ys.len() != steps {
        return Err(Error::Dimension(format!(
            "need equal non-empty x and y sequences, got {} and {}",
            steps,
            ys.len()
        )));
    }
    check_features(xs, gen.x_dim)?;
    check_rows(ys, gen.y_dim, "complete-percept features")?;
    if t == 0 || t > steps {
        return Err(Error::Parameter(format!(
            "split index {t} outside 1..={steps}"
        )));
    }
    check_noise(noise, steps, gen.latent_dim)?;
    if let XContext::Action { masks, actions } = &ctx {
        if masks.len() + 1 != steps || actions.len() + 1 != steps {
            return Err(Error::Dimension(format!(
                "need {} masks and actions for {} steps, got {} and {}",
                steps - 1,
                steps,
                masks.len(),
                actions.len()
            )));
        }
        check_rows(masks, gen.y_dim, "mask features")?;
    }

    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let gen_nodes = gen.register(&mut tape, &mut reg);
    let gen_len: usize = gen.flat_len();
    let rec_nodes = rec.register(&mut tape, &mut reg);

    let beliefs = belief_seq(&mut tape, &rec_nodes, xs, t);

    let mut encoder = TermAcc::new();
    let mut decoder = TermAcc::new();
    let mut prediction = TermAcc::new();

    // Backward smoothing pass: z_t from the belief head, then z_{t-1}..z_1.
    let mut zs = vec![0usize; steps + 1];
    let (mu_t, ls_t) = rec_nodes.belief_head_at(&mut tape, beliefs[t - 1], t)?;
    zs[t] = sample_node(&mut tape, mu_t, ls_t, &noise.eps[t - 1]);
    let (qt, qt_c) = nll_learned(&mut tape, zs[t], mu_t, ls_t);
    encoder.add(&mut tape, qt, qt_c, -1.0);
    for k in (1..t).rev() {
        let (mu, ls) = rec_nodes.smoothing_at(&mut tape, beliefs[k - 1], zs[k + 1], k)?;
        zs[k] = sample_node(&mut tape, mu, ls, &noise.eps[k - 1]);
        let (q, q_c) = nll_learned(&mut tape, zs[k], mu, ls);
        encoder.add(&mut tape, q, q_c, -1.0);
    }

    // Prior and transition terms over the smoothed segment.
    let (p1, p1_c) = nll_standard(&mut tape, zs[1]);
    encoder.add(&mut tape, p1, p1_c, 1.0);
    for k in 2..=t {
        let (mu, ls) = gen_nodes.transition.fwd(&mut tape, zs[k - 1]);
        let (p, p_c) = nll_learned(&mut tape, zs[k], mu, ls);
        encoder.add(&mut tape, p, p_c, 1.0);
    }

    // Forward latent rolls beyond the split; their transition densities
    // cancel between the variational and generative sides.
    for k in t + 1..=steps {
        let (mu, ls) = gen_nodes.transition.fwd(&mut tape, zs[k - 1]);
        zs[k] = sample_node(&mut tape, mu, ls, &noise.eps[k - 1]);
    }

    // Reconstruction terms.
    let zero_x = tape.leaf(vec![0.0; gen.x_dim]);
    let zero_a = tape.leaf(vec![0.0; ACTION_DIM]);
    for k in 1..=steps {
        let bucket = if k <= t { &mut decoder } else { &mut prediction };
        let (y_term, y_c) = y_emission_term(&mut tape, gen, &gen_nodes, zs[k], &ys[k - 1]);
        bucket.add(&mut tape, y_term, y_c, 1.0);
        match &ctx {
            XContext::Plain => {
                let y_leaf = tape.leaf(ys[k - 1].clone());
                let mean = gen_nodes.observation_mean(&mut tape, zero_x, y_leaf, zs[k], zero_a);
                let x_leaf = tape.leaf(xs[k - 1].features.clone());
                let (x_term, x_c) = nll_fixed(&mut tape, x_leaf, mean, gen.alpha_x);
                bucket.add(&mut tape, x_term, x_c, 1.0);
            }
            XContext::Action { masks, actions } => {
                if k >= 2 {
                    let a_leaf = tape.leaf(action_vec(&actions[k - 2]));
                    let y_leaf = tape.leaf(ys[k - 1].clone());
                    let x_prev = tape.leaf(xs[k - 2].features.clone());
                    let mean =
                        gen_nodes.observation_mean(&mut tape, x_prev, y_leaf, zs[k], a_leaf);
                    let x_leaf = tape.leaf(xs[k - 1].features.clone());
                    let (x_term, x_c) = nll_fixed(&mut tape, x_leaf, mean, gen.alpha_x);
                    bucket.add(&mut tape, x_term, x_c, 1.0);
                    // Mask reconstruction trains the channel model; it is
                    // latent-free and belongs to the decoder split.
                    let m_mean = gen_nodes.mask_mean(&mut tape, a_leaf, y_leaf);
                    let m_leaf = tape.leaf(masks[k - 2].clone());
                    let (m_term, m_c) = nll_fixed(&mut tape, m_leaf, m_mean, gen.alpha_x);
                    decoder.add(&mut tape, m_term, m_c, 1.0);
                }
            }
        }
    }

    let enc_node = encoder.node(&mut tape);
    let dec_node = decoder.node(&mut tape);
    let pred_node = prediction.node(&mut tape);
    let breakdown = LossBreakdown::assemble(
        encoder.value(&tape, enc_node),
        decoder.value(&tape, dec_node),
        prediction.value(&tape, pred_node),
    );

    let grads = if with_grad {
        let parts: Vec<usize> = [enc_node, dec_node, pred_node]
            .into_iter()
            .flatten()
            .collect();
        let root = tape.add_many(&parts);
        tape.backward(root);
        Some(collect_grads(&tape, &reg, gen_len))
    } else {
        None
    };
    Ok((breakdown, grads))
}

fn collect_grads(tape: &Tape, reg: &[usize], gen_len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut flat = Vec::new();
    for &id in reg {
        flat.extend_from_slice(tape.grad(id));
    }
    let rec = flat.split_off(gen_len);
    (flat, rec)
}

/// Locally predictable sequence loss without actions.  Observes x_1..x_t,
/// reconstructs (x, y)_1..t, and predicts (x, y)_{t+1}..T through latent
/// rolls; the breakdown separates those three contributions.
pub fn lpvae_loss(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    t: usize,
    noise: &NoiseBundle,
) -> Result<LossBreakdown> {
    lpvae_core(gen, rec, xs, ys, XContext::Plain, t, noise, false).map(|(b, _)| b)
}

/// `lpvae_loss` plus analytic gradients with respect to the flat generative
/// and recognition parameter vectors.
pub fn lpvae_loss_grad(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    t: usize,
    noise: &NoiseBundle,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let (b, g) = lpvae_core(gen, rec, xs, ys, XContext::Plain, t, noise, true)?;
    let (gg, rg) = g.expect("gradients requested");
    Ok((b, gg, rg))
}

/// Action-conditioned predictable loss: x_k is reconstructed from the
/// previous partial percept, the complete percept, the latent state, and the
/// request action; a parallel mask term reconstructs the transmitted excerpt
/// from (action, complete percept).  The first-step x term is omitted.
/// `masks[k]` and `actions[k]` belong to step k + 2.
#[allow(clippy::too_many_arguments)]
pub fn lpvae_action_loss(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    masks: &[Vec<f64>],
    actions: &[BoundingBoxAction],
    t: usize,
    noise: &NoiseBundle,
) -> Result<LossBreakdown> {
    lpvae_core(
        gen,
        rec,
        xs,
        ys,
        XContext::Action { masks, actions },
        t,
        noise,
        false,
    )
    .map(|(b, _)| b)
}

/// `lpvae_action_loss` plus analytic gradients.
#[allow(clippy::too_many_arguments)]
pub fn lpvae_action_loss_grad(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    masks: &[Vec<f64>],
    actions: &[BoundingBoxAction],
    t: usize,
    noise: &NoiseBundle,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let (b, g) = lpvae_core(
        gen,
        rec,
        xs,
        ys,
        XContext::Action { masks, actions },
        t,
        noise,
        true,
    )?;
    let (gg, rg) = g.expect("gradients requested");
    Ok((b, gg, rg))
}

/// Shared core of the sequential smoothing loss.
fn stdvae_core(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    noise: &NoiseBundle,
    with_grad: bool,
) -> Result<(f64, Option<Grads>)> {
    check_models(gen, rec)?;
    let steps = xs.len();
    check_features(xs, gen.x_dim)?;
    if t == 0 || t >= steps {
        return Err(Error::Parameter(format!(
            "split index {t} outside 1..={} for {steps} steps",
            steps.saturating_sub(1)
        )));
    }
    check_noise(noise, steps, gen.latent_dim)?;

    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let gen_nodes = gen.register(&mut tape, &mut reg);
    let gen_len = gen.flat_len();
    let rec_nodes = rec.register(&mut tape, &mut reg);
    let beliefs = belief_seq(&mut tape, &rec_nodes, xs, steps);

    let mut acc = TermAcc::new();
    let mut zs = vec![0usize; steps + 1];
    let (mu_last, ls_last) = rec_nodes.belief_head_at(&mut tape, beliefs[steps - 1], steps)?;
    zs[steps] = sample_node(&mut tape, mu_last, ls_last, &noise.eps[steps - 1]);
    let (q_last, q_last_c) = nll_learned(&mut tape, zs[steps], mu_last, ls_last);
    acc.add(&mut tape, q_last, q_last_c, -1.0);
    for k in (t..steps).rev() {
        let (mu, ls) = rec_nodes.smoothing_at(&mut tape, beliefs[k - 1], zs[k + 1], k)?;
        zs[k] = sample_node(&mut tape, mu, ls, &noise.eps[k - 1]);
        let (q, q_c) = nll_learned(&mut tape, zs[k], mu, ls);
        acc.add(&mut tape, q, q_c, -1.0);
    }

    // The latent marginal at the split has no dedicated generative head; the
    // belief head stands in for it, as in the jumpy loss.
    let (mu_b, ls_b) = rec_nodes.belief_head_at(&mut tape, beliefs[t - 1], t)?;
    let (p_b, p_b_c) = nll_learned(&mut tape, zs[t], mu_b, ls_b);
    acc.add(&mut tape, p_b, p_b_c, 1.0);

    for k in t + 1..=steps {
        let (mu, ls) = gen_nodes.transition.fwd(&mut tape, zs[k - 1]);
        let (p, p_c) = nll_learned(&mut tape, zs[k], mu, ls);
        acc.add(&mut tape, p, p_c, 1.0);
    }

    // Emissions: x alone, reconstructed from the latent state only.
    let zero_x = tape.leaf(vec![0.0; gen.x_dim]);
    let zero_y = tape.leaf(vec![0.0; gen.y_dim]);
    let zero_a = tape.leaf(vec![0.0; ACTION_DIM]);
    for k in t..=steps {
        let mean = gen_nodes.observation_mean(&mut tape, zero_x, zero_y, zs[k], zero_a);
        let x_leaf = tape.leaf(xs[k - 1].features.clone());
        let (term, c) = nll_fixed(&mut tape, x_leaf, mean, gen.alpha_x);
        acc.add(&mut tape, term, c, 1.0);
    }

    let node = acc.node(&mut tape);
    let value = acc.value(&tape, node);
    let grads = if with_grad {
        let root = node.expect("loss always has terms");
        tape.backward(root);
        Some(collect_grads(&tape, &reg, gen_len))
    } else {
        None
    };
    Ok((value, grads))
}

/// Sequential smoothing loss on x alone: samples z_T from the belief head,
/// smooths backward to z_t, and scores transitions and emissions from the
/// split onward.
pub fn stdvae_loss(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    noise: &NoiseBundle,
) -> Result<f64> {
    stdvae_core(gen, rec, xs, t, noise, false).map(|(v, _)| v)
}

/// `stdvae_loss` plus analytic gradients.
pub fn stdvae_loss_grad(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    noise: &NoiseBundle,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (v, g) = stdvae_core(gen, rec, xs, t, noise, true)?;
    let (gg, rg) = g.expect("gradients requested");
    Ok((v, gg, rg))
}

/// Shared core of the jumpy two-point loss.
fn tdvae_core(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    delta: usize,
    noise: &NoiseBundle,
    with_grad: bool,
) -> Result<(f64, Option<Grads>)> {
    check_models(gen, rec)?;
    let steps = xs.len();
    check_features(xs, gen.x_dim)?;
    if t == 0 || delta == 0 || t + delta > steps {
        return Err(Error::Parameter(format!(
            "need 1 <= t and t + delta <= {steps}, got t = {t}, delta = {delta}"
        )));
    }
    check_noise(noise, steps, gen.latent_dim)?;

    let far = t + delta;
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let gen_nodes = gen.register(&mut tape, &mut reg);
    let gen_len = gen.flat_len();
    let rec_nodes = rec.register(&mut tape, &mut reg);
    let beliefs = belief_seq(&mut tape, &rec_nodes, xs, far);

    let mut acc = TermAcc::new();
    let (mu_far, ls_far) = rec_nodes.belief_head_at(&mut tape, beliefs[far - 1], far)?;
    let z_far = sample_node(&mut tape, mu_far, ls_far, &noise.eps[far - 1]);
    let (q_far, q_far_c) = nll_learned(&mut tape, z_far, mu_far, ls_far);
    acc.add(&mut tape, q_far, q_far_c, -1.0);

    let (mu_s, ls_s) = rec_nodes.smoothing_at(&mut tape, beliefs[t - 1], z_far, t)?;
    let z_t = sample_node(&mut tape, mu_s, ls_s, &noise.eps[t - 1]);
    let (q_s, q_s_c) = nll_learned(&mut tape, z_t, mu_s, ls_s);
    acc.add(&mut tape, q_s, q_s_c, -1.0);

    // Belief head stands in for the latent marginal at t.
    let (mu_b, ls_b) = rec_nodes.belief_head_at(&mut tape, beliefs[t - 1], t)?;
    let (p_b, p_b_c) = nll_learned(&mut tape, z_t, mu_b, ls_b);
    acc.add(&mut tape, p_b, p_b_c, 1.0);

    // One transition spans the whole jump.
    let (mu_tr, ls_tr) = gen_nodes.transition.fwd(&mut tape, z_t);
    let (p_tr, p_tr_c) = nll_learned(&mut tape, z_far, mu_tr, ls_tr);
    acc.add(&mut tape, p_tr, p_tr_c, 1.0);

    let zero_x = tape.leaf(vec![0.0; gen.x_dim]);
    let zero_y = tape.leaf(vec![0.0; gen.y_dim]);
    let zero_a = tape.leaf(vec![0.0; ACTION_DIM]);
    let mean = gen_nodes.observation_mean(&mut tape, zero_x, zero_y, z_far, zero_a);
    let x_leaf = tape.leaf(xs[far - 1].features.clone());
    let (term, c) = nll_fixed(&mut tape, x_leaf, mean, gen.alpha_x);
    acc.add(&mut tape, term, c, 1.0);

    let node = acc.node(&mut tape);
    let value = acc.value(&tape, node);
    let grads = if with_grad {
        let root = node.expect("loss always has terms");
        tape.backward(root);
        Some(collect_grads(&tape, &reg, gen_len))
    } else {
        None
    };
    Ok((value, grads))
}

/// Jumpy two-point loss: belief draw at t + delta, one smoothing draw back
/// to t, one jumpy transition, and the far emission.
pub fn tdvae_jumpy_loss(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    delta: usize,
    noise: &NoiseBundle,
) -> Result<f64> {
    tdvae_core(gen, rec, xs, t, delta, noise, false).map(|(v, _)| v)
}

/// `tdvae_jumpy_loss` plus analytic gradients.
pub fn tdvae_jumpy_loss_grad(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    t: usize,
    delta: usize,
    noise: &NoiseBundle,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (v, g) = tdvae_core(gen, rec, xs, t, delta, noise, true)?;
    let (gg, rg) = g.expect("gradients requested");
    Ok((v, gg, rg))
}

/// Public form of the gated transition head evaluation.
pub fn gated_transition(z: &[f64], unit: &GatedGaussian) -> Result<DiagGaussian> {
    if unit.aux_dim != 0 {
        return Err(Error::Parameter(
            "transition head must not take auxiliary input".into(),
        ));
    }
    if z.len() != unit.state_dim {
        return Err(Error::Dimension(format!(
            "state has {} entries, head expects {}",
            z.len(),
            unit.state_dim
        )));
    }
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let nodes = unit.register(&mut tape, &mut reg);
    let z_leaf = tape.leaf(z.to_vec());
    let (mean, log_std) = nodes.fwd(&mut tape, z_leaf, None);
    DiagGaussian::new(tape.val(mean).to_vec(), tape.val(log_std).to_vec())
}

// ---------------------------------------------------------------------------
// Grid encoding
// ---------------------------------------------------------------------------

/// Pooled block counts (rows, cols) for a grid of the given size.
pub fn pooled_blocks(height: usize, width: usize) -> (usize, usize) {
    (height.div_ceil(POOL_BLOCK), width.div_ceil(POOL_BLOCK))
}

/// Length of the pooled feature vector for a grid of the given size.
pub fn pooled_len(height: usize, width: usize) -> usize {
    let (bh, bw) = pooled_blocks(height, width);
    NUM_CHANNELS * bh * bw
}

/// Encodes a grid as per-channel block averages, channel-major: all blocks
/// of channel 0 first (row-major), then channel 1, and so on.
pub fn pooled_features(grid: &SemanticGrid) -> Vec<f64> {
    let (bh, bw) = pooled_blocks(grid.height(), grid.width());
    let blocks = bh * bw;
    let mut out = vec![0.0; NUM_CHANNELS * blocks];
    let mut counts = vec![0usize; blocks];
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            let block = (row / POOL_BLOCK) * bw + col / POOL_BLOCK;
            counts[block] += 1;
            let masses = grid.cell(row, col).masses();
            for (ch, &m) in masses.iter().enumerate() {
                out[ch * blocks + block] += m;
            }
        }
    }
    for (block, &count) in counts.iter().enumerate() {
        if count > 0 {
            for ch in 0..NUM_CHANNELS {
                out[ch * blocks + block] /= count as f64;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Linear-Gaussian reference
// ---------------------------------------------------------------------------

/// Linear-Gaussian state-space system: z_1 ~ N(0, I), diagonal-noise linear
/// transition, and two linear emissions (x and y) with diagonal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSystem {
    pub latent_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    /// Row-major d x d transition matrix.
    pub transition: Vec<f64>,
    /// Per-dimension transition noise variances.
    pub transition_noise: Vec<f64>,
    /// Row-major x_dim x d emission matrix for x.
    pub emit_x: Vec<f64>,
    /// Per-dimension x emission noise variances.
    pub noise_x: Vec<f64>,
    /// Row-major y_dim x d emission matrix for y.
    pub emit_y: Vec<f64>,
    /// Per-dimension y emission noise variances.
    pub noise_y: Vec<f64>,
}

impl LinearGaussianSystem {
    /// Builds a system after validating dimensions and noise floors.  Either
    /// emission may have zero dimensions, but not both.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        latent_dim: usize,
        x_dim: usize,
        y_dim: usize,
        transition: Vec<f64>,
        transition_noise: Vec<f64>,
        emit_x: Vec<f64>,
        noise_x: Vec<f64>,
        emit_y: Vec<f64>,
        noise_y: Vec<f64>,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Parameter("latent dimension must be positive".into()));
        }
        if x_dim + y_dim == 0 {
            return Err(Error::Parameter("need at least one emission".into()));
        }
        if transition.len() != latent_dim * latent_dim
            || transition_noise.len() != latent_dim
            || emit_x.len() != x_dim * latent_dim
            || noise_x.len() != x_dim
            || emit_y.len() != y_dim * latent_dim
            || noise_y.len() != y_dim
        {
            return Err(Error::Dimension(
                "linear-Gaussian system array sizes are inconsistent".into(),
            ));
        }
        let all = transition
            .iter()
            .chain(&transition_noise)
            .chain(&emit_x)
            .chain(&noise_x)
            .chain(&emit_y)
            .chain(&noise_y);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "non-finite entry in linear-Gaussian system".into(),
            ));
        }
        for (what, noises) in [
            ("transition", &transition_noise),
            ("x emission", &noise_x),
            ("y emission", &noise_y),
        ] {
            if noises.iter().any(|&v| v < MIN_EMISSION_VARIANCE - 1e-12) {
                return Err(Error::Parameter(format!(
                    "{what} noise variance below 1/(2*pi)"
                )));
            }
        }
        Ok(Self {
            latent_dim,
            x_dim,
            y_dim,
            transition,
            transition_noise,
            emit_x,
            noise_x,
            emit_y,
            noise_y,
        })
    }

    /// The same system with the y emission removed (for x-only filtering).
    pub fn x_only(&self) -> Self {
        Self {
            y_dim: 0,
            emit_y: Vec::new(),
            noise_y: Vec::new(),
            ..self.clone()
        }
    }

    /// Draws latent and observed sequences of the given length.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        steps: usize,
        rng: &mut R,
    ) -> Trajectory {
        let d = self.latent_dim;
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(steps);
        let mut xs = Vec::with_capacity(steps);
        let mut ys = Vec::with_capacity(steps);
        for k in 0..steps {
            let mut z = vec![0.0; d];
            for (j, zj) in z.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                if k == 0 {
                    *zj = noise;
                } else {
                    let prev = &zs[k - 1];
                    let drift: f64 = (0..d).map(|c| self.transition[j * d + c] * prev[c]).sum();
                    *zj = drift + self.transition_noise[j].sqrt() * noise;
                }
            }
            let emit = |mat: &[f64], noise_var: &[f64], rng: &mut R| -> Vec<f64> {
                (0..noise_var.len())
                    .map(|r| {
                        let mean: f64 = (0..d).map(|c| mat[r * d + c] * z[c]).sum();
                        let e: f64 = rng.sample(StandardNormal);
                        mean + noise_var[r].sqrt() * e
                    })
                    .collect()
            };
            xs.push(emit(&self.emit_x, &self.noise_x, rng));
            ys.push(emit(&self.emit_y, &self.noise_y, rng));
            zs.push(z);
        }
        (zs, xs, ys)
    }
}

/// Simulated (latents, x observations, y observations), one row per step.
pub type Trajectory = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Full-covariance Gaussian (row-major covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Exact filtering/smoothing output: joint observation NLL plus per-step
/// filtered and smoothed posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanResult {
    pub nll: f64,
    pub filtered: Vec<FullGaussian>,
    pub smoothed: Vec<FullGaussian>,
}

/// Exact Kalman filter and smoother over both emissions jointly.  Returns
/// the negative log marginal likelihood of the stacked observations and the
/// per-step posteriors; a non-positive-definite innovation covariance is
/// surfaced as a numerical error.
pub fn kalman_exact(
    sys: &LinearGaussianSystem,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<KalmanResult> {
    use nalgebra::{DMatrix, DVector};
    let steps = xs.len();
    if steps == 0 || ys.len() != steps {
        return Err(Error::Dimension(format!(
            "need equal non-empty x and y sequences, got {} and {}",
            steps,
            ys.len()
        )));
    }
    check_rows(xs, sys.x_dim, "x observations")?;
    check_rows(ys, sys.y_dim, "y observations")?;
    if xs
        .iter()
        .chain(ys.iter())
        .any(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Parameter("non-finite observation".into()));
    }
    let d = sys.latent_dim;
    let obs_dim = sys.x_dim + sys.y_dim;
    let f = DMatrix::from_row_slice(d, d, &sys.transition);
    let q = DMatrix::from_diagonal(&DVector::from_vec(sys.transition_noise.clone()));
    let mut h = DMatrix::zeros(obs_dim, d);
    for r in 0..sys.x_dim {
        for c in 0..d {
            h[(r, c)] = sys.emit_x[r * d + c];
        }
    }
    for r in 0..sys.y_dim {
        for c in 0..d {
            h[(sys.x_dim + r, c)] = sys.emit_y[r * d + c];
        }
    }
    let mut r_diag = sys.noise_x.clone();
    r_diag.extend_from_slice(&sys.noise_y);
    let r = DMatrix::from_diagonal(&DVector::from_vec(r_diag));

    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::identity(d, d);
    let mut nll = 0.0;
    let mut filtered = Vec::with_capacity(steps);
    let mut predicted = Vec::with_capacity(steps);
    for k in 0..steps {
        if k > 0 {
            mean = &f * mean;
            cov = &f * cov * f.transpose() + &q;
        }
        predicted.push((mean.clone(), cov.clone()));
        let mut obs = xs[k].clone();
        obs.extend_from_slice(&ys[k]);
        let obs = DVector::from_vec(obs);
        let innovation = obs - &h * &mean;
        let s = &h * &cov * h.transpose() + &r;
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Numerical("innovation covariance is not positive definite".into())
        })?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let solved = chol.solve(&innovation);
        nll += 0.5 * (log_det + innovation.dot(&solved) + obs_dim as f64 * LN_2PI);
        let gain = &cov * h.transpose() * chol.inverse();
        mean += &gain * &innovation;
        let eye = DMatrix::identity(d, d);
        let shrink = &eye - &gain * &h;
        // Joseph form keeps the covariance symmetric.
        cov = &shrink * &cov * shrink.transpose() + &gain * &r * gain.transpose();
        filtered.push((mean.clone(), cov.clone()));
    }

    let mut smoothed = vec![filtered[steps - 1].clone()];
    for k in (0..steps - 1).rev() {
        let (fm, fc) = &filtered[k];
        let (pm, pc) = &predicted[k + 1];
        let chol = pc.clone().cholesky().ok_or_else(|| {
            Error::Numerical("predicted covariance is not positive definite".into())
        })?;
        let gain = fc * f.transpose() * chol.inverse();
        let (sm_next, sc_next) = &smoothed[0];
        let mean = fm + &gain * (sm_next - pm);
        let cov = fc + &gain * (sc_next - pc) * gain.transpose();
        smoothed.insert(0, (mean, cov));
    }

    let pack = |list: Vec<(DVector<f64>, DMatrix<f64>)>| -> Vec<FullGaussian> {
        list.into_iter()
            .map(|(m, c)| FullGaussian {
                mean: m.iter().cloned().collect(),
                cov: c.transpose().iter().cloned().collect(),
            })
            .collect()
    };
    Ok(KalmanResult {
        nll,
        filtered: pack(filtered),
        smoothed: pack(smoothed),
    })
}

// ---------------------------------------------------------------------------
// Toy training
// ---------------------------------------------------------------------------

/// Desk-scale stochastic gradient descent on the predictable loss.  Each
/// step draws one sequence, one split index in [default_t_min(T), T - 1],
/// and fresh noise, then applies one gradient update to both parameter sets.
/// Aborts with a numerical error if a loss or gradient turns non-finite.
pub fn train_toy(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    data: &[TrainingSequence],
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<(GenerativeParams, RecognitionParams, Vec<LossBreakdown>)> {
    check_models(gen, rec)?;
    if data.is_empty() {
        return Err(Error::Parameter("training data is empty".into()));
    }
    if gen.latent_dim > 8 {
        return Err(Error::Parameter(format!(
            "toy trainer supports latent dimension up to 8, got {}",
            gen.latent_dim
        )));
    }
    for seq in data {
        let len = seq.xs.len();
        if len == 0 || seq.ys.len() != len {
            return Err(Error::Dimension(
                "training sequence has mismatched or empty x/y".into(),
            ));
        }
        if len > 20 {
            return Err(Error::Parameter(format!(
                "toy trainer supports sequences up to 20 steps, got {len}"
            )));
        }
    }
    if !step_size.is_finite() || step_size < 0.0 {
        return Err(Error::Parameter("step size must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen_fit = gen.clone();
    let mut rec_fit = rec.clone();
    let mut gen_flat = gen_fit.flat();
    let mut rec_flat = rec_fit.flat();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let seq = &data[rng.gen_range(0..data.len())];
        let len = seq.xs.len();
        let hi = (len - 1).max(1);
        let lo = default_t_min(len).min(hi);
        let t = rng.gen_range(lo..=hi);
        let noise = NoiseBundle::standard(len, gen.latent_dim, &mut rng);
        let (breakdown, g_grad, r_grad) =
            lpvae_loss_grad(&gen_fit, &rec_fit, &seq.xs, &seq.ys, t, &noise)?;
        let finite = breakdown.total.is_finite()
            && g_grad.iter().chain(r_grad.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (t = {t}, total = {})",
                breakdown.total
            )));
        }
        for (p, g) in gen_flat.iter_mut().zip(&g_grad) {
            *p -= step_size * g;
        }
        for (p, g) in rec_flat.iter_mut().zip(&r_grad) {
            *p -= step_size * g;
        }
        gen_fit.set_flat(&gen_flat)?;
        rec_fit.set_flat(&rec_flat)?;
        trace.push(breakdown);
    }
    Ok((gen_fit, rec_fit, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SemanticGrid;
    use crate::mass::MassFunction;
    use approx::assert_relative_eq;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Linear-Gaussian system with scalar-diagonal blocks.
    fn diag_sys(d: usize, f: f64, q: f64, hx: f64, ax: f64, hy: f64, ay: f64) -> LinearGaussianSystem {
        let mut transition = vec![0.0; d * d];
        let mut emit_x = vec![0.0; d * d];
        let mut emit_y = vec![0.0; d * d];
        for j in 0..d {
            transition[j * d + j] = f;
            emit_x[j * d + j] = hx;
            emit_y[j * d + j] = hy;
        }
        LinearGaussianSystem::new(
            d,
            d,
            d,
            transition,
            vec![q; d],
            emit_x,
            vec![ax; d],
            emit_y,
            vec![ay; d],
        )
        .unwrap()
    }

    /// All-linear generative model with zero maps and unit transition noise.
    fn zero_gen_linear(d: usize, nx: usize, ny: usize, alpha_x: f64, alpha_y: f64) -> GenerativeParams {
        let obs_in = nx + ny + d + ACTION_DIM;
        GenerativeParams {
            latent_dim: d,
            x_dim: nx,
            y_dim: ny,
            transition: TransitionMap::Linear(
                AffineGaussian::new(d, d, vec![0.0; d * d], vec![0.0; d]).unwrap(),
            ),
            emission: EmissionMap::Linear(AffineMean::new(d, ny, vec![0.0; ny * d]).unwrap()),
            observation: ObservationMap::Linear(
                AffineMean::new(obs_in, nx, vec![0.0; nx * obs_in]).unwrap(),
            ),
            mask: GatedUpdate::zeros(ny, ACTION_DIM, 1),
            alpha_x,
            alpha_y,
            y_objective: EmissionObjective::Gaussian,
        }
    }

    /// Tabular recognition with standard-normal beliefs and smoothing.
    fn standard_tabular_rec(d: usize, nx: usize, steps: usize) -> RecognitionParams {
        RecognitionParams::tabular(
            vec![DiagGaussian::standard(d); steps],
            TabularSmoothing {
                gain: vec![vec![0.0; d]; steps.saturating_sub(1)],
                offset: vec![vec![0.0; d]; steps.saturating_sub(1)],
                log_std: vec![vec![0.0; d]; steps.saturating_sub(1)],
            },
            d,
            nx,
        )
        .unwrap()
    }

    fn bare_steps(rows: &[Vec<f64>]) -> Vec<ObsStep> {
        rows.iter().map(|r| ObsStep::bare(r.clone())).collect()
    }

    #[test]
    fn kl_identical_is_zero() {
        let g = DiagGaussian::new(vec![0.3, -1.2], vec![0.1, -0.4]).unwrap();
        assert_eq!(kl_diag(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        let p = DiagGaussian::standard(1);
        assert_relative_eq!(kl_diag(&q, &p).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![0.4, -0.2, 0.9], vec![0.2, -0.3, 0.0]).unwrap();
        let p = DiagGaussian::new(vec![0.0, 0.5, 0.3], vec![-0.1, 0.4, 0.2]).unwrap();
        let exact = kl_diag(&q, &p).unwrap();
        let log_pdf = |g: &DiagGaussian, v: &[f64]| -> f64 {
            g.mean
                .iter()
                .zip(&g.log_std)
                .zip(v)
                .map(|((m, s), x)| {
                    let z = (x - m) / s.exp();
                    -0.5 * z * z - s - 0.5 * LN_2PI
                })
                .sum()
        };
        let mut rng = seeded(7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let v = sample(&q, &eps);
            let val = log_pdf(&q, &v) - log_pdf(&p, &v);
            sum += val;
            sum_sq += val * val;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "MC {mean} vs exact {exact}, SE {se}"
        );
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let q = DiagGaussian::standard(2);
        let p = DiagGaussian::standard(3);
        assert!(matches!(kl_diag(&q, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn sample_zero_noise_is_mean() {
        let g = DiagGaussian::new(vec![0.7, -2.0], vec![0.5, -1.0]).unwrap();
        assert_eq!(sample(&g, &[0.0, 0.0]), g.mean);
    }

    #[test]
    fn sample_unit_noise_shifts_by_std() {
        let g = DiagGaussian::new(vec![0.7, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(sample(&g, &[1.0, 1.0]), vec![1.7, -1.0]);
    }

    #[test]
    fn sample_mean_converges() {
        let g = DiagGaussian::new(vec![1.5], vec![0.3]).unwrap();
        let sigma = 0.3f64.exp();
        let mut rng = seeded(11);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            sum += sample(&g, &[e])[0];
        }
        let mean = sum / n as f64;
        assert!(
            (mean - 1.5).abs() <= 3.0 * sigma / (n as f64).sqrt(),
            "empirical mean {mean}"
        );
    }

    #[test]
    fn gated_transition_zero_weights_halves_state() {
        let unit = GatedGaussian::zeros(3, 0);
        let z = vec![0.8, -0.4, 2.0];
        let out = gated_transition(&z, &unit).unwrap();
        for (o, zi) in out.mean.iter().zip(&z) {
            assert_relative_eq!(o, &(0.5 * zi), max_relative = 1e-12);
        }
        assert!(out.log_std.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn gated_transition_saturated_gates_persist_state() {
        let mut unit = GatedGaussian::zeros(2, 0);
        unit.forget.b = vec![1000.0; 2];
        unit.input.b = vec![-1000.0; 2];
        let z = vec![0.37, -1.9];
        let out = gated_transition(&z, &unit).unwrap();
        assert_eq!(out.mean, z);
    }

    #[test]
    fn gated_transition_jacobian_matches_finite_differences() {
        let mut rng = seeded(3);
        let unit = GatedGaussian::randn(3, 0, &mut rng);
        let z: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let h = 1e-5;
        for out_i in 0..3 {
            for in_j in 0..3 {
                let mut hi = z.clone();
                hi[in_j] += h;
                let mut lo = z.clone();
                lo[in_j] -= h;
                let numeric = (gated_transition(&hi, &unit).unwrap().mean[out_i]
                    - gated_transition(&lo, &unit).unwrap().mean[out_i])
                    / (2.0 * h);
                // Analytic derivative via the tape: probe with a one-hot
                // scalar objective over the mean output.
                let analytic = {
                    let mut tape = Tape::new();
                    let mut reg = Vec::new();
                    let nodes = unit.register(&mut tape, &mut reg);
                    let z_leaf = tape.leaf(z.clone());
                    let (mean, _) = nodes.fwd(&mut tape, z_leaf, None);
                    let mut pick = vec![0.0; 3];
                    pick[out_i] = 1.0;
                    let picked = tape.mul_const(mean, pick);
                    let root = tape.sum(picked);
                    tape.backward(root);
                    tape.grad(z_leaf)[in_j]
                };
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-4,
                    "jacobian ({out_i},{in_j}): analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gated_transition_rejects_bad_shapes() {
        let unit = GatedGaussian::zeros(3, 0);
        assert!(gated_transition(&[0.0; 2], &unit).is_err());
        let aux_unit = GatedGaussian::zeros(3, 2);
        assert!(gated_transition(&[0.0; 3], &aux_unit).is_err());
    }

    #[test]
    fn default_split_examples() {
        assert_eq!(default_t_min(10), 4);
        assert_eq!(default_t_min(6), 3);
        assert_eq!(default_t_min(1), 1);
    }

    #[test]
    fn pooled_features_vacuous_grid() {
        let grid = SemanticGrid::default_vacuous();
        let v = pooled_features(&grid);
        assert_eq!(v.len(), pooled_len(80, 120));
        assert_eq!(v.len(), 900);
        let blocks = 150;
        for (i, &x) in v.iter().enumerate() {
            let expect = if i / blocks == NUM_CHANNELS - 1 { 1.0 } else { 0.0 };
            assert_eq!(x, expect, "entry {i}");
        }
    }

    #[test]
    fn pooled_features_partial_blocks_average() {
        // 10x12 grid: 2x2 blocks of sizes 8x8, 8x4, 2x8, 2x4.
        let mut grid = SemanticGrid::filled(10, 12, 0.5, (0, 0), MassFunction::vacuous()).unwrap();
        let free = MassFunction::new([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        *grid.cell_mut(9, 11) = free;
        let v = pooled_features(&grid);
        let blocks = 4;
        assert_eq!(v.len(), NUM_CHANNELS * blocks);
        // Bottom-right block holds 2x4 cells, one of them road.
        let road_ch = 3;
        assert_relative_eq!(v[road_ch * blocks + 3], 1.0 / 8.0, max_relative = 1e-12);
        assert_relative_eq!(v[(NUM_CHANNELS - 1) * blocks + 3], 7.0 / 8.0, max_relative = 1e-12);
        assert_eq!(v[road_ch * blocks], 0.0);
    }

    #[test]
    fn lpvae_one_step_matches_direct_elbo() {
        let d = 1;
        let mut gen = zero_gen_linear(d, 1, 1, 0.5, 0.5);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![0.6];
            a.log_std = vec![-0.2];
        }
        if let EmissionMap::Linear(a) = &mut gen.emission {
            a.w = vec![1.3];
        }
        if let ObservationMap::Linear(a) = &mut gen.observation {
            let obs_in = 1 + 1 + 1 + ACTION_DIM;
            a.w = vec![0.0; obs_in];
            a.w[2] = 0.9;
        }
        let beliefs = vec![DiagGaussian::new(vec![0.4], vec![-0.3]).unwrap()];
        let rec = RecognitionParams::tabular(
            beliefs.clone(),
            TabularSmoothing { gain: vec![], offset: vec![], log_std: vec![] },
            d,
            1,
        )
        .unwrap();
        let xs = bare_steps(&[vec![0.7]]);
        let ys = vec![vec![-0.5]];
        let eps = 0.83;
        let noise = NoiseBundle { eps: vec![vec![eps]] };
        let out = lpvae_loss(&gen, &rec, &xs, &ys, 1, &noise).unwrap();

        // Direct one-step ELBO with the same draw.
        let z = 0.4 + (-0.3f64).exp() * eps;
        let log_q = -0.5 * eps * eps - (-0.3) - 0.5 * LN_2PI;
        let log_prior = -0.5 * z * z - 0.5 * LN_2PI;
        let nll_x = (0.7 - 0.9 * z).powi(2) / (2.0 * 0.5) + 0.5 * (LN_2PI + 0.5f64.ln());
        let nll_y = (-0.5 - 1.3 * z).powi(2) / (2.0 * 0.5) + 0.5 * (LN_2PI + 0.5f64.ln());
        let expect = log_q - log_prior + nll_x + nll_y;
        assert_relative_eq!(out.total, expect, max_relative = 1e-12);
        assert_relative_eq!(out.encoder, log_q - log_prior, max_relative = 1e-12);
        assert_relative_eq!(out.decoder, nll_x + nll_y, max_relative = 1e-12);
        assert_eq!(out.prediction, 0.0);
    }

    #[test]
    fn lpvae_decoder_perturbation_moves_decoder_and_total_equally() {
        let gen = GenerativeParams::new_gated(2, 3, 4, 5).unwrap();
        let rec = RecognitionParams::new_gated(2, 3, 4, 6).unwrap();
        let mut rng = seeded(8);
        let xs: Vec<ObsStep> = (0..3)
            .map(|_| ObsStep::bare((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let mut ys: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let noise = NoiseBundle::standard(3, 2, &mut rng);
        let base = lpvae_loss(&gen, &rec, &xs, &ys, 2, &noise).unwrap();
        ys[0][1] += 0.37;
        let moved = lpvae_loss(&gen, &rec, &xs, &ys, 2, &noise).unwrap();
        assert_eq!(base.encoder, moved.encoder);
        assert_eq!(base.prediction, moved.prediction);
        let d_dec = moved.decoder - base.decoder;
        let d_tot = moved.total - base.total;
        assert!(d_dec.abs() > 1e-6);
        assert_relative_eq!(d_dec, d_tot, max_relative = 1e-12);
    }

    #[test]
    fn loss_breakdown_sums_exactly() {
        let gen = GenerativeParams::new_gated(2, 3, 4, 15).unwrap();
        let rec = RecognitionParams::new_gated(2, 3, 4, 16).unwrap();
        let mut rng = seeded(17);
        let xs: Vec<ObsStep> = (0..4)
            .map(|_| ObsStep::bare((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let ys: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let noise = NoiseBundle::standard(4, 2, &mut rng);
        for t in 1..=4 {
            let out = lpvae_loss(&gen, &rec, &xs, &ys, t, &noise).unwrap();
            assert!(
                (out.total - (out.encoder + out.decoder + out.prediction)).abs() < 1e-6,
                "decomposition at t = {t}"
            );
        }
    }

    #[test]
    fn stdvae_two_step_matches_hand_expansion() {
        let d = 1;
        let mut gen = zero_gen_linear(d, 1, 1, 0.5, 0.5);
        let (f, sq) = (0.7, -0.15);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![f];
            a.log_std = vec![sq];
        }
        let hzx = 1.1;
        if let ObservationMap::Linear(a) = &mut gen.observation {
            a.w[2] = hzx;
        }
        let (m1, s1) = (0.3, -0.4);
        let (m2, s2) = (-0.6, 0.2);
        let (gamma, off, ss) = (0.5, 0.1, -0.3);
        let rec = RecognitionParams::tabular(
            vec![
                DiagGaussian::new(vec![m1], vec![s1]).unwrap(),
                DiagGaussian::new(vec![m2], vec![s2]).unwrap(),
            ],
            TabularSmoothing {
                gain: vec![vec![gamma]],
                offset: vec![vec![off]],
                log_std: vec![vec![ss]],
            },
            d,
            1,
        )
        .unwrap();
        let (x1, x2) = (0.7, -0.3);
        let xs = bare_steps(&[vec![x1], vec![x2]]);
        let (e1, e2) = (0.9, -1.4);
        let noise = NoiseBundle { eps: vec![vec![e1], vec![e2]] };
        let loss = stdvae_loss(&gen, &rec, &xs, 1, &noise).unwrap();

        let z2 = m2 + s2.exp() * e2;
        let q2 = 0.5 * e2 * e2 + s2 + 0.5 * LN_2PI;
        let mu1 = off + gamma * z2;
        let z1 = mu1 + ss.exp() * e1;
        let q1 = 0.5 * e1 * e1 + ss + 0.5 * LN_2PI;
        let prior1 = 0.5 * ((z1 - m1) / s1.exp()).powi(2) + s1 + 0.5 * LN_2PI;
        let trans = 0.5 * ((z2 - f * z1) / sq.exp()).powi(2) + sq + 0.5 * LN_2PI;
        let em = |x: f64, z: f64| (x - hzx * z).powi(2) / (2.0 * 0.5) + 0.5 * (LN_2PI + 0.5f64.ln());
        let expect = -q2 - q1 + prior1 + trans + em(x1, z1) + em(x2, z2);
        assert_relative_eq!(loss, expect, max_relative = 1e-12);
    }

    #[test]
    fn stdvae_standard_heads_perfect_decoder_leaves_constants() {
        let d = 2;
        let nx = 3;
        let steps = 4;
        let gen = zero_gen_linear(d, nx, 1, 0.5, 0.5);
        let rec = standard_tabular_rec(d, nx, steps);
        let xs = bare_steps(&vec![vec![0.0; nx]; steps]);
        let mut rng = seeded(21);
        for _ in 0..20 {
            let noise = NoiseBundle::standard(steps, d, &mut rng);
            let loss = stdvae_loss(&gen, &rec, &xs, 1, &noise).unwrap();
            let expect = steps as f64 * 0.5 * nx as f64 * (LN_2PI + 0.5f64.ln());
            assert_relative_eq!(loss, expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn stdvae_kl_portion_nonnegative_monte_carlo() {
        // Emission terms exactly zero: zero maps, zero data, variance at the
        // density-one floor; what remains is the sampled KL portion.
        let d = 2;
        let nx = 2;
        let steps = 5;
        let mut gen = zero_gen_linear(d, nx, 1, MIN_EMISSION_VARIANCE, 0.5);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![0.4, 0.1, -0.2, 0.8];
            a.log_std = vec![-0.1, 0.2];
        }
        let mut rng = seeded(22);
        let beliefs: Vec<DiagGaussian> = (0..steps)
            .map(|_| {
                DiagGaussian::new(
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                    (0..d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
                )
                .unwrap()
            })
            .collect();
        let smoothing = TabularSmoothing {
            gain: (0..steps - 1)
                .map(|_| (0..d).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
            offset: (0..steps - 1)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
            log_std: (0..steps - 1)
                .map(|_| (0..d).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
        };
        let rec = RecognitionParams::tabular(beliefs, smoothing, d, nx).unwrap();
        let xs = bare_steps(&vec![vec![0.0; nx]; steps]);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise = NoiseBundle::standard(steps, d, &mut rng);
            let v = stdvae_loss(&gen, &rec, &xs, 2, &noise).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean >= -3.0 * se, "KL portion {mean} with SE {se}");
    }

    #[test]
    fn tdvae_unit_delta_matches_two_point_smoothing_loss() {
        // x at the split encoded as zero with zero observation maps at the
        // density-one floor, so the extra smoothing-loss emission vanishes.
        let d = 2;
        let nx = 2;
        let mut gen = zero_gen_linear(d, nx, 1, MIN_EMISSION_VARIANCE, 0.5);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![0.5, 0.0, 0.2, 0.7];
            a.log_std = vec![0.1, -0.2];
        }
        let mut rng = seeded(30);
        let beliefs: Vec<DiagGaussian> = (0..2)
            .map(|_| {
                DiagGaussian::new(
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                    (0..d).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect(),
                )
                .unwrap()
            })
            .collect();
        let smoothing = TabularSmoothing {
            gain: vec![(0..d).map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal)).collect()],
            offset: vec![(0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()],
            log_std: vec![(0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()],
        };
        let rec = RecognitionParams::tabular(beliefs, smoothing, d, nx).unwrap();
        let xs = bare_steps(&[vec![0.0; nx], vec![0.3, -0.9]]);
        for _ in 0..50 {
            let noise = NoiseBundle::standard(2, d, &mut rng);
            let jumpy = tdvae_jumpy_loss(&gen, &rec, &xs, 1, 1, &noise).unwrap();
            let sequential = stdvae_loss(&gen, &rec, &xs, 1, &noise).unwrap();
            assert_relative_eq!(jumpy, sequential, max_relative = 1e-11);
        }
    }

    #[test]
    fn tdvae_matching_smoothing_and_belief_cancel() {
        // Smoothing at t ignores z_{t+1} and equals the belief head, so the
        // two split-point terms cancel; the loss reduces to the far terms.
        let d = 1;
        let nx = 1;
        let mut gen = zero_gen_linear(d, nx, 1, 0.5, 0.5);
        let (f, sq) = (0.8, -0.1);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![f];
            a.log_std = vec![sq];
        }
        let hzx = 0.6;
        if let ObservationMap::Linear(a) = &mut gen.observation {
            a.w[2] = hzx;
        }
        let (m1, s1) = (0.4, -0.2);
        let (m2, s2) = (-0.3, 0.1);
        let rec = RecognitionParams::tabular(
            vec![
                DiagGaussian::new(vec![m1], vec![s1]).unwrap(),
                DiagGaussian::new(vec![m2], vec![s2]).unwrap(),
            ],
            TabularSmoothing {
                gain: vec![vec![0.0]],
                offset: vec![vec![m1]],
                log_std: vec![vec![s1]],
            },
            d,
            nx,
        )
        .unwrap();
        let x2 = 0.75;
        let xs = bare_steps(&[vec![0.0], vec![x2]]);
        let mut rng = seeded(31);
        for _ in 0..100 {
            let noise = NoiseBundle::standard(2, d, &mut rng);
            let loss = tdvae_jumpy_loss(&gen, &rec, &xs, 1, 1, &noise).unwrap();
            let (e1, e2) = (noise.eps[0][0], noise.eps[1][0]);
            let z2 = m2 + s2.exp() * e2;
            let z1 = m1 + s1.exp() * e1;
            let q_far = 0.5 * e2 * e2 + s2 + 0.5 * LN_2PI;
            let trans = 0.5 * ((z2 - f * z1) / sq.exp()).powi(2) + sq + 0.5 * LN_2PI;
            let em = (x2 - hzx * z2).powi(2) + 0.5 * (LN_2PI + 0.5f64.ln());
            let expect = -q_far + trans + em;
            assert_relative_eq!(loss, expect, max_relative = 1e-11);
        }
    }

    #[test]
    fn action_loss_mask_term_is_vacuous_nll() {
        let d = 1;
        let nx = 2;
        let vacuous = pooled_features(&SemanticGrid::default_vacuous());
        let ny = vacuous.len();
        let steps = 3;
        let alpha_x = 0.5;
        let mut gen = zero_gen_linear(d, nx, ny, alpha_x, 0.5);
        // Mask map emits exactly the vacuous encoding for any action.
        gen.mask.forget.b = vec![-1000.0; ny];
        gen.mask.gate.b = vec![1000.0];
        gen.mask.cand.b = vec![1000.0];
        gen.mask.proj.w = vacuous.clone();
        let rec = standard_tabular_rec(d, nx, steps);
        let xs = bare_steps(&vec![vec![0.0; nx]; steps]);
        let ys = vec![vec![0.0; ny]; steps];
        let masks = vec![vacuous.clone(); steps - 1];
        let actions = vec![crate::mdp::BoundingBoxAction::EMPTY; steps - 1];
        let noise = NoiseBundle::zeros(steps, d);
        let out =
            lpvae_action_loss(&gen, &rec, &xs, &ys, &masks, &actions, steps, &noise).unwrap();
        assert_eq!(out.encoder, 0.0);
        assert_eq!(out.prediction, 0.0);
        let y_const = steps as f64 * 0.5 * ny as f64 * (LN_2PI + 0.5f64.ln());
        let x_const = (steps - 1) as f64 * 0.5 * nx as f64 * (LN_2PI + alpha_x.ln());
        let mask_term = out.decoder - y_const - x_const;
        let expect = (steps - 1) as f64 * 0.5 * ny as f64 * (LN_2PI + alpha_x.ln());
        assert_relative_eq!(mask_term, expect, max_relative = 1e-9);
    }

    #[test]
    fn action_loss_reduces_to_plain_loss() {
        // Zero observation maps at the density-one floor and zero x and mask
        // data erase every term the action variant adds or drops.
        let d = 2;
        let nx = 2;
        let ny = 3;
        let mut gen = zero_gen_linear(d, nx, ny, MIN_EMISSION_VARIANCE, 0.5);
        if let TransitionMap::Linear(a) = &mut gen.transition {
            a.w = vec![0.3, -0.1, 0.2, 0.6];
        }
        if let EmissionMap::Linear(a) = &mut gen.emission {
            a.w = vec![0.5, -0.4, 0.8, 0.0, 0.2, 1.0];
        }
        gen.mask.forget.b = vec![-1000.0; ny];
        let steps = 4;
        let rec = standard_tabular_rec(d, nx, steps);
        let xs = bare_steps(&vec![vec![0.0; nx]; steps]);
        let mut rng = seeded(33);
        let ys: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..ny).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let masks = vec![vec![0.0; ny]; steps - 1];
        let actions = vec![crate::mdp::BoundingBoxAction::BROADCAST; steps - 1];
        for t in 1..=steps {
            let noise = NoiseBundle::standard(steps, d, &mut rng);
            let with_actions =
                lpvae_action_loss(&gen, &rec, &xs, &ys, &masks, &actions, t, &noise).unwrap();
            let plain = lpvae_loss(&gen, &rec, &xs, &ys, t, &noise).unwrap();
            assert_relative_eq!(with_actions.total, plain.total, max_relative = 1e-12);
            assert_relative_eq!(with_actions.encoder, plain.encoder, max_relative = 1e-12);
        }
    }

    #[test]
    fn class_entropy_emission_exact_value() {
        let d = 1;
        let nx = 1;
        let blocks = 2;
        let ny = NUM_CHANNELS * blocks;
        let weights = DEFAULT_CLASS_WEIGHTS;
        let mut gen = zero_gen_linear(d, nx, ny, MIN_EMISSION_VARIANCE, 0.5);
        gen.y_objective = EmissionObjective::WeightedClassEntropy { weights };
        let rec = standard_tabular_rec(d, nx, 1);
        let xs = bare_steps(&[vec![0.0]]);
        // Block 0: car dominant with ignorance 0.3; block 1: fully ignorant.
        let mut y = vec![0.0; ny];
        y[blocks] = 0.7; // channel 1 (car), block 0
        y[(NUM_CHANNELS - 1) * blocks] = 0.3;
        y[(NUM_CHANNELS - 1) * blocks + 1] = 1.0;
        let noise = NoiseBundle::zeros(1, d);
        let out = lpvae_loss(&gen, &rec, &xs, &[y], 1, &noise).unwrap();
        // Zero emission weights give uniform logits: CE = ln 6 per block,
        // weighted by class weight times one minus ignorance.
        let expect_y = weights[1] * (1.0 - 0.3) * (NUM_CHANNELS as f64).ln();
        assert_relative_eq!(out.decoder, expect_y, max_relative = 1e-12);
        assert_eq!(out.encoder, 0.0);
    }

    #[test]
    fn class_entropy_requires_channel_multiple() {
        let mut gen = zero_gen_linear(1, 1, 5, 0.5, 0.5);
        gen.y_objective = EmissionObjective::WeightedClassEntropy {
            weights: DEFAULT_CLASS_WEIGHTS,
        };
        assert!(matches!(gen.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn alpha_below_floor_rejected() {
        let gen = zero_gen_linear(1, 1, 1, 0.1, 0.5);
        assert!(matches!(gen.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn loss_split_ranges_enforced() {
        let gen = GenerativeParams::new_gated(1, 1, 1, 40).unwrap();
        let rec = RecognitionParams::new_gated(1, 1, 2, 41).unwrap();
        let xs = bare_steps(&[vec![0.1], vec![0.2]]);
        let ys = vec![vec![0.0], vec![0.0]];
        let noise = NoiseBundle::zeros(2, 1);
        assert!(lpvae_loss(&gen, &rec, &xs, &ys, 0, &noise).is_err());
        assert!(lpvae_loss(&gen, &rec, &xs, &ys, 3, &noise).is_err());
        assert!(stdvae_loss(&gen, &rec, &xs, 2, &noise).is_err());
        assert!(tdvae_jumpy_loss(&gen, &rec, &xs, 1, 2, &noise).is_err());
        assert!(tdvae_jumpy_loss(&gen, &rec, &xs, 1, 0, &noise).is_err());
        let short = NoiseBundle::zeros(1, 1);
        assert!(lpvae_loss(&gen, &rec, &xs, &ys, 1, &short).is_err());
    }

    #[test]
    fn belief_states_concatenate_in_declared_order() {
        let rec = RecognitionParams::new_gated(2, 3, 4, 50).unwrap();
        let xs = vec![
            ObsStep {
                features: vec![0.1, -0.2, 0.3],
                motion: [1.0, 2.0, 3.0],
                controls: [0.5, -0.5, 0.25],
            },
            ObsStep {
                features: vec![0.7, 0.0, -0.9],
                motion: [0.0, 0.0, 0.1],
                controls: [1.0, 0.0, -1.0],
            },
        ];
        let beliefs = rec.belief_states(&xs).unwrap();
        assert_eq!(beliefs.len(), 2);
        for (b, step) in beliefs.iter().zip(&xs) {
            assert_eq!(b.len(), rec.belief_dim());
            assert_eq!(&b[..3], step.features.as_slice());
            assert_eq!(&b[3 + 4..], step.controls.as_slice());
        }
        assert!(beliefs[0][3..7].iter().any(|&h| h != 0.0));
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let gen = GenerativeParams::new_gated(2, 3, 4, 60).unwrap();
        let rec = RecognitionParams::new_gated(2, 3, 4, 61).unwrap();
        let mut gen2 = GenerativeParams::new_gated(2, 3, 4, 62).unwrap();
        let mut rec2 = RecognitionParams::new_gated(2, 3, 4, 63).unwrap();
        gen2.set_flat(&gen.flat()).unwrap();
        rec2.set_flat(&rec.flat()).unwrap();
        assert_eq!(gen, gen2);
        assert_eq!(rec, rec2);
        assert!(gen2.set_flat(&[0.0]).is_err());
        let names: Vec<String> = gen.arrays().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.contains(&"transition.w".to_string()) || names.contains(&"transition.forget.w".to_string()));
    }

    #[test]
    fn linear_system_roundtrip() {
        let sys = diag_sys(2, 0.8, 1.0, 1.2, 0.7, 0.5, 0.9);
        let gen = GenerativeParams::from_linear_system(&sys).unwrap();
        let back = gen.to_linear_system().unwrap();
        assert_eq!(sys.transition, back.transition);
        assert_eq!(sys.emit_x, back.emit_x);
        assert_eq!(sys.emit_y, back.emit_y);
        for (a, b) in sys.transition_noise.iter().zip(&back.transition_noise) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        let gated = GenerativeParams::new_gated(2, 2, 2, 70).unwrap();
        assert!(gated.to_linear_system().is_err());
        let mut leaky = gen.clone();
        if let ObservationMap::Linear(a) = &mut leaky.observation {
            a.w[0] = 0.5;
        }
        assert!(leaky.to_linear_system().is_err());
    }

    #[test]
    fn kalman_one_step_closed_form() {
        let (hx, ax, hy, ay) = (1.3, 0.8, 0.6, 1.1);
        let sys = diag_sys(1, 0.9, 1.0, hx, ax, hy, ay);
        let (x, y) = (0.7, -0.4);
        let out = kalman_exact(&sys, &[vec![x]], &[vec![y]]).unwrap();
        // (x, y) jointly normal with covariance from the standard-normal z.
        let sxx = hx * hx + ax;
        let syy = hy * hy + ay;
        let sxy = hx * hy;
        let det = sxx * syy - sxy * sxy;
        let quad = (syy * x * x - 2.0 * sxy * x * y + sxx * y * y) / det;
        let expect = 0.5 * (det.ln() + quad + 2.0 * LN_2PI);
        assert_relative_eq!(out.nll, expect, max_relative = 1e-12);
        assert_eq!(out.filtered.len(), 1);
        assert_eq!(out.smoothed.len(), 1);
        assert_relative_eq!(out.filtered[0].mean[0], out.smoothed[0].mean[0], max_relative = 1e-12);
    }

    #[test]
    fn kalman_smoother_matches_filter_at_final_step() {
        let sys = diag_sys(2, 0.7, 1.0, 1.0, 0.8, 0.9, 1.2);
        let mut rng = seeded(80);
        let (_, xs, ys) = sys.simulate(6, &mut rng);
        let out = kalman_exact(&sys, &xs, &ys).unwrap();
        let last = out.filtered.len() - 1;
        for (a, b) in out.filtered[last].mean.iter().zip(&out.smoothed[last].mean) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        for (a, b) in out.filtered[last].cov.iter().zip(&out.smoothed[last].cov) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_floor_enforced_at_construction() {
        let err = LinearGaussianSystem::new(
            1,
            1,
            1,
            vec![0.5],
            vec![1.0],
            vec![1.0],
            vec![0.1],
            vec![1.0],
            vec![1.0],
        );
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn kalman_singular_covariance_surfaced() {
        // Constructed directly to bypass the noise floor; the filter must
        // report the singular innovation instead of clamping it.
        let sys = LinearGaussianSystem {
            latent_dim: 1,
            x_dim: 1,
            y_dim: 1,
            transition: vec![1.0],
            transition_noise: vec![1.0],
            emit_x: vec![0.0],
            noise_x: vec![0.0],
            emit_y: vec![0.0],
            noise_y: vec![0.0],
        };
        let out = kalman_exact(&sys, &[vec![0.0]], &[vec![0.0]]);
        assert!(matches!(out, Err(Error::Numerical(_))));
    }

    #[test]
    fn train_toy_zero_step_size_is_identity() {
        let sys = diag_sys(1, 0.8, 1.0, 1.0, 0.7, 0.8, 0.9);
        let gen = GenerativeParams::from_linear_system(&sys).unwrap();
        let mut rng = seeded(90);
        let (_, xs, _) = sys.simulate(5, &mut rng);
        let data = vec![TrainingSequence {
            xs: bare_steps(&xs),
            ys: vec![vec![0.0; 1]; 5],
        }];
        let kal = kalman_exact(&sys.x_only(), &xs, &vec![vec![]; 5]).unwrap();
        let rec = RecognitionParams::tabular_from_kalman(&kal, &sys, 1).unwrap();
        let (gen2, rec2, trace) = train_toy(&gen, &rec, &data, 20, 0.0, 7).unwrap();
        assert_eq!(gen.flat(), gen2.flat());
        assert_eq!(rec.flat(), rec2.flat());
        assert_eq!(trace.len(), 20);
        assert!(trace.iter().all(|b| b.total.is_finite()));
    }

    #[test]
    fn train_toy_is_seed_deterministic() {
        let sys = diag_sys(1, 0.6, 1.0, 1.0, 0.7, 0.8, 0.9);
        let gen = GenerativeParams::from_linear_system(&sys).unwrap();
        let mut rng = seeded(91);
        let (_, xs, _) = sys.simulate(6, &mut rng);
        let data = vec![TrainingSequence {
            xs: bare_steps(&xs),
            ys: vec![vec![0.0; 1]; 6],
        }];
        let kal = kalman_exact(&sys.x_only(), &xs, &vec![vec![]; 6]).unwrap();
        let rec = RecognitionParams::tabular_from_kalman(&kal, &sys, 1).unwrap();
        let run1 = train_toy(&gen, &rec, &data, 30, 0.01, 99).unwrap();
        let run2 = train_toy(&gen, &rec, &data, 30, 0.01, 99).unwrap();
        assert_eq!(run1.0.flat(), run2.0.flat());
        assert_eq!(run1.1.flat(), run2.1.flat());
        for (a, b) in run1.2.iter().zip(&run2.2) {
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn train_toy_rejects_large_models_and_long_sequences() {
        let gen = GenerativeParams::new_gated(9, 2, 2, 100).unwrap();
        let rec = RecognitionParams::new_gated(9, 2, 2, 101).unwrap();
        let data = vec![TrainingSequence {
            xs: bare_steps(&[vec![0.0; 2]]),
            ys: vec![vec![0.0; 2]],
        }];
        assert!(train_toy(&gen, &rec, &data, 1, 0.1, 0).is_err());
        let gen = GenerativeParams::new_gated(2, 2, 2, 102).unwrap();
        let rec = RecognitionParams::new_gated(2, 2, 2, 103).unwrap();
        let long = vec![TrainingSequence {
            xs: bare_steps(&vec![vec![0.0; 2]; 21]),
            ys: vec![vec![0.0; 2]; 21],
        }];
        assert!(train_toy(&gen, &rec, &long, 1, 0.1, 0).is_err());
    }

    #[test]
    fn train_toy_aborts_on_divergence() {
        let mut gen = zero_gen_linear(2, 2, 2, 0.5, 0.5);
        if let EmissionMap::Linear(a) = &mut gen.emission {
            a.w = vec![1e200; 4];
        }
        let rec = standard_tabular_rec(2, 2, 4);
        let data = vec![TrainingSequence {
            xs: bare_steps(&vec![vec![0.5; 2]; 4]),
            ys: vec![vec![0.5; 2]; 4],
        }];
        let err = train_toy(&gen, &rec, &data, 5, 0.1, 1);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }
}
