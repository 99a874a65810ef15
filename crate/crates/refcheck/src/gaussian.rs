//! Brute-force linear-Gaussian references: joint-covariance conditioning
//! instead of sequential filtering, stacked-marginal likelihoods instead of
//! innovation recursions.

use nalgebra::{DMatrix, DVector};

use coopgrid::vae::LinearGaussianSystem;

/// Joint Gaussian over stacked latent states z_1..z_T (row-major covariance).
pub struct JointGaussian {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Prior joint distribution of z_1..z_T under the system dynamics, built by
/// literal block recursion on covariances.
fn latent_prior(sys: &LinearGaussianSystem, steps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = sys.latent_dim;
    let n = d * steps;
    let f = DMatrix::from_row_slice(d, d, &sys.transition);
    let q = DMatrix::from_diagonal(&DVector::from_vec(sys.transition_noise.clone()));
    let mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    let mut diag: Vec<DMatrix<f64>> = vec![DMatrix::identity(d, d)];
    for k in 1..steps {
        let prev = &diag[k - 1];
        diag.push(&f * prev * f.transpose() + &q);
    }
    for (k, diag_k) in diag.iter().enumerate() {
        cov.view_mut((k * d, k * d), (d, d)).copy_from(diag_k);
        // Cross blocks: cov(z_{k+j}, z_k) = F^j cov(z_k, z_k).
        let mut cross = diag_k.clone();
        for j in k + 1..steps {
            cross = &f * cross;
            cov.view_mut((j * d, k * d), (d, d)).copy_from(&cross);
            cov.view_mut((k * d, j * d), (d, d))
                .copy_from(&cross.transpose());
        }
    }
    (mean, cov)
}

/// Stacked emission of x_1..x_tx and y_1..y_ty as one linear readout of the
/// joint latent vector, with its diagonal noise.
fn stacked_emission(
    sys: &LinearGaussianSystem,
    steps: usize,
    tx: usize,
    ty: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = sys.latent_dim;
    let rows = tx * sys.x_dim + ty * sys.y_dim;
    let mut h = DMatrix::zeros(rows, d * steps);
    let mut noise = DVector::zeros(rows);
    for k in 0..tx {
        for r in 0..sys.x_dim {
            for c in 0..d {
                h[(k * sys.x_dim + r, k * d + c)] = sys.emit_x[r * d + c];
            }
            noise[k * sys.x_dim + r] = sys.noise_x[r];
        }
    }
    let base = tx * sys.x_dim;
    for k in 0..ty {
        for r in 0..sys.y_dim {
            for c in 0..d {
                h[(base + k * sys.y_dim + r, k * d + c)] = sys.emit_y[r * d + c];
            }
            noise[base + k * sys.y_dim + r] = sys.noise_y[r];
        }
    }
    (h, noise)
}

fn stack_obs(xs: &[Vec<f64>], ys: &[Vec<f64>], tx: usize, ty: usize) -> DVector<f64> {
    let mut obs = Vec::new();
    for row in xs.iter().take(tx) {
        obs.extend_from_slice(row);
    }
    for row in ys.iter().take(ty) {
        obs.extend_from_slice(row);
    }
    DVector::from_vec(obs)
}

/// Posterior of the joint latent vector z_1..z_T given x_1..x_tx and
/// y_1..y_ty, by direct conditioning of the big joint Gaussian.
pub fn lgs_joint_posterior(
    sys: &LinearGaussianSystem,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    tx: usize,
    ty: usize,
) -> JointGaussian {
    let steps = xs.len().max(ys.len());
    assert!(tx <= xs.len() && ty <= ys.len(), "conditioning beyond data");
    let (prior_mean, prior_cov) = latent_prior(sys, steps);
    let (h, noise) = stacked_emission(sys, steps, tx, ty);
    let obs = stack_obs(xs, ys, tx, ty);
    let n = prior_mean.len();
    if obs.is_empty() {
        return JointGaussian {
            dim: n,
            mean: prior_mean.iter().cloned().collect(),
            cov: row_major(&prior_cov),
        };
    }
    let s = &h * &prior_cov * h.transpose() + DMatrix::from_diagonal(&noise);
    let s_inv = s.try_inverse().expect("observation covariance invertible");
    let gain = &prior_cov * h.transpose() * s_inv;
    let innovation = obs - &h * &prior_mean;
    let mean = &prior_mean + &gain * innovation;
    let cov = &prior_cov - &gain * &h * &prior_cov;
    JointGaussian {
        dim: n,
        mean: mean.iter().cloned().collect(),
        cov: row_major(&cov),
    }
}

/// Negative log marginal likelihood of x_1..x_T and y_1..y_T as one stacked
/// Gaussian in observation space.
pub fn lgs_exact_nll(sys: &LinearGaussianSystem, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let steps = xs.len();
    let (prior_mean, prior_cov) = latent_prior(sys, steps);
    let (h, noise) = stacked_emission(sys, steps, steps, ys.len());
    let obs = stack_obs(xs, ys, steps, ys.len());
    let mean = &h * prior_mean;
    let cov = &h * &prior_cov * h.transpose() + DMatrix::from_diagonal(&noise);
    let dim = obs.len();
    let chol = cov.cholesky().expect("observation covariance positive definite");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let centered = obs - mean;
    let solved = chol.solve(&centered);
    0.5 * (log_det
        + centered.dot(&solved)
        + dim as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// KL divergence between two full-covariance Gaussians of equal dimension.
pub fn joint_kl(g0: &JointGaussian, g1: &JointGaussian) -> f64 {
    assert_eq!(g0.dim, g1.dim, "KL needs equal dimensions");
    let n = g0.dim;
    let m0 = DVector::from_vec(g0.mean.clone());
    let m1 = DVector::from_vec(g1.mean.clone());
    let c0 = DMatrix::from_row_slice(n, n, &g0.cov);
    let c1 = DMatrix::from_row_slice(n, n, &g1.cov);
    let chol1 = c1.clone().cholesky().expect("second covariance positive definite");
    let log_det1: f64 = chol1.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let log_det0: f64 = c0
        .clone()
        .cholesky()
        .expect("first covariance positive definite")
        .l()
        .diagonal()
        .iter()
        .map(|v| 2.0 * v.ln())
        .sum();
    let c1_inv = chol1.inverse();
    let trace = (&c1_inv * &c0).trace();
    let diff = m1 - m0;
    let quad = diff.dot(&(&c1_inv * &diff));
    0.5 * (trace + quad - n as f64 + log_det1 - log_det0)
}

/// Joint distribution of z_1..z_T implied by a diagonal belief marginal at
/// step `t`, elementwise-affine backward smoothing below it, and the system
/// transition above it, composed as one affine chain.
///
/// `belief` is (mean, log_std) of z_t; `smoothing` entry k - 1 holds the
/// (gain, offset, log_std) conditioning z_k on z_{k+1}.  Entries at or
/// above `t` are ignored.
pub fn q_joint(
    sys: &LinearGaussianSystem,
    belief: (&[f64], &[f64]),
    smoothing: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    t: usize,
    steps: usize,
) -> JointGaussian {
    let d = sys.latent_dim;
    let n = d * steps;
    // z = A w + b with w the stacked per-step noise; build columns in order
    // z_t, z_{t-1}, .., z_1, z_{t+1}, .., z_T so each new state is affine in
    // the states already built.
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let blk = |k: usize| (k - 1) * d;
    // Belief draw at t.
    for j in 0..d {
        a[(blk(t) + j, blk(t) + j)] = belief.1[j].exp();
        b[blk(t) + j] = belief.0[j];
    }
    // Backward smoothing: z_k = offset + gain .* z_{k+1} + std .* w_k.
    for k in (1..t).rev() {
        let (gain, offset, log_std) = &smoothing[k - 1];
        for j in 0..d {
            let row = blk(k) + j;
            let upper = blk(k + 1) + j;
            // Compose with the affine form of z_{k+1}.
            for c in 0..n {
                let av = a[(upper, c)];
                a[(row, c)] += gain[j] * av;
            }
            b[row] += offset[j] + gain[j] * b[upper];
            a[(row, row)] += log_std[j].exp();
        }
    }
    // Forward transitions above t: z_{k+1} = F z_k + sqrt(Q) w_{k+1}.
    let f = DMatrix::from_row_slice(d, d, &sys.transition);
    for k in t..steps {
        for j in 0..d {
            let row = blk(k + 1) + j;
            for c in 0..n {
                let mut acc = 0.0;
                for jj in 0..d {
                    acc += f[(j, jj)] * a[(blk(k) + jj, c)];
                }
                a[(row, c)] += acc;
            }
            let mut acc_b = 0.0;
            for jj in 0..d {
                acc_b += f[(j, jj)] * b[blk(k) + jj];
            }
            b[row] += acc_b;
            a[(row, row)] += sys.transition_noise[j].sqrt();
        }
    }
    let cov = &a * a.transpose();
    JointGaussian {
        dim: n,
        mean: b.iter().cloned().collect(),
        cov: row_major(&cov),
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(m[(r, c)]);
        }
    }
    out
}
