//! Distributional properties of the latent-state losses checked against an
//! independent dense-Gaussian reference implementation.

use coopgrid::vae::{
    kalman_exact, lpvae_action_loss_grad, lpvae_loss, lpvae_loss_grad, stdvae_loss_grad,
    tdvae_jumpy_loss_grad, train_toy, BeliefHead, DiagGaussian, EmissionObjective,
    GenerativeParams, LinearGaussianSystem, NoiseBundle, ObsStep, RecognitionParams,
    SmoothingHead, TabularSmoothing, TrainingSequence, DEFAULT_CLASS_WEIGHTS,
};
use coopgrid::mass::NUM_CHANNELS;
use coopgrid::mdp::BoundingBoxAction;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use refcheck::fd::{central_grad, max_relative_error};
use refcheck::gaussian::{joint_kl, lgs_exact_nll, lgs_joint_posterior, q_joint, JointGaussian};

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

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

fn random_sys(d: usize, nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> LinearGaussianSystem {
    let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(-0.8..0.8)).collect()
    };
    // Uniform per-block noise so the system maps onto fixed emission
    // variances.
    let noise = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        vec![rng.gen_range(0.4..1.5); n]
    };
    LinearGaussianSystem::new(
        d,
        nx,
        ny,
        mat(d, d, rng),
        (0..d).map(|_| rng.gen_range(0.4..1.5)).collect(),
        mat(nx, d, rng),
        noise(nx, rng),
        mat(ny, d, rng),
        noise(ny, rng),
    )
    .unwrap()
}

fn bare_steps(rows: &[Vec<f64>]) -> Vec<ObsStep> {
    rows.iter().map(|r| ObsStep::bare(r.clone())).collect()
}

/// Belief and smoothing tables of a tabular recognition model.
type SmoothTables = Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>;

fn tables(rec: &RecognitionParams) -> (Vec<DiagGaussian>, SmoothTables) {
    let beliefs = match &rec.belief_head {
        BeliefHead::Tabular(b) => b.clone(),
        _ => panic!("expected tabular belief head"),
    };
    let smoothing = match &rec.smoothing {
        SmoothingHead::Tabular(t) => t
            .gain
            .iter()
            .zip(&t.offset)
            .zip(&t.log_std)
            .map(|((g, o), s)| (g.clone(), o.clone(), s.clone()))
            .collect(),
        _ => panic!("expected tabular smoothing"),
    };
    (beliefs, smoothing)
}

/// Monte Carlo mean and standard error of the averaged loss.
fn mc_loss(
    gen: &GenerativeParams,
    rec: &RecognitionParams,
    xs: &[ObsStep],
    ys: &[Vec<f64>],
    t: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let d = gen.latent_dim;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let noise = NoiseBundle::standard(xs.len(), d, rng);
        let v = lpvae_loss(gen, rec, xs, ys, t, &noise).unwrap().total;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
    (mean, se)
}

fn marginal(joint: &JointGaussian, d: usize, step: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = (step - 1) * d;
    let mean = joint.mean[lo..lo + d].to_vec();
    let mut cov = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            cov[r * d + c] = joint.cov[(lo + r) * joint.dim + lo + c];
        }
    }
    (mean, cov)
}

#[test]
fn kalman_matches_dense_joint_reference() {
    let mut rng = seeded(401);
    for case in 0..10 {
        let d = 1 + case % 3;
        let steps = 1 + case % 8;
        let sys = random_sys(d, 2, 1, &mut rng);
        let (_, xs, ys) = sys.simulate(steps, &mut rng);
        let out = kalman_exact(&sys, &xs, &ys).unwrap();
        let dense = lgs_exact_nll(&sys, &xs, &ys);
        assert!(
            (out.nll - dense).abs() < 1e-9 * dense.abs().max(1.0),
            "case {case}: sequential {} vs dense {dense}",
            out.nll
        );
        let full = lgs_joint_posterior(&sys, &xs, &ys, steps, steps);
        for k in 1..=steps {
            let part = lgs_joint_posterior(&sys, &xs, &ys, k, k);
            let (fm, fc) = marginal(&part, d, k);
            for (a, b) in out.filtered[k - 1].mean.iter().zip(&fm) {
                assert!((a - b).abs() < 1e-8, "filtered mean at {k}: {a} vs {b}");
            }
            for (a, b) in out.filtered[k - 1].cov.iter().zip(&fc) {
                assert!((a - b).abs() < 1e-8, "filtered cov at {k}: {a} vs {b}");
            }
            let (sm, sc) = marginal(&full, d, k);
            for (a, b) in out.smoothed[k - 1].mean.iter().zip(&sm) {
                assert!((a - b).abs() < 1e-8, "smoothed mean at {k}: {a} vs {b}");
            }
            for (a, b) in out.smoothed[k - 1].cov.iter().zip(&sc) {
                assert!((a - b).abs() < 1e-8, "smoothed cov at {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn averaged_loss_dominates_exact_nll() {
    let mut rng = seeded(402);
    for case in 0..3 {
        let d = 1 + case;
        let sys = random_sys(d, 2, 1, &mut rng);
        let steps = 4 + case;
        let (_, xs, ys) = sys.simulate(steps, &mut rng);
        let nll = kalman_exact(&sys, &xs, &ys).unwrap().nll;
        let gen = GenerativeParams::from_linear_system(&sys).unwrap();
        let gated = RecognitionParams::new_gated(d, 2, 4, 500 + case as u64).unwrap();
        let exact = {
            let kal = kalman_exact(&sys.x_only(), &xs, &vec![vec![]; steps]).unwrap();
            RecognitionParams::tabular_from_kalman(&kal, &sys, 2).ok()
        };
        let t = 1 + steps / 2;
        for rec in std::iter::once(&gated).chain(exact.as_ref()) {
            let (mean, se) = mc_loss(&gen, rec, &bare_steps(&xs), &ys, t, 10_000, &mut rng);
            assert!(
                mean >= nll - 3.0 * se,
                "case {case}: averaged loss {mean} below exact NLL {nll} (SE {se})"
            );
        }
    }
}

#[test]
fn averaged_loss_gap_is_posterior_divergence() {
    let mut rng = seeded(403);
    let d = 2;
    let steps = 6;
    let t = 3;
    let sys = diag_sys(d, 0.8, 0.7, 1.1, 0.6, 0.9, 1.2);
    let (_, xs, ys) = sys.simulate(steps, &mut rng);
    let gen = GenerativeParams::from_linear_system(&sys).unwrap();
    let kal = kalman_exact(&sys.x_only(), &xs, &vec![vec![]; steps]).unwrap();
    let rec = RecognitionParams::tabular_from_kalman(&kal, &sys, d).unwrap();
    let (beliefs, smoothing) = tables(&rec);
    let q = q_joint(
        &sys,
        (&beliefs[t - 1].mean, &beliefs[t - 1].log_std),
        &smoothing,
        t,
        steps,
    );
    // Dual route: the recognition joint must equal the prior conditioned on
    // the first t feature observations.
    let q_direct = lgs_joint_posterior(&sys, &xs, &ys, t, 0);
    assert!(joint_kl(&q, &q_direct).abs() < 1e-9);
    assert!(joint_kl(&q_direct, &q).abs() < 1e-9);

    let posterior = lgs_joint_posterior(&sys, &xs, &ys, steps, steps);
    let gap = joint_kl(&q, &posterior);
    let nll = kalman_exact(&sys, &xs, &ys).unwrap().nll;
    let (mean, se) = mc_loss(&gen, &rec, &bare_steps(&xs), &ys, t, 10_000, &mut rng);
    assert!(
        (mean - nll - gap).abs() <= 3.0 * se,
        "averaged loss {mean} vs NLL {nll} + divergence {gap} (SE {se})"
    );
    assert!(gap > 0.0, "conditioning on y must tighten the posterior");
}

#[test]
fn moving_recognition_toward_posterior_reduces_divergence() {
    let mut rng = seeded(404);
    let d = 1;
    let steps = 5;
    let t = 3;
    let sys = diag_sys(d, 0.75, 0.8, 1.0, 0.5, 0.8, 0.9);
    let (_, xs, ys) = sys.simulate(steps, &mut rng);
    let gen = GenerativeParams::from_linear_system(&sys).unwrap();
    let kal = kalman_exact(&sys.x_only(), &xs, &vec![vec![]; steps]).unwrap();
    let exact = RecognitionParams::tabular_from_kalman(&kal, &sys, d).unwrap();
    let (b_exact, s_exact) = tables(&exact);
    let nll = kalman_exact(&sys, &xs, &ys).unwrap().nll;
    let posterior = lgs_joint_posterior(&sys, &xs, &ys, steps, steps);

    // Perturbed endpoint: shift every table entry by a fixed offset.
    let shift = |v: &[f64], by: f64| -> Vec<f64> { v.iter().map(|x| x + by).collect() };
    let lerp = |a: &[f64], b: &[f64], lam: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (1.0 - lam) * x + lam * y).collect()
    };

    // Common random numbers across every interpolation point.
    let draws: Vec<NoiseBundle> = (0..4000)
        .map(|_| NoiseBundle::standard(steps, d, &mut rng))
        .collect();
    let xs_steps = bare_steps(&xs);

    let mut losses = Vec::new();
    let mut divergences = Vec::new();
    for i in 0..10 {
        let lam = i as f64 / 9.0;
        let beliefs: Vec<DiagGaussian> = b_exact
            .iter()
            .map(|g| {
                DiagGaussian::new(
                    lerp(&shift(&g.mean, 0.9), &g.mean, lam),
                    lerp(&shift(&g.log_std, 0.5), &g.log_std, lam),
                )
                .unwrap()
            })
            .collect();
        let smoothing = TabularSmoothing {
            gain: s_exact.iter().map(|(g, _, _)| lerp(&shift(g, 0.3), g, lam)).collect(),
            offset: s_exact.iter().map(|(_, o, _)| lerp(&shift(o, 0.6), o, lam)).collect(),
            log_std: s_exact.iter().map(|(_, _, s)| lerp(&shift(s, 0.4), s, lam)).collect(),
        };
        let rec = RecognitionParams::tabular(beliefs.clone(), smoothing.clone(), d, d).unwrap();
        let smooth_tuples: SmoothTables = smoothing
            .gain
            .iter()
            .zip(&smoothing.offset)
            .zip(&smoothing.log_std)
            .map(|((g, o), s)| (g.clone(), o.clone(), s.clone()))
            .collect();
        let q = q_joint(
            &sys,
            (&beliefs[t - 1].mean, &beliefs[t - 1].log_std),
            &smooth_tuples,
            t,
            steps,
        );
        let div = joint_kl(&q, &posterior);

        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for noise in &draws {
            let v = lpvae_loss(&gen, &rec, &xs_steps, &ys, t, noise).unwrap().total;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws.len() as f64;
        let se = ((sum_sq / draws.len() as f64 - mean * mean).max(0.0) / draws.len() as f64).sqrt();
        assert!(
            (mean - nll - div).abs() <= 3.0 * se + 1e-6,
            "point {i}: loss {mean} vs NLL {nll} + divergence {div} (SE {se})"
        );
        losses.push(mean);
        divergences.push(div);
    }
    // The exact end still carries the irreducible predictability gap, so the
    // divergence falls toward a positive floor rather than zero.
    assert!(losses[9] < losses[0], "loss must fall toward the exact posterior");
    assert!(divergences[9] < divergences[0], "divergence must shrink");
    for i in 1..10 {
        if losses[i] < losses[i - 1] - 1e-6 {
            assert!(
                divergences[i] <= divergences[i - 1] + 1e-9,
                "point {i}: loss fell {} -> {} but divergence rose {} -> {}",
                losses[i - 1],
                losses[i],
                divergences[i - 1],
                divergences[i]
            );
        }
    }
}

#[test]
fn training_reaches_fitted_reference_bound() {
    let mut rng = seeded(405);
    let steps = 6;
    let sys_true = diag_sys(2, 0.85, 0.6, 1.0, 0.5, 0.0, 1.0);
    let (_, xs, _) = sys_true.simulate(steps, &mut rng);
    let ys = vec![vec![0.0; 2]; steps];
    let data = vec![TrainingSequence { xs: bare_steps(&xs), ys: ys.clone() }];

    let sys_init = diag_sys(2, 0.5, 1.0, 0.7, 0.8, 0.0, 1.0);
    let gen0 = GenerativeParams::from_linear_system(&sys_init).unwrap();
    let kal0 = kalman_exact(&sys_init.x_only(), &xs, &vec![vec![]; steps]).unwrap();
    let rec0 = RecognitionParams::tabular_from_kalman(&kal0, &sys_init, 2).unwrap();

    let (gen_fit, rec_fit, trace) = train_toy(&gen0, &rec0, &data, 500, 0.02, 17).unwrap();
    assert_eq!(trace.len(), 500);
    let head: f64 = trace[..100].iter().map(|b| b.total).sum::<f64>() / 100.0;
    let tail: f64 = trace[400..].iter().map(|b| b.total).sum::<f64>() / 100.0;
    assert!(tail < head, "training trend: first window {head}, last window {tail}");

    // The fitted model is still linear-Gaussian, so the averaged loss must
    // sit at the fitted reference NLL plus the fitted recognition divergence.
    let sys_fit = gen_fit.to_linear_system().unwrap();
    let nll = kalman_exact(&sys_fit, &xs, &ys).unwrap().nll;
    let t = 3;
    let (beliefs, smoothing) = tables(&rec_fit);
    let q = q_joint(
        &sys_fit,
        (&beliefs[t - 1].mean, &beliefs[t - 1].log_std),
        &smoothing,
        t,
        steps,
    );
    let posterior = lgs_joint_posterior(&sys_fit, &xs, &ys, steps, steps);
    let gap = joint_kl(&q, &posterior);
    let target = nll + gap;
    let (mean, _) = mc_loss(&gen_fit, &rec_fit, &bare_steps(&xs), &ys, t, 10_000, &mut rng);
    assert!(
        (mean - target).abs() <= 0.1 * target.abs(),
        "averaged loss {mean} vs fitted bound {target} (NLL {nll}, divergence {gap})"
    );
}

#[test]
fn jumpy_loss_descends_under_gradient_steps() {
    let gen0 = GenerativeParams::new_gated(2, 2, 1, 406).unwrap();
    let rec0 = RecognitionParams::new_gated(2, 2, 4, 407).unwrap();
    let xs = bare_steps(&[
        vec![0.5, -0.3],
        vec![0.8, 0.1],
        vec![-0.2, 0.4],
        vec![0.1, 0.9],
    ]);
    let mut rng = seeded(408);
    let batch: Vec<NoiseBundle> = (0..8)
        .map(|_| NoiseBundle::standard(4, 2, &mut rng))
        .collect();
    let mut gen = gen0.flat();
    let mut rec = rec0.flat();
    let mut g = gen0.clone();
    let mut r = rec0.clone();
    let mut trace = Vec::new();
    for _ in 0..200 {
        g.set_flat(&gen).unwrap();
        r.set_flat(&rec).unwrap();
        let mut loss = 0.0;
        let mut gg = vec![0.0; gen.len()];
        let mut rg = vec![0.0; rec.len()];
        for noise in &batch {
            let (v, dg, dr) = tdvae_jumpy_loss_grad(&g, &r, &xs, 1, 2, noise).unwrap();
            loss += v / batch.len() as f64;
            for (acc, d) in gg.iter_mut().zip(&dg) {
                *acc += d / batch.len() as f64;
            }
            for (acc, d) in rg.iter_mut().zip(&dr) {
                *acc += d / batch.len() as f64;
            }
        }
        assert!(loss.is_finite(), "loss diverged");
        trace.push(loss);
        for (p, d) in gen.iter_mut().zip(&gg) {
            *p -= 0.005 * d;
        }
        for (p, d) in rec.iter_mut().zip(&rg) {
            *p -= 0.005 * d;
        }
    }
    assert!(
        trace[199] < trace[0],
        "no descent: start {} end {}",
        trace[0],
        trace[199]
    );
    let early: f64 = trace[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = trace[180..].iter().sum::<f64>() / 20.0;
    assert!(late < early, "windowed trend: early {early}, late {late}");
}

fn grad_case(
    name: &str,
    gen0: &GenerativeParams,
    rec0: &RecognitionParams,
    loss: impl Fn(&GenerativeParams, &RecognitionParams) -> (f64, Vec<f64>, Vec<f64>),
) {
    let gen_len = gen0.flat().len();
    let mut flat = gen0.flat();
    flat.extend(rec0.flat());
    let eval = |v: &[f64]| -> f64 {
        let mut g = gen0.clone();
        let mut r = rec0.clone();
        g.set_flat(&v[..gen_len]).unwrap();
        r.set_flat(&v[gen_len..]).unwrap();
        loss(&g, &r).0
    };
    let (_, gg, rg) = loss(gen0, rec0);
    let mut analytic = gg;
    analytic.extend(rg);
    let numeric = central_grad(eval, &flat, 1e-5);
    let err = max_relative_error(&analytic, &numeric, 1e-5);
    assert!(err < 1e-4, "{name}: max relative gradient error {err}");
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let d = 2;
    let nx = 3;
    let ny = 4;
    let steps = 4;
    let gen = GenerativeParams::new_gated(d, nx, ny, 410).unwrap();
    let rec = RecognitionParams::new_gated(d, nx, 4, 411).unwrap();
    let mut rng = seeded(412);
    let xs: Vec<ObsStep> = (0..steps)
        .map(|_| {
            ObsStep {
                features: (0..nx).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                motion: [0.3, -0.2, 0.1],
                controls: [0.5, 0.0, -0.4],
            }
        })
        .collect();
    let ys: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..ny).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let noise = NoiseBundle::standard(steps, d, &mut rng);

    grad_case("lpvae", &gen, &rec, |g, r| {
        let (b, gg, rg) = lpvae_loss_grad(g, r, &xs, &ys, 2, &noise).unwrap();
        (b.total, gg, rg)
    });
    grad_case("stdvae", &gen, &rec, |g, r| {
        stdvae_loss_grad(g, r, &xs, 2, &noise).unwrap()
    });
    grad_case("tdvae", &gen, &rec, |g, r| {
        tdvae_jumpy_loss_grad(g, r, &xs, 1, 2, &noise).unwrap()
    });

    let masks: Vec<Vec<f64>> = (0..steps - 1)
        .map(|_| (0..ny).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let actions = vec![
        BoundingBoxAction { u: 0.2, v: 0.3, w: 0.4, h: 0.5 },
        BoundingBoxAction::BROADCAST,
        BoundingBoxAction::EMPTY,
    ];
    grad_case("lpvae_action", &gen, &rec, |g, r| {
        let (b, gg, rg) =
            lpvae_action_loss_grad(g, r, &xs, &ys, &masks, &actions, 2, &noise).unwrap();
        (b.total, gg, rg)
    });

    // Class-entropy emission objective.
    let ny_ce = NUM_CHANNELS * 2;
    let mut gen_ce = GenerativeParams::new_gated(d, nx, ny_ce, 413).unwrap();
    gen_ce.y_objective = EmissionObjective::WeightedClassEntropy { weights: DEFAULT_CLASS_WEIGHTS };
    let ys_ce: Vec<Vec<f64>> = (0..steps)
        .map(|_| {
            let mut row = vec![0.0; ny_ce];
            for block in 0..2 {
                let ch = rng.gen_range(0..NUM_CHANNELS);
                let ignorance = rng.gen_range(0.0..0.6);
                row[ch * 2 + block] = 1.0 - ignorance;
                row[(NUM_CHANNELS - 1) * 2 + block] += ignorance;
            }
            row
        })
        .collect();
    grad_case("lpvae_class_entropy", &gen_ce, &rec, |g, r| {
        let (b, gg, rg) = lpvae_loss_grad(g, r, &xs, &ys_ce, 3, &noise).unwrap();
        (b.total, gg, rg)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn divergence_nonnegative(
        mean_q in prop::collection::vec(-3.0f64..3.0, 1..5),
        shift in prop::collection::vec(-2.0f64..2.0, 1..5),
        spread_q in prop::collection::vec(-1.5f64..1.5, 1..5),
        spread_p in prop::collection::vec(-1.5f64..1.5, 1..5),
    ) {
        let dim = mean_q.len().min(shift.len()).min(spread_q.len()).min(spread_p.len());
        let q = DiagGaussian::new(mean_q[..dim].to_vec(), spread_q[..dim].to_vec()).unwrap();
        let mean_p: Vec<f64> = (0..dim).map(|i| mean_q[i] + shift[i]).collect();
        let p = DiagGaussian::new(mean_p, spread_p[..dim].to_vec()).unwrap();
        let kl = coopgrid::vae::kl_diag(&q, &p).unwrap();
        prop_assert!(kl >= -1e-12, "divergence {kl} negative");
        prop_assert_eq!(coopgrid::vae::kl_diag(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn divergence_zero_only_at_equality(
        mean in prop::collection::vec(-3.0f64..3.0, 1..5),
        spread in prop::collection::vec(-1.5f64..1.5, 1..5),
        delta in 1e-3f64..1.0,
        coord in 0usize..5,
    ) {
        let dim = mean.len().min(spread.len());
        let q = DiagGaussian::new(mean[..dim].to_vec(), spread[..dim].to_vec()).unwrap();
        let mut shifted = q.clone();
        shifted.mean[coord % dim] += delta;
        let kl = coopgrid::vae::kl_diag(&shifted, &q).unwrap();
        prop_assert!(kl > 1e-9, "distinct inputs gave divergence {kl}");
    }
}
