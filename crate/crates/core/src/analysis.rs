//! Independent oracles: closed-form leaders, grid search, empirical
//! smoothness constants, log-T fitting, and the verification battery.

use std::fmt;

use crate::adaptation::{contraction_audit, quadratic_step, step_size_bound};
use crate::error::{Error, Result};
use crate::meta_objective::{
    frozen_meta_objective, maml_batch_objective, meta_grad_on_batches, meta_grad_quadratic,
    post_update_hessian_quadratic, post_update_loss, uniform_weights, SelfAdapted,
};
use crate::models::{LinearModel, LossKind, MlpModel, Model};
use crate::numerics::{eig_extremes, ensure_same_dim, finite_diff_grad, relative_error, solve_spd, symmetrize, Matrix, Rng, Vector};
use crate::tasks::{sinusoid_sample, Dataset, Objective, QuadraticTask, SinusoidTask};

/// Joint-training and MAML minimizers of a quadratic ensemble with the
/// averaged terms that define them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormSolutions {
    pub theta_joint: Vector,
    pub theta_maml: Vector,
    pub a_bar: Matrix,
    pub b_bar: Vector,
    pub a_dagger: Matrix,
    pub b_dagger: Vector,
    pub alpha: f64,
}

impl ClosedFormSolutions {
    pub fn compute(tasks: &[QuadraticTask], alpha: f64) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::param("closed forms need at least one task"))?;
        if !(alpha > 0.0) {
            return Err(Error::param(format!("alpha must be positive, got {alpha}")));
        }
        let d = first.b.len();
        let m = tasks.len() as f64;
        let (mut a_bar, mut b_bar) = (Matrix::zeros(d, d), Vector::zeros(d));
        let (mut a_dag, mut b_dag) = (Matrix::zeros(d, d), Vector::zeros(d));
        for t in tasks {
            ensure_same_dim(t.b.len(), d, "closed-form ensemble")?;
            let step = Matrix::identity(d, d) - &t.a * alpha;
            let sq = &step * &step;
            a_bar += &t.a / m;
            b_bar += &t.b / m;
            a_dag += &sq * &t.a / m;
            b_dag += &sq * &t.b / m;
        }
        let a_dag = symmetrize(&a_dag);
        let theta_joint = -solve_spd(&a_bar, &b_bar)?;
        let theta_maml = -solve_spd(&a_dag, &b_dag)?;
        Ok(Self { theta_joint, theta_maml, a_bar, b_bar, a_dagger: a_dag, b_dagger: b_dag, alpha })
    }
}

/// `-(mean A_i)⁻¹ (mean b_i)`.
pub fn joint_closed_form(tasks: &[QuadraticTask]) -> Result<Vector> {
    // alpha only enters the MAML half, any positive value will do.
    Ok(ClosedFormSolutions::compute(tasks, 1e-3)?.theta_joint)
}

/// `-A†⁻¹ b†` with `A† = mean (I - αA_i)²A_i`, `b† = mean (I - αA_i)²b_i`.
pub fn maml_closed_form(tasks: &[QuadraticTask], alpha: f64) -> Result<Vector> {
    Ok(ClosedFormSolutions::compute(tasks, alpha)?.theta_maml)
}

/// Exhaustive grid scan over a box in one or two dimensions. Ties keep the
/// first point scanned, so a constant function returns the lower corner.
pub fn brute_force_min<F>(f: F, bounds: &[(f64, f64)], resolution: f64) -> Result<(Vector, f64)>
where
    F: Fn(&Vector) -> f64,
{
    if bounds.is_empty() || bounds.len() > 2 {
        return Err(Error::Unsupported(format!("grid search in {} dimensions", bounds.len())));
    }
    if !(resolution > 0.0) {
        return Err(Error::param("grid resolution must be positive"));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let steps = ((hi - lo) / resolution + 1e-9).floor() as usize;
            (0..=steps).map(|k| lo + k as f64 * resolution).collect()
        })
        .collect();
    let mut best = (Vector::zeros(bounds.len()), f64::INFINITY);
    let mut visit = |p: Vector| {
        let v = f(&p);
        if v < best.1 {
            best = (p, v);
        }
    };
    match axes.as_slice() {
        [xs] => xs.iter().for_each(|&x| visit(Vector::from_element(1, x))),
        [xs, ys] => {
            for &x in xs {
                for &y in ys {
                    visit(Vector::from_vec(vec![x, y]));
                }
            }
        }
        _ => unreachable!(),
    }
    if !best.1.is_finite() {
        return Err(Error::numeric("grid search found no finite value"));
    }
    Ok(best)
}

/// Empirical constants of an objective over a ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothnessProfile {
    pub g_hat: f64,
    pub beta_hat: f64,
    pub mu_hat: f64,
    pub rho_hat: f64,
}

/// Dimensions up to this also contribute exact local Hessian spectra.
const MATERIALIZE_LIMIT: usize = 64;

fn ball_point(center: &Vector, radius: f64, rng: &mut Rng) -> Vector {
    let d = center.len();
    let dir = rng.normal_vector(d);
    let n = dir.norm().max(f64::MIN_POSITIVE);
    let r = radius * rng.uniform(0.0, 1.0).powf(1.0 / d as f64);
    center + dir * (r / n)
}

fn local_spectrum(f: &dyn Objective, x: &Vector) -> Result<(f64, f64)> {
    let d = x.len();
    let mut h = Matrix::zeros(d, d);
    for i in 0..d {
        let col = f.hvp(x, &Vector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 }))?;
        h.set_column(i, &col);
    }
    eig_extremes(&symmetrize(&h))
}

/// Samples `samples` point pairs in the ball of `radius` around `center`.
/// `beta_hat` and `mu_hat` are the extreme gradient-difference ratios, also
/// widened by local Hessian spectra when the dimension is small.
pub fn estimate_profile(f: &dyn Objective, center: &Vector, radius: f64, samples: usize, rng: &mut Rng) -> Result<SmoothnessProfile> {
    if samples < 2 {
        return Err(Error::param("estimate_profile needs at least 2 samples"));
    }
    if !(radius > 0.0) {
        return Err(Error::param("domain radius must be positive"));
    }
    ensure_same_dim(center.len(), f.dim(), "profile center")?;
    let d = center.len();
    let mut p = SmoothnessProfile { g_hat: 0.0, beta_hat: 0.0, mu_hat: f64::INFINITY, rho_hat: 0.0 };
    for _ in 0..samples {
        let x = ball_point(center, radius, rng);
        let mut y = ball_point(center, radius, rng);
        while (&x - &y).norm() == 0.0 {
            y = ball_point(center, radius, rng);
        }
        let gap = (&x - &y).norm();
        let (gx, gy) = (f.grad(&x)?, f.grad(&y)?);
        p.g_hat = p.g_hat.max(gx.norm()).max(gy.norm());
        let ratio = (&gx - &gy).norm() / gap;
        p.beta_hat = p.beta_hat.max(ratio);
        p.mu_hat = p.mu_hat.min(ratio);
        let v = rng.normal_vector(d);
        let hv = (f.hvp(&x, &v)? - f.hvp(&y, &v)?).norm();
        p.rho_hat = p.rho_hat.max(hv / (gap * v.norm()));
        if d <= MATERIALIZE_LIMIT {
            let (lo, hi) = local_spectrum(f, &x)?;
            p.mu_hat = p.mu_hat.min(lo);
            p.beta_hat = p.beta_hat.max(hi);
        }
    }
    Ok(p)
}

/// Least-squares fit of `regret ≈ c·ln T` through the origin. Returns `c` and
/// the residual norm relative to the norm of the regrets.
pub fn logt_fit(curve: &[(f64, f64)]) -> Result<(f64, f64)> {
    if curve.len() < 3 {
        return Err(Error::param(format!("log-T fit needs at least 3 points, got {}", curve.len())));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) || curve[0].0 <= 1.0 {
        return Err(Error::param("log-T fit needs strictly increasing horizons above 1"));
    }
    let (sxy, sxx) = curve.iter().fold((0.0, 0.0), |(sxy, sxx), &(t, r)| {
        let x = t.ln();
        (sxy + x * r, sxx + x * x)
    });
    let c = sxy / sxx;
    let resid: f64 = curve.iter().map(|&(t, r)| (r - c * t.ln()).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = curve.iter().map(|&(_, r)| r * r).sum::<f64>().sqrt();
    Ok((c, if scale == 0.0 { 0.0 } else { resid / scale }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Skip => "skip",
        })
    }
}

/// One row of the verification report. `margin` is positive when the bound
/// holds with room to spare.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub bound: f64,
    pub measured: Option<f64>,
    pub margin: Option<f64>,
    pub status: CheckStatus,
    pub note: String,
}

impl CheckRow {
    /// `measured <= bound + tol`.
    fn at_most(check: &str, bound: f64, measured: f64, tol: f64) -> Self {
        let margin = bound - measured;
        Self::judged(check, bound, measured, margin, margin >= -tol)
    }

    /// `measured >= bound - tol`.
    fn at_least(check: &str, bound: f64, measured: f64, tol: f64) -> Self {
        let margin = measured - bound;
        Self::judged(check, bound, measured, margin, margin >= -tol)
    }

    fn judged(check: &str, bound: f64, measured: f64, margin: f64, ok: bool) -> Self {
        Self {
            check: check.into(),
            bound,
            measured: Some(measured),
            margin: Some(margin),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            note: String::new(),
        }
    }

    fn skipped(check: &str, bound: f64, note: impl Into<String>) -> Self {
        Self { check: check.into(), bound, measured: None, margin: None, status: CheckStatus::Skip, note: note.into() }
    }

    /// Family name: the part of the check name before the first underscore.
    pub fn family(&self) -> &str {
        self.check.split('_').next().unwrap_or(&self.check)
    }
}

/// Parameters of the verification battery.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub dim: usize,
    pub mu: f64,
    pub beta: f64,
    /// Inner step size; `None` uses the step-size bound for quadratics.
    pub alpha: Option<f64>,
    pub tasks: usize,
    pub pairs: usize,
    pub gradient_configs: usize,
    pub seed: u64,
    /// Check the bounds even when alpha is past the step-size bound.
    pub force: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { dim: 3, mu: 0.5, beta: 2.0, alpha: None, tasks: 20, pairs: 100, gradient_configs: 20, seed: 0, force: false }
    }
}

const TOL: f64 = 1e-9;

fn curvature_rows(cfg: &VerifyConfig, alpha: f64, tasks: &[QuadraticTask], admissible: bool) -> Result<Vec<CheckRow>> {
    let (mu, beta) = (cfg.mu, cfg.beta);
    let names = [
        ("curvature_lower", mu / 8.0),
        ("curvature_upper", 9.0 * beta / 8.0),
        ("curvature_tight_lower", (1.0 - alpha * beta).powi(2) * mu),
        ("curvature_tight_upper", (1.0 - alpha * mu).powi(2) * beta),
    ];
    if !admissible {
        return Ok(names
            .iter()
            .map(|&(n, b)| CheckRow::skipped(n, b, format!("alpha {alpha} exceeds the step-size bound")))
            .collect());
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in tasks {
        let (l, h) = eig_extremes(&post_update_hessian_quadratic(t, alpha)?)?;
        lo = lo.min(l);
        hi = hi.max(h);
    }
    Ok(vec![
        CheckRow::at_least(names[0].0, names[0].1, lo, TOL),
        CheckRow::at_most(names[1].0, names[1].1, hi, TOL),
        CheckRow::at_least(names[2].0, names[2].1, lo, TOL),
        CheckRow::at_most(names[3].0, names[3].1, hi, TOL),
    ])
}

fn profile_rows(cfg: &VerifyConfig, alpha: f64, tasks: &[QuadraticTask], admissible: bool, rng: &mut Rng) -> Result<Vec<CheckRow>> {
    let (mu, beta) = (cfg.mu, cfg.beta);
    if !admissible {
        return Ok(vec![
            CheckRow::skipped("profile_mu", mu / 8.0, "alpha exceeds the step-size bound"),
            CheckRow::skipped("profile_beta", 9.0 * beta / 8.0, "alpha exceeds the step-size bound"),
        ]);
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for t in tasks {
        let f = SelfAdapted { task: t.clone(), alpha };
        let p = estimate_profile(&f, &Vector::zeros(cfg.dim), 10.0, 20, rng)?;
        lo = lo.min(p.mu_hat);
        hi = hi.max(p.beta_hat);
    }
    Ok(vec![
        CheckRow::at_least("profile_mu", mu / 8.0, lo, 1e-6),
        CheckRow::at_most("profile_beta", 9.0 * beta / 8.0, hi, 1e-6),
    ])
}

fn convexity_row(cfg: &VerifyConfig, alpha: f64, tasks: &[QuadraticTask], admissible: bool, rng: &mut Rng) -> Result<CheckRow> {
    if !admissible {
        return Ok(CheckRow::skipped("convexity_line", 0.0, "alpha exceeds the step-size bound"));
    }
    let w = uniform_weights(tasks.len());
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let x = rng.normal_vector(cfg.dim) * 5.0;
        let y = rng.normal_vector(cfg.dim) * 5.0;
        let lam = rng.uniform(0.0, 1.0);
        let mid = &x * lam + &y * (1.0 - lam);
        let f = |v: &Vector| maml_batch_objective(tasks, &w, v, alpha);
        worst = worst.max(f(&mid)? - (lam * f(&x)? + (1.0 - lam) * f(&y)?));
    }
    Ok(CheckRow::at_most("convexity_line", 0.0, worst, TOL))
}

fn closed_form_rows() -> Result<Vec<CheckRow>> {
    let tasks = [QuadraticTask::scalar(1.0, -1.0)?, QuadraticTask::scalar(3.0, -1.0)?];
    let alpha = 0.1;
    let sol = ClosedFormSolutions::compute(&tasks, alpha)?;
    let joint_grid = brute_force_min(|w| tasks.iter().map(|t| t.loss(w).unwrap_or(f64::NAN)).sum(), &[(-1.0, 2.0)], 1e-3)?.0;
    let w = uniform_weights(2);
    let maml_grid = brute_force_min(|v| maml_batch_objective(&tasks, &w, v, alpha).unwrap_or(f64::NAN), &[(-1.0, 2.0)], 1e-3)?.0;

    let mut equal = Rng::new(11);
    let a = equal.uniform(0.5, 2.0);
    let same = [QuadraticTask::scalar(a, -1.0)?, QuadraticTask::scalar(a, 0.5)?];
    let coincide = ClosedFormSolutions::compute(&same, alpha)?;

    Ok(vec![
        CheckRow::at_most("closedform_joint_grid", 1e-3, (&sol.theta_joint - joint_grid).amax(), 0.0),
        CheckRow::at_most("closedform_maml_grid", 1e-3, (&sol.theta_maml - maml_grid).amax(), 0.0),
        CheckRow::at_least("closedform_separation", 1e-6, (&sol.theta_joint - &sol.theta_maml).amax(), 0.0),
        CheckRow::at_most("closedform_coincide", 1e-10, (&coincide.theta_joint - &coincide.theta_maml).amax(), 0.0),
    ])
}

fn ordering_row(cfg: &VerifyConfig, tasks: &[QuadraticTask], rng: &mut Rng) -> Result<CheckRow> {
    let alpha = step_size_bound(cfg.mu, cfg.beta, 0.0, 0.0)?;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let picked: Vec<QuadraticTask> = (0..4).map(|_| tasks[rng.below(tasks.len())].clone()).collect();
        let sol = ClosedFormSolutions::compute(&picked, alpha)?;
        let post = |w: &Vector| -> Result<f64> {
            let mut s = 0.0;
            for t in &picked {
                s += t.loss(&quadratic_step(t, w, alpha)?)?;
            }
            Ok(s / picked.len() as f64)
        };
        worst = worst.max(post(&sol.theta_maml)? - post(&sol.theta_joint)?);
    }
    Ok(CheckRow::at_most("ordering_maml_vs_joint", 0.0, worst, 1e-10))
}

fn contraction_rows(cfg: &VerifyConfig, alpha: f64, tasks: &[QuadraticTask], rng: &mut Rng) -> Result<Vec<CheckRow>> {
    let (mut upper, mut lower) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in tasks {
        match contraction_audit(t, alpha, cfg.pairs, 3.0, rng) {
            Ok(a) => {
                upper = upper.max(a.worst_upper_excess);
                lower = lower.max(a.worst_lower_excess);
            }
            Err(Error::Precondition(msg)) => {
                return Ok(vec![
                    CheckRow::skipped("contraction_upper", 0.0, msg.clone()),
                    CheckRow::skipped("contraction_lower", 0.0, msg),
                ]);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(vec![
        CheckRow::at_most("contraction_upper", 0.0, upper, TOL),
        CheckRow::at_most("contraction_lower", 0.0, lower, TOL),
    ])
}

/// Worst relative error of analytic meta-gradients against central
/// differences, for quadratics, least squares, and a small MLP.
pub fn gradient_check_errors(configs: usize, seed: u64) -> Result<[f64; 3]> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..configs {
        let d = 1 + rng.below(4);
        let q = QuadraticTask::sample(d, 0.3, 3.0, &mut rng)?;
        let alpha = rng.uniform(0.01, 1.0 / q.beta);
        let w = rng.normal_vector(d);
        let an = meta_grad_quadratic(&q, &w, alpha)?;
        let fd = finite_diff_grad(|p| post_update_loss(&q, &q, p, alpha).unwrap_or(f64::NAN), &w, 1e-5)?;
        worst[0] = worst[0].max(relative_error(&an, &fd, 1e-8));

        let lin = LinearModel::new(1 + rng.below(3), 1)?;
        let (train, val) = (regression_data(&mut rng, 12, lin.in_dim), regression_data(&mut rng, 12, lin.in_dim));
        worst[1] = worst[1].max(meta_fd_error(&lin, &train?, &val?, rng.uniform(0.01, 0.1), 1 + rng.below(3), &mut rng)?);

        let mlp = MlpModel::new(vec![1, 16, 16, 1])?;
        let task = SinusoidTask::new(rng.uniform(0.1, 5.0), rng.uniform(0.0, std::f64::consts::PI), (-5.0, 5.0), 0.0)?;
        let train = sinusoid_sample(&task, 10, 0, &mut rng)?;
        let val = sinusoid_sample(&task, 10, 0, &mut rng)?;
        worst[2] = worst[2].max(meta_fd_error(&mlp, &train, &val, rng.uniform(0.001, 0.01), 1 + rng.below(5), &mut rng)?);
    }
    Ok(worst)
}

fn regression_data(rng: &mut Rng, n: usize, p: usize) -> Result<Dataset> {
    let inputs = (0..n).map(|_| rng.normal_vector(p)).collect();
    let targets = (0..n).map(|_| rng.normal_vector(1)).collect();
    Dataset::new(inputs, targets, 0)
}

fn meta_fd_error(model: &dyn Model, train: &Dataset, val: &Dataset, alpha: f64, n_grad: usize, rng: &mut Rng) -> Result<f64> {
    let loss = LossKind::SquaredError;
    let w = model.init(rng);
    let an = meta_grad_on_batches(model, loss, train, val, &w, alpha, n_grad, false)?;
    let fd = finite_diff_grad(
        |p| frozen_meta_objective(model, loss, train, val, p, alpha, n_grad).unwrap_or(f64::NAN),
        &w,
        1e-5,
    )?;
    Ok(relative_error(&an, &fd, 1e-8))
}

/// Runs every check family and returns one row per check.
pub fn verify_battery(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    if cfg.dim == 0 || cfg.tasks == 0 || cfg.pairs == 0 {
        return Err(Error::param("verify: dim, tasks and pairs must be positive"));
    }
    let bound = step_size_bound(cfg.mu, cfg.beta, 0.0, 0.0)?;
    let alpha = cfg.alpha.unwrap_or(bound);
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("verify.alpha must be positive, got {alpha}")));
    }
    let admissible = alpha <= bound || cfg.force;
    let rng = Rng::new(cfg.seed);
    let mut task_rng = rng.child(0);
    let tasks: Vec<QuadraticTask> = (0..cfg.tasks)
        .map(|_| QuadraticTask::sample(cfg.dim, cfg.mu, cfg.beta, &mut task_rng))
        .collect::<Result<_>>()?;

    let mut rows = curvature_rows(cfg, alpha, &tasks, admissible)?;
    rows.extend(profile_rows(cfg, alpha, &tasks, admissible, &mut rng.child(1))?);
    rows.push(convexity_row(cfg, alpha, &tasks, admissible, &mut rng.child(2))?);
    rows.extend(closed_form_rows()?);
    rows.push(ordering_row(cfg, &tasks, &mut rng.child(3))?);
    rows.extend(contraction_rows(cfg, alpha, &tasks, &mut rng.child(4))?);
    let [quad, lin, mlp] = gradient_check_errors(cfg.gradient_configs, crate::numerics::child_seed(cfg.seed, 5))?;
    rows.push(CheckRow::at_most("gradient_quadratic", 1e-6, quad, 0.0));
    rows.push(CheckRow::at_most("gradient_linear", 1e-5, lin, 0.0));
    rows.push(CheckRow::at_most("gradient_mlp", 1e-3, mlp, 0.0));
    Ok(rows)
}
