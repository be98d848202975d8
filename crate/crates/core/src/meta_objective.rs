//! The post-update objective `f̃(w) = f(w - α∇f̂(w))` and its gradients.

use crate::adaptation::DIVERGENCE_LIMIT;
use crate::error::{Error, Result};
use crate::models::{avg_loss_and_grad, avg_loss_grad, loss_hvp, LossKind, Model};
use crate::numerics::{ensure_finite, ensure_same_dim, Matrix, Rng, Vector};
use crate::tasks::{minibatch, Dataset, Objective, QuadraticTask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaGradConfig {
    pub alpha: f64,
    pub n_grad: usize,
    pub train_batch: usize,
    pub val_batch: usize,
    /// Drop the second-order terms of the backward pass.
    pub first_order: bool,
}

impl Default for MetaGradConfig {
    fn default() -> Self {
        Self { alpha: 0.1, n_grad: 5, train_batch: 10, val_batch: 10, first_order: false }
    }
}

impl MetaGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.n_grad == 0 {
            return Err(Error::param("n_grad must be at least 1"));
        }
        if self.train_batch == 0 || self.val_batch == 0 {
            return Err(Error::param("train and val batch sizes must be at least 1"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must be positive, got {alpha}")))
    }
}

/// `f(w - α∇f̂(w))`.
pub fn post_update_loss(f: &dyn Objective, f_hat: &dyn Objective, w: &Vector, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    ensure_same_dim(f.dim(), f_hat.dim(), "post_update_loss objectives")?;
    let g = f_hat.grad(w)?;
    ensure_finite(&g, "inner gradient")?;
    let v = f.value(&(w - g * alpha))?;
    if !v.is_finite() {
        return Err(Error::numeric("post_update_loss is not finite"));
    }
    Ok(v)
}

/// Chain rule `(I - α∇²f̂(w)) ∇f(U(w))` for general objectives.
pub fn post_update_grad(f: &dyn Objective, f_hat: &dyn Objective, w: &Vector, alpha: f64) -> Result<Vector> {
    check_alpha(alpha)?;
    let adapted = w - f_hat.grad(w)? * alpha;
    let outer = f.grad(&adapted)?;
    let g = &outer - f_hat.hvp(w, &outer)? * alpha;
    ensure_finite(&g, "post_update_grad")?;
    Ok(g)
}

/// The self-adapted quadratic `f(w - α∇f(w))` as an objective in its own right.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAdapted {
    pub task: QuadraticTask,
    pub alpha: f64,
}

impl Objective for SelfAdapted {
    fn dim(&self) -> usize {
        self.task.b.len()
    }

    fn value(&self, w: &Vector) -> Result<f64> {
        post_update_loss(&self.task, &self.task, w, self.alpha)
    }

    fn grad(&self, w: &Vector) -> Result<Vector> {
        meta_grad_quadratic(&self.task, w, self.alpha)
    }

    fn hvp(&self, _w: &Vector, v: &Vector) -> Result<Vector> {
        ensure_same_dim(v.len(), self.dim(), "SelfAdapted::hvp")?;
        Ok(post_update_hessian_quadratic(&self.task, self.alpha)? * v)
    }
}

fn step_matrix(task: &QuadraticTask, alpha: f64) -> Matrix {
    let d = task.b.len();
    Matrix::identity(d, d) - &task.a * alpha
}

/// `(I - αA)A(I - αA)w + (I - αA)²b` for `f = f̂` quadratic.
pub fn meta_grad_quadratic(task: &QuadraticTask, w: &Vector, alpha: f64) -> Result<Vector> {
    check_alpha(alpha)?;
    ensure_same_dim(w.len(), task.b.len(), "meta_grad_quadratic")?;
    let m = step_matrix(task, alpha);
    let mw = &m * w;
    let mb = &m * &task.b;
    Ok(&m * (&task.a * mw) + &m * mb)
}

/// The constant Hessian `(I - αA)A(I - αA)` of the self-adapted quadratic.
/// `alpha = 0` is accepted and returns `A`.
pub fn post_update_hessian_quadratic(task: &QuadraticTask, alpha: f64) -> Result<Matrix> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be non-negative, got {alpha}")));
    }
    let m = step_matrix(task, alpha);
    let h = &m * &task.a * &m;
    Ok((&h + h.transpose()) * 0.5)
}

/// Gradient of `L(val, U(w))` where `U` takes `n_grad` steps on `L(train, ·)`.
/// The minibatches are fixed, so this is a deterministic function of `w`.
#[allow(clippy::too_many_arguments)]
pub fn meta_grad_on_batches(
    model: &dyn Model,
    loss: LossKind,
    train: &Dataset,
    val: &Dataset,
    w: &Vector,
    alpha: f64,
    n_grad: usize,
    first_order: bool,
) -> Result<Vector> {
    check_alpha(alpha)?;
    if n_grad == 0 {
        return Err(Error::param("n_grad must be at least 1"));
    }
    let mut trajectory = Vec::with_capacity(n_grad + 1);
    trajectory.push(w.clone());
    for iteration in 0..n_grad {
        let cur = &trajectory[iteration];
        let (l, g) = avg_loss_and_grad(model, loss, train, cur)?;
        if !l.is_finite() || l > DIVERGENCE_LIMIT || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration, detail: format!("meta inner loss {l:e}") });
        }
        trajectory.push(cur - g * alpha);
    }
    let mut g = avg_loss_grad(model, loss, val, &trajectory[n_grad])?;
    ensure_finite(&g, "validation gradient")?;
    if !first_order {
        for k in (0..n_grad).rev() {
            if g.norm() == 0.0 {
                break;
            }
            let hg = loss_hvp(model, loss, train, &trajectory[k], &g)?;
            g -= hg * alpha;
        }
    }
    ensure_finite(&g, "meta-gradient")?;
    Ok(g)
}

/// `L(val, U(w))` with `U` taking `n_grad` steps on `L(train, ·)`.
pub fn frozen_meta_objective(
    model: &dyn Model,
    loss: LossKind,
    train: &Dataset,
    val: &Dataset,
    w: &Vector,
    alpha: f64,
    n_grad: usize,
) -> Result<f64> {
    check_alpha(alpha)?;
    let mut cur = w.clone();
    for _ in 0..n_grad {
        cur -= avg_loss_grad(model, loss, train, &cur)? * alpha;
    }
    crate::models::avg_loss(model, loss, val, &cur)
}

/// Stochastic meta-gradient of one task: independent train and validation
/// minibatches drawn from `task_data`, then [`meta_grad_on_batches`].
pub fn practical_meta_grad(
    model: &dyn Model,
    loss: LossKind,
    task_data: &Dataset,
    w: &Vector,
    cfg: &MetaGradConfig,
    rng: &mut Rng,
) -> Result<Vector> {
    cfg.validate()?;
    let need = cfg.train_batch.max(cfg.val_batch);
    if task_data.len() < need {
        return Err(Error::state(format!(
            "task has {} points, meta-gradient batches need {need}",
            task_data.len()
        )));
    }
    let train = minibatch(task_data, cfg.train_batch, rng)?;
    let val = minibatch(task_data, cfg.val_batch, rng)?;
    meta_grad_on_batches(model, loss, &train, &val, w, cfg.alpha, cfg.n_grad, cfg.first_order)
}

fn check_weights(count: usize, weights: &[f64]) -> Result<()> {
    if count == 0 {
        return Err(Error::param("empty task list"));
    }
    ensure_same_dim(weights.len(), count, "task weights")?;
    if weights.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::param("task weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("task weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `Σ p_i f_i(w - α∇f_i(w))`.
pub fn maml_batch_objective<T: Objective>(tasks: &[T], weights: &[f64], w: &Vector, alpha: f64) -> Result<f64> {
    check_weights(tasks.len(), weights)?;
    let mut total = 0.0;
    for (t, &p) in tasks.iter().zip(weights) {
        total += p * post_update_loss(t, t, w, alpha)?;
    }
    Ok(total)
}

/// Gradient of [`maml_batch_objective`] for quadratic tasks.
pub fn maml_batch_grad(tasks: &[QuadraticTask], weights: &[f64], w: &Vector, alpha: f64) -> Result<Vector> {
    check_weights(tasks.len(), weights)?;
    let mut g = Vector::zeros(w.len());
    for (t, &p) in tasks.iter().zip(weights) {
        g += meta_grad_quadratic(t, w, alpha)? * p;
    }
    Ok(g)
}

pub fn uniform_weights(count: usize) -> Vec<f64> {
    vec![1.0 / count as f64; count]
}
