//! Inner adaptation maps `U_t`: gradient steps on a task's loss.

use crate::error::{Error, Result};
use crate::models::{avg_loss_and_grad, LossKind, Model};
use crate::numerics::{eig_extremes, ensure_finite, Rng, Vector};
use crate::tasks::{Dataset, QuadraticTask};

/// Inner descent aborts once the loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub alpha: f64,
    pub n_grad: usize,
    /// Minibatch size for meta-training inner steps; 0 uses all available data.
    pub inner_batch: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self { alpha: 0.1, n_grad: 5, inner_batch: 0 }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.n_grad == 0 {
            return Err(Error::param("n_grad must be at least 1"));
        }
        Ok(())
    }
}

/// `w - alpha * grad(w)`.
pub fn one_step<F>(w: &Vector, grad: F, alpha: f64) -> Result<Vector>
where
    F: FnOnce(&Vector) -> Result<Vector>,
{
    if !(alpha > 0.0) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    let g = grad(w)?;
    ensure_finite(&g, "one_step gradient")?;
    Ok(w - g * alpha)
}

/// One exact gradient step on a quadratic task.
pub fn quadratic_step(task: &QuadraticTask, w: &Vector, alpha: f64) -> Result<Vector> {
    one_step(w, |p| task.gradient(p), alpha)
}

/// `n_grad` full-batch gradient steps on the average loss over `data`.
pub fn multi_step(w: &Vector, data: &Dataset, model: &dyn Model, loss: LossKind, cfg: &UpdateConfig) -> Result<Vector> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::state("multi_step on an empty dataset"));
    }
    let mut cur = w.clone();
    for iteration in 0..cfg.n_grad {
        let (l, g) = avg_loss_and_grad(model, loss, data, &cur)?;
        if !l.is_finite() || l > DIVERGENCE_LIMIT || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                detail: format!("inner loss {l:e} with alpha {}", cfg.alpha),
            });
        }
        cur -= g * cfg.alpha;
    }
    Ok(cur)
}

/// `n_grad` exact gradient steps on a quadratic task.
pub fn multi_step_quadratic(task: &QuadraticTask, w: &Vector, alpha: f64, n_grad: usize) -> Result<Vector> {
    UpdateConfig { alpha, n_grad, inner_batch: 0 }.validate()?;
    let mut cur = w.clone();
    for iteration in 0..n_grad {
        let l = task.loss(&cur)?;
        if !l.is_finite() || l.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { iteration, detail: format!("quadratic loss {l:e}") });
        }
        cur = quadratic_step(task, &cur, alpha)?;
    }
    Ok(cur)
}

/// Largest step size for which the post-update objective stays strongly
/// convex: `min{1/(2β), μ/(8ρG)}`, the second term dropped when `ρG = 0`.
pub fn step_size_bound(mu: f64, beta: f64, rho: f64, g: f64) -> Result<f64> {
    if !(mu > 0.0) || !(beta > 0.0) {
        return Err(Error::param(format!("mu and beta must be positive, got {mu}, {beta}")));
    }
    if !(rho >= 0.0) || !(g >= 0.0) {
        return Err(Error::param(format!("rho and G must be non-negative, got {rho}, {g}")));
    }
    let smooth = 1.0 / (2.0 * beta);
    let hessian = rho * g;
    Ok(if hessian == 0.0 { smooth } else { smooth.min(mu / (8.0 * hessian)) })
}

fn check_contraction_alpha(task: &QuadraticTask, alpha: f64) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    if alpha > 1.0 / task.beta {
        return Err(Error::Precondition(format!(
            "alpha {alpha} exceeds 1/beta = {}",
            1.0 / task.beta
        )));
    }
    Ok(())
}

/// Lipschitz constant of one gradient step on a quadratic. The step is the
/// affine map `w ↦ (I - αA)w - αb`, so the supremum of the pair ratio is the
/// spectral norm `max |1 - αλ|` over eigenvalues of `A`.
pub fn contraction_factor(task: &QuadraticTask, alpha: f64) -> Result<f64> {
    check_contraction_alpha(task, alpha)?;
    let (lo, hi) = eig_extremes(&task.a)?;
    Ok((1.0 - alpha * lo).abs().max((1.0 - alpha * hi).abs()))
}

/// Pairwise contraction ratios of one gradient step on random point pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionAudit {
    pub pairs: usize,
    pub max_ratio: f64,
    pub min_ratio: f64,
    /// `1 - αμ` using the task's certified `mu`.
    pub upper_bound: f64,
    /// `1 - αβ` using the task's certified `beta`.
    pub lower_bound: f64,
    /// Largest `‖U(x)-U(y)‖ - upper·‖x-y‖` seen (negative means slack).
    pub worst_upper_excess: f64,
    /// Largest `lower·‖x-y‖ - ‖U(x)-U(y)‖` seen.
    pub worst_lower_excess: f64,
}

impl ContractionAudit {
    pub fn holds(&self, tol: f64) -> bool {
        self.worst_upper_excess <= tol && self.worst_lower_excess <= tol
    }
}

/// Samples `pairs` point pairs from a standard normal scaled by `scale` and
/// measures how one gradient step changes their distance.
pub fn contraction_audit(task: &QuadraticTask, alpha: f64, pairs: usize, scale: f64, rng: &mut Rng) -> Result<ContractionAudit> {
    check_contraction_alpha(task, alpha)?;
    if pairs == 0 {
        return Err(Error::param("contraction_audit needs at least one pair"));
    }
    let d = task.b.len();
    let upper = 1.0 - alpha * task.mu;
    let lower = 1.0 - alpha * task.beta;
    let mut audit = ContractionAudit {
        pairs,
        max_ratio: f64::NEG_INFINITY,
        min_ratio: f64::INFINITY,
        upper_bound: upper,
        lower_bound: lower,
        worst_upper_excess: f64::NEG_INFINITY,
        worst_lower_excess: f64::NEG_INFINITY,
    };
    for _ in 0..pairs {
        let x = rng.normal_vector(d) * scale;
        let y = rng.normal_vector(d) * scale;
        let gap = (&x - &y).norm();
        if gap == 0.0 {
            continue;
        }
        let mapped = (quadratic_step(task, &x, alpha)? - quadratic_step(task, &y, alpha)?).norm();
        let ratio = mapped / gap;
        audit.max_ratio = audit.max_ratio.max(ratio);
        audit.min_ratio = audit.min_ratio.min(ratio);
        audit.worst_upper_excess = audit.worst_upper_excess.max(mapped - upper * gap);
        audit.worst_lower_excess = audit.worst_lower_excess.max(lower * gap - mapped);
    }
    Ok(audit)
}
