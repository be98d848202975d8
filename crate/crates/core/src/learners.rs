//! Online learners: follow-the-meta-leader and the FTL / TOE / scratch
//! baselines, their outer optimizers, and regret bookkeeping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::adaptation::{multi_step, quadratic_step, UpdateConfig};
use crate::error::{Error, Result};
use crate::meta_objective::{meta_grad_quadratic, practical_meta_grad, MetaGradConfig};
use crate::models::{accuracy, avg_loss, avg_loss_grad, LossKind, Model};
use crate::numerics::{eig_extremes, ensure_finite, ensure_same_dim, solve_spd, Matrix, Rng, Vector};
use crate::tasks::{minibatch, Dataset, QuadraticTask, TaskBuffer, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LearnerKind {
    Ftml,
    FtlFinetune,
    Toe,
    Scratch,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 4] = [LearnerKind::Ftml, LearnerKind::FtlFinetune, LearnerKind::Toe, LearnerKind::Scratch];

    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Ftml => "FTML",
            LearnerKind::FtlFinetune => "FTL_finetune",
            LearnerKind::Toe => "TOE",
            LearnerKind::Scratch => "Scratch",
        }
    }

    /// Whether evaluation adapts to the current task before measuring loss.
    pub fn adapts(&self) -> bool {
        *self != LearnerKind::Toe
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ftml" => Ok(LearnerKind::Ftml),
            "ftl_finetune" | "ftl-finetune" | "ftl" => Ok(LearnerKind::FtlFinetune),
            "toe" => Ok(LearnerKind::Toe),
            "scratch" => Ok(LearnerKind::Scratch),
            _ => Err(Error::param(format!("unknown learner {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::param(format!("unknown optimizer {s:?}"))),
        }
    }
}

const MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer applied to meta-gradients and baseline gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    first: Vector,
    second: Vector,
    steps: i32,
}

impl OuterOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { kind, lr, first: Vector::zeros(dim), second: Vector::zeros(dim), steps: 0 })
    }

    pub fn reset(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.steps = 0;
    }

    pub fn step(&mut self, w: &mut Vector, g: &Vector) -> Result<()> {
        ensure_same_dim(w.len(), self.first.len(), "optimizer parameters")?;
        ensure_same_dim(g.len(), self.first.len(), "optimizer gradient")?;
        ensure_finite(g, "outer gradient")?;
        self.steps = self.steps.saturating_add(1);
        match self.kind {
            OptimizerKind::Sgd => w.axpy(-self.lr, g, 1.0),
            OptimizerKind::Momentum => {
                self.first = &self.first * MOMENTUM + g;
                w.axpy(-self.lr, &self.first, 1.0);
            }
            OptimizerKind::Adam => {
                self.first = &self.first * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
                self.second = &self.second * ADAM_BETA2 + g.component_mul(g) * (1.0 - ADAM_BETA2);
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                for i in 0..w.len() {
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    w[i] -= self.lr * m / (v.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Distribution over the tasks seen so far from which meta-updates sample.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplingDistribution {
    Uniform,
    /// Positive weights for tasks `1..`; renormalized over the tasks seen.
    Custom(Vec<f64>),
}

impl SamplingDistribution {
    /// Index into the first `seen` buffer entries.
    pub fn sample(&self, seen: usize, rng: &mut Rng) -> Result<usize> {
        if seen == 0 {
            return Err(Error::state("sampling from an empty task buffer"));
        }
        match self {
            SamplingDistribution::Uniform => Ok(rng.below(seen)),
            SamplingDistribution::Custom(weights) => {
                if weights.len() < seen {
                    return Err(Error::param(format!("{} sampling weights for {seen} tasks", weights.len())));
                }
                let head = &weights[..seen];
                if head.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                    return Err(Error::param("sampling weights must be positive"));
                }
                let total: f64 = head.iter().sum();
                let mut u = rng.uniform(0.0, total);
                for (i, &p) in head.iter().enumerate() {
                    if u < p {
                        return Ok(i);
                    }
                    u -= p;
                }
                Ok(seen - 1)
            }
        }
    }
}

/// A model paired with the loss it is trained under.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    pub model: &'a dyn Model,
    pub loss: LossKind,
}

/// Algorithm 2's meta-update: `n_meta` steps, each on one sampled task.
#[allow(clippy::too_many_arguments)]
pub fn ftml_meta_update(
    w: &Vector,
    buffer: &TaskBuffer,
    nu: &SamplingDistribution,
    opt: &mut OuterOptimizer,
    cfg: &MetaGradConfig,
    n_meta: usize,
    predictor: Option<Predictor<'_>>,
    rng: &mut Rng,
) -> Result<Vector> {
    if buffer.is_empty() {
        return Err(Error::state("meta-update with an empty task buffer"));
    }
    cfg.validate()?;
    let mut cur = w.clone();
    for _ in 0..n_meta {
        let entry = &buffer.entries()[nu.sample(buffer.len(), rng)?];
        let g = match (&entry.task.as_quadratic(), predictor) {
            (Some(q), _) => meta_grad_quadratic(q, &cur, cfg.alpha)?,
            (None, Some(p)) => {
                if entry.data.is_empty() {
                    return Err(Error::state(format!("task {} has no data yet", entry.task_id)));
                }
                // The current task may hold fewer points than a full batch.
                let local = MetaGradConfig {
                    train_batch: cfg.train_batch.min(entry.data.len()),
                    val_batch: cfg.val_batch.min(entry.data.len()),
                    ..*cfg
                };
                practical_meta_grad(p.model, p.loss, &entry.data, &cur, &local, rng)?
            }
            (None, None) => return Err(Error::param("data tasks need a model")),
        };
        opt.step(&mut cur, &g)?;
    }
    Ok(cur)
}

/// How argmin solvers run on quadratic buffers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolveMode {
    /// Closed-form linear solve.
    Exact,
    /// Gradient descent until the gradient norm is at most `tol`.
    Iterative { tol: f64 },
}

pub const SOLVE_TOL: f64 = 1e-8;
const MAX_SOLVE_ITERS: usize = 1_000_000;

/// Running sums of the curvature and linear terms of both leaders, so online
/// play costs one solve per round.
#[derive(Clone, Debug)]
pub struct LeaderSums {
    alpha: f64,
    count: usize,
    meta_a: Matrix,
    meta_b: Vector,
    plain_a: Matrix,
    plain_b: Vector,
}

impl LeaderSums {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            alpha,
            count: 0,
            meta_a: Matrix::zeros(dim, dim),
            meta_b: Vector::zeros(dim),
            plain_a: Matrix::zeros(dim, dim),
            plain_b: Vector::zeros(dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, task: &QuadraticTask) -> Result<()> {
        ensure_same_dim(task.b.len(), self.meta_b.len(), "leader sums")?;
        let d = task.b.len();
        let m = Matrix::identity(d, d) - &task.a * self.alpha;
        let m2 = &m * &m;
        self.meta_a += &m * &task.a * &m;
        self.meta_b += &m2 * &task.b;
        self.plain_a += &task.a;
        self.plain_b += &task.b;
        self.count += 1;
        Ok(())
    }

    fn solve(a: &Matrix, b: &Vector, count: usize, mode: SolveMode) -> Result<Vector> {
        if count == 0 {
            return Err(Error::state("no tasks to solve over"));
        }
        let a = (a + a.transpose()) * (0.5 / count as f64);
        let b = b / count as f64;
        match mode {
            SolveMode::Exact => Ok(-solve_spd(&a, &b)?),
            SolveMode::Iterative { tol } => {
                let (_, top) = eig_extremes(&a)?;
                let step = 1.0 / top;
                let mut w = Vector::zeros(b.len());
                for _ in 0..MAX_SOLVE_ITERS {
                    let g = &a * &w + &b;
                    if g.norm() <= tol {
                        return Ok(w);
                    }
                    w.axpy(-step, &g, 1.0);
                }
                Err(Error::numeric("iterative solve did not reach tolerance"))
            }
        }
    }

    /// Minimizer of the summed post-update losses.
    pub fn meta_leader(&self, mode: SolveMode) -> Result<Vector> {
        Self::solve(&self.meta_a, &self.meta_b, self.count, mode)
    }

    /// Minimizer of the summed plain losses.
    pub fn leader(&self, mode: SolveMode) -> Result<Vector> {
        Self::solve(&self.plain_a, &self.plain_b, self.count, mode)
    }
}

fn sums_over(tasks: &[QuadraticTask], alpha: f64) -> Result<LeaderSums> {
    let first = tasks.first().ok_or_else(|| Error::state("no tasks to solve over"))?;
    let mut sums = LeaderSums::new(first.b.len(), alpha);
    for t in tasks {
        sums.push(t)?;
    }
    Ok(sums)
}

/// `argmin_w Σ f_k(U_k(w))` over quadratic tasks.
pub fn ftml_solve_tasks(tasks: &[QuadraticTask], alpha: f64, mode: SolveMode) -> Result<Vector> {
    sums_over(tasks, alpha)?.meta_leader(mode)
}

/// `argmin_w Σ f_k(w)` over quadratic tasks.
pub fn ftl_solve_tasks(tasks: &[QuadraticTask], mode: SolveMode) -> Result<Vector> {
    sums_over(tasks, 0.0)?.leader(mode)
}

fn buffer_quadratics(buffer: &TaskBuffer) -> Result<Vec<QuadraticTask>> {
    if buffer.is_empty() {
        return Err(Error::state("solve over an empty task buffer"));
    }
    buffer
        .quadratic_tasks(buffer.len())
        .ok_or_else(|| Error::Unsupported("closed-form leaders need quadratic tasks; use the data solvers".into()))
}

pub fn ftml_solve(buffer: &TaskBuffer, alpha: f64, mode: SolveMode) -> Result<Vector> {
    ftml_solve_tasks(&buffer_quadratics(buffer)?, alpha, mode)
}

pub fn ftl_solve(buffer: &TaskBuffer, mode: SolveMode) -> Result<Vector> {
    ftl_solve_tasks(&buffer_quadratics(buffer)?, mode)
}

/// Full-batch gradient descent on `Σ_k L(D_k, U_k(w))` over buffered data,
/// where each `U_k` takes `n_grad` steps on the task's own data.
#[allow(clippy::too_many_arguments)]
pub fn ftml_solve_on_data(
    predictor: Predictor<'_>,
    buffer: &TaskBuffer,
    alpha: f64,
    n_grad: usize,
    w0: &Vector,
    lr: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vector> {
    if buffer.is_empty() {
        return Err(Error::state("solve over an empty task buffer"));
    }
    let mut w = w0.clone();
    for _ in 0..max_iters {
        let mut g = Vector::zeros(w.len());
        for e in buffer.entries() {
            g += crate::meta_objective::meta_grad_on_batches(
                predictor.model,
                predictor.loss,
                &e.data,
                &e.data,
                &w,
                alpha,
                n_grad,
                false,
            )?;
        }
        g /= buffer.len() as f64;
        if g.norm() <= tol {
            return Ok(w);
        }
        w.axpy(-lr, &g, 1.0);
    }
    Err(Error::numeric("meta-leader descent did not reach tolerance"))
}

/// Runs `steps` optimizer updates on minibatches of `pool`.
#[allow(clippy::too_many_arguments)]
fn train_on_pool(
    w: &Vector,
    pool: &Dataset,
    predictor: Predictor<'_>,
    opt: &mut OuterOptimizer,
    steps: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vector> {
    let mut cur = w.clone();
    for _ in 0..steps {
        let mb = minibatch(pool, batch.min(pool.len()), rng)?;
        let g = avg_loss_grad(predictor.model, predictor.loss, &mb, &cur)?;
        opt.step(&mut cur, &g)?;
    }
    Ok(cur)
}

/// Parameters a baseline plays before any test-time adaptation.
///
/// Quadratic buffers use the exact leaders; data buffers run `steps`
/// optimizer updates on the baseline's pool (TOE: all data including the
/// current task; FTL_finetune: data through the previous round, or the
/// current task when there is no history; Scratch: the current task).
#[allow(clippy::too_many_arguments)]
pub fn baseline_update(
    kind: LearnerKind,
    w: &Vector,
    buffer: &TaskBuffer,
    current: &Dataset,
    opt: &mut OuterOptimizer,
    predictor: Option<Predictor<'_>>,
    steps: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vector> {
    if kind == LearnerKind::Ftml {
        return Err(Error::param("baseline_update does not run FTML"));
    }
    if buffer.is_empty() {
        return Err(Error::state("baseline update with an empty task buffer"));
    }
    if let Some(tasks) = buffer.quadratic_tasks(buffer.len()) {
        let history = tasks.len() - 1;
        return match kind {
            LearnerKind::Toe => ftl_solve_tasks(&tasks, SolveMode::Exact),
            LearnerKind::FtlFinetune if history > 0 => ftl_solve_tasks(&tasks[..history], SolveMode::Exact),
            _ => Ok(w.clone()),
        };
    }
    let predictor = predictor.ok_or_else(|| Error::param("data tasks need a model"))?;
    let history = buffer.union_first(buffer.len() - 1);
    let pool = match kind {
        LearnerKind::Toe => buffer.union(),
        LearnerKind::FtlFinetune if !history.is_empty() => history,
        _ => current.clone(),
    };
    if pool.is_empty() {
        return Err(Error::state("baseline pool is empty"));
    }
    train_on_pool(w, &pool, predictor, opt, steps, batch, rng)
}

/// Per-learner hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub alpha: f64,
    pub n_grad: usize,
    pub train_batch: usize,
    pub val_batch: usize,
    pub first_order: bool,
    /// Outer steps per incoming batch.
    pub n_meta: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub sampling: SamplingDistribution,
    /// Proficiency threshold: a loss ceiling for regression, an accuracy
    /// floor for classification.
    pub gamma: f64,
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            kind,
            alpha: 0.1,
            n_grad: 5,
            train_batch: 10,
            val_batch: 10,
            first_order: false,
            n_meta: 20,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            sampling: SamplingDistribution::Uniform,
            gamma: f64::NEG_INFINITY,
        }
    }

    pub fn with_kind(&self, kind: LearnerKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn meta_cfg(&self) -> MetaGradConfig {
        MetaGradConfig {
            alpha: self.alpha,
            n_grad: self.n_grad,
            train_batch: self.train_batch,
            val_batch: self.val_batch,
            first_order: self.first_order,
        }
    }

    pub fn update_cfg(&self) -> UpdateConfig {
        UpdateConfig { alpha: self.alpha, n_grad: self.n_grad, inner_batch: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.meta_cfg().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.gamma.is_nan() {
            return Err(Error::param("gamma must not be NaN"));
        }
        Ok(())
    }
}

/// Test performance after one batch of a round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub datapoints: usize,
    pub loss: f64,
    /// Accuracy for classification, loss otherwise.
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub learner: LearnerKind,
    pub t: usize,
    pub task_id: usize,
    pub curve: Vec<CurvePoint>,
    /// First `|D_t|` at which the proficiency threshold was met.
    pub efficiency: Option<usize>,
    pub wall_ms: f64,
}

impl RoundReport {
    pub fn final_point(&self) -> CurvePoint {
        *self.curve.last().expect("rounds record at least one point")
    }

    /// Loss after exactly `k` datapoints, if a batch ended there.
    pub fn loss_at(&self, k: usize) -> Option<f64> {
        self.curve.iter().find(|p| p.datapoints == k).map(|p| p.loss)
    }
}

/// Equality of outcomes; wall-clock time is ignored.
impl PartialEq for RoundReport {
    fn eq(&self, other: &Self) -> bool {
        self.learner == other.learner
            && self.t == other.t
            && self.task_id == other.task_id
            && self.curve == other.curve
            && self.efficiency == other.efficiency
    }
}

/// Everything a learner carries between rounds.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub cfg: LearnerConfig,
    pub buffer: TaskBuffer,
    /// Parameters played before adaptation.
    pub w: Vector,
    /// Parameters after the most recent test-time adaptation.
    pub adapted: Vector,
    pub init: Vector,
    pub opt: OuterOptimizer,
    rng: Rng,
    next_round: usize,
    dim: usize,
}

/// Learner randomness is kept apart from every stream-derived child.
const LEARNER_STREAM: u64 = u64::MAX;

impl LearnerState {
    /// The initial parameters depend on the seed only, so every learner kind
    /// starts from the same point.
    pub fn new(cfg: LearnerConfig, stream: &TaskStream, predictor: Option<Predictor<'_>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).child(LEARNER_STREAM);
        let init = match (stream.task(1)?.as_quadratic(), predictor) {
            (Some(q), _) => rng.normal_vector(q.b.len()),
            (None, Some(p)) => p.model.init(&mut rng),
            (None, None) => return Err(Error::param("data streams need a model")),
        };
        let dim = init.len();
        let opt = OuterOptimizer::new(cfg.optimizer, cfg.lr, dim)?;
        Ok(Self {
            cfg,
            buffer: TaskBuffer::new(),
            w: init.clone(),
            adapted: init.clone(),
            init,
            opt,
            rng,
            next_round: 1,
            dim,
        })
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    fn reinit(&mut self, predictor: Option<Predictor<'_>>) {
        self.w = match predictor {
            Some(p) => p.model.init(&mut self.rng),
            None => self.rng.normal_vector(self.dim),
        };
        self.opt.reset();
    }
}

/// Regression reaches proficiency when test loss drops below `gamma`,
/// classification when accuracy reaches it.
fn efficiency_of(curve: &[CurvePoint], gamma: f64, classification: bool) -> Option<usize> {
    curve
        .iter()
        .find(|p| if classification { p.metric >= gamma } else { p.loss < gamma })
        .map(|p| p.datapoints)
}

/// Plays the next round of the stream.
pub fn run_round(state: &mut LearnerState, stream: &TaskStream, predictor: Option<Predictor<'_>>) -> Result<RoundReport> {
    let t = state.next_round;
    if t > stream.total_rounds() {
        return Err(Error::state(format!("stream exhausted after {} rounds", stream.total_rounds())));
    }
    let started = Instant::now();
    let mut round = stream.round(t)?;
    state.buffer.push_task(round.task_id, round.task.clone())?;
    let kind = state.cfg.kind;
    let alpha = state.cfg.alpha;

    let curve = if let Some(q) = round.task.as_quadratic() {
        let tasks = state.buffer.quadratic_tasks(t).ok_or_else(|| Error::state("mixed task buffer"))?;
        let (played, loss) = match kind {
            LearnerKind::Ftml => {
                let w = ftml_solve_tasks(&tasks, alpha, SolveMode::Exact)?;
                let l = q.loss(&quadratic_step(q, &w, alpha)?)?;
                (w, l)
            }
            LearnerKind::Toe => {
                let w = ftl_solve_tasks(&tasks, SolveMode::Exact)?;
                let l = q.loss(&w)?;
                (w, l)
            }
            LearnerKind::FtlFinetune | LearnerKind::Scratch => {
                if kind == LearnerKind::Scratch && t > 1 {
                    state.reinit(predictor);
                }
                let w = if kind == LearnerKind::FtlFinetune && t > 1 {
                    ftl_solve_tasks(&tasks[..t - 1], SolveMode::Exact)?
                } else {
                    state.w.clone()
                };
                let l = q.loss(&quadratic_step(q, &w, alpha)?)?;
                (w, l)
            }
        };
        state.adapted = if kind.adapts() { quadratic_step(q, &played, alpha)? } else { played.clone() };
        state.w = played;
        let n = stream.config().points_per_task;
        vec![CurvePoint { datapoints: n, loss, metric: loss }]
    } else {
        let p = predictor.ok_or_else(|| Error::param("data streams need a model"))?;
        let test = round.test.take().ok_or_else(|| Error::state("data round without test set"))?;
        if kind == LearnerKind::Scratch && t > 1 {
            state.reinit(predictor);
        }
        let mut current = Dataset::empty(round.task_id);
        let mut curve = Vec::new();
        let meta_cfg = state.cfg.meta_cfg();
        let update_cfg = state.cfg.update_cfg();
        while let Some(batch) = round.batches.next_batch()? {
            state.buffer.append(round.task_id, &batch)?;
            current.extend(&batch);
            state.w = match kind {
                LearnerKind::Ftml => ftml_meta_update(
                    &state.w,
                    &state.buffer,
                    &state.cfg.sampling,
                    &mut state.opt,
                    &meta_cfg,
                    state.cfg.n_meta,
                    predictor,
                    &mut state.rng,
                )?,
                _ => baseline_update(
                    kind,
                    &state.w,
                    &state.buffer,
                    &current,
                    &mut state.opt,
                    predictor,
                    state.cfg.n_meta,
                    state.cfg.train_batch,
                    &mut state.rng,
                )?,
            };
            let adapted = if kind.adapts() {
                multi_step(&state.w, &current, p.model, p.loss, &update_cfg)?
            } else {
                state.w.clone()
            };
            let loss = avg_loss(p.model, p.loss, &test, &adapted)?;
            let metric = if round.task.is_classification() { accuracy(p.model, &test, &adapted)? } else { loss };
            curve.push(CurvePoint { datapoints: current.len(), loss, metric });
            state.adapted = adapted;
        }
        curve
    };

    state.next_round += 1;
    Ok(RoundReport {
        learner: kind,
        t,
        task_id: round.task_id,
        efficiency: efficiency_of(&curve, state.cfg.gamma, round.task.is_classification()),
        curve,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Plays every round of the stream with one learner.
pub fn run_learner(cfg: LearnerConfig, stream: &TaskStream, predictor: Option<Predictor<'_>>, seed: u64) -> Result<Vec<RoundReport>> {
    let mut state = LearnerState::new(cfg, stream, predictor, seed)?;
    (1..=stream.total_rounds()).map(|_| run_round(&mut state, stream, predictor)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerRecord {
    pub t: usize,
    pub loss: f64,
    pub task_id: usize,
}

/// Per-round losses of a learner, rounds contiguous from 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegretLedger {
    records: Vec<LedgerRecord>,
}

impl RegretLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: usize, loss: f64, task_id: usize) -> Result<()> {
        if t != self.records.len() + 1 {
            return Err(Error::state(format!("ledger expects round {}, got {t}", self.records.len() + 1)));
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("round {t} loss is not finite")));
        }
        self.records.push(LedgerRecord { t, loss, task_id });
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `rounds` records.
    pub fn prefix(&self, rounds: usize) -> RegretLedger {
        RegretLedger { records: self.records[..rounds.min(self.records.len())].to_vec() }
    }

    pub fn total(&self) -> f64 {
        self.records.iter().map(|r| r.loss).sum()
    }
}

fn regret(ledger: &RegretLedger, comparator_losses: &[f64]) -> Result<f64> {
    if ledger.len() != comparator_losses.len() {
        return Err(Error::param(format!(
            "ledger covers {} rounds, comparator {}",
            ledger.len(),
            comparator_losses.len()
        )));
    }
    Ok(ledger.total() - comparator_losses.iter().sum::<f64>())
}

/// `Σ f_t(U_t(w_t)) - Σ f_t(U_t(w*))`.
pub fn regret_online_meta(ledger: &RegretLedger, comparator_losses: &[f64]) -> Result<f64> {
    regret(ledger, comparator_losses)
}

/// `Σ f_t(w_t) - Σ f_t(w*)` with losses recorded without adaptation.
pub fn regret_standard(ledger: &RegretLedger, comparator_losses: &[f64]) -> Result<f64> {
    regret(ledger, comparator_losses)
}

/// Hindsight meta-leader and its per-round post-update losses.
pub fn meta_comparator(tasks: &[QuadraticTask], alpha: f64) -> Result<(Vector, Vec<f64>)> {
    let w = ftml_solve_tasks(tasks, alpha, SolveMode::Exact)?;
    let losses = tasks
        .iter()
        .map(|q| q.loss(&quadratic_step(q, &w, alpha)?))
        .collect::<Result<_>>()?;
    Ok((w, losses))
}

/// Hindsight leader and its per-round plain losses.
pub fn plain_comparator(tasks: &[QuadraticTask]) -> Result<(Vector, Vec<f64>)> {
    let w = ftl_solve_tasks(tasks, SolveMode::Exact)?;
    let losses = tasks.iter().map(|q| q.loss(&w)).collect::<Result<_>>()?;
    Ok((w, losses))
}

/// Exact online play on quadratics: `w_1 = init`, then `w_{t+1}` is the leader
/// over rounds `1..=t`. Returns the post-update ledger of the meta-leader and
/// the plain ledger of the ordinary leader.
pub fn online_play(tasks: &[QuadraticTask], alpha: f64, init: &Vector) -> Result<(RegretLedger, RegretLedger)> {
    let mut meta = RegretLedger::new();
    let mut plain = RegretLedger::new();
    let mut sums = LeaderSums::new(init.len(), alpha);
    let (mut w_meta, mut w_plain) = (init.clone(), init.clone());
    for (i, q) in tasks.iter().enumerate() {
        let t = i + 1;
        meta.push(t, q.loss(&quadratic_step(q, &w_meta, alpha)?)?, t)?;
        plain.push(t, q.loss(&w_plain)?, t)?;
        sums.push(q)?;
        w_meta = sums.meta_leader(SolveMode::Exact)?;
        w_plain = sums.leader(SolveMode::Exact)?;
    }
    Ok((meta, plain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_objective::{maml_batch_grad, uniform_weights};
    use crate::models::{LinearModel, MlpModel};
    use crate::tasks::{Family, LinearFamily, QuadraticFamily, Schedule, SinusoidFamily, StreamConfig, TaskHandle};

    fn scalar(a: f64, b: f64) -> QuadraticTask {
        QuadraticTask::scalar(a, b).unwrap()
    }

    fn quad_buffer(tasks: &[QuadraticTask]) -> TaskBuffer {
        let mut b = TaskBuffer::new();
        for (i, t) in tasks.iter().enumerate() {
            b.push_task(i + 1, TaskHandle::Quadratic(t.clone())).unwrap();
        }
        b
    }

    fn quad_stream(rounds: usize, schedule: Schedule, seed: u64) -> TaskStream {
        let cfg = StreamConfig {
            family: Family::Quadratic(QuadraticFamily { dim: 2, mu: 0.5, beta: 2.0, shared_b: false }),
            schedule,
            total_rounds: rounds,
            points_per_task: 10,
            batch_size: 10,
            test_points: 0,
        };
        TaskStream::new(cfg, seed).unwrap()
    }

    #[test]
    fn solver_examples() {
        let one = quad_buffer(&[scalar(2.0, -4.0)]);
        assert!((ftml_solve(&one, 0.1, SolveMode::Exact).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((ftl_solve(&one, SolveMode::Exact).unwrap()[0] - 2.0).abs() < 1e-12);

        let two = quad_buffer(&[scalar(1.0, -1.0), scalar(3.0, -1.0)]);
        let w = ftml_solve(&two, 0.1, SolveMode::Exact).unwrap();
        assert!((w[0] - 0.65 / 1.14).abs() < 1e-12);
        assert!((w[0] - 0.570175).abs() < 1e-6);
        assert!((ftl_solve(&two, SolveMode::Exact).unwrap()[0] - 0.5).abs() < 1e-12);

        let repeated = quad_buffer(&vec![scalar(3.0, 1.5); 5]);
        assert!((ftl_solve(&repeated, SolveMode::Exact).unwrap()[0] + 0.5).abs() < 1e-12);

        assert!(matches!(ftml_solve(&TaskBuffer::new(), 0.1, SolveMode::Exact), Err(Error::State(_))));
    }

    #[test]
    fn iterative_solvers_agree_with_exact() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let tasks: Vec<_> = (0..6).map(|_| QuadraticTask::sample(3, 0.3, 3.0, &mut rng).unwrap()).collect();
            let b = quad_buffer(&tasks);
            let alpha = 0.15;
            let exact = ftml_solve(&b, alpha, SolveMode::Exact).unwrap();
            let iter = ftml_solve(&b, alpha, SolveMode::Iterative { tol: SOLVE_TOL }).unwrap();
            assert!((&exact - &iter).amax() < 1e-6);
            assert!(maml_batch_grad(&tasks, &uniform_weights(6), &exact, alpha).unwrap().norm() < 1e-9);
            let exact = ftl_solve(&b, SolveMode::Exact).unwrap();
            let iter = ftl_solve(&b, SolveMode::Iterative { tol: SOLVE_TOL }).unwrap();
            assert!((&exact - &iter).amax() < 1e-6);
        }
    }

    #[test]
    fn meta_update_converges_on_single_quadratic() {
        let mut rng = Rng::new(32);
        let q = QuadraticTask::sample(2, 0.8, 1.6, &mut rng).unwrap();
        let b = quad_buffer(std::slice::from_ref(&q));
        let alpha = 0.25;
        let cfg = MetaGradConfig { alpha, ..MetaGradConfig::default() };
        let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.5, 2).unwrap();
        let w0 = Vector::zeros(2);
        let w = ftml_meta_update(&w0, &b, &SamplingDistribution::Uniform, &mut opt, &cfg, 1000, None, &mut rng).unwrap();
        assert!(meta_grad_quadratic(&q, &w, alpha).unwrap().norm() <= 1e-5);
        let closed = ftml_solve(&b, alpha, SolveMode::Exact).unwrap();
        assert!((w - closed).amax() < 1e-4);

        let same = ftml_meta_update(&w0, &b, &SamplingDistribution::Uniform, &mut opt, &cfg, 0, None, &mut rng).unwrap();
        assert_eq!(same, w0);
        assert!(ftml_meta_update(&w0, &TaskBuffer::new(), &SamplingDistribution::Uniform, &mut opt, &cfg, 1, None, &mut rng).is_err());
    }

    #[test]
    fn meta_update_is_deterministic_on_data() {
        let model = MlpModel::new(vec![1, 8, 8, 1]).unwrap();
        let p = Predictor { model: &model, loss: LossKind::SquaredError };
        let stream = TaskStream::new(
            StreamConfig {
                family: Family::Sinusoid(SinusoidFamily::default()),
                schedule: Schedule::Iid,
                total_rounds: 2,
                points_per_task: 20,
                batch_size: 10,
                test_points: 10,
            },
            5,
        )
        .unwrap();
        let mut buffer = TaskBuffer::new();
        for t in 1..=2 {
            let mut r = stream.round(t).unwrap();
            buffer.push_task(t, r.task.clone()).unwrap();
            while let Some(batch) = r.batches.next_batch().unwrap() {
                buffer.append(t, &batch).unwrap();
            }
        }
        let run = || {
            let mut rng = Rng::new(77);
            let mut opt = OuterOptimizer::new(OptimizerKind::Adam, 1e-3, model.param_len()).unwrap();
            let w0 = model.init(&mut rng);
            ftml_meta_update(&w0, &buffer, &SamplingDistribution::Uniform, &mut opt, &MetaGradConfig::default(), 5, Some(p), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn optimizers_follow_their_update_rules() {
        let g = Vector::from_vec(vec![1.0, -2.0]);
        let mut w = Vector::zeros(2);
        let mut sgd = OuterOptimizer::new(OptimizerKind::Sgd, 0.1, 2).unwrap();
        sgd.step(&mut w, &g).unwrap();
        assert_eq!(w, Vector::from_vec(vec![-0.1, 0.2]));

        let mut w = Vector::zeros(2);
        let mut mom = OuterOptimizer::new(OptimizerKind::Momentum, 0.1, 2).unwrap();
        mom.step(&mut w, &g).unwrap();
        mom.step(&mut w, &g).unwrap();
        // Velocity after two steps is g + 0.9 g.
        assert!((w - &g * (-0.1 * (1.0 + 1.9))).amax() < 1e-15);

        // Adam's first bias-corrected step moves every coordinate by lr.
        let mut w = Vector::zeros(2);
        let mut adam = OuterOptimizer::new(OptimizerKind::Adam, 1e-3, 2).unwrap();
        adam.step(&mut w, &g).unwrap();
        assert!((w[0] + 1e-3).abs() < 1e-9 && (w[1] - 1e-3).abs() < 1e-9);

        assert!(OuterOptimizer::new(OptimizerKind::Sgd, 0.0, 2).is_err());
        assert!(sgd.step(&mut Vector::zeros(3), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn custom_sampling_respects_weights() {
        let nu = SamplingDistribution::Custom(vec![3.0, 1.0, 100.0]);
        let mut rng = Rng::new(1);
        let hits = (0..8000).filter(|_| nu.sample(2, &mut rng).unwrap() == 0).count();
        assert!((hits as f64 / 8000.0 - 0.75).abs() < 0.03);
        assert!(SamplingDistribution::Custom(vec![1.0]).sample(2, &mut rng).is_err());
        assert!(SamplingDistribution::Uniform.sample(0, &mut rng).is_err());
    }

    #[test]
    fn thresholds_control_efficiency() {
        let stream = quad_stream(3, Schedule::Iid, 4);
        for (gamma, expect) in [(f64::INFINITY, Some(10)), (f64::NEG_INFINITY, None)] {
            let cfg = LearnerConfig { gamma, alpha: 0.25, ..LearnerConfig::new(LearnerKind::Ftml) };
            let reports = run_learner(cfg, &stream, None, 4).unwrap();
            assert!(reports.iter().all(|r| r.efficiency == expect));
        }
        let sinusoid = TaskStream::new(
            StreamConfig {
                family: Family::Sinusoid(SinusoidFamily::default()),
                schedule: Schedule::Iid,
                total_rounds: 1,
                points_per_task: 30,
                batch_size: 10,
                test_points: 10,
            },
            2,
        )
        .unwrap();
        let model = LinearModel::new(1, 1).unwrap();
        let p = Predictor { model: &model, loss: LossKind::SquaredError };
        let cfg = LearnerConfig { gamma: f64::INFINITY, n_meta: 2, alpha: 0.01, ..LearnerConfig::new(LearnerKind::Scratch) };
        let r = run_learner(cfg, &sinusoid, Some(p), 2).unwrap();
        assert_eq!(r[0].efficiency, Some(10));
        assert_eq!(r[0].curve.len(), 3);
    }

    #[test]
    fn exhausted_stream_is_a_state_error() {
        let stream = quad_stream(1, Schedule::Iid, 1);
        let mut s = LearnerState::new(LearnerConfig::new(LearnerKind::Toe), &stream, None, 1).unwrap();
        run_round(&mut s, &stream, None).unwrap();
        assert!(matches!(run_round(&mut s, &stream, None), Err(Error::State(_))));
    }

    #[test]
    fn scratch_fits_noiseless_linear_task() {
        let stream = TaskStream::new(
            StreamConfig {
                family: Family::Linear(LinearFamily {
                    slope: (-2.0, 2.0),
                    intercept: (-1.0, 1.0),
                    input_range: (-1.0, 1.0),
                    noise_std: 0.0,
                }),
                schedule: Schedule::Iid,
                total_rounds: 1,
                points_per_task: 200,
                batch_size: 200,
                test_points: 50,
            },
            9,
        )
        .unwrap();
        let model = LinearModel::new(1, 1).unwrap();
        let p = Predictor { model: &model, loss: LossKind::SquaredError };
        let cfg = LearnerConfig {
            n_meta: 2000,
            optimizer: OptimizerKind::Sgd,
            lr: 0.2,
            train_batch: 200,
            alpha: 0.1,
            n_grad: 5,
            ..LearnerConfig::new(LearnerKind::Scratch)
        };
        let r = run_learner(cfg, &stream, Some(p), 9).unwrap();
        assert!(r[0].final_point().loss <= 1e-4, "{:?}", r[0].final_point());
    }

    #[test]
    fn toe_matches_scratch_on_a_single_task() {
        let stream = TaskStream::new(
            StreamConfig {
                family: Family::Sinusoid(SinusoidFamily::default()),
                schedule: Schedule::Iid,
                total_rounds: 1,
                points_per_task: 20,
                batch_size: 10,
                test_points: 5,
            },
            3,
        )
        .unwrap();
        let model = MlpModel::new(vec![1, 8, 1]).unwrap();
        let p = Predictor { model: &model, loss: LossKind::SquaredError };
        let play = |kind| {
            let mut s = LearnerState::new(LearnerConfig { n_meta: 5, ..LearnerConfig::new(kind) }, &stream, Some(p), 3).unwrap();
            run_round(&mut s, &stream, Some(p)).unwrap();
            s.w
        };
        assert_eq!(play(LearnerKind::Toe), play(LearnerKind::Scratch));
        assert_eq!(play(LearnerKind::FtlFinetune), play(LearnerKind::Scratch));
    }

    #[test]
    fn toe_plays_the_leader_on_quadratics() {
        let stream = quad_stream(6, Schedule::Iid, 12);
        let mut s = LearnerState::new(LearnerConfig::new(LearnerKind::Toe), &stream, None, 12).unwrap();
        for _ in 0..6 {
            run_round(&mut s, &stream, None).unwrap();
            let leader = ftl_solve(&s.buffer, SolveMode::Exact).unwrap();
            assert!((&s.w - leader).amax() < 1e-8);
        }
    }

    #[test]
    fn round_reports_are_deterministic() {
        for kind in LearnerKind::ALL {
            let stream = quad_stream(8, Schedule::Piecewise { period: 3 }, 6);
            let cfg = LearnerConfig { alpha: 0.25, ..LearnerConfig::new(kind) };
            let a = run_learner(cfg.clone(), &stream, None, 6).unwrap();
            let b = run_learner(cfg, &stream, None, 6).unwrap();
            assert_eq!(a, b);
        }
    }

    fn iid_tasks(seed: u64, t: usize) -> Vec<QuadraticTask> {
        let stream = quad_stream(t, Schedule::Iid, seed);
        stream.tasks().iter().map(|h| h.as_quadratic().unwrap().clone()).collect()
    }

    #[test]
    fn regret_examples() {
        let alpha = 0.25;
        // Constant stream, learner starting at the comparator: zero regret.
        let stream = quad_stream(20, Schedule::Constant, 2);
        let tasks: Vec<_> = stream.tasks().iter().map(|h| h.as_quadratic().unwrap().clone()).collect();
        let (w_star, comp) = meta_comparator(&tasks, alpha).unwrap();
        let (meta, _) = online_play(&tasks, alpha, &w_star).unwrap();
        assert!(regret_online_meta(&meta, &comp).unwrap().abs() < 1e-8);
        let (w_plain, comp_plain) = plain_comparator(&tasks).unwrap();
        let (_, plain) = online_play(&tasks, alpha, &w_plain).unwrap();
        assert!(regret_standard(&plain, &comp_plain).unwrap().abs() < 1e-8);

        // One round: the comparator is that round's minimizer.
        let one = &iid_tasks(3, 1);
        let init = Vector::from_vec(vec![1.0, -2.0]);
        let (meta, plain) = online_play(one, alpha, &init).unwrap();
        assert!(regret_online_meta(&meta, &meta_comparator(one, alpha).unwrap().1).unwrap() >= -1e-9);
        assert!(regret_standard(&plain, &plain_comparator(one).unwrap().1).unwrap() >= -1e-9);

        // Adding a constant to every loss shifts both sums equally.
        let tasks = iid_tasks(4, 30);
        let (meta, _) = online_play(&tasks, alpha, &init).unwrap();
        let comp = meta_comparator(&tasks, alpha).unwrap().1;
        let base = regret_online_meta(&meta, &comp).unwrap();
        let mut shifted = RegretLedger::new();
        for r in meta.records() {
            shifted.push(r.t, r.loss + 7.5, r.task_id).unwrap();
        }
        let comp_shifted: Vec<f64> = comp.iter().map(|c| c + 7.5).collect();
        assert!((regret_online_meta(&shifted, &comp_shifted).unwrap() - base).abs() < 1e-9);

        assert!(regret_online_meta(&meta, &comp[..5]).is_err());
    }

    #[test]
    fn ledger_rejects_gaps_and_nan() {
        let mut l = RegretLedger::new();
        l.push(1, 0.5, 1).unwrap();
        assert!(l.push(3, 0.5, 3).is_err());
        assert!(l.push(2, f64::NAN, 2).is_err());
    }

    #[test]
    fn online_regret_is_nonnegative_sublinear_and_logarithmic() {
        let alpha = 0.25;
        let mut band = (0.0, 0.0);
        for seed in 0..3 {
            let tasks = iid_tasks(100 + seed, 512);
            let init = Rng::new(seed).normal_vector(2);
            let (meta, plain) = online_play(&tasks, alpha, &init).unwrap();
            let at = |t: usize| {
                let head = &tasks[..t];
                let r = regret_online_meta(&meta.prefix(t), &meta_comparator(head, alpha).unwrap().1).unwrap();
                let s = regret_standard(&plain.prefix(t), &plain_comparator(head).unwrap().1).unwrap();
                (r, s)
            };
            let (r64, s64) = at(64);
            let (r512, s512) = at(512);
            assert!(r512 >= -1e-6 && s512 >= -1e-6);
            assert!(r512 / 512.0 < r64 / 64.0);
            assert!(s512 / 512.0 < s64 / 64.0);
            band.0 += r64 / 64f64.ln();
            band.1 += r512 / 512f64.ln();
        }
        assert!(band.1 <= 2.0 * band.0, "{band:?}");
    }
}
