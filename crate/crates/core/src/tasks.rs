//! Task families, datasets, non-stationary streams and the task buffer.
//!
//! A round of the online protocol is represented by [`Round`]: the task chosen
//! by the world, a generator that reveals its data batch by batch, and a
//! held-out test set that the learner never trains on. Quadratic tasks carry
//! their loss in closed form and reveal no data.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::numerics::{eig_extremes, ensure_finite, ensure_same_dim, solve_spd, spd_sample, Matrix, Rng, Vector};

/// Radius bound on quadratic task minimizers so gradients stay bounded on
/// the region the learners visit.
pub const MINIMIZER_RADIUS: f64 = 5.0;

/// A differentiable objective with exact gradients and Hessian products.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &Vector) -> Result<f64>;
    fn grad(&self, w: &Vector) -> Result<Vector>;
    fn hvp(&self, w: &Vector, v: &Vector) -> Result<Vector>;
}

/// `f(w) = ½ wᵀAw + wᵀb` with certified spectral bounds `mu <= λ(A) <= beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTask {
    pub a: Matrix,
    pub b: Vector,
    pub mu: f64,
    pub beta: f64,
}

impl QuadraticTask {
    /// Checks symmetry, dimensions and that the spectrum of `a` lies in `[mu, beta]`.
    pub fn new(a: Matrix, b: Vector, mu: f64, beta: f64) -> Result<Self> {
        ensure_same_dim(a.nrows(), b.len(), "QuadraticTask")?;
        if !(mu > 0.0) || !(mu <= beta) {
            return Err(Error::param(format!("QuadraticTask: need 0 < mu <= beta, got {mu}, {beta}")));
        }
        let (lo, hi) = eig_extremes(&a)?;
        let tol = 1e-9 * beta.max(1.0);
        if lo < mu - tol || hi > beta + tol {
            return Err(Error::param(format!(
                "QuadraticTask: spectrum [{lo}, {hi}] outside certified [{mu}, {beta}]"
            )));
        }
        ensure_finite(&b, "QuadraticTask b")?;
        Ok(Self { a, b, mu, beta })
    }

    /// Uses the exact extreme eigenvalues of `a` as the certified bounds.
    pub fn from_matrix(a: Matrix, b: Vector) -> Result<Self> {
        let (lo, hi) = eig_extremes(&a)?;
        Self::new(a, b, lo, hi)
    }

    /// One-dimensional task `½ a w² + b w`.
    pub fn scalar(a: f64, b: f64) -> Result<Self> {
        Self::new(Matrix::from_element(1, 1, a), Vector::from_element(1, b), a, a)
    }

    /// Random task with curvature spectrum in `[mu, beta]` (both attained when
    /// `d >= 2`) and linear term uniform in `[-1, 1]^d`, shrunk if needed so
    /// that the minimizer has norm at most [`MINIMIZER_RADIUS`].
    pub fn sample(d: usize, mu: f64, beta: f64, rng: &mut Rng) -> Result<Self> {
        let a = spd_sample(d, mu, beta, rng)?;
        let b = Vector::from_fn(d, |_, _| rng.uniform(-1.0, 1.0));
        let b = clamp_linear_term(&a, b)?;
        Ok(Self { a, b, mu, beta })
    }

    pub fn minimizer(&self) -> Result<Vector> {
        Ok(-solve_spd(&self.a, &self.b)?)
    }

    pub fn loss(&self, w: &Vector) -> Result<f64> {
        quad_loss(self, w)
    }

    pub fn gradient(&self, w: &Vector) -> Result<Vector> {
        quad_grad(self, w)
    }
}

fn clamp_linear_term(a: &Matrix, b: Vector) -> Result<Vector> {
    let m = solve_spd(a, &b)?.norm();
    Ok(if m > MINIMIZER_RADIUS { b * (MINIMIZER_RADIUS / m) } else { b })
}

pub fn quad_loss(task: &QuadraticTask, w: &Vector) -> Result<f64> {
    ensure_same_dim(w.len(), task.b.len(), "quad_loss")?;
    Ok(0.5 * w.dot(&(&task.a * w)) + w.dot(&task.b))
}

pub fn quad_grad(task: &QuadraticTask, w: &Vector) -> Result<Vector> {
    ensure_same_dim(w.len(), task.b.len(), "quad_grad")?;
    Ok(&task.a * w + &task.b)
}

impl Objective for QuadraticTask {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, w: &Vector) -> Result<f64> {
        quad_loss(self, w)
    }

    fn grad(&self, w: &Vector) -> Result<Vector> {
        quad_grad(self, w)
    }

    fn hvp(&self, w: &Vector, v: &Vector) -> Result<Vector> {
        ensure_same_dim(w.len(), self.b.len(), "QuadraticTask::hvp")?;
        ensure_same_dim(v.len(), self.b.len(), "QuadraticTask::hvp")?;
        Ok(&self.a * v)
    }
}

/// Labeled points for one task. Inputs and targets are index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
    pub task_id: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vector>, targets: Vec<Vector>, task_id: usize) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::param(format!(
                "Dataset: {} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            ensure_finite(x, "Dataset input")?;
            ensure_finite(y, "Dataset target")?;
        }
        Ok(Self { inputs, targets, task_id })
    }

    pub fn empty(task_id: usize) -> Self {
        Self { inputs: Vec::new(), targets: Vec::new(), task_id }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, |y| y.len())
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.inputs.extend(other.inputs.iter().cloned());
        self.targets.extend(other.targets.iter().cloned());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vector, &Vector)> {
        self.inputs.iter().zip(&self.targets)
    }

    fn select(&self, idx: impl IntoIterator<Item = usize>) -> Dataset {
        let mut out = Dataset::empty(self.task_id);
        for i in idx {
            out.inputs.push(self.inputs[i].clone());
            out.targets.push(self.targets[i].clone());
        }
        out
    }

    /// Writes `task_id, x_0..x_{p-1}, y_0..y_{q-1}` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["task_id".to_string()];
        header.extend((0..self.input_dim()).map(|i| format!("x_{i}")));
        header.extend((0..self.target_dim()).map(|i| format!("y_{i}")));
        wtr.write_record(&header)?;
        for (x, y) in self.iter() {
            let mut row = vec![self.task_id.to_string()];
            row.extend(x.iter().chain(y.iter()).map(|v| format!("{v:.16e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let p = header.iter().filter(|h| h.starts_with("x_")).count();
        let q = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != 1 + p + q || header.get(0) != Some("task_id") {
            return Err(Error::param("Dataset CSV: unexpected header"));
        }
        let mut task_id = 0;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::param(format!("Dataset CSV: {e}")))
            };
            task_id = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::param(format!("Dataset CSV task_id: {e}")))?;
            let x = (1..=p).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let y = (1 + p..1 + p + q).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            inputs.push(Vector::from_vec(x));
            targets.push(Vector::from_vec(y));
        }
        Dataset::new(inputs, targets, task_id)
    }
}

/// Uniform minibatch: without replacement when `n <= |data|`, with
/// replacement otherwise.
pub fn minibatch(data: &Dataset, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::state("minibatch: dataset is empty"));
    }
    if n == 0 {
        return Err(Error::param("minibatch: batch size must be at least 1"));
    }
    if n <= data.len() {
        let picked = index::sample(rng, data.len(), n);
        Ok(data.select(picked))
    } else {
        let picked: Vec<usize> = (0..n).map(|_| rng.below(data.len())).collect();
        Ok(data.select(picked))
    }
}

/// `y = amplitude · sin(x + phase) + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
    pub input_range: (f64, f64),
    pub noise_std: f64,
}

impl SinusoidTask {
    pub fn new(amplitude: f64, phase: f64, input_range: (f64, f64), noise_std: f64) -> Result<Self> {
        if !(amplitude > 0.0) {
            return Err(Error::param("SinusoidTask: amplitude must be positive"));
        }
        if !(input_range.0 < input_range.1) {
            return Err(Error::param("SinusoidTask: empty input range"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::param("SinusoidTask: noise_std must be non-negative"));
        }
        Ok(Self { amplitude, phase, input_range, noise_std })
    }

    pub fn mean(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    /// Labels the given inputs, adding observation noise.
    pub fn label(&self, xs: &[f64], task_id: usize, rng: &mut Rng) -> Result<Dataset> {
        let inputs = xs.iter().map(|&x| Vector::from_element(1, x)).collect();
        let targets = xs
            .iter()
            .map(|&x| Vector::from_element(1, self.mean(x) + self.noise_std * rng.normal()))
            .collect();
        Dataset::new(inputs, targets, task_id)
    }
}

pub fn sinusoid_sample(task: &SinusoidTask, n: usize, task_id: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("sinusoid_sample: n must be at least 1"));
    }
    let (lo, hi) = task.input_range;
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    task.label(&xs, task_id, rng)
}

/// `y = slope · x + intercept + noise`, the realizable regression task.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    pub slope: f64,
    pub intercept: f64,
    pub input_range: (f64, f64),
    pub noise_std: f64,
}

impl LinearTask {
    pub fn sample(&self, n: usize, task_id: usize, rng: &mut Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::param("LinearTask::sample: n must be at least 1"));
        }
        let (lo, hi) = self.input_range;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.uniform(lo, hi);
            inputs.push(Vector::from_element(1, x));
            targets.push(Vector::from_element(1, self.slope * x + self.intercept + self.noise_std * rng.normal()));
        }
        Dataset::new(inputs, targets, task_id)
    }
}

/// Gaussian class clusters whose label names are permuted per task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClassTask {
    pub class_means: Vec<Vector>,
    pub input_noise_std: f64,
    pub label_permutation: Vec<usize>,
}

impl SyntheticClassTask {
    pub fn new(class_means: Vec<Vector>, input_noise_std: f64, label_permutation: Vec<usize>) -> Result<Self> {
        let c = class_means.len();
        if c < 2 {
            return Err(Error::param("SyntheticClassTask: need at least two classes"));
        }
        if label_permutation.len() != c {
            return Err(Error::param("SyntheticClassTask: permutation size differs from class count"));
        }
        let mut seen = vec![false; c];
        for &p in &label_permutation {
            if p >= c || seen[p] {
                return Err(Error::param("SyntheticClassTask: label map is not a bijection"));
            }
            seen[p] = true;
        }
        for i in 0..c {
            for j in (i + 1)..c {
                if class_means[i] == class_means[j] {
                    return Err(Error::param("SyntheticClassTask: class means must be distinct"));
                }
            }
        }
        if !(input_noise_std >= 0.0) {
            return Err(Error::param("SyntheticClassTask: noise must be non-negative"));
        }
        Ok(Self { class_means, input_noise_std, label_permutation })
    }

    pub fn class_count(&self) -> usize {
        self.class_means.len()
    }
}

pub fn class_sample(task: &SyntheticClassTask, n: usize, task_id: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("class_sample: n must be at least 1"));
    }
    let c = task.class_count();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(c);
        let mean = &task.class_means[k];
        let x = Vector::from_fn(mean.len(), |i, _| mean[i] + task.input_noise_std * rng.normal());
        let mut y = Vector::zeros(c);
        y[task.label_permutation[k]] = 1.0;
        inputs.push(x);
        targets.push(y);
    }
    Dataset::new(inputs, targets, task_id)
}

/// The task the world picks for a round.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskHandle {
    Quadratic(QuadraticTask),
    Sinusoid(SinusoidTask),
    Linear(LinearTask),
    Classification(SyntheticClassTask),
}

impl TaskHandle {
    pub fn as_quadratic(&self) -> Option<&QuadraticTask> {
        match self {
            TaskHandle::Quadratic(q) => Some(q),
            _ => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskHandle::Classification(_))
    }

    pub fn sample(&self, n: usize, task_id: usize, rng: &mut Rng) -> Result<Dataset> {
        match self {
            TaskHandle::Quadratic(_) => Err(Error::Unsupported(
                "quadratic tasks are revealed in closed form and carry no data".into(),
            )),
            TaskHandle::Sinusoid(s) => sinusoid_sample(s, n, task_id, rng),
            TaskHandle::Linear(l) => l.sample(n, task_id, rng),
            TaskHandle::Classification(c) => class_sample(c, n, task_id, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFamily {
    pub dim: usize,
    pub mu: f64,
    pub beta: f64,
    /// Draw one linear term for the whole stream and vary only the curvature.
    pub shared_b: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidFamily {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub input_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for SinusoidFamily {
    fn default() -> Self {
        Self {
            amplitude: (0.1, 5.0),
            phase: (0.0, PI),
            input_range: (-5.0, 5.0),
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFamily {
    pub slope: (f64, f64),
    pub intercept: (f64, f64),
    pub input_range: (f64, f64),
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassFamily {
    pub class_count: usize,
    pub input_dim: usize,
    pub mean_scale: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Quadratic(QuadraticFamily),
    Sinusoid(SinusoidFamily),
    Linear(LinearFamily),
    Classification(ClassFamily),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Quadratic(_) => "quadratic",
            Family::Sinusoid(_) => "sinusoid",
            Family::Linear(_) => "linear",
            Family::Classification(_) => "classification",
        }
    }
}

/// How task parameters evolve across rounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Fresh independent parameters every round.
    Iid,
    /// One parameter draw reused for every round.
    Constant,
    /// Regime `(t - 1) / period`: a new draw every `period` rounds.
    Piecewise { period: usize },
    /// Linear interpolation from a start draw (round 1) to an end draw (round T).
    Drift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub family: Family,
    pub schedule: Schedule,
    pub total_rounds: usize,
    pub points_per_task: usize,
    pub batch_size: usize,
    pub test_points: usize,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::param("stream.rounds must be at least 1"));
        }
        if self.batch_size == 0 || self.points_per_task < self.batch_size {
            return Err(Error::param(format!(
                "stream: need points_per_task >= batch_size >= 1, got N={}, n={}",
                self.points_per_task, self.batch_size
            )));
        }
        if let Schedule::Piecewise { period } = self.schedule {
            if period == 0 {
                return Err(Error::param("stream.period must be at least 1"));
            }
        }
        match &self.family {
            Family::Quadratic(q) => {
                if q.dim == 0 || !(q.mu > 0.0) || !(q.mu <= q.beta) {
                    return Err(Error::param("stream: quadratic family needs dim >= 1 and 0 < mu <= beta"));
                }
            }
            Family::Classification(c) => {
                if c.class_count < 2 || c.input_dim == 0 {
                    return Err(Error::param("stream: classification needs >= 2 classes and input_dim >= 1"));
                }
            }
            Family::Sinusoid(s) => {
                if !(s.amplitude.0 > 0.0) || s.amplitude.0 > s.amplitude.1 || !(s.input_range.0 < s.input_range.1) {
                    return Err(Error::param("stream: sinusoid ranges are invalid"));
                }
            }
            Family::Linear(l) => {
                if !(l.input_range.0 < l.input_range.1) {
                    return Err(Error::param("stream: linear input range is empty"));
                }
            }
        }
        if !matches!(self.family, Family::Quadratic(_)) && self.test_points == 0 {
            return Err(Error::param("stream.test_points must be at least 1"));
        }
        Ok(())
    }
}

/// Deterministic non-stationary task stream: the full transcript is a pure
/// function of the config and the seed.
#[derive(Clone, Debug)]
pub struct TaskStream {
    config: StreamConfig,
    seed: u64,
    schedule: Vec<TaskHandle>,
}

/// Everything revealed in round `t`.
#[derive(Debug)]
pub struct Round {
    pub t: usize,
    pub task_id: usize,
    pub task: TaskHandle,
    pub batches: BatchGenerator,
    pub test: Option<Dataset>,
}

impl TaskStream {
    pub fn new(config: StreamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut sched_rng = root.child(0);
        let schedule = build_schedule(&config, &mut sched_rng)?;
        Ok(Self { config, seed, schedule })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_rounds(&self) -> usize {
        self.config.total_rounds
    }

    pub fn task(&self, t: usize) -> Result<&TaskHandle> {
        self.check_round(t)?;
        Ok(&self.schedule[t - 1])
    }

    pub fn tasks(&self) -> &[TaskHandle] {
        &self.schedule
    }

    fn check_round(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.total_rounds {
            return Err(Error::param(format!(
                "round {t} outside 1..={}",
                self.config.total_rounds
            )));
        }
        Ok(())
    }

    /// Task and data source for round `t` (1-based).
    pub fn round(&self, t: usize) -> Result<Round> {
        self.check_round(t)?;
        let task = self.schedule[t - 1].clone();
        let round_rng = Rng::new(self.seed).child(t as u64);
        let is_quadratic = task.as_quadratic().is_some();
        let test = if is_quadratic {
            None
        } else {
            let mut test_rng = round_rng.child(1);
            Some(task.sample(self.config.test_points, t, &mut test_rng)?)
        };
        let batches = BatchGenerator {
            task: task.clone(),
            task_id: t,
            total: if is_quadratic { 0 } else { self.config.points_per_task },
            batch: self.config.batch_size,
            produced: 0,
            rng: round_rng.child(0),
        };
        Ok(Round { t, task_id: t, task, batches, test })
    }
}

/// Reveals a round's data `n` points at a time until `N` have been produced.
#[derive(Debug)]
pub struct BatchGenerator {
    task: TaskHandle,
    task_id: usize,
    total: usize,
    batch: usize,
    produced: usize,
    rng: Rng,
}

impl BatchGenerator {
    pub fn produced(&self) -> usize {
        self.produced
    }

    /// Next batch, `Ok(None)` once the round's data is exhausted.
    pub fn next_batch(&mut self) -> Result<Option<Dataset>> {
        if self.produced >= self.total {
            return Ok(None);
        }
        let n = self.batch.min(self.total - self.produced);
        let data = self.task.sample(n, self.task_id, &mut self.rng)?;
        self.produced += n;
        Ok(Some(data))
    }
}

impl Iterator for BatchGenerator {
    type Item = Result<Dataset>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

/// Free-function form of [`TaskStream::round`].
pub fn stream_next(stream: &TaskStream, t: usize) -> Result<Round> {
    stream.round(t)
}

fn draw_task(family: &Family, shared: &SharedDraws, rng: &mut Rng) -> Result<TaskHandle> {
    Ok(match family {
        Family::Quadratic(q) => {
            if q.shared_b {
                let a = spd_sample(q.dim, q.mu, q.beta, rng)?;
                let b = shared.b.clone().expect("shared linear term drawn");
                TaskHandle::Quadratic(QuadraticTask { a, b, mu: q.mu, beta: q.beta })
            } else {
                TaskHandle::Quadratic(QuadraticTask::sample(q.dim, q.mu, q.beta, rng)?)
            }
        }
        Family::Sinusoid(s) => TaskHandle::Sinusoid(SinusoidTask::new(
            rng.uniform(s.amplitude.0, s.amplitude.1),
            rng.uniform(s.phase.0, s.phase.1),
            s.input_range,
            s.noise_std,
        )?),
        Family::Linear(l) => TaskHandle::Linear(LinearTask {
            slope: rng.uniform(l.slope.0, l.slope.1),
            intercept: rng.uniform(l.intercept.0, l.intercept.1),
            input_range: l.input_range,
            noise_std: l.noise_std,
        }),
        Family::Classification(c) => {
            let mut perm: Vec<usize> = (0..c.class_count).collect();
            perm.shuffle(rng);
            let means = shared.means.clone().expect("shared class means drawn");
            TaskHandle::Classification(SyntheticClassTask::new(means, c.noise_std, perm)?)
        }
    })
}

struct SharedDraws {
    b: Option<Vector>,
    means: Option<Vec<Vector>>,
}

fn shared_draws(family: &Family, rng: &mut Rng) -> SharedDraws {
    match family {
        Family::Quadratic(q) if q.shared_b => {
            // ‖A⁻¹b‖ <= ‖b‖/mu keeps every minimizer inside the radius.
            let b = Vector::from_fn(q.dim, |_, _| rng.uniform(-1.0, 1.0));
            let cap = MINIMIZER_RADIUS * q.mu;
            let norm = b.norm();
            let b = if norm > cap { b * (cap / norm) } else { b };
            SharedDraws { b: Some(b), means: None }
        }
        Family::Classification(c) => {
            let means = (0..c.class_count)
                .map(|_| rng.normal_vector(c.input_dim) * c.mean_scale)
                .collect();
            SharedDraws { b: None, means: Some(means) }
        }
        _ => SharedDraws { b: None, means: None },
    }
}

fn interpolate(start: &TaskHandle, end: &TaskHandle, s: f64) -> Result<TaskHandle> {
    let lerp = |a: f64, b: f64| a + s * (b - a);
    Ok(match (start, end) {
        (TaskHandle::Quadratic(p), TaskHandle::Quadratic(q)) => {
            // Convex combinations keep the spectrum inside [mu, beta].
            let a = crate::numerics::symmetrize(&(&p.a * (1.0 - s) + &q.a * s));
            let b = &p.b * (1.0 - s) + &q.b * s;
            let b = clamp_linear_term(&a, b)?;
            TaskHandle::Quadratic(QuadraticTask { a, b, mu: p.mu, beta: p.beta })
        }
        (TaskHandle::Sinusoid(p), TaskHandle::Sinusoid(q)) => TaskHandle::Sinusoid(SinusoidTask {
            amplitude: lerp(p.amplitude, q.amplitude),
            phase: lerp(p.phase, q.phase),
            ..p.clone()
        }),
        (TaskHandle::Linear(p), TaskHandle::Linear(q)) => TaskHandle::Linear(LinearTask {
            slope: lerp(p.slope, q.slope),
            intercept: lerp(p.intercept, q.intercept),
            ..p.clone()
        }),
        (TaskHandle::Classification(p), TaskHandle::Classification(q)) => {
            // Drift the label map's geometry, not the label map itself.
            let means = p
                .class_means
                .iter()
                .zip(&q.class_means)
                .map(|(m0, m1)| m0 * (1.0 - s) + m1 * s)
                .collect();
            TaskHandle::Classification(SyntheticClassTask::new(means, p.input_noise_std, p.label_permutation.clone())?)
        }
        _ => return Err(Error::state("drift endpoints belong to different families")),
    })
}

fn build_schedule(config: &StreamConfig, rng: &mut Rng) -> Result<Vec<TaskHandle>> {
    let total = config.total_rounds;
    let shared = shared_draws(&config.family, rng);
    match config.schedule {
        Schedule::Iid => (0..total).map(|_| draw_task(&config.family, &shared, rng)).collect(),
        Schedule::Constant => {
            let task = draw_task(&config.family, &shared, rng)?;
            Ok(vec![task; total])
        }
        Schedule::Piecewise { period } => {
            let mut out = Vec::with_capacity(total);
            let mut current = None;
            let mut regime = usize::MAX;
            for t in 1..=total {
                let r = (t - 1) / period;
                if r != regime {
                    regime = r;
                    current = Some(draw_task(&config.family, &shared, rng)?);
                }
                out.push(current.clone().expect("regime drawn"));
            }
            Ok(out)
        }
        Schedule::Drift => {
            let start = draw_task(&config.family, &shared, rng)?;
            let end = if let (Family::Classification(c), TaskHandle::Classification(s)) = (&config.family, &start) {
                let means = (0..c.class_count)
                    .map(|_| rng.normal_vector(c.input_dim) * c.mean_scale)
                    .collect();
                TaskHandle::Classification(SyntheticClassTask::new(means, s.input_noise_std, s.label_permutation.clone())?)
            } else {
                draw_task(&config.family, &shared, rng)?
            };
            (1..=total)
                .map(|t| {
                    let s = if total == 1 { 0.0 } else { (t - 1) as f64 / (total - 1) as f64 };
                    interpolate(&start, &end, s)
                })
                .collect()
        }
    }
}

/// One task seen so far together with all of its revealed data.
#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub task_id: usize,
    pub task: TaskHandle,
    pub data: Dataset,
}

/// Ordered record of every task and datapoint observed so far.
#[derive(Clone, Debug, Default)]
pub struct TaskBuffer {
    entries: Vec<BufferEntry>,
}

impl TaskBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn last(&self) -> Option<&BufferEntry> {
        self.entries.last()
    }

    pub fn push_task(&mut self, task_id: usize, task: TaskHandle) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if task_id <= last.task_id {
                return Err(Error::state(format!(
                    "task buffer: task id {task_id} does not follow {}",
                    last.task_id
                )));
            }
        }
        self.entries.push(BufferEntry { task_id, task, data: Dataset::empty(task_id) });
        Ok(())
    }

    /// Appends a batch to the current (most recent) task.
    pub fn append(&mut self, task_id: usize, batch: &Dataset) -> Result<()> {
        match self.entries.last_mut() {
            Some(last) if last.task_id == task_id => {
                last.data.extend(batch);
                Ok(())
            }
            _ => Err(Error::state(format!("task buffer: {task_id} is not the current task"))),
        }
    }

    /// All data from the first `count` entries merged into one dataset.
    pub fn union_first(&self, count: usize) -> Dataset {
        let mut out = Dataset::empty(0);
        for e in self.entries.iter().take(count) {
            out.extend(&e.data);
            out.task_id = e.task_id;
        }
        out
    }

    pub fn union(&self) -> Dataset {
        self.union_first(self.entries.len())
    }

    /// Quadratic tasks of the first `count` entries; `None` if any entry is not quadratic.
    pub fn quadratic_tasks(&self, count: usize) -> Option<Vec<QuadraticTask>> {
        self.entries
            .iter()
            .take(count)
            .map(|e| e.task.as_quadratic().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_predict(means: &[(Vector, usize)], x: &Vector) -> usize {
        means
            .iter()
            .min_by(|a, b| (&a.0 - x).norm().partial_cmp(&(&b.0 - x).norm()).unwrap())
            .unwrap()
            .1
    }

    fn fit_nearest_mean(data: &Dataset) -> Vec<(Vector, usize)> {
        let c = data.target_dim();
        let mut sums = vec![(Vector::zeros(data.input_dim()), 0usize); c];
        for (x, y) in data.iter() {
            let k = y.argmax().0;
            sums[k].0 += x;
            sums[k].1 += 1;
        }
        sums.into_iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(k, (s, n))| (s / n as f64, k))
            .collect()
    }

    fn accuracy(model: &[(Vector, usize)], data: &Dataset) -> f64 {
        let hits = data
            .iter()
            .filter(|(x, y)| nearest_mean_predict(model, x) == y.argmax().0)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn quad_loss_examples() {
        let t = QuadraticTask::scalar(2.0, -4.0).unwrap();
        assert_eq!(quad_loss(&t, &Vector::from_element(1, 2.0)).unwrap(), -4.0);
        assert_eq!(quad_loss(&t, &Vector::from_element(1, 0.0)).unwrap(), 0.0);
        let m = t.minimizer().unwrap();
        assert!((m[0] - 2.0).abs() < 1e-15);
        assert_eq!(quad_loss(&t, &m).unwrap(), -4.0);
    }

    #[test]
    fn quad_loss_zero_at_origin_and_dim_mismatch() {
        let mut rng = Rng::new(3);
        let t = QuadraticTask::sample(4, 0.5, 2.0, &mut rng).unwrap();
        assert_eq!(quad_loss(&t, &Vector::zeros(4)).unwrap(), 0.0);
        assert!(matches!(quad_loss(&t, &Vector::zeros(3)), Err(Error::Parameter(_))));
        assert!(matches!(quad_grad(&t, &Vector::zeros(5)), Err(Error::Parameter(_))));
    }

    #[test]
    fn quad_grad_examples() {
        let t = QuadraticTask::scalar(2.0, -4.0).unwrap();
        assert_eq!(quad_grad(&t, &Vector::zeros(1)).unwrap()[0], -4.0);
        let mut rng = Rng::new(8);
        let t = QuadraticTask::sample(3, 0.5, 2.0, &mut rng).unwrap();
        assert!(quad_grad(&t, &t.minimizer().unwrap()).unwrap().amax() < 1e-10);
        let w = rng.normal_vector(3);
        let fd = crate::numerics::finite_diff_grad(|w| quad_loss(&t, w).unwrap(), &w, 1e-5).unwrap();
        assert!((fd - quad_grad(&t, &w).unwrap()).amax() < 1e-7);
    }

    #[test]
    fn sampled_minimizers_are_bounded() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let t = QuadraticTask::sample(3, 0.05, 2.0, &mut rng).unwrap();
            assert!(t.minimizer().unwrap().norm() <= MINIMIZER_RADIUS + 1e-9);
        }
    }

    #[test]
    fn quadratic_convexity_and_strong_convexity() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let t = QuadraticTask::sample(3, 0.5, 2.0, &mut rng).unwrap();
            let w1 = rng.normal_vector(3) * 3.0;
            let w2 = rng.normal_vector(3) * 3.0;
            let lam = rng.uniform(0.0, 1.0);
            let mid = &w1 * lam + &w2 * (1.0 - lam);
            let lhs = quad_loss(&t, &mid).unwrap();
            let rhs = lam * quad_loss(&t, &w1).unwrap() + (1.0 - lam) * quad_loss(&t, &w2).unwrap();
            assert!(lhs <= rhs + 1e-10);
            let lin = quad_loss(&t, &w1).unwrap()
                + quad_grad(&t, &w1).unwrap().dot(&(&w2 - &w1))
                + 0.5 * t.mu * (&w2 - &w1).norm_squared();
            assert!(quad_loss(&t, &w2).unwrap() >= lin - 1e-8);
        }
    }

    #[test]
    fn sinusoid_examples() {
        let t = SinusoidTask::new(1.0, 0.0, (-5.0, 5.0), 0.0).unwrap();
        let d = t.label(&[PI / 2.0], 1, &mut Rng::new(0)).unwrap();
        assert!((d.targets[0][0] - 1.0).abs() < 1e-15);

        let t = SinusoidTask::new(2.3, 0.7, (-5.0, 5.0), 0.0).unwrap();
        let d = sinusoid_sample(&t, 50, 1, &mut Rng::new(1)).unwrap();
        for (x, y) in d.iter() {
            assert!((y[0] - t.mean(x[0])).abs() < 1e-12);
            assert!(x[0] >= -5.0 && x[0] < 5.0);
        }

        let t = SinusoidTask::new(1.5, 0.3, (-5.0, 5.0), 0.1).unwrap();
        let d = sinusoid_sample(&t, 1000, 1, &mut Rng::new(2)).unwrap();
        let res: Vec<f64> = d.iter().map(|(x, y)| y[0] - t.mean(x[0])).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64).sqrt();
        assert!((0.08..=0.12).contains(&std), "residual std {std}");

        assert!(matches!(sinusoid_sample(&t, 0, 1, &mut Rng::new(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn sinusoid_task_validation() {
        assert!(SinusoidTask::new(0.0, 0.0, (-1.0, 1.0), 0.0).is_err());
        assert!(SinusoidTask::new(1.0, 0.0, (1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn class_sample_examples() {
        let means = vec![Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![-1.0, 0.5])];
        let ident = SyntheticClassTask::new(means.clone(), 0.0, vec![0, 1]).unwrap();
        let d = class_sample(&ident, 200, 1, &mut Rng::new(5)).unwrap();
        for x in &d.inputs {
            assert!(*x == means[0] || *x == means[1]);
        }
        let model = fit_nearest_mean(&d);
        assert_eq!(accuracy(&model, &d), 1.0);

        let swapped = SyntheticClassTask::new(means, 0.0, vec![1, 0]).unwrap();
        let other = class_sample(&swapped, 200, 2, &mut Rng::new(6)).unwrap();
        assert_eq!(accuracy(&model, &other), 0.0);

        assert!(matches!(class_sample(&ident, 0, 1, &mut Rng::new(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn class_task_validation() {
        let means = vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![1.0])];
        assert!(SyntheticClassTask::new(means, 0.1, vec![0, 1]).is_err());
        let means = vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![2.0])];
        assert!(SyntheticClassTask::new(means.clone(), 0.1, vec![0, 0]).is_err());
        assert!(SyntheticClassTask::new(means, 0.1, vec![1, 0]).is_ok());
    }

    fn sine_stream(schedule: Schedule, seed: u64) -> TaskStream {
        TaskStream::new(
            StreamConfig {
                family: Family::Sinusoid(SinusoidFamily::default()),
                schedule,
                total_rounds: 20,
                points_per_task: 25,
                batch_size: 10,
                test_points: 5,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn constant_schedule_repeats_task() {
        let s = sine_stream(Schedule::Constant, 4);
        for t in 2..=20 {
            assert_eq!(s.task(t).unwrap(), s.task(1).unwrap());
        }
    }

    #[test]
    fn piecewise_schedule_switches() {
        let s = sine_stream(Schedule::Piecewise { period: 9 }, 4);
        assert_eq!(s.task(1).unwrap(), s.task(9).unwrap());
        assert_ne!(s.task(9).unwrap(), s.task(10).unwrap());
        assert_eq!(s.task(10).unwrap(), s.task(18).unwrap());
    }

    #[test]
    fn drift_schedule_moves_linearly() {
        let s = sine_stream(Schedule::Drift, 4);
        let amp = |t| match s.task(t).unwrap() {
            TaskHandle::Sinusoid(x) => x.amplitude,
            _ => unreachable!(),
        };
        let step = amp(2) - amp(1);
        for t in 2..20 {
            assert!((amp(t + 1) - amp(t) - step).abs() < 1e-12);
        }
    }

    #[test]
    fn rounds_are_deterministic_and_batched() {
        let a = sine_stream(Schedule::Iid, 10);
        let b = sine_stream(Schedule::Iid, 10);
        for t in [1, 7, 20] {
            let ra = a.round(t).unwrap();
            let rb = b.round(t).unwrap();
            assert_eq!(ra.test, rb.test);
            let ba: Vec<Dataset> = ra.batches.map(|d| d.unwrap()).collect();
            let bb: Vec<Dataset> = rb.batches.map(|d| d.unwrap()).collect();
            assert_eq!(ba, bb);
            assert_eq!(ba.iter().map(Dataset::len).collect::<Vec<_>>(), vec![10, 10, 5]);
        }
        assert!(matches!(a.round(0), Err(Error::Parameter(_))));
        assert!(matches!(a.round(21), Err(Error::Parameter(_))));
    }

    #[test]
    fn stream_config_validation() {
        let mut cfg = sine_stream(Schedule::Iid, 0).config().clone();
        cfg.batch_size = 30;
        assert!(TaskStream::new(cfg.clone(), 0).is_err());
        cfg.batch_size = 5;
        cfg.total_rounds = 0;
        assert!(TaskStream::new(cfg, 0).is_err());
    }

    #[test]
    fn quadratic_stream_reveals_no_data() {
        let s = TaskStream::new(
            StreamConfig {
                family: Family::Quadratic(QuadraticFamily { dim: 2, mu: 0.5, beta: 2.0, shared_b: true }),
                schedule: Schedule::Iid,
                total_rounds: 5,
                points_per_task: 10,
                batch_size: 10,
                test_points: 0,
            },
            3,
        )
        .unwrap();
        let mut r = s.round(2).unwrap();
        assert!(r.test.is_none());
        assert!(r.batches.next_batch().unwrap().is_none());
        let b1 = &s.task(1).unwrap().as_quadratic().unwrap().b;
        let b4 = &s.task(4).unwrap().as_quadratic().unwrap().b;
        assert_eq!(b1, b4);
        assert_ne!(s.task(1).unwrap(), s.task(4).unwrap());
    }

    #[test]
    fn minibatch_examples() {
        let t = SinusoidTask::new(1.0, 0.0, (-5.0, 5.0), 0.0).unwrap();
        let data = sinusoid_sample(&t, 10, 1, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);

        let full = minibatch(&data, 10, &mut rng).unwrap();
        let mut a: Vec<f64> = full.inputs.iter().map(|x| x[0]).collect();
        let mut b: Vec<f64> = data.inputs.iter().map(|x| x[0]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);

        let one = minibatch(&data, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(data.inputs.contains(&one.inputs[0]));

        let big = minibatch(&data, 25, &mut rng).unwrap();
        assert_eq!(big.len(), 25);

        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let pick = minibatch(&data, 1, &mut rng).unwrap();
            let i = data.inputs.iter().position(|x| *x == pick.inputs[0]).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "frequency {f}");
        }

        assert!(matches!(minibatch(&Dataset::empty(0), 3, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn buffer_ordering() {
        let s = sine_stream(Schedule::Iid, 2);
        let mut buf = TaskBuffer::new();
        for t in 1..=4 {
            let r = s.round(t).unwrap();
            buf.push_task(r.task_id, r.task.clone()).unwrap();
            for batch in r.batches {
                buf.append(t, &batch.unwrap()).unwrap();
            }
        }
        assert_eq!(buf.len(), 4);
        for (i, e) in buf.entries().iter().enumerate() {
            assert_eq!(e.task_id, i + 1);
            assert_eq!(e.data.len(), 25);
        }
        assert_eq!(buf.union().len(), 100);
        assert_eq!(buf.union_first(2).len(), 50);
        assert!(buf.push_task(4, s.task(1).unwrap().clone()).is_err());
        assert!(buf.append(2, &Dataset::empty(2)).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let t = SinusoidTask::new(1.0, 0.5, (-5.0, 5.0), 0.1).unwrap();
        let d = sinusoid_sample(&t, 7, 3, &mut Rng::new(9)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("task_id,x_0,y_0\n"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn dataset_rejects_mismatch_and_nan() {
        let x = vec![Vector::from_element(1, 0.0)];
        assert!(Dataset::new(x.clone(), vec![], 0).is_err());
        assert!(Dataset::new(x, vec![Vector::from_element(1, f64::NAN)], 0).is_err());
    }
}
