//! Command-line harness: `run`, `regret` and `verify`.
//!
//! Configuration is flat `key = value` text. Keys carry a section prefix
//! (`stream.`, `learner.`, `update.`, `opt.`, `model.`, `regret.`,
//! `verify.`) plus the top-level `seeds`. Blank lines and `#` comments are
//! ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::analysis::{logt_fit, verify_battery, CheckRow, CheckStatus, VerifyConfig};
use crate::error::{Error, Result};
use crate::learners::{
    meta_comparator, online_play, plain_comparator, regret_online_meta, regret_standard, run_round, LearnerConfig,
    LearnerKind, LearnerState, Predictor, RoundReport, SamplingDistribution,
};
use crate::models::{LinearModel, LossKind, MlpModel, Model};
use crate::numerics::{Rng, Vector};
use crate::tasks::{
    ClassFamily, Family, LinearFamily, QuadraticFamily, QuadraticTask, Schedule, SinusoidFamily, StreamConfig, TaskStream,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping the worker count.
pub const WORKERS_ENV: &str = "FTML_WORKERS";

pub const ROUNDS_HEADER: [&str; 9] = [
    "seed",
    "learner",
    "round",
    "task_id",
    "datapoints_seen",
    "eval_loss",
    "eval_metric",
    "efficiency_datapoints",
    "wall_ms",
];
pub const CURVES_HEADER: [&str; 6] = ["seed", "learner", "round", "datapoints_seen", "eval_loss", "eval_metric"];
pub const REGRET_HEADER: [&str; 6] =
    ["seed", "T_checkpoint", "regret_oml", "regret_standard", "logt_coefficient", "logt_residual"];
pub const VERIFY_HEADER: [&str; 6] = ["check", "bound", "measured", "margin", "status", "note"];

#[derive(Parser, Debug)]
#[command(name = "ftml", about = "Online meta-learning experiments and theory checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Play every learner over the stream and write rounds.csv and curves.csv.
    Run(CommonArgs),
    /// Exact online play on a quadratic stream; writes regret.csv.
    Regret(CommonArgs),
    /// Run the theory verification battery; writes verify.csv.
    Verify(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides `seeds` in the config.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads (also capped by FTML_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub label_smoothing: f64,
}

impl ModelSpec {
    /// Builds the model for a stream and the loss it trains under; `None`
    /// for quadratic streams, which need no model.
    pub fn build(&self, family: &Family) -> Result<Option<(Box<dyn Model>, LossKind)>> {
        let (input, output, loss) = match family {
            Family::Quadratic(_) => return Ok(None),
            Family::Sinusoid(_) | Family::Linear(_) => (1, 1, LossKind::SquaredError),
            Family::Classification(c) => {
                (c.input_dim, c.class_count, LossKind::CrossEntropy { label_smoothing: self.label_smoothing })
            }
        };
        loss.validate()?;
        let model: Box<dyn Model> = match self.kind {
            ModelKind::Linear => Box::new(LinearModel::new(input, output)?),
            ModelKind::Mlp => {
                let mut widths = vec![input];
                widths.extend(&self.hidden);
                widths.push(output);
                Box::new(MlpModel::new(widths)?)
            }
        };
        Ok(Some((model, loss)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegretInit {
    Random,
    Zero,
    Comparator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub learners: Vec<LearnerKind>,
    pub learner: LearnerConfig,
    pub model: ModelSpec,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<usize>,
    pub regret_init: RegretInit,
    pub verify: VerifyConfig,
}

/// Key/value pairs still waiting to be consumed.
struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::param(format!("{key}: cannot parse {raw:?}"))),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::param(format!("{key}: cannot parse {s:?}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn range(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        Ok((self.get(&format!("{key}_min"), default.0)?, self.get(&format!("{key}_max"), default.1)?))
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_lines(text: &str, into: &mut BTreeMap<String, String>) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::param(format!("config line {}: expected key = value", i + 1)))?;
        into.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses config text; later lines win over earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        parse_lines(text, &mut map)?;
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut e = Entries(map);
        let family_name: String = e.get("stream.family", "sinusoid".to_string())?;
        let noise = e.get("stream.noise", 0.0)?;
        let family = match family_name.as_str() {
            "quadratic" => Family::Quadratic(QuadraticFamily {
                dim: e.get("stream.dim", 2)?,
                mu: e.get("stream.mu", 0.5)?,
                beta: e.get("stream.beta", 2.0)?,
                shared_b: match e.take::<String>("stream.shared_b")? {
                    None => false,
                    Some(raw) => parse_bool(&raw).ok_or_else(|| Error::param(format!("stream.shared_b: cannot parse {raw:?}")))?,
                },
            }),
            "sinusoid" => {
                let d = SinusoidFamily::default();
                Family::Sinusoid(SinusoidFamily {
                    amplitude: e.range("stream.amplitude", d.amplitude)?,
                    phase: e.range("stream.phase", d.phase)?,
                    input_range: e.range("stream.x", d.input_range)?,
                    noise_std: noise,
                })
            }
            "linear" => Family::Linear(LinearFamily {
                slope: e.range("stream.slope", (-2.0, 2.0))?,
                intercept: e.range("stream.intercept", (-1.0, 1.0))?,
                input_range: e.range("stream.x", (-1.0, 1.0))?,
                noise_std: noise,
            }),
            "classification" => Family::Classification(ClassFamily {
                class_count: e.get("stream.classes", 5)?,
                input_dim: e.get("stream.input_dim", 2)?,
                mean_scale: e.get("stream.mean_scale", 3.0)?,
                noise_std: e.get("stream.class_noise", 1.0)?,
            }),
            other => return Err(Error::param(format!("stream.family: unknown family {other:?}"))),
        };
        let schedule_name: String = e.get("stream.schedule", "iid".to_string())?;
        let schedule = match schedule_name.as_str() {
            "iid" => Schedule::Iid,
            "constant" => Schedule::Constant,
            "piecewise" => Schedule::Piecewise { period: e.get("stream.period", 5)? },
            "drift" => Schedule::Drift,
            other => return Err(Error::param(format!("stream.schedule: unknown schedule {other:?}"))),
        };
        let stream = StreamConfig {
            family,
            schedule,
            total_rounds: e.get("stream.rounds", 20)?,
            points_per_task: e.get("stream.points", 100)?,
            batch_size: e.get("stream.batch", 10)?,
            test_points: e.get("stream.test_points", 100)?,
        };

        let learners = match e.list::<String>("learner.kinds")? {
            None => LearnerKind::ALL.to_vec(),
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<_>>>()
                .map_err(|err| Error::param(format!("learner.kinds: {err}")))?,
        };
        let base = LearnerConfig::new(LearnerKind::Ftml);
        let gamma = match e.take::<String>("learner.gamma")? {
            None => base.gamma,
            Some(raw) => match raw.as_str() {
                "inf" | "+inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                _ => raw.parse().map_err(|_| Error::param(format!("learner.gamma: cannot parse {raw:?}")))?,
            },
        };
        let sampling = match e.list::<f64>("learner.sampling_weights")? {
            None => SamplingDistribution::Uniform,
            Some(w) => SamplingDistribution::Custom(w),
        };
        let first_order = match e.take::<String>("update.first_order")? {
            None => base.first_order,
            Some(raw) => parse_bool(&raw).ok_or_else(|| Error::param(format!("update.first_order: cannot parse {raw:?}")))?,
        };
        let learner = LearnerConfig {
            kind: LearnerKind::Ftml,
            // Squared error on sinusoid amplitudes up to 5 diverges an MLP inner step at 0.1.
            alpha: e.get(
                "update.alpha",
                if matches!(stream.family, Family::Sinusoid(_)) { 0.01 } else { base.alpha },
            )?,
            n_grad: e.get("update.n_grad", base.n_grad)?,
            train_batch: e.get("update.train_batch", base.train_batch)?,
            val_batch: e.get("update.val_batch", base.val_batch)?,
            first_order,
            n_meta: e.get("learner.n_meta", base.n_meta)?,
            optimizer: e.get("opt.kind", base.optimizer)?,
            lr: e.get("opt.lr", base.lr)?,
            sampling,
            gamma,
        };

        let model_kind: String = e.get(
            "model.kind",
            if matches!(stream.family, Family::Linear(_)) { "linear".to_string() } else { "mlp".to_string() },
        )?;
        let model = ModelSpec {
            kind: match model_kind.as_str() {
                "linear" => ModelKind::Linear,
                "mlp" => ModelKind::Mlp,
                other => return Err(Error::param(format!("model.kind: unknown model {other:?}"))),
            },
            hidden: e.list("model.hidden")?.unwrap_or_else(|| vec![40, 40]),
            label_smoothing: e.get("model.label_smoothing", 0.1)?,
        };

        let seeds = e.list("seeds")?.unwrap_or_else(|| vec![0]);
        let checkpoints = e.list("regret.checkpoints")?.unwrap_or_else(|| vec![64, 128, 256, 512]);
        let init_name: String = e.get("regret.init", "random".to_string())?;
        let regret_init = match init_name.as_str() {
            "random" => RegretInit::Random,
            "zero" => RegretInit::Zero,
            "comparator" => RegretInit::Comparator,
            other => return Err(Error::param(format!("regret.init: unknown init {other:?}"))),
        };
        let dv = VerifyConfig::default();
        let verify = VerifyConfig {
            dim: e.get("verify.dim", dv.dim)?,
            mu: e.get("verify.mu", dv.mu)?,
            beta: e.get("verify.beta", dv.beta)?,
            alpha: e.take("verify.alpha")?,
            tasks: e.get("verify.tasks", dv.tasks)?,
            pairs: e.get("verify.pairs", dv.pairs)?,
            gradient_configs: e.get("verify.gradient_configs", dv.gradient_configs)?,
            seed: 0,
            force: match e.take::<String>("verify.force")? {
                None => false,
                Some(raw) => parse_bool(&raw).ok_or_else(|| Error::param(format!("verify.force: cannot parse {raw:?}")))?,
            },
        };

        if let Some(key) = e.0.keys().next() {
            return Err(Error::param(format!("{key}: unknown configuration key")));
        }
        let cfg = Self { stream, learners, learner, model, seeds, checkpoints, regret_init, verify };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.learner.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::param("seeds: at least one seed is required"));
        }
        if self.learners.is_empty() {
            return Err(Error::param("learner.kinds: at least one learner is required"));
        }
        if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| w[1] <= w[0]) || self.checkpoints[0] == 0 {
            return Err(Error::param("regret.checkpoints: need strictly increasing positive horizons"));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn worker_count(flag: Option<usize>) -> Result<usize> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(raw) => Some(
            raw.trim()
                .parse::<usize>()
                .map_err(|_| Error::param(format!("{WORKERS_ENV}: cannot parse {raw:?}")))?,
        ),
        Err(_) => None,
    };
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let k = match (flag, env) {
        (Some(f), Some(e)) => f.min(e),
        (Some(f), None) => f,
        (None, Some(e)) => e.min(default),
        (None, None) => default,
    };
    if k == 0 {
        return Err(Error::param("--workers: must be at least 1"));
    }
    Ok(k)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::state(format!("worker pool: {e}")))
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
}

/// A failure inside one (seed, learner) job, with where it happened.
#[derive(Debug)]
pub struct JobFailure {
    pub seed: u64,
    pub learner: Option<LearnerKind>,
    pub round: Option<usize>,
    pub error: Error,
}

impl JobFailure {
    fn describe(&self) -> String {
        let mut s = format!("seed {}", self.seed);
        if let Some(l) = self.learner {
            s.push_str(&format!(", learner {l}"));
        }
        if let Some(r) = self.round {
            s.push_str(&format!(", round {r}"));
        }
        format!("{s}: {}", self.error)
    }
}

/// Plays one learner over one seed's stream.
pub fn play(cfg: &ExperimentConfig, seed: u64, kind: LearnerKind) -> std::result::Result<Vec<RoundReport>, JobFailure> {
    let fail = |round, error| JobFailure { seed, learner: Some(kind), round, error };
    let stream = TaskStream::new(cfg.stream.clone(), seed).map_err(|e| fail(None, e))?;
    let built = cfg.model.build(&cfg.stream.family).map_err(|e| fail(None, e))?;
    let predictor = built.as_ref().map(|(m, l)| Predictor { model: m.as_ref(), loss: *l });
    let mut state = LearnerState::new(cfg.learner.with_kind(kind), &stream, predictor, seed).map_err(|e| fail(None, e))?;
    let mut reports = Vec::with_capacity(stream.total_rounds());
    for t in 1..=stream.total_rounds() {
        reports.push(run_round(&mut state, &stream, predictor).map_err(|e| fail(Some(t), e))?);
    }
    Ok(reports)
}

/// Plays every (seed, learner) pair; results come back in (seed, learner) order.
pub fn run_all(cfg: &ExperimentConfig, workers: usize) -> std::result::Result<Vec<(u64, LearnerKind, Vec<RoundReport>)>, JobFailure> {
    let jobs: Vec<(u64, LearnerKind)> =
        cfg.seeds.iter().flat_map(|&s| cfg.learners.iter().map(move |&k| (s, k))).collect();
    let pool = pool(workers).map_err(|error| JobFailure { seed: cfg.seeds[0], learner: None, round: None, error })?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, kind)| play(cfg, seed, kind).map(|r| (seed, kind, r)))
            .collect()
    })
}

fn write_rounds(dir: &Path, results: &[(u64, LearnerKind, Vec<RoundReport>)]) -> Result<()> {
    let mut rounds = csv_writer(dir, "rounds.csv")?;
    let mut curves = csv_writer(dir, "curves.csv")?;
    rounds.write_record(ROUNDS_HEADER)?;
    curves.write_record(CURVES_HEADER)?;
    for (seed, kind, reports) in results {
        for r in reports {
            let last = r.final_point();
            rounds.write_record([
                seed.to_string(),
                kind.name().to_string(),
                r.t.to_string(),
                r.task_id.to_string(),
                last.datapoints.to_string(),
                fmt_f(last.loss),
                fmt_f(last.metric),
                r.efficiency.map(|e| e.to_string()).unwrap_or_default(),
                format!("{:.3}", r.wall_ms),
            ])?;
            for p in &r.curve {
                curves.write_record([
                    seed.to_string(),
                    kind.name().to_string(),
                    r.t.to_string(),
                    p.datapoints.to_string(),
                    fmt_f(p.loss),
                    fmt_f(p.metric),
                ])?;
            }
        }
    }
    rounds.flush()?;
    curves.flush()?;
    Ok(())
}

/// One row of regret.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretRow {
    pub seed: u64,
    pub checkpoint: usize,
    pub regret_oml: f64,
    pub regret_standard: f64,
    pub logt_coefficient: Option<f64>,
    pub logt_residual: Option<f64>,
}

/// Exact online play for one seed, evaluated at each checkpoint against the
/// hindsight comparators of that horizon.
pub fn regret_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RegretRow>> {
    let Family::Quadratic(_) = cfg.stream.family else {
        return Err(Error::param("stream.family: regret needs a quadratic stream for an exact comparator"));
    };
    let horizon = *cfg.checkpoints.last().expect("validated checkpoints");
    let stream = TaskStream::new(StreamConfig { total_rounds: horizon, ..cfg.stream.clone() }, seed)?;
    let tasks: Vec<QuadraticTask> = stream.tasks().iter().filter_map(|h| h.as_quadratic().cloned()).collect();
    let alpha = cfg.learner.alpha;
    let dim = tasks[0].b.len();
    let (init_meta, init_plain) = match cfg.regret_init {
        RegretInit::Random => {
            let w = Rng::new(seed).child(u64::MAX).normal_vector(dim);
            (w.clone(), w)
        }
        RegretInit::Zero => (Vector::zeros(dim), Vector::zeros(dim)),
        RegretInit::Comparator => (meta_comparator(&tasks, alpha)?.0, plain_comparator(&tasks)?.0),
    };
    let (meta, _) = online_play(&tasks, alpha, &init_meta)?;
    let (_, plain) = online_play(&tasks, alpha, &init_plain)?;
    let mut rows = Vec::with_capacity(cfg.checkpoints.len());
    for &t in &cfg.checkpoints {
        let head = &tasks[..t];
        rows.push(RegretRow {
            seed,
            checkpoint: t,
            regret_oml: regret_online_meta(&meta.prefix(t), &meta_comparator(head, alpha)?.1)?,
            regret_standard: regret_standard(&plain.prefix(t), &plain_comparator(head)?.1)?,
            logt_coefficient: None,
            logt_residual: None,
        });
    }
    if rows.len() >= 3 && rows[0].checkpoint > 1 {
        let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.checkpoint as f64, r.regret_oml)).collect();
        let (c, resid) = logt_fit(&curve)?;
        for r in &mut rows {
            r.logt_coefficient = Some(c);
            r.logt_residual = Some(resid);
        }
    }
    Ok(rows)
}

fn write_regret(dir: &Path, rows: &[RegretRow]) -> Result<()> {
    let mut w = csv_writer(dir, "regret.csv")?;
    w.write_record(REGRET_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.checkpoint.to_string(),
            fmt_f(r.regret_oml),
            fmt_f(r.regret_standard),
            r.logt_coefficient.map(fmt_f).unwrap_or_default(),
            r.logt_residual.map(fmt_f).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_verify(dir: &Path, rows: &[CheckRow]) -> Result<()> {
    let mut w = csv_writer(dir, "verify.csv")?;
    w.write_record(VERIFY_HEADER)?;
    for r in rows {
        w.write_record([
            r.check.clone(),
            fmt_f(r.bound),
            r.measured.map(fmt_f).unwrap_or_default(),
            r.margin.map(fmt_f).unwrap_or_default(),
            r.status.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::param(format!("--config {}: {e}", path.display())))?;
        parse_lines(&text, &mut map)?;
    }
    for o in &args.overrides {
        parse_lines(o, &mut map).map_err(|_| Error::param(format!("--set {o:?}: expected key=value")))?;
    }
    let mut cfg = ExperimentConfig::from_map(map)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    cfg.verify.seed = cfg.seeds[0];
    Ok(cfg)
}

fn exit_for(error: &Error) -> i32 {
    if error.is_numeric() {
        EXIT_DIVERGED
    } else {
        EXIT_CONFIG
    }
}

fn cmd_run(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args)?;
    let workers = worker_count(args.workers)?;
    match run_all(&cfg, workers) {
        Ok(results) => {
            write_rounds(&args.out, &results)?;
            println!("wrote {} rounds to {}", results.iter().map(|r| r.2.len()).sum::<usize>(), args.out.join("rounds.csv").display());
            Ok(EXIT_OK)
        }
        Err(f) => {
            eprintln!("error: {}", f.describe());
            Ok(exit_for(&f.error))
        }
    }
}

fn cmd_regret(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args)?;
    if !matches!(cfg.stream.family, Family::Quadratic(_)) {
        return Err(Error::param("stream.family: regret needs a quadratic stream for an exact comparator"));
    }
    let workers = worker_count(args.workers)?;
    let per_seed: Vec<std::result::Result<Vec<RegretRow>, JobFailure>> = pool(workers)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| regret_rows(&cfg, seed).map_err(|error| JobFailure { seed, learner: None, round: None, error }))
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_seed {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(f) => {
                eprintln!("error: {}", f.describe());
                return Ok(exit_for(&f.error));
            }
        }
    }
    write_regret(&args.out, &rows)?;
    println!("wrote {} checkpoints to {}", rows.len(), args.out.join("regret.csv").display());
    Ok(EXIT_OK)
}

fn cmd_verify(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args)?;
    let rows = verify_battery(&cfg.verify)?;
    write_verify(&args.out, &rows)?;
    let count = |s| rows.iter().filter(|r| r.status == s).count();
    let (pass, fail, skip) = (count(CheckStatus::Pass), count(CheckStatus::Fail), count(CheckStatus::Skip));
    for r in rows.iter().filter(|r| r.status == CheckStatus::Fail) {
        eprintln!("failed: {} (bound {}, measured {:?})", r.check, r.bound, r.measured);
    }
    println!("verify: {pass} passed, {fail} failed, {skip} skipped");
    Ok(if fail == 0 { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

/// Entry point shared by the binary and the tests; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Regret(a) => cmd_regret(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
