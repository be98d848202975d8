//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ftml::adaptation::quadratic_step;
use ftml::analysis::{brute_force_min, gradient_check_errors, ClosedFormSolutions};
use ftml::cli::{play, regret_rows, ExperimentConfig};
use ftml::learners::LearnerKind;
use ftml::meta_objective::{maml_batch_objective, post_update_hessian_quadratic, uniform_weights};
use ftml::numerics::{Matrix, Rng, Vector};
use ftml::tasks::QuadraticTask;

const SEEDS: [u64; 3] = [0, 1, 2];
const EIG_TOL: f64 = 1e-9;
/// Datapoint threshold used for the learning-efficiency trend.
const SINUSOID_GAMMA: f64 = 0.5;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn post_update_bounds() -> Outcome {
    let (mu, beta, alpha) = (0.5, 2.0, 0.25);
    let mut rng = Rng::new(11);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..50 {
        let task = QuadraticTask::sample(3, mu, beta, &mut rng).unwrap();
        let h = post_update_hessian_quadratic(&task, alpha).unwrap();
        // Independent construction of (I - aA) A (I - aA).
        let step = Matrix::identity(3, 3) - &task.a * alpha;
        let oracle = &step * &task.a * &step;
        if (&h - &oracle).amax() > 1e-12 {
            return outcome(false, "post-update Hessian disagrees with direct product");
        }
        for ev in oracle.symmetric_eigen().eigenvalues.iter() {
            lo = lo.min(*ev);
            hi = hi.max(*ev);
        }
    }
    let loose = lo >= mu / 8.0 - EIG_TOL && hi <= 9.0 * beta / 8.0 + EIG_TOL;
    let (tl, th) = ((1.0 - alpha * beta).powi(2) * mu, (1.0 - alpha * mu).powi(2) * beta);
    let tight = lo >= tl - EIG_TOL && hi <= th + EIG_TOL;
    outcome(loose && tight, format!("eigs in [{lo:.6}, {hi:.6}], bounds [{}, {}], tight [{tl}, {th}]", mu / 8.0, 9.0 * beta / 8.0))
}

fn closed_form_separation() -> Outcome {
    let alpha = 0.1;
    let task = |a: f64, b: f64| QuadraticTask::scalar(a, b).unwrap();
    let tasks = vec![task(1.0, -1.0), task(3.0, -1.0)];
    let sol = ClosedFormSolutions::compute(&tasks, alpha).unwrap();
    let (joint, maml) = (sol.theta_joint[0], sol.theta_maml[0]);
    let formulas = (joint - 0.5).abs() <= 1e-12 && (maml - 0.65 / 1.14).abs() <= 1e-12;
    let w = uniform_weights(2);
    let joint_loss = |v: &Vector| tasks.iter().map(|t| 0.5 * t.a[(0, 0)] * v[0] * v[0] + t.b[0] * v[0]).sum::<f64>();
    let joint_grid = brute_force_min(joint_loss, &[(-1.0, 2.0)], 1e-4).unwrap().0[0];
    let maml_grid = brute_force_min(|v| maml_batch_objective(&tasks, &w, v, alpha).unwrap(), &[(-1.0, 2.0)], 1e-4).unwrap().0[0];
    let grids = (joint_grid - joint).abs() <= 1e-3 && (maml_grid - maml).abs() <= 1e-3;
    let same = vec![task(2.0, -1.0), task(2.0, 0.5), task(2.0, 3.0)];
    let s = ClosedFormSolutions::compute(&same, alpha).unwrap();
    let coincide = (s.theta_joint[0] - s.theta_maml[0]).abs() <= 1e-10;
    outcome(
        formulas && grids && coincide,
        format!("joint {joint} (grid {joint_grid:.4}), maml {maml:.12} (grid {maml_grid:.4}), equal-curvature gap {:.1e}", (s.theta_joint[0] - s.theta_maml[0]).abs()),
    )
}

fn meta_gradients() -> Outcome {
    let [q, l, m] = gradient_check_errors(20, 5).unwrap();
    outcome(q <= 1e-6 && l <= 1e-5 && m <= 1e-3, format!("worst relative error quadratic {q:.2e}, linear {l:.2e}, mlp {m:.2e}"))
}

fn contraction() -> Outcome {
    let (mu, beta) = (0.5, 2.0);
    let mut rng = Rng::new(21);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let task = QuadraticTask::sample(4, mu, beta, &mut rng).unwrap();
        let alpha = (0.05 + 0.95 * (i as f64 / 19.0)) / beta;
        for _ in 0..100 {
            let x = rng.normal_vector(4) * 3.0;
            let y = rng.normal_vector(4) * 3.0;
            let ux = &x - (&task.a * &x + &task.b) * alpha;
            let uy = &y - (&task.a * &y + &task.b) * alpha;
            if (quadratic_step(&task, &x, alpha).unwrap() - &ux).amax() > 1e-12 {
                return outcome(false, "update map disagrees with the hand-written step");
            }
            let (gap, moved) = ((&x - &y).norm(), (&ux - &uy).norm());
            worst = worst.max(moved - (1.0 - alpha * mu) * gap).max((1.0 - alpha * beta) * gap - moved);
        }
    }
    outcome(worst <= 1e-9, format!("largest bracket violation {worst:.2e} over 2000 pairs"))
}

fn regret_shape() -> Outcome {
    let cfg = ExperimentConfig::parse("stream.family = quadratic\nstream.dim = 3\nupdate.alpha = 0.25\n").unwrap();
    let mut residuals = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let rows = regret_rows(&cfg, seed).unwrap();
        let last = rows.last().unwrap();
        let per_t: Vec<f64> = rows.iter().map(|r| r.regret_oml / r.checkpoint as f64).collect();
        ok &= last.regret_oml >= -1e-6;
        ok &= per_t.windows(2).all(|w| w[1] < w[0]);
        residuals.push(last.logt_residual.unwrap());
        notes.push(format!("{:.3}", last.regret_oml));
    }
    let resid = mean(&residuals);
    outcome(ok && resid <= 0.2, format!("Regret_512 per seed [{}], mean log-fit residual {resid:.3}", notes.join(", ")))
}

fn mean_last(cfg: &ExperimentConfig, kind: LearnerKind, tail: usize, score: impl Fn(&ftml::learners::RoundReport) -> f64) -> f64 {
    let per_seed: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let reports = play(cfg, s, kind).unwrap_or_else(|f| panic!("{kind} seed {s}: {}", f.error));
            mean(&reports[reports.len() - tail..].iter().map(&score).collect::<Vec<_>>())
        })
        .collect();
    mean(&per_seed)
}

fn sinusoid_config() -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "stream.family = sinusoid\nstream.rounds = 20\nstream.points = 50\nstream.batch = 10\n\
         learner.kinds = FTML, TOE\nlearner.gamma = {SINUSOID_GAMMA}\n"
    ))
    .unwrap()
}

fn behavioural_separation() -> Outcome {
    let quad = ExperimentConfig::parse(
        "stream.family = quadratic\nstream.dim = 2\nstream.shared_b = true\nstream.rounds = 40\nupdate.alpha = 0.25\n",
    )
    .unwrap();
    let final_loss = |r: &ftml::learners::RoundReport| r.final_point().loss;
    let ftml_q = mean_last(&quad, LearnerKind::Ftml, 10, final_loss);
    let ftl_q = mean_last(&quad, LearnerKind::FtlFinetune, 10, final_loss);
    let toe_q = mean_last(&quad, LearnerKind::Toe, 10, final_loss);
    let sin = sinusoid_config();
    let ten_shot = |r: &ftml::learners::RoundReport| r.loss_at(10).unwrap();
    let ftml_s = mean_last(&sin, LearnerKind::Ftml, 5, ten_shot);
    let toe_s = mean_last(&sin, LearnerKind::Toe, 5, ten_shot);
    outcome(
        ftml_q < ftl_q && ftml_q < toe_q && ftml_s < toe_s,
        format!(
            "quadratic last-10 FTML {ftml_q:.5} vs FTL_finetune {ftl_q:.5}, TOE {toe_q:.5}; sinusoid 10-shot FTML {ftml_s:.4} vs TOE {toe_s:.4}"
        ),
    )
}

fn efficiency_trend() -> Outcome {
    let cfg = sinusoid_config();
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let reports = play(&cfg, seed, LearnerKind::Ftml).unwrap();
        let eff = |r: &ftml::learners::RoundReport| r.efficiency.map_or(f64::INFINITY, |e| e as f64);
        early.push(median(reports[..5].iter().map(eff).collect()));
        late.push(median(reports[15..].iter().map(eff).collect()));
    }
    let (e, l) = (median(early), median(late));
    outcome(l <= e, format!("median datapoints to loss < {SINUSOID_GAMMA}: tasks 1-5 {e}, tasks 16-20 {l}"))
}

fn ftml(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ftml"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FTML_WORKERS")
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn without_wall_ms(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism_and_interface() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let run = ["run", "--set", "stream.rounds=3", "--set", "stream.points=20", "--set", "learner.n_meta=3", "--seed", "1", "--seed", "2"];
    let regret = ["regret", "--set", "stream.family=quadratic", "--set", "regret.checkpoints=16,32,64", "--seed", "3"];
    let verify = ["verify", "--set", "verify.tasks=10", "--set", "verify.pairs=20", "--set", "verify.gradient_configs=5"];
    let mut failures = Vec::new();
    for (name, args, file) in [("run", &run[..], "rounds.csv"), ("regret", &regret[..], "regret.csv"), ("verify", &verify[..], "verify.csv")] {
        let codes = (ftml(args, &d(&format!("{name}-a"))), ftml(args, &d(&format!("{name}-b"))));
        if codes != (0, 0) {
            failures.push(format!("{name} exited {codes:?}"));
            continue;
        }
        let read = |side: &str| {
            let p = d(&format!("{name}-{side}")).join(file);
            if name == "run" { without_wall_ms(&p) } else { std::fs::read_to_string(p).unwrap() }
        };
        if read("a") != read("b") {
            failures.push(format!("{name} output differs between runs"));
        }
    }
    if std::fs::read(d("run-a").join("curves.csv")).unwrap() != std::fs::read(d("run-b").join("curves.csv")).unwrap() {
        failures.push("curves.csv differs between runs".into());
    }
    let contract: [(&[&str], i32); 5] = [
        (&["run", "--set", "stream.bogus=1"], 2),
        (&["run", "--set", "update.alpha=-0.1"], 2),
        (&["regret", "--set", "stream.family=sinusoid"], 2),
        (&["verify", "--set", "verify.alpha=0.9", "--set", "verify.force=true", "--set", "verify.gradient_configs=2"], 1),
        (&["run", "--set", "update.alpha=50", "--set", "stream.rounds=2", "--set", "learner.kinds=Scratch"], 3),
    ];
    for (args, want) in contract {
        let got = ftml(args, &d("contract"));
        if got != want {
            failures.push(format!("{args:?} exited {got}, expected {want}"));
        }
    }
    if failures.is_empty() {
        outcome(true, "run/regret/verify byte-stable; exit codes 1, 2 and 3 honoured")
    } else {
        outcome(false, failures.join("; "))
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("post-update curvature bounds", Duration::from_secs(5), post_update_bounds),
        ("closed-form separation", Duration::from_secs(1), closed_form_separation),
        ("meta-gradient correctness", Duration::from_secs(30), meta_gradients),
        ("update-map contraction", Duration::from_secs(2), contraction),
        ("regret growth shape", Duration::from_secs(60), regret_shape),
        ("behavioural separation", Duration::from_secs(600), behavioural_separation),
        ("learning-efficiency trend", Duration::from_secs(600), efficiency_trend),
        ("determinism and exit codes", Duration::from_secs(10), determinism_and_interface),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let pass = result.pass && took <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
