//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Criteria listed in `KNOWN_FAILURES` are printed as FAIL with the reason
//! and do not fail the target as long as they fail in the documented way;
//! any other FAIL, or an error, exits nonzero.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use asgo::matfun::Kernel;
use asgo::optim::{practical_asgo_step, OptimizerConfig, OptimizerKind, OptimizerState};
use asgo::par::Execution;
use asgo::problems::{finite_diff_check, make_logistic, make_mlp, Objective, ProblemSpec};
use asgo::rng::{gaussian_matrix, stream, substream};
use asgo::Matrix;
use asgo_bench::runner::sweep;
use asgo_bench::verify::{self, CheckResult, RELEASE_SEED};
use asgo_bench::ExperimentConfig;
use rand::Rng as _;

/// Criteria whose stated form is contradicted by its own derivation; see
/// the detail printed with the line.
const KNOWN_FAILURES: &[&str] = &["AC6"];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn from_checks(checks: &[CheckResult]) -> Outcome {
    let detail = checks
        .iter()
        .map(|c| format!("{}={:.3e}{}", c.name, c.value, if c.passed { "" } else { "(!)" }))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(checks.iter().all(|c| c.passed), detail)
}

fn timed(limit: Duration, o: Outcome, elapsed: Duration) -> Outcome {
    let within = elapsed <= limit;
    outcome(
        o.passed && within,
        format!("{} [{:.2}s / {}s]", o.detail, elapsed.as_secs_f64(), limit.as_secs()),
    )
}

type Criterion = fn(Execution) -> Result<Outcome, String>;

fn ac1(exec: Execution) -> Result<Outcome, String> {
    let checks = verify::kernels(RELEASE_SEED, exec).map_err(|e| e.to_string())?;
    let keep: Vec<CheckResult> = checks.into_iter().filter(|c| c.name != "polar-express-table").collect();
    Ok(from_checks(&keep))
}

fn ac2(_: Execution) -> Result<Outcome, String> {
    let n = verify::schedule_mismatches();
    Ok(outcome(n == 0, format!("{n} mismatching entries of 30")))
}

fn ac3(exec: Execution) -> Result<Outcome, String> {
    Ok(from_checks(&verify::equivalence(RELEASE_SEED, exec).map_err(|e| e.to_string())?))
}

fn ac4(_: Execution) -> Result<Outcome, String> {
    let start = Instant::now();
    let c = verify::nonsmooth(RELEASE_SEED).map_err(|e| e.to_string())?;
    Ok(timed(Duration::from_secs(5), from_checks(&[c]), start.elapsed()))
}

fn ac5(exec: Execution) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for batch in [1, 4] {
        for steps in [100, 400] {
            checks.push(verify::smooth(RELEASE_SEED, batch, steps, exec).map_err(|e| e.to_string())?);
        }
    }
    Ok(timed(Duration::from_secs(60), from_checks(&checks), start.elapsed()))
}

fn ac6(_: Execution) -> Result<Outcome, String> {
    let start = Instant::now();
    let checks = verify::muon_rate(RELEASE_SEED).map_err(|e| e.to_string())?;
    let stated = from_checks(&checks[..1]);
    let proof_form_holds = checks[1].passed;
    if !proof_form_holds {
        return Err(format!("the proof-form bound also fails: {}", from_checks(&checks).detail));
    }
    Ok(timed(
        Duration::from_secs(5),
        outcome(
            stated.passed,
            format!(
                "{}; proof-form bound sqrt(2 dF ||L||_*/T) holds (slack {:.3e}): the stated RHS is half of what the telescoping argument gives at the prescribed step",
                stated.detail,
                checks[1].value
            ),
        ),
        start.elapsed(),
    ))
}

fn ac7(exec: Execution) -> Result<Outcome, String> {
    let start = Instant::now();
    let checks = verify::lemmas(RELEASE_SEED, exec).map_err(|e| e.to_string())?;
    Ok(timed(Duration::from_secs(60), from_checks(&checks), start.elapsed()))
}

fn ac8(exec: Execution) -> Result<Outcome, String> {
    Ok(from_checks(&verify::rate_comparison(RELEASE_SEED, exec).map_err(|e| e.to_string())?))
}

fn perturbed(params: Vec<Matrix>, seed: u64) -> Vec<Matrix> {
    let mut rng = stream(seed, "acceptance/fd");
    params
        .into_iter()
        .map(|p| &p + &gaussian_matrix(p.rows(), p.cols(), &mut rng).scale(0.3))
        .collect()
}

fn ac9(_: Execution) -> Result<Outcome, String> {
    let e = |r: asgo::Result<f64>| r.map_err(|e| e.to_string());
    let quad = ProblemSpec::Quadratic {
        m: 8,
        n: 5,
        condition: 10.0,
        lambda_max: 1.0,
        noise_scale: 0.0,
        noise_condition: 1.0,
    }
    .build(RELEASE_SEED)
    .map_err(|e| e.to_string())?;
    let w = perturbed(quad.init(&mut stream(1, "init")), 1);
    let q = e(finite_diff_check(quad.as_ref(), &w, 1e-5))?;

    let logistic = make_logistic(64, 6, 3, 1e-2, RELEASE_SEED).map_err(|e| e.to_string())?;
    let w = perturbed(logistic.init(&mut stream(2, "init")), 2);
    let l = e(finite_diff_check(&logistic, &w, 1e-5))?;

    let mlp = make_mlp([6, 10, 3], 64, RELEASE_SEED).map_err(|e| e.to_string())?;
    let params = mlp.init(&mut stream(3, "init"));
    let mut worst_layer: f64 = 0.0;
    for layer in 0..params.len() {
        // Perturb one layer at a time so each layer's error is reported on its own.
        let mut p = params.clone();
        let mut rng = stream(4 + layer as u64, "acceptance/fd-layer");
        p[layer] = &p[layer] + &gaussian_matrix(p[layer].rows(), p[layer].cols(), &mut rng).scale(0.3);
        worst_layer = worst_layer.max(e(finite_diff_check(&mlp, &p, 1e-5))?);
    }
    Ok(outcome(
        q <= 1e-6 && l <= 1e-5 && worst_layer <= 1e-5,
        format!("quadratic={q:.2e} logistic={l:.2e} mlp-worst={worst_layer:.2e}"),
    ))
}

fn ac10(_: Execution) -> Result<Outcome, String> {
    let kernels = [
        (Kernel::ExactEig, 10),
        (Kernel::NewtonSchulz, 20),
        (Kernel::PolarExpress, 10),
        (Kernel::DenmanBeavers, 30),
    ];
    let mut worst: f64 = 0.0;
    let mut updates = 0;
    for (k, &(kernel, steps)) in kernels.iter().enumerate() {
        for trial in 0..10u64 {
            let mut rng = substream(RELEASE_SEED, "acceptance/rms", k as u64 * 100 + trial);
            let (m, n) = (rng.random_range(1..=12), rng.random_range(1..=12));
            let lr = 10f64.powf(rng.random_range(-3.0..0.0));
            let mut cfg = OptimizerConfig::new(OptimizerKind::AsgoPractical, lr);
            cfg.kernel = kernel;
            cfg.kernel_steps = steps;
            cfg.update_freq = rng.random_range(1..=3);
            let mut state = OptimizerState::new();
            let mut w = Matrix::zeros(m, n);
            for _ in 0..8 {
                let g = gaussian_matrix(m, n, &mut rng);
                let before = w.clone();
                let info = practical_asgo_step(&mut state, &mut w, &g, &cfg, lr).map_err(|e| e.to_string())?;
                if info.skipped {
                    continue;
                }
                let target = 0.2 * lr * ((m * n) as f64).sqrt();
                let got = (&w - &before).frobenius();
                worst = worst.max(((got - target) / target).abs());
                updates += 1;
            }
        }
    }
    Ok(outcome(worst <= 1e-12, format!("{updates} updates, worst relative deviation {worst:.2e}")))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn ac11(exec: Execution) -> Result<Outcome, String> {
    let start = Instant::now();
    let load = |name: &str| ExperimentConfig::load(&configs_dir().join(name)).map_err(|e| e.to_string());
    let asgo = sweep(&load("lowrank_asgo_sweep.json")?, exec).map_err(|e| e.to_string())?;
    let sgd = sweep(&load("lowrank_sgd_sweep.json")?, exec).map_err(|e| e.to_string())?;
    let (a, s) = (&asgo.cells[0], &sgd.cells[0]);
    Ok(timed(
        Duration::from_secs(120),
        outcome(
            a.score <= s.score,
            format!(
                "asgo-practical {:.3e} (lr {}) vs sgd {:.3e} (lr {})",
                a.score, a.lr, s.score, s.lr
            ),
        ),
        start.elapsed(),
    ))
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(entries) = std::fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().is_some_and(|x| x == "csv") {
                    out.push(p.strip_prefix(dir).unwrap().to_path_buf());
                }
            }
        }
    }
    out.sort();
    out
}

fn ac12(_: Execution) -> Result<Outcome, String> {
    let bin = env!("CARGO_BIN_EXE_asgo-bench");
    let mut configs: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .map_err(|e| e.to_string())?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for cfg in &configs {
        let sub = if std::fs::read_to_string(cfg).map_err(|e| e.to_string())?.contains("\"grid\"") {
            "sweep"
        } else {
            "run"
        };
        for dir in &runs {
            let status = Command::new(bin)
                .arg(sub)
                .arg(cfg)
                .current_dir(dir.path())
                .stdout(std::process::Stdio::null())
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Ok(outcome(false, format!("{} exited with {status}", cfg.display())));
            }
        }
    }
    let (a, b) = (csv_files(runs[0].path()), csv_files(runs[1].path()));
    if a != b || a.is_empty() {
        return Ok(outcome(false, "the two runs produced different CSV file sets"));
    }
    for f in &a {
        let x = std::fs::read(runs[0].path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(runs[1].path().join(f)).map_err(|e| e.to_string())?;
        if x != y {
            return Ok(outcome(false, format!("{} differs", f.display())));
        }
    }
    Ok(outcome(true, format!("{} configs, {} CSVs byte-identical", configs.len(), a.len())))
}

fn main() {
    let exec = Execution::from_env();
    let criteria: [(&str, &str, Criterion); 12] = [
        ("AC1", "kernel accuracy", ac1),
        ("AC2", "PolarExpress table fidelity", ac2),
        ("AC3", "ASGO/Muon equivalence", ac3),
        ("AC4", "nonsmooth bound", ac4),
        ("AC5", "smooth stochastic bound", ac5),
        ("AC6", "Muon deterministic rate", ac6),
        ("AC7", "inequality property suite", ac7),
        ("AC8", "rate-comparison inequalities", ac8),
        ("AC9", "gradient correctness", ac9),
        ("AC10", "RMS alignment exactness", ac10),
        ("AC11", "low-rank optimizer ordering", ac11),
        ("AC12", "determinism", ac12),
    ];
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        let (passed, detail) = match f(exec) {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (passed, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("{tag} {id} {name}: {detail}");
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}
