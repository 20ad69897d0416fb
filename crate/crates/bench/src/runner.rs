//! Seeded experiment runs, CSV/JSON persistence, `compare` and `sweep`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use asgo::linalg::{spectral_norm, trace_norm, Matrix};
use asgo::optim::{GroupOptimizer, OptimizerConfig, ParamGroup};
use asgo::par::{map_indexed, map_slice, Execution};
use asgo::problems::Objective;
use asgo::rng::stream;
use asgo::theory::mean_stderr;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::BenchError;

/// Loss or norm magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One CSV row; iterate `W_step` before its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub step: usize,
    pub loss: f64,
    pub f_gap: Option<f64>,
    pub grad_frobenius: f64,
    pub grad_trace_norm: f64,
    pub dist_op: Option<f64>,
    #[serde(rename = "dist_F")]
    pub dist_f: Option<f64>,
    pub update_frobenius: f64,
    pub kernel_residual: Option<f64>,
    pub wall_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    #[serde(skip)]
    pub rows: Vec<Row>,
    /// Loss at `W_T`, after the last update.
    pub final_loss: f64,
    pub final_f_gap: Option<f64>,
    pub mean_loss: f64,
    pub diverged: bool,
    pub diverged_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub config_hash: String,
    pub version: String,
    pub optimizer: String,
    pub steps: usize,
    pub diverged: bool,
    pub final_loss_mean: f64,
    pub final_loss_stderr: f64,
    pub final_f_gap_mean: Option<f64>,
    pub final_f_gap_stderr: Option<f64>,
    pub seeds: Vec<SeedRun>,
}

impl Summary {
    /// Score used for ranking: mean final `f_gap` when `f*` is known, else
    /// mean final loss; divergence ranks last.
    pub fn score(&self) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        let s = self.final_f_gap_mean.unwrap_or(self.final_loss_mean);
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    }
}

fn classify(e: asgo::Error) -> BenchError {
    use asgo::Error as E;
    match e {
        E::CapExceeded { .. } | E::InvalidArgument(_) | E::InvalidShape { .. } | E::DimensionMismatch { .. } => {
            BenchError::Config(e.to_string())
        }
        other => BenchError::Diverged(other.to_string()),
    }
}

fn build_groups(cfg: &ExperimentConfig, problem: &dyn Objective, params: Vec<Matrix>) -> Result<Vec<ParamGroup>, BenchError> {
    let vectors = problem.vector_groups();
    params
        .into_iter()
        .zip(vectors)
        .map(|(w, is_vec)| {
            Ok(match (is_vec, cfg.optimizer.qk_groups) {
                (true, _) => ParamGroup::vector(w),
                (false, Some(h)) if h > 1 => ParamGroup::heads(w, h),
                _ => ParamGroup::matrix(w),
            })
        })
        .collect()
}

fn distances(params: &[ParamGroup], w_star: &[Matrix]) -> asgo::Result<(f64, f64)> {
    let mut op: f64 = 0.0;
    let mut sq = 0.0;
    for (p, ws) in params.iter().zip(w_star) {
        let d = &p.weight - ws;
        op = op.max(spectral_norm(&d)?);
        sq += d.frobenius().powi(2);
    }
    Ok((op, sq.sqrt()))
}

fn weights(groups: &[ParamGroup]) -> Vec<Matrix> {
    groups.iter().map(|g| g.weight.clone()).collect()
}

/// Runs one seed in memory. Numeric failures truncate the record and set
/// `diverged`; configuration-class errors are returned.
pub fn run_seed(cfg: &ExperimentConfig, optimizer: &OptimizerConfig, seed: u64) -> Result<SeedRun, BenchError> {
    let problem = cfg.problem.build(seed).map_err(|e| BenchError::Config(format!("problem: {e}")))?;
    let problem = problem.as_ref();
    let params = problem.init(&mut stream(seed, "init"));
    let mut groups = build_groups(cfg, problem, params)?;
    let mut opts = groups
        .iter()
        .map(|g| GroupOptimizer::new(optimizer, g))
        .collect::<asgo::Result<Vec<_>>>()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let w_star = problem.minimizer().map(|w| w.to_vec());
    let f_star = problem.f_star();
    let mut noise = stream(seed, "gradient-noise");
    let mut rows = Vec::new();
    let mut diverged_reason = None;
    let start = Instant::now();
    for t in 0..cfg.steps {
        let w = weights(&groups);
        let loss = problem.loss(&w);
        let exact = problem.grad(&w);
        let used = if cfg.exact_gradient {
            exact.clone()
        } else {
            problem.stoch_grad(&w, cfg.batch_size, &mut noise)
        };
        let grad_frobenius = exact.iter().map(|g| g.frobenius().powi(2)).sum::<f64>().sqrt();
        let mut grad_trace_norm = 0.0;
        let mut metric_err = None;
        for g in &exact {
            match trace_norm(g) {
                Ok(v) => grad_trace_norm += v,
                Err(e) => metric_err = Some(e),
            }
        }
        let dist = match &w_star {
            Some(ws) => match distances(&groups, ws) {
                Ok(d) => Some(d),
                Err(e) => {
                    metric_err = Some(e);
                    None
                }
            },
            None => None,
        };
        let lr = cfg.schedule.lr(optimizer.lr, t, cfg.steps);
        let mut update_sq = 0.0;
        let mut residual: Option<f64> = None;
        let bad = |x: f64| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT;
        if bad(loss) || bad(grad_frobenius) {
            diverged_reason = Some(format!("loss {loss:e} / gradient norm {grad_frobenius:e} at step {t}"));
        } else if let Some(e) = metric_err {
            diverged_reason = Some(format!("step {t}: {e}"));
        } else {
            for ((opt, group), g) in opts.iter_mut().zip(groups.iter_mut()).zip(&used) {
                match opt.step(group, g, lr) {
                    Ok(info) => {
                        update_sq += info.update_frobenius.powi(2);
                        if let Some(r) = info.kernel_residual {
                            residual = Some(residual.map_or(r, |x: f64| x.max(r)));
                        }
                    }
                    Err(e) => match classify(e) {
                        BenchError::Diverged(m) => {
                            diverged_reason = Some(format!("step {t}: {m}"));
                            break;
                        }
                        other => return Err(other),
                    },
                }
            }
            if diverged_reason.is_none() && bad(update_sq.sqrt()) {
                diverged_reason = Some(format!("update norm {:e} at step {t}", update_sq.sqrt()));
            }
        }
        let last = t + 1 == cfg.steps;
        if t % cfg.record_every == 0 || last || diverged_reason.is_some() {
            rows.push(Row {
                step: t,
                loss,
                f_gap: f_star.map(|f| loss - f),
                grad_frobenius,
                grad_trace_norm,
                dist_op: dist.map(|d| d.0),
                dist_f: dist.map(|d| d.1),
                update_frobenius: update_sq.sqrt(),
                kernel_residual: residual,
                wall_nanos: if cfg.record_wall_time {
                    start.elapsed().as_nanos() as u64
                } else {
                    0
                },
            });
        }
        if diverged_reason.is_some() {
            break;
        }
    }
    let final_loss = if diverged_reason.is_some() {
        f64::NAN
    } else {
        problem.loss(&weights(&groups))
    };
    if diverged_reason.is_none() && (!final_loss.is_finite() || final_loss.abs() > DIVERGENCE_LIMIT) {
        diverged_reason = Some(format!("final loss {final_loss:e}"));
    }
    let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    Ok(SeedRun {
        config_hash: cfg.with_optimizer(optimizer.clone()).hash(),
        seed,
        version: VERSION.to_string(),
        rows,
        final_loss,
        final_f_gap: f_star.map(|f| final_loss - f),
        mean_loss,
        diverged: diverged_reason.is_some(),
        diverged_reason,
    })
}

fn summarize(cfg: &ExperimentConfig, optimizer: &OptimizerConfig, mut seeds: Vec<SeedRun>) -> Summary {
    seeds.sort_by_key(|s| s.seed);
    let finals: Vec<f64> = seeds.iter().map(|s| s.final_loss).collect();
    let gaps: Option<Vec<f64>> = seeds.iter().map(|s| s.final_f_gap).collect();
    let (fl, fls) = mean_stderr(&finals);
    let gap_stats = gaps.map(|g| mean_stderr(&g));
    let full = cfg.with_optimizer(optimizer.clone());
    Summary {
        label: cfg.label(),
        config_hash: full.hash(),
        version: VERSION.to_string(),
        optimizer: optimizer.kind.name().to_string(),
        steps: cfg.steps,
        diverged: seeds.iter().any(|s| s.diverged),
        final_loss_mean: fl,
        final_loss_stderr: fls,
        final_f_gap_mean: gap_stats.map(|g| g.0),
        final_f_gap_stderr: gap_stats.map(|g| g.1),
        seeds,
    }
}

/// Runs every seed of `cfg` with `optimizer`, in parallel when enabled.
pub fn run_all_seeds(cfg: &ExperimentConfig, optimizer: &OptimizerConfig, exec: Execution) -> Result<Summary, BenchError> {
    let runs = map_slice(&cfg.seeds, exec, |&s| run_seed(cfg, optimizer, s));
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(cfg, optimizer, runs))
}

pub fn csv_name(seed: u64) -> String {
    format!("seed-{seed}.csv")
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "step",
            "loss",
            "f_gap",
            "grad_frobenius",
            "grad_trace_norm",
            "dist_op",
            "dist_F",
            "update_frobenius",
            "kernel_residual",
            "wall_nanos",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes one CSV per seed plus `summary.json` into `dir`.
pub fn write_run(dir: &Path, summary: &Summary) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    for s in &summary.seeds {
        write_csv(&dir.join(csv_name(s.seed)), &s.rows)?;
    }
    write_json(&dir.join("summary.json"), summary)
}

/// `run`: executes the config and persists its record. Divergence is
/// reported after the truncated record has been written.
pub fn cmd_run(cfg: &ExperimentConfig, exec: Execution) -> Result<Summary, BenchError> {
    let summary = run_all_seeds(cfg, &cfg.optimizer, exec)?;
    write_run(&cfg.output_dir(), &summary)?;
    if summary.diverged {
        let reasons: Vec<String> = summary
            .seeds
            .iter()
            .filter_map(|s| s.diverged_reason.as_ref().map(|r| format!("seed {}: {r}", s.seed)))
            .collect();
        return Err(BenchError::Diverged(reasons.join("; ")));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareColumn {
    pub label: String,
    pub config_hash: String,
    pub final_loss_mean: f64,
    pub final_loss_stderr: f64,
    pub final_f_gap_mean: Option<f64>,
    pub final_f_gap_stderr: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub steps: usize,
    pub columns: Vec<CompareColumn>,
    /// Recorded steps shared by every column.
    pub step_index: Vec<usize>,
    /// `loss_mean[col][k]` at `step_index[k]`.
    pub loss_mean: Vec<Vec<f64>>,
    pub loss_stderr: Vec<Vec<f64>>,
}

fn unique_labels(cfgs: &[ExperimentConfig]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    cfgs.iter()
        .map(|c| {
            let base = c.label();
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}-{n}")
            }
        })
        .collect()
}

/// `compare`: runs every config and aligns per-step loss mean and standard
/// error across seeds, one column per config.
pub fn cmd_compare(cfgs: &[ExperimentConfig], out_dir: &Path, exec: Execution) -> Result<CompareReport, BenchError> {
    let first = cfgs.first().ok_or_else(|| BenchError::Config("compare needs at least one config".into()))?;
    for c in cfgs {
        if c.problem != first.problem || c.steps != first.steps || c.record_every != first.record_every {
            return Err(BenchError::Config(
                "compared configs must share problem, steps and record_every".into(),
            ));
        }
    }
    let labels = unique_labels(cfgs);
    let summaries = cfgs
        .iter()
        .map(|c| run_all_seeds(c, &c.optimizer, exec))
        .collect::<Result<Vec<_>, _>>()?;
    let shortest = summaries
        .iter()
        .flat_map(|s| s.seeds.iter().map(|r| r.rows.len()))
        .min()
        .unwrap_or(0);
    let step_index: Vec<usize> = summaries[0].seeds[0].rows[..shortest].iter().map(|r| r.step).collect();
    let mut loss_mean = Vec::new();
    let mut loss_stderr = Vec::new();
    for s in &summaries {
        let (m, e): (Vec<f64>, Vec<f64>) = (0..shortest)
            .map(|k| mean_stderr(&s.seeds.iter().map(|r| r.rows[k].loss).collect::<Vec<_>>()))
            .unzip();
        loss_mean.push(m);
        loss_stderr.push(e);
    }
    let columns = summaries
        .iter()
        .zip(&labels)
        .map(|(s, l)| CompareColumn {
            label: l.clone(),
            config_hash: s.config_hash.clone(),
            final_loss_mean: s.final_loss_mean,
            final_loss_stderr: s.final_loss_stderr,
            final_f_gap_mean: s.final_f_gap_mean,
            final_f_gap_stderr: s.final_f_gap_stderr,
            diverged: s.diverged,
        })
        .collect();
    let report = CompareReport {
        steps: first.steps,
        columns,
        step_index,
        loss_mean,
        loss_stderr,
    };
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("compare.csv"))?;
    let mut header = vec!["step".to_string()];
    for l in &labels {
        header.push(format!("{l}_loss_mean"));
        header.push(format!("{l}_loss_stderr"));
    }
    w.write_record(&header)?;
    for (k, step) in report.step_index.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        for c in 0..labels.len() {
            rec.push(report.loss_mean[c][k].to_string());
            rec.push(report.loss_stderr[c][k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&out_dir.join("compare.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rank: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub damping: f64,
    pub score: f64,
    pub score_stderr: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub duplicates_removed: usize,
    #[serde(skip)]
    pub best: Option<Summary>,
}

fn axis(values: &[f64], base: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Expands the grid into optimizer configs, deduplicated in first-seen
/// order; returns the cells and the number of duplicates dropped.
pub fn grid_cells(cfg: &ExperimentConfig) -> Result<(Vec<OptimizerConfig>, usize), BenchError> {
    let g = cfg.grid.clone().unwrap_or_default();
    let base = &cfg.optimizer;
    let mut cells: Vec<OptimizerConfig> = Vec::new();
    let mut dups = 0;
    for &lr in &axis(&g.lr, base.lr) {
        for &b1 in &axis(&g.beta1, base.beta1) {
            for &b2 in &axis(&g.beta2, base.beta2) {
                for &eps in &axis(&g.eps, base.eps) {
                    for &damping in &axis(&g.damping, base.damping) {
                        let mut c = base.clone();
                        c.lr = lr;
                        c.beta1 = b1;
                        c.beta2 = b2;
                        c.eps = eps;
                        c.damping = damping;
                        if cells.contains(&c) {
                            dups += 1;
                        } else {
                            c.validate().map_err(|e| BenchError::Config(format!("grid cell: {e}")))?;
                            cells.push(c);
                        }
                    }
                }
            }
        }
    }
    let cap = cfg.grid.as_ref().map_or(64, |g| g.max_cells);
    if cells.len() > cap {
        return Err(BenchError::Config(format!("grid has {} cells, cap is {cap}", cells.len())));
    }
    Ok((cells, dups))
}

/// Runs every grid cell over every seed and ranks cells by score.
pub fn sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepReport, BenchError> {
    let (cells, duplicates_removed) = grid_cells(cfg)?;
    let ns = cfg.seeds.len();
    let runs = map_indexed(cells.len() * ns, exec, |k| run_seed(cfg, &cells[k / ns], cfg.seeds[k % ns]));
    let mut runs = runs.into_iter();
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let seeds = runs.by_ref().take(ns).collect::<Result<Vec<_>, _>>()?;
        summaries.push((cell.clone(), summarize(cfg, cell, seeds)));
    }
    // Stable sort keeps grid order among ties.
    summaries.sort_by(|a, b| a.1.score().total_cmp(&b.1.score()));
    let cells = summaries
        .iter()
        .enumerate()
        .map(|(i, (c, s))| SweepCell {
            rank: i + 1,
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            damping: c.damping,
            score: s.score(),
            score_stderr: s.final_f_gap_stderr.unwrap_or(s.final_loss_stderr),
            diverged: s.diverged,
        })
        .collect();
    Ok(SweepReport {
        cells,
        duplicates_removed,
        best: summaries.into_iter().next().map(|(_, s)| s),
    })
}

/// `sweep`: writes the ranked table plus the best cell's run record under
/// `<output>/best`.
pub fn cmd_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepReport, BenchError> {
    let report = sweep(cfg, exec)?;
    if report.duplicates_removed > 0 {
        eprintln!("warning: removed {} duplicate grid cells", report.duplicates_removed);
    }
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    for c in &report.cells {
        w.serialize(c)?;
    }
    w.flush()?;
    write_json(&dir.join("sweep.json"), &report)?;
    if let Some(best) = &report.best {
        write_run(&dir.join("best"), best)?;
    }
    Ok(report)
}

pub fn default_compare_dir() -> PathBuf {
    PathBuf::from("out/compare")
}
