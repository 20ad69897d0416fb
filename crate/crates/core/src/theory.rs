//! Computable forms of the convergence bounds, the rate-comparison
//! quantities, randomized checks of the supporting matrix inequalities, and
//! the trajectory drivers that feed them.
//!
//! Every bound is reported as a [`BoundReport`] whose `slack = rhs - lhs` is
//! kept signed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    psd_power, spectral_norm, svd, sym_eig, trace_norm, trace_power, Matrix, EIG_TOL, PINV_RTOL,
    RANK_TOL,
};
use crate::matfun::Kernel;
use crate::optim::{self, cosine_similarity, OptimizerConfig, OptimizerKind, OptimizerState, PreconditionSource};
use crate::par::{map_indexed, Execution};
use crate::problems::{NoiseModel, Objective};
use crate::rng::{gaussian, gaussian_matrix, random_orthogonal, random_spd, stream, substream, Rng};
use rand::Rng as _;

/// Per-step record of one trajectory `W_0 .. W_{T-1}` together with the
/// accumulated gradient statistics the bounds need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub losses: Vec<f64>,
    /// `f(W_t) - f*`, empty when `f*` is unknown.
    pub f_gaps: Vec<f64>,
    /// `||grad f(W_t)||_*` of the exact gradient.
    pub grad_trace_norms: Vec<f64>,
    pub grad_frobenius: Vec<f64>,
    /// `||W_t - W*||_op`, empty when `W*` is unknown.
    pub dist_op: Vec<f64>,
    pub dist_f: Vec<f64>,
    /// `sum_t G_t G_t^T` over the gradients the optimizer consumed.
    pub gram_left: Matrix,
    /// `sum_t G_t^T G_t`.
    pub gram_right: Matrix,
    /// `sum_t G_t o G_t`.
    pub sq_entries: Matrix,
}

impl TrajectoryStats {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            losses: Vec::new(),
            f_gaps: Vec::new(),
            grad_trace_norms: Vec::new(),
            grad_frobenius: Vec::new(),
            dist_op: Vec::new(),
            dist_f: Vec::new(),
            gram_left: Matrix::zeros(m, m),
            gram_right: Matrix::zeros(n, n),
            sq_entries: Matrix::zeros(m, n),
        }
    }

    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// Records iterate `W_t` with its loss, the exact gradient and the
    /// gradient actually used for the step.
    pub fn record(
        &mut self,
        loss: f64,
        f_star: Option<f64>,
        exact_grad: &Matrix,
        used_grad: &Matrix,
        displacement: Option<&Matrix>,
    ) -> Result<()> {
        self.losses.push(loss);
        if let Some(fs) = f_star {
            self.f_gaps.push(loss - fs);
        }
        self.grad_trace_norms.push(trace_norm(exact_grad)?);
        self.grad_frobenius.push(exact_grad.frobenius());
        if let Some(d) = displacement {
            self.dist_op.push(spectral_norm(d)?);
            self.dist_f.push(d.frobenius());
        }
        self.gram_left += &used_grad.gram_rows();
        self.gram_right += &used_grad.gram_cols();
        self.sq_entries += &used_grad.map(|x| x * x);
        Ok(())
    }

    pub fn d_op(&self) -> f64 {
        self.dist_op.iter().cloned().fold(0.0, f64::max)
    }

    pub fn d_f(&self) -> f64 {
        self.dist_f.iter().cloned().fold(0.0, f64::max)
    }

    pub fn avg_gap(&self) -> Option<f64> {
        (!self.f_gaps.is_empty()).then(|| mean(&self.f_gaps))
    }

    pub fn avg_grad_trace_norm(&self) -> f64 {
        mean(&self.grad_trace_norms)
    }

    /// `D_op <= D_F <= sqrt(min(m, n)) D_op` at every recorded step.
    pub fn norm_equivalence_holds(&self) -> bool {
        let r = self.gram_left.rows().min(self.gram_right.rows()) as f64;
        self.dist_op.iter().zip(&self.dist_f).all(|(&op, &f)| {
            let tol = 1e-12 * f.max(1.0);
            op <= f + tol && f <= r.sqrt() * op + tol
        })
    }

    /// `tr((sum_t G_t G_t^T)^{1/2})`.
    pub fn trace_sqrt_gram(&self) -> Result<f64> {
        trace_power(&self.gram_left, 0.5)
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Sample mean and its standard error.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let m = mean(x);
    if n < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub value: f64,
}

fn comp(name: &str, value: f64) -> Component {
    Component {
        name: name.to_string(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    /// Measured side; absent for right-hand-side-only evaluations.
    pub lhs: Option<f64>,
    pub rhs: f64,
    /// `rhs - lhs`, signed.
    pub slack: Option<f64>,
    /// Standard error of `lhs` when it is a Monte-Carlo average.
    pub stderr: Option<f64>,
    /// Terms summing to `rhs`.
    pub components: Vec<Component>,
    /// Context values that are not part of `rhs`.
    pub info: Vec<Component>,
}

impl BoundReport {
    fn rhs_only(name: &str, components: Vec<Component>) -> Self {
        let rhs = components.iter().map(|c| c.value).sum();
        Self {
            bound_name: name.to_string(),
            lhs: None,
            rhs,
            slack: None,
            stderr: None,
            components,
            info: Vec::new(),
        }
    }

    pub fn with_lhs(mut self, lhs: f64, stderr: Option<f64>) -> Self {
        self.lhs = Some(lhs);
        self.slack = Some(self.rhs - lhs);
        self.stderr = stderr;
        self
    }

    fn with_info(mut self, info: Vec<Component>) -> Self {
        self.info.extend(info);
        self
    }

    /// `slack >= -k * stderr` (exactly `slack >= 0` without a standard error).
    pub fn holds(&self, k: f64) -> bool {
        match self.slack {
            Some(s) => s >= -k * self.stderr.unwrap_or(0.0),
            None => false,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .chain(&self.info)
            .find(|c| c.name == name)
            .map(|c| c.value)
    }
}

/// `eps D_F^2 / (D_op T)`, zero when the trajectory never left `W*`.
fn eps_term(eps: f64, d_op: f64, d_f: f64, t: f64) -> f64 {
    if eps == 0.0 || d_f == 0.0 {
        0.0
    } else {
        eps * d_f * d_f / (d_op * t)
    }
}

/// Nonsmooth convex bound for the theoretical optimizer run with constant
/// step `eta`:
/// `rhs = tr((sum G G^T)^{1/2}) D_op / T + eps D_F^2 / (D_op T)`.
///
/// `info` also carries the bound the telescoping argument yields for the
/// actual `eta`, `((D_op^2/eta + 2 eta) tr + eps D_F^2 / eta) / (2T)`.
pub fn nonsmooth_bound(stats: &TrajectoryStats, eps: f64, eta: Option<f64>) -> Result<BoundReport> {
    let lhs = stats
        .avg_gap()
        .ok_or_else(|| Error::InvalidArgument("nonsmooth bound needs f* and W*".into()))?;
    if stats.dist_op.is_empty() {
        return Err(Error::InvalidArgument("nonsmooth bound needs W*".into()));
    }
    let t = stats.steps() as f64;
    let (d_op, d_f) = (stats.d_op(), stats.d_f());
    let tr = stats.trace_sqrt_gram()?;
    let report = BoundReport::rhs_only(
        "nonsmooth",
        vec![comp("gradient_term", tr * d_op / t), comp("eps_term", eps_term(eps, d_op, d_f, t))],
    )
    .with_lhs(lhs, None);
    let mut info = vec![
        comp("d_op", d_op),
        comp("d_f", d_f),
        comp("trace_sqrt_gram", tr),
        comp("steps", t),
    ];
    if let Some(eta) = eta {
        info.push(comp("eta", eta));
        info.push(comp(
            "telescoped_rhs",
            ((d_op * d_op / eta + 2.0 * eta) * tr + eps * d_f * d_f / eta) / (2.0 * t),
        ));
    }
    Ok(report.with_info(info))
}

/// Stochastic nonsmooth rate with `E[G G^T] <= Q^2`:
/// `sqrt(T) ||Q||_* D_op / T + eps D_F^2 / (D_op T)`.
pub fn corollary_bound(q: &Matrix, d_op: f64, d_f: f64, eps: f64, t: usize) -> Result<BoundReport> {
    let t = t as f64;
    let qn = trace_norm(q)?;
    Ok(BoundReport::rhs_only(
        "nonsmooth-stochastic",
        vec![
            comp("gradient_term", t.sqrt() * qn * d_op / t),
            comp("eps_term", eps_term(eps, d_op, d_f, t)),
        ],
    ))
}

/// Smooth convex bound with batch size `m_batch`:
/// `4 D_op^2 ||L||_* / T + 2 sqrt(2) D_op ||V||_* / sqrt(M T) + 2 eps D_F^2 / (D_op T)`.
pub fn smooth_bound(d_op: f64, d_f: f64, l: &Matrix, v: &Matrix, m_batch: usize, t: usize, eps: f64) -> Result<BoundReport> {
    if m_batch == 0 || t == 0 {
        return Err(Error::InvalidArgument("batch size and T must be >= 1".into()));
    }
    let tf = t as f64;
    let (ln, vn) = (trace_norm(l)?, trace_norm(v)?);
    Ok(BoundReport::rhs_only(
        "smooth",
        vec![
            comp("smoothness_term", 4.0 * d_op * d_op * ln / tf),
            comp("noise_term", 2.0 * 2f64.sqrt() * d_op * vn / ((m_batch as f64) * tf).sqrt()),
            comp("eps_term", 2.0 * eps_term(eps, d_op, d_f, tf)),
        ],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuonRate {
    pub eta: f64,
    /// `sqrt(||L||_* (f0 - f*) / (2T))`.
    pub rhs: f64,
    /// `(f0 - f*) / (eta T) + eta ||L||_* / 2` at the prescribed `eta`.
    pub telescoped_rhs: f64,
}

/// Deterministic Muon step size and average gradient trace-norm bound.
pub fn muon_rate_bound(l: &Matrix, f0: f64, f_star: f64, t: usize) -> Result<MuonRate> {
    if f0 < f_star {
        return Err(Error::InvalidArgument(format!("f0 = {f0} is below f* = {f_star}")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let ln = trace_norm(l)?;
    let gap = f0 - f_star;
    let tf = t as f64;
    let eta = (2.0 * gap / (ln * tf)).sqrt();
    let rhs = (ln * gap / (2.0 * tf)).sqrt();
    let telescoped_rhs = if eta > 0.0 { gap / (eta * tf) + eta * ln / 2.0 } else { 0.0 };
    Ok(MuonRate {
        eta,
        rhs,
        telescoped_rhs,
    })
}

/// The comparison quantities of a gradient sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceQuantities {
    /// `tr((sum G G^T)^{1/2})`.
    pub asgo: f64,
    /// `tr((sum G G^T)^{1/4}) tr((sum G^T G)^{1/4})`.
    pub shampoo: f64,
    /// `sum_i sqrt(sum_{j,t} G_ij^2)` over rows `i`.
    pub row_diagonal: f64,
    /// `sum_{i,j} sqrt(sum_t G_ij^2)`.
    pub adagrad: f64,
}

impl SequenceQuantities {
    /// `asgo <= shampoo` and `asgo <= row_diagonal <= adagrad`, with a
    /// relative rounding allowance.
    pub fn chain_holds(&self, rtol: f64) -> bool {
        let le = |a: f64, b: f64| a <= b + rtol * b.abs().max(a.abs());
        le(self.asgo, self.shampoo) && le(self.asgo, self.row_diagonal) && le(self.row_diagonal, self.adagrad)
    }
}

pub fn sequence_quantities(grads: &[Matrix]) -> Result<SequenceQuantities> {
    let first = grads
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty gradient sequence".into()))?;
    let mut stats = TrajectoryStats::new(first.rows(), first.cols());
    for g in grads {
        stats.gram_left += &g.gram_rows();
        stats.gram_right += &g.gram_cols();
        stats.sq_entries += &g.map(|x| x * x);
    }
    quantities_from(&stats)
}

fn quantities_from(stats: &TrajectoryStats) -> Result<SequenceQuantities> {
    let sq = &stats.sq_entries;
    let row_diagonal = (0..sq.rows()).map(|i| sq.row(i).iter().sum::<f64>().sqrt()).sum();
    Ok(SequenceQuantities {
        asgo: trace_power(&stats.gram_left, 0.5)?,
        shampoo: trace_power(&stats.gram_left, 0.25)? * trace_power(&stats.gram_right, 0.25)?,
        row_diagonal,
        adagrad: sq.as_slice().iter().map(|x| x.sqrt()).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateInstanceKind {
    /// Rank-`r` gradient bound `Q`, full-rank displacement.
    LowrankGrad,
    /// Full-rank `Q`, displacement of rank `r`.
    HighrankDisplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateComparison {
    pub kind: RateInstanceKind,
    pub q_trace_norm: f64,
    pub q_frobenius: f64,
    pub d_op: f64,
    pub d_f: f64,
    /// `||Q||_* D_op`, the structured rate constant.
    pub asgo_rate: f64,
    /// `||Q||_F D_F`, the SGD rate constant.
    pub sgd_rate: f64,
    /// Quantities of a 20-step gradient sequence drawn inside `Q`'s range.
    pub sequence: SequenceQuantities,
}

/// Explicit instance with equal nonzero spectra: `Q` of rank `r_q` and a
/// displacement of rank `r_d`, one of which is `r`.
pub fn rate_comparison_instance(kind: RateInstanceKind, m: usize, n: usize, r: usize, seed: u64) -> Result<RateComparison> {
    let full = m.min(n);
    if r == 0 || r > full {
        return Err(Error::InvalidArgument(format!("rank must lie in 1..={full}, got {r}")));
    }
    let (rq, rd) = match kind {
        RateInstanceKind::LowrankGrad => (r, full),
        RateInstanceKind::HighrankDisplacement => (m, r),
    };
    let mut rng = stream(seed, "rate-comparison");
    let u = random_orthogonal(m, &mut rng);
    let uq = u.column_block(0, rq);
    let q = &uq * &uq.transpose();
    let ud = random_orthogonal(m, &mut rng).column_block(0, rd);
    let vd = random_orthogonal(n, &mut rng).column_block(0, rd);
    let disp = &ud * &vd.transpose();
    let grads: Vec<Matrix> = (0..20).map(|_| &uq * &gaussian_matrix(rq, n, &mut rng)).collect();
    let (qt, qf) = (trace_norm(&q)?, q.frobenius());
    let (d_op, d_f) = (spectral_norm(&disp)?, disp.frobenius());
    Ok(RateComparison {
        kind,
        q_trace_norm: qt,
        q_frobenius: qf,
        d_op,
        d_f,
        asgo_rate: qt * d_op,
        sgd_rate: qf * d_f,
        sequence: sequence_quantities(&grads)?,
    })
}

/// Outcome of one randomized inequality family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaResult {
    pub lemma: String,
    pub trials: usize,
    pub failures: usize,
    /// Largest `(lhs - rhs) / scale` seen; negative means every trial had room.
    pub worst_ratio: f64,
    pub first_failure: Option<String>,
}

impl LemmaResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `lhs <= rhs` up to `tol * scale`, as a signed ratio.
struct Check {
    lhs: f64,
    rhs: f64,
    scale: f64,
    detail: String,
}

fn summarize(lemma: &str, seed: u64, checks: Vec<Check>, tol: f64) -> LemmaResult {
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut first = None;
    for (i, c) in checks.iter().enumerate() {
        let ratio = (c.lhs - c.rhs) / c.scale.max(f64::MIN_POSITIVE);
        worst = worst.max(ratio);
        if !(ratio <= tol) {
            failures += 1;
            if first.is_none() {
                first = Some(format!(
                    "seed {seed} trial {i}: lhs {:e} > rhs {:e} ({})",
                    c.lhs, c.rhs, c.detail
                ));
            }
        }
    }
    LemmaResult {
        lemma: lemma.to_string(),
        trials: checks.len(),
        failures,
        worst_ratio: worst,
        first_failure: first,
    }
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Random PD matrix of dimension `n` with condition number up to `1e4`.
fn random_pd(n: usize, rng: &mut Rng) -> Matrix {
    let cond = log_uniform(rng, 1.0, 1e4);
    let top = log_uniform(rng, 1e-2, 1e2);
    random_spd(n, cond, top, rng)
}

/// Random PSD matrix `G G^T` with `G` of width `k`, so rank-deficient for
/// `k < n`.
fn random_gram(n: usize, k: usize, rng: &mut Rng) -> Matrix {
    gaussian_matrix(n, k, rng).scale(log_uniform(rng, 1e-2, 1e2)).gram_rows()
}

/// `tr(X^{1/2})` counting eigenvalues at or below `PINV_RTOL * lambda_max`
/// as zero.
fn trace_sqrt_numerical(x: &Matrix) -> Result<f64> {
    let e = sym_eig(x, EIG_TOL)?;
    let cut = PINV_RTOL * e.max().max(0.0);
    Ok(e.eigenvalues.iter().filter(|&&l| l > cut).map(|l| l.sqrt()).sum())
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=16)
}

fn lemma_operator_monotone(rng: &mut Rng) -> Result<Check> {
    let n = dim(rng);
    let a = random_pd(n, rng);
    let k = rng.random_range(1..=n);
    let b = &a + &random_gram(n, k, rng);
    let alpha: f64 = rng.random();
    let (pa, pb) = (psd_power(&a, alpha, 0.0)?, psd_power(&b, alpha, 0.0)?);
    let diff_min = crate::linalg::min_eigenvalue(&(&pb - &pa))?;
    Ok(Check {
        lhs: -diff_min,
        rhs: 0.0,
        scale: pa.frobenius() + pb.frobenius(),
        detail: format!("n = {n}, alpha = {alpha}"),
    })
}

fn lemma_trace_sqrt_subadditive(rng: &mut Rng) -> Result<Check> {
    let n = dim(rng);
    let (x, y) = (random_pd(n, rng), random_pd(n, rng));
    let lhs = trace_power(&(&x + &y), 0.5)?;
    let rhs = trace_power(&x, 0.5)? + trace_power(&y, 0.5)?;
    Ok(Check {
        lhs,
        rhs,
        scale: lhs + rhs,
        detail: format!("n = {n}"),
    })
}

fn lemma_trace_sqrt_diagonal(rng: &mut Rng) -> Result<Check> {
    let n = dim(rng);
    let k = rng.random_range(1..=n + 2);
    let x = random_gram(n, k, rng);
    let lhs = trace_sqrt_numerical(&x)?;
    let rhs: f64 = x.diagonal().iter().map(|d| d.max(0.0).sqrt()).sum();
    Ok(Check {
        lhs,
        rhs,
        scale: lhs + rhs,
        detail: format!("n = {n}, k = {k}"),
    })
}

fn lemma_trace_norm_bound(rng: &mut Rng) -> Result<Check> {
    let (m, n) = (dim(rng), dim(rng));
    let lambda = random_pd(m, rng);
    let g = gaussian_matrix(m, n, rng);
    let lhs = trace_norm(&g)?;
    let inv = psd_power(&lambda, -1.0, 0.0)?;
    let rhs = (trace_norm(&lambda)? * g.dot(&(&inv * &g))).sqrt();
    Ok(Check {
        lhs,
        rhs,
        scale: lhs + rhs,
        detail: format!("{m}x{n}"),
    })
}

fn scalar_sides(x: &[f64], s: &[f64]) -> (f64, f64) {
    let total: f64 = s.iter().sum();
    let lhs = x.iter().sum::<f64>() / total;
    let rhs = (x.iter().zip(s).map(|(a, b)| a * a / b).sum::<f64>() / total).sqrt();
    (lhs, rhs)
}

fn lemma_scalar(rng: &mut Rng) -> Check {
    let n = dim(rng);
    let s: Vec<f64> = (0..n).map(|_| log_uniform(rng, 1e-3, 1e3)).collect();
    let x: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { log_uniform(rng, 1e-3, 1e3) })
        .collect();
    let (lhs, rhs) = scalar_sides(&x, &s);
    Check {
        lhs,
        rhs,
        scale: lhs + rhs,
        detail: format!("n = {n}"),
    }
}

/// Equality case `x_j = c s_j`: reports `|lhs - rhs| / scale`.
fn lemma_scalar_equality(rng: &mut Rng) -> Check {
    let n = dim(rng);
    let c = log_uniform(rng, 1e-3, 1e3);
    let s: Vec<f64> = (0..n).map(|_| log_uniform(rng, 1e-3, 1e3)).collect();
    let x: Vec<f64> = s.iter().map(|v| c * v).collect();
    let (lhs, rhs) = scalar_sides(&x, &s);
    Check {
        lhs: (lhs - rhs).abs(),
        rhs: 0.0,
        scale: lhs + rhs,
        detail: format!("n = {n}, c = {c}"),
    }
}

fn run_family<F>(name: &str, seed: u64, trials: usize, tol: f64, exec: Execution, f: F) -> LemmaResult
where
    F: Fn(&mut Rng) -> Result<Check> + Sync + Send,
{
    let checks = map_indexed(trials, exec, |i| {
        let mut rng = substream(seed, name, i as u64);
        f(&mut rng).unwrap_or_else(|e| Check {
            lhs: f64::INFINITY,
            rhs: 0.0,
            scale: 1.0,
            detail: format!("evaluation error: {e}"),
        })
    });
    summarize(name, seed, checks, tol)
}

/// One batch size of the variance-reduction check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchVarianceRow {
    pub batch: usize,
    pub draws: usize,
    /// Monte-Carlo mean of `tr(N N^T)`.
    pub trace_mean: f64,
    /// `tr(V^2) / M`.
    pub trace_expected: f64,
    /// Standard error of `trace_mean`.
    pub trace_stderr: f64,
    /// `(trace_mean - trace_expected) / trace_stderr`.
    pub z: f64,
    /// Largest entrywise `|z|` of the empirical `E[N N^T]`, for information.
    pub max_entry_z: f64,
}

impl BatchVarianceRow {
    pub fn passed(&self, sigmas: f64) -> bool {
        self.z.abs() <= sigmas
    }
}

/// Empirical `E[N N^T]` for batch means of `batch` draws against `V^2 / M`,
/// summarized by the trace statistic.
pub fn batch_variance_check(noise: &NoiseModel, n: usize, batch: usize, draws: usize, seed: u64, exec: Execution) -> BatchVarianceRow {
    const CHUNK: usize = 1000;
    let m = noise.factor.rows();
    let chunks = draws.div_ceil(CHUNK);
    let parts = map_indexed(chunks, exec, |c| {
        let mut rng = substream(seed, &format!("batch-variance/{batch}"), c as u64);
        let count = CHUNK.min(draws - c * CHUNK);
        let mut sum = Matrix::zeros(m, m);
        let mut sq = Matrix::zeros(m, m);
        let (mut tr, mut tr2) = (0.0, 0.0);
        for _ in 0..count {
            let nn = noise.sample_mean(n, batch, &mut rng).gram_rows();
            let t: f64 = nn.diagonal().iter().sum();
            tr += t;
            tr2 += t * t;
            sq += &nn.map(|x| x * x);
            sum += &nn;
        }
        (sum, sq, tr, tr2)
    });
    let mut sum = Matrix::zeros(m, m);
    let mut sq = Matrix::zeros(m, m);
    let (mut tr, mut tr2) = (0.0, 0.0);
    for (s, q, a, b) in parts {
        sum += &s;
        sq += &q;
        tr += a;
        tr2 += b;
    }
    let d = draws as f64;
    let target = noise.factor.gram_rows().scale(1.0 / batch as f64);
    let trace_mean = tr / d;
    let trace_expected: f64 = target.diagonal().iter().sum();
    let trace_stderr = ((tr2 / d - trace_mean * trace_mean).max(0.0) / d).sqrt();
    let emp = sum.scale(1.0 / d);
    let mut max_entry_z: f64 = 0.0;
    for k in 0..m * m {
        let var = (sq.as_slice()[k] / d - emp.as_slice()[k].powi(2)).max(0.0);
        let se = (var / d).sqrt();
        if se > 0.0 {
            max_entry_z = max_entry_z.max((emp.as_slice()[k] - target.as_slice()[k]).abs() / se);
        }
    }
    BatchVarianceRow {
        batch,
        draws,
        trace_mean,
        trace_expected,
        trace_stderr,
        z: (trace_mean - trace_expected) / trace_stderr.max(f64::MIN_POSITIVE),
        max_entry_z,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub seed: u64,
    pub tolerance: f64,
    pub results: Vec<LemmaResult>,
    pub batch_variance: Vec<BatchVarianceRow>,
    pub batch_sigmas: f64,
}

impl LemmaReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(LemmaResult::passed) && self.batch_variance.iter().all(|r| r.passed(self.batch_sigmas))
    }
}

pub const LEMMA_TOL: f64 = 1e-9;
pub const SCALAR_EQUALITY_TOL: f64 = 1e-12;

/// Randomized checks of every supporting inequality: `trials` instances per
/// family with dimensions up to 16, plus the batch-variance check at
/// `M in {1, 4, 16}` over `draws` samples each.
pub fn lemma_suite(seed: u64, trials: usize, draws: usize, exec: Execution) -> LemmaReport {
    let mut results = vec![
        run_family("operator-monotone", seed, trials, LEMMA_TOL, exec, lemma_operator_monotone),
        run_family("trace-sqrt-subadditive", seed, trials, LEMMA_TOL, exec, lemma_trace_sqrt_subadditive),
        run_family("trace-sqrt-diagonal", seed, trials, LEMMA_TOL, exec, lemma_trace_sqrt_diagonal),
        run_family("trace-norm-bound", seed, trials, LEMMA_TOL, exec, lemma_trace_norm_bound),
        run_family("scalar-cauchy", seed, trials, LEMMA_TOL, exec, |r| Ok(lemma_scalar(r))),
        run_family("scalar-cauchy-equality", seed, trials, SCALAR_EQUALITY_TOL, exec, |r| {
            Ok(lemma_scalar_equality(r))
        }),
    ];
    results.retain(|r| r.trials > 0);
    let mut rng = stream(seed, "batch-variance/instance");
    let v = random_spd(6, 20.0, 1.0, &mut rng);
    let batch_variance = match NoiseModel::from_v(v) {
        Ok(noise) => [1, 4, 16]
            .iter()
            .map(|&b| batch_variance_check(&noise, 4, b, draws, seed, exec))
            .collect(),
        Err(_) => Vec::new(),
    };
    LemmaReport {
        seed,
        tolerance: LEMMA_TOL,
        results,
        batch_variance,
        batch_sigmas: 3.0,
    }
}

/// Runs one single-group problem under `cfg` at constant step `lr` for
/// `steps` iterations, recording every iterate before it is updated.
/// `noise = Some((batch, rng))` selects stochastic gradients.
pub fn run_single(
    problem: &dyn Objective,
    cfg: &OptimizerConfig,
    lr: f64,
    steps: usize,
    mut noise: Option<(usize, &mut Rng)>,
) -> Result<TrajectoryStats> {
    let shapes = problem.shapes();
    if shapes.len() != 1 {
        return Err(Error::InvalidArgument("trajectory checks need a single parameter group".into()));
    }
    let (m, n) = shapes[0];
    let mut init_rng = stream(0, "init");
    let mut params = problem.init(&mut init_rng);
    let w_star = problem.minimizer().map(|w| w[0].clone());
    let f_star = problem.f_star();
    let mut state = OptimizerState::new();
    let mut stats = TrajectoryStats::new(m, n);
    for _ in 0..steps {
        let loss = problem.loss(&params);
        let exact = problem.grad(&params).remove(0);
        let used = match noise.as_mut() {
            Some((batch, rng)) => problem.stoch_grad(&params, *batch, rng).remove(0),
            None => exact.clone(),
        };
        let disp = w_star.as_ref().map(|ws| &params[0] - ws);
        stats.record(loss, f_star, &exact, &used, disp.as_ref())?;
        if !loss.is_finite() || loss.abs() > 1e12 {
            return Err(Error::Divergence {
                kernel: "trajectory",
                iteration: stats.steps(),
            });
        }
        if lr > 0.0 {
            optim::step(&mut state, &mut params[0], &used, cfg, lr)?;
        }
    }
    Ok(stats)
}

/// Step sizes of the two-phase `eta = D_op` protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaProtocol {
    /// `||W_0 - W*||_op`.
    pub pilot_eta: f64,
    /// `D_op` measured on the pilot run, used for the final run.
    pub eta: f64,
    /// `D_op` re-measured on the final run; the bound is evaluated with it.
    pub final_d_op: f64,
}

fn initial_distance(problem: &dyn Objective) -> Result<f64> {
    let w_star = problem
        .minimizer()
        .ok_or_else(|| Error::InvalidArgument("eta = D_op protocol needs W*".into()))?;
    let w0 = problem.init(&mut stream(0, "init"));
    spectral_norm(&(&w0[0] - &w_star[0]))
}

fn theoretical_config(eps: f64) -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::AsgoTheoretical, 1.0).with_eps(eps)
}

/// Deterministic nonsmooth-bound check for the theoretical optimizer under
/// the two-phase protocol: pilot at `eta_0 = ||W_0 - W*||_op`, rerun at the
/// pilot's `D_op`, evaluate with the rerun's `D_op`.
pub fn nonsmooth_check(problem: &dyn Objective, steps: usize, eps: f64) -> Result<(BoundReport, EtaProtocol)> {
    let cfg = theoretical_config(eps);
    let pilot_eta = initial_distance(problem)?;
    let pilot = run_single(problem, &cfg, pilot_eta, steps, None)?;
    let eta = pilot.d_op();
    let stats = run_single(problem, &cfg, eta, steps, None)?;
    let report = nonsmooth_bound(&stats, eps, Some(eta))?;
    let proto = EtaProtocol {
        pilot_eta,
        eta,
        final_d_op: stats.d_op(),
    };
    Ok((report.with_info(vec![comp("pilot_eta", pilot_eta)]), proto))
}

/// Stochastic smooth-bound check over `seeds` with batch size `batch`. Both
/// phases of the step-size protocol take `D_op` as the maximum over seeds,
/// and the left side is the seed average with its standard error.
pub fn smooth_check(
    problem: &dyn Objective,
    steps: usize,
    batch: usize,
    seeds: &[u64],
    eps: f64,
    exec: Execution,
) -> Result<(BoundReport, EtaProtocol)> {
    let l = problem
        .smoothness()
        .ok_or_else(|| Error::InvalidArgument("smooth bound needs L".into()))?;
    let v = problem
        .noise_bound()
        .ok_or_else(|| Error::InvalidArgument("smooth bound needs V".into()))?;
    let cfg = theoretical_config(eps);
    let run_all = |eta: f64, phase: &str| -> Result<Vec<TrajectoryStats>> {
        map_indexed(seeds.len(), exec, |i| {
            let mut rng = stream(seeds[i], &format!("smooth-check/{phase}/{batch}"));
            run_single(problem, &cfg, eta, steps, Some((batch, &mut rng)))
        })
        .into_iter()
        .collect()
    };
    let pilot_eta = initial_distance(problem)?;
    let pilot = run_all(pilot_eta, "pilot")?;
    let eta = pilot.iter().map(TrajectoryStats::d_op).fold(0.0, f64::max);
    let runs = run_all(eta, "final")?;
    let d_op = runs.iter().map(TrajectoryStats::d_op).fold(0.0, f64::max);
    let d_f = runs.iter().map(TrajectoryStats::d_f).fold(0.0, f64::max);
    let gaps: Vec<f64> = runs.iter().filter_map(TrajectoryStats::avg_gap).collect();
    let (lhs, se) = mean_stderr(&gaps);
    let report = smooth_bound(d_op, d_f, l, v, batch, steps, eps)?
        .with_lhs(lhs, Some(se))
        .with_info(vec![
            comp("eta", eta),
            comp("pilot_eta", pilot_eta),
            comp("d_op", d_op),
            comp("d_f", d_f),
            comp("seeds", seeds.len() as f64),
            comp("batch", batch as f64),
            comp("steps", steps as f64),
        ]);
    Ok((
        report,
        EtaProtocol {
            pilot_eta,
            eta,
            final_d_op: d_op,
        },
    ))
}

/// Deterministic Muon (`mu = 0`, exact SVD) at the prescribed step size,
/// comparing the average exact-gradient trace norm with the rate bound.
pub fn muon_rate_check(problem: &dyn Objective, steps: usize) -> Result<BoundReport> {
    let l = problem
        .smoothness()
        .ok_or_else(|| Error::InvalidArgument("Muon rate needs L".into()))?;
    let f_star = problem
        .f_star()
        .ok_or_else(|| Error::InvalidArgument("Muon rate needs f*".into()))?;
    let w0 = problem.init(&mut stream(0, "init"));
    let f0 = problem.loss(&w0);
    let rate = muon_rate_bound(l, f0, f_star, steps)?;
    let cfg = OptimizerConfig::new(OptimizerKind::Muon, 1.0).with_betas(0.0, 0.0);
    let stats = run_single(problem, &cfg, rate.eta, steps, None)?;
    let min_sq = stats
        .grad_trace_norms
        .iter()
        .map(|x| x * x)
        .fold(f64::INFINITY, f64::min);
    Ok(BoundReport::rhs_only("muon-nonconvex", vec![comp("rate", rate.rhs)])
        .with_lhs(stats.avg_grad_trace_norm(), None)
        .with_info(vec![
            comp("eta", rate.eta),
            comp("telescoped_rhs", rate.telescoped_rhs),
            comp("f0_gap", f0 - f_star),
            comp("min_sq_trace_norm", min_sq),
        ]))
}

/// One damping/kernel setting of the sensitivity probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetting {
    pub label: String,
    pub damping: f64,
    pub kernel: Kernel,
    pub kernel_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: usize,
    pub layer: usize,
    pub setting: String,
    pub cosine: f64,
}

/// Runs Muon (`mu = beta1`, exact SVD) on `problem` and, at every step and
/// matrix layer, compares the Muon direction with the direction of a shadow
/// momentum-sourced ASGO state per setting fed the same gradients.
pub fn epsilon_sensitivity_probe(
    problem: &dyn Objective,
    steps: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    batch: usize,
    settings: &[ProbeSetting],
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let mut rng = stream(seed, "probe/init");
    let mut params = problem.init(&mut rng);
    let vectors = problem.vector_groups();
    let muon = OptimizerConfig::new(OptimizerKind::Muon, lr).with_betas(beta1, 0.0);
    let shadow_cfgs: Vec<OptimizerConfig> = settings
        .iter()
        .map(|s| {
            let mut c = OptimizerConfig::new(OptimizerKind::AsgoPractical, 1.0)
                .with_betas(beta1, beta2)
                .with_eps(0.0)
                .with_rms_align(false);
            c.precondition_source = PreconditionSource::Momentum;
            c.damping = s.damping;
            c.kernel = s.kernel;
            c.kernel_steps = s.kernel_steps;
            c
        })
        .collect();
    let groups = params.len();
    let mut muon_states = vec![OptimizerState::new(); groups];
    let mut shadows = vec![vec![OptimizerState::new(); groups]; settings.len()];
    let mut noise_rng = stream(seed, "probe/noise");
    let mut rows = Vec::new();
    for step in 0..steps {
        let grads = problem.stoch_grad(&params, batch, &mut noise_rng);
        for (layer, g) in grads.iter().enumerate() {
            let before = params[layer].clone();
            let cfg = if vectors[layer] {
                OptimizerConfig::new(OptimizerKind::Adamw, lr)
            } else {
                muon.clone()
            };
            optim::step(&mut muon_states[layer], &mut params[layer], g, &cfg, lr)?;
            if vectors[layer] {
                continue;
            }
            let muon_dir = &before - &params[layer];
            for (k, sc) in shadow_cfgs.iter().enumerate() {
                let mut probe = Matrix::zeros(g.rows(), g.cols());
                optim::practical_asgo_step(&mut shadows[k][layer], &mut probe, g, sc, 1.0)?;
                let cosine = match cosine_similarity(&-&probe, &muon_dir) {
                    Ok(c) => c,
                    Err(Error::ZeroMatrix) => f64::NAN,
                    Err(e) => return Err(e),
                };
                rows.push(ProbeRow {
                    step,
                    layer,
                    setting: settings[k].label.clone(),
                    cosine,
                });
            }
        }
    }
    Ok(rows)
}

/// Relative difference between the practical optimizer (`beta1 = beta2 = 0`,
/// `eps = 0`, exact kernel, unnormalized) and Muon (`mu = 0`) on `count`
/// random full-rank gradients of shapes up to `16 x 8`; returns the largest.
pub fn muon_equivalence_check(seed: u64, count: usize, exec: Execution) -> Result<f64> {
    let asgo = OptimizerConfig::new(OptimizerKind::AsgoPractical, 1.0)
        .with_betas(0.0, 0.0)
        .with_eps(0.0)
        .with_rms_align(false);
    let muon = OptimizerConfig::new(OptimizerKind::Muon, 1.0).with_betas(0.0, 0.0);
    let diffs: Vec<Result<f64>> = map_indexed(count, exec, |i| {
        let mut rng = substream(seed, "equivalence", i as u64);
        let m = rng.random_range(1..=16);
        let n = rng.random_range(1..=8);
        let g = gaussian_matrix(m, n, &mut rng);
        if svd(&g, RANK_TOL)?.rank() < m.min(n) {
            return Ok(0.0);
        }
        let mut wa = Matrix::zeros(m, n);
        let mut wm = Matrix::zeros(m, n);
        optim::practical_asgo_step(&mut OptimizerState::new(), &mut wa, &g, &asgo, 1.0)?;
        optim::muon_step(&mut OptimizerState::new(), &mut wm, &g, &muon, 1.0)?;
        Ok((&wa - &wm).frobenius() / wm.frobenius())
    });
    diffs.into_iter().try_fold(0.0, |acc, d| Ok(f64::max(acc, d?)))
}

/// `Q` with `E[G_t G_t^T] <= Q^2` along a quadratic trajectory with noise:
/// `Q^2 = V^2 / M + (||L||_op D_op)^2 I`.
pub fn quadratic_gradient_bound(l: &Matrix, v: &Matrix, batch: usize, d_op: f64) -> Result<Matrix> {
    let lop = spectral_norm(l)?;
    let q2 = v.gram_rows().scale(1.0 / batch as f64).add_diag((lop * d_op).powi(2));
    psd_power(&q2, 0.5, 0.0)
}

/// Draws a gaussian with the module's stream convention; exposed for tests.
pub fn standard_normal(rng: &mut Rng) -> f64 {
    gaussian(rng)
}
