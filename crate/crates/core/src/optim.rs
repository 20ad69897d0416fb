//! Optimizer step rules behind one stepping interface.
//!
//! Every rule is a free function taking the mutable [`OptimizerState`], the
//! weight and the gradient; [`step`] dispatches on [`OptimizerConfig::kind`].
//! [`GroupOptimizer`] adds the `heads(h)` column-block grouping and the
//! vector-parameter routing used by Muon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_power, svd, sym_eig, Matrix, EIG_TOL, PINV_RTOL, RANK_TOL};
use crate::matfun::{inverse_sqrt, Kernel};

/// Practical ASGO's update RMS target, `0.2 sqrt(mn)` in Frobenius norm.
pub const RMS_TARGET: f64 = 0.2;

/// With `eps = 0` the theoretical preconditioner is treated as singular once
/// `lambda_min(Lambda) <= THEORY_SINGULAR_RTOL * lambda_max(Lambda)`.
pub const THEORY_SINGULAR_RTOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    AsgoTheoretical,
    AsgoPractical,
    Dasgo,
    Muon,
    Shampoo,
    FullMatrixAdagrad,
    Adamw,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::AsgoTheoretical => "asgo-theoretical",
            OptimizerKind::AsgoPractical => "asgo-practical",
            OptimizerKind::Dasgo => "dasgo",
            OptimizerKind::Muon => "muon",
            OptimizerKind::Shampoo => "shampoo",
            OptimizerKind::FullMatrixAdagrad => "full-matrix-adagrad",
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

/// Shampoo's inverse order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InverseOrder {
    #[default]
    #[serde(rename = "-1/4")]
    Quarter,
    #[serde(rename = "-1/2")]
    Half,
}

impl InverseOrder {
    pub fn exponent(self) -> f64 {
        match self {
            InverseOrder::Quarter => -0.25,
            InverseOrder::Half => -0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreconditionSource {
    #[default]
    Gradient,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SidePolicy {
    /// Right side when `m >= n`, left otherwise.
    #[default]
    AutoMinDim,
    ForceLeft,
    ForceRight,
}

/// Which dimension a one-sided preconditioner acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// `V = G G^T` (`m x m`), update `Lambda^{-1} M`.
    Left,
    /// `V = G^T G` (`n x n`), update `M Lambda^{-1}`.
    Right,
}

impl SidePolicy {
    pub fn resolve(self, rows: usize, cols: usize) -> Side {
        match self {
            SidePolicy::AutoMinDim if rows >= cols => Side::Right,
            SidePolicy::AutoMinDim => Side::Left,
            SidePolicy::ForceLeft => Side::Left,
            SidePolicy::ForceRight => Side::Right,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_update_freq() -> usize {
    1
}
fn default_kernel_steps() -> usize {
    10
}
fn default_adagrad_cap() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Newton-Schulz normalization offset for practical ASGO; additive
    /// `eps I` for theoretical ASGO, Shampoo and full-matrix AdaGrad; the
    /// denominator offset for DASGO and AdamW.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Preconditioner recompute period `tau`.
    #[serde(default = "default_update_freq")]
    pub update_freq: usize,
    #[serde(default)]
    pub shampoo_inverse_order: InverseOrder,
    #[serde(default)]
    pub precondition_source: PreconditionSource,
    #[serde(default)]
    pub side_policy: SidePolicy,
    /// Defaults to on for practical ASGO and off elsewhere.
    #[serde(default)]
    pub rms_align: Option<bool>,
    #[serde(default)]
    pub qk_groups: Option<usize>,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "default_kernel_steps")]
    pub kernel_steps: usize,
    /// `V + damping I` before any inverse-root kernel (practical ASGO).
    #[serde(default)]
    pub damping: f64,
    /// Decoupled weight decay, AdamW only.
    #[serde(default)]
    pub weight_decay: f64,
    /// Largest `m * n` full-matrix AdaGrad accepts.
    #[serde(default = "default_adagrad_cap")]
    pub adagrad_cap: usize,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            update_freq: default_update_freq(),
            shampoo_inverse_order: InverseOrder::default(),
            precondition_source: PreconditionSource::default(),
            side_policy: SidePolicy::default(),
            rms_align: None,
            qk_groups: None,
            kernel: Kernel::default(),
            kernel_steps: default_kernel_steps(),
            damping: 0.0,
            weight_decay: 0.0,
            adagrad_cap: default_adagrad_cap(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_rms_align(mut self, on: bool) -> Self {
        self.rms_align = Some(on);
        self
    }

    pub fn rms_align(&self) -> bool {
        self.rms_align
            .unwrap_or(self.kind == OptimizerKind::AsgoPractical)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be finite and > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad(format!("eps must be finite and >= 0, got {}", self.eps));
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return bad(format!("damping must be finite and >= 0, got {}", self.damping));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.update_freq == 0 {
            return bad("update_freq must be >= 1".into());
        }
        if self.kernel_steps == 0 {
            return bad("kernel_steps must be >= 1".into());
        }
        if self.kernel == Kernel::PolarExpress && self.kernel_steps > crate::matfun::POLAR_EXPRESS.len() {
            return bad(format!(
                "polar-express supports at most {} steps, got {}",
                crate::matfun::POLAR_EXPRESS.len(),
                self.kernel_steps
            ));
        }
        if self.qk_groups == Some(0) {
            return bad("qk_groups must be >= 1".into());
        }
        Ok(())
    }
}

/// Preconditioner memory, one variant per optimizer family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Accumulator {
    Empty,
    /// One-sided Gram accumulator (both ASGO variants).
    Side { side: Side, v: Matrix },
    /// DASGO's `v`, or AdamW's second moment.
    Diagonal(Vec<f64>),
    /// Full-matrix AdaGrad over `vec(G)`.
    Full(Matrix),
    /// Shampoo's `(L, R)`.
    TwoSided { left: Matrix, right: Matrix },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// `M` for ASGO, DASGO, AdamW and SGD; `B` for Muon.
    pub momentum: Option<Matrix>,
    pub accumulator: Accumulator,
    /// Practical ASGO: `Lambda^{-1}`; Shampoo: the `(L, R)` powers side by side.
    pub cached: Option<Vec<Matrix>>,
    /// Steps since the cache was built; always `< tau`.
    pub cache_age: usize,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        Self {
            step: 0,
            momentum: None,
            accumulator: Accumulator::Empty,
            cached: None,
            cache_age: 0,
        }
    }

    /// The one-sided accumulator `V`, if any.
    pub fn side_accumulator(&self) -> Option<&Matrix> {
        match &self.accumulator {
            Accumulator::Side { v, .. } => Some(v),
            _ => None,
        }
    }

    fn needs_refresh(&mut self, tau: usize) -> bool {
        let refresh = self.cached.is_none() || self.cache_age + 1 >= tau;
        if refresh {
            self.cache_age = 0;
        } else {
            self.cache_age += 1;
        }
        refresh
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// `||w' - w||_F`, computed from the update itself.
    pub update_frobenius: f64,
    /// Residual of the iterative kernel when it ran this step.
    pub kernel_residual: Option<f64>,
    /// The step left `w` untouched (zero gradient or zero normalized update).
    pub skipped: bool,
}

impl StepInfo {
    fn skipped() -> Self {
        Self {
            skipped: true,
            ..Self::default()
        }
    }
}

fn check_pair(w: &Matrix, g: &Matrix, op: &'static str) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::DimensionMismatch {
            op,
            left: w.shape(),
            right: g.shape(),
        });
    }
    if !g.is_finite() || !w.is_finite() {
        return Err(Error::NonFinite { context: op });
    }
    Ok(())
}

/// `w -= scale * u`, reporting `||scale * u||_F`.
fn apply(w: &mut Matrix, u: &Matrix, scale: f64, residual: Option<f64>) -> StepInfo {
    w.axpy(-scale, u);
    StepInfo {
        update_frobenius: scale.abs() * u.frobenius(),
        kernel_residual: residual,
        skipped: false,
    }
}

/// Applies `u` either raw or rescaled to Frobenius norm `0.2 sqrt(mn)`.
fn apply_aligned(w: &mut Matrix, u: &Matrix, lr: f64, align: bool, residual: Option<f64>) -> StepInfo {
    if !align {
        return apply(w, u, lr, residual);
    }
    let norm = u.frobenius();
    if norm == 0.0 {
        return StepInfo {
            kernel_residual: residual,
            ..StepInfo::skipped()
        };
    }
    let (m, n) = w.shape();
    let target = lr * RMS_TARGET * ((m * n) as f64).sqrt();
    let mut info = apply(w, &u.scale(1.0 / norm), target, residual);
    info.update_frobenius = target;
    info
}

fn ema(acc: &mut Matrix, beta: f64, x: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a = beta * *a + (1.0 - beta) * b;
    }
}

/// `Lambda = V^{1/2} + eps I` for the theoretical variant.
pub fn theoretical_lambda(v: &Matrix, eps: f64) -> Result<Matrix> {
    let eig = sym_eig(v, EIG_TOL)?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt() + eps))
}

/// Full-statistics variant: `V += G G^T`, `W -= lr (V^{1/2} + eps I)^{-1} G` with an
/// exact eigendecomposition.
pub fn asgo_theoretical_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, lr: f64, eps: f64) -> Result<StepInfo> {
    check_pair(w, g, "asgo_theoretical_step")?;
    let m = g.rows();
    if let Accumulator::Empty = state.accumulator {
        state.accumulator = Accumulator::Side {
            side: Side::Left,
            v: Matrix::zeros(m, m),
        };
    }
    state.step += 1;
    if g.is_zero() {
        return Ok(StepInfo::skipped());
    }
    let Accumulator::Side { v, .. } = &mut state.accumulator else {
        return Err(Error::InvalidArgument("state belongs to another optimizer".into()));
    };
    *v += &g.gram_rows();
    let eig = sym_eig(v, EIG_TOL)?;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt() + eps).collect();
    let lmax = lam.iter().cloned().fold(0.0, f64::max);
    let lmin = lam.iter().cloned().fold(f64::INFINITY, f64::min);
    if eps == 0.0 && lmin <= THEORY_SINGULAR_RTOL * lmax {
        return Err(Error::Singular {
            context: "asgo_theoretical_step",
            value: lmin,
            hint: "V is rank deficient; use eps > 0",
        });
    }
    let mut inv = eig.clone();
    inv.eigenvalues = lam;
    let lambda_inv = inv.reconstruct_with(|l| 1.0 / l);
    let u = &lambda_inv * g;
    Ok(apply(w, &u, lr, None))
}

/// Practical variant with side selection, `tau`-step caching, pluggable kernels and
/// optional RMS alignment.
pub fn practical_asgo_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "practical_asgo_step")?;
    let (m, n) = g.shape();
    let side = cfg.side_policy.resolve(m, n);
    let dim = match side {
        Side::Left => m,
        Side::Right => n,
    };
    let mom = state.momentum.get_or_insert_with(|| Matrix::zeros(m, n));
    ema(mom, cfg.beta1, g);
    let src = match cfg.precondition_source {
        PreconditionSource::Gradient => g,
        PreconditionSource::Momentum => &*mom,
    };
    let gram = match side {
        Side::Left => src.gram_rows(),
        Side::Right => src.gram_cols(),
    };
    match &mut state.accumulator {
        Accumulator::Side { side: s, v } if *s == side && v.rows() == dim => ema(v, cfg.beta2, &gram),
        Accumulator::Empty => {
            let mut v = Matrix::zeros(dim, dim);
            ema(&mut v, cfg.beta2, &gram);
            state.accumulator = Accumulator::Side { side, v };
        }
        _ => return Err(Error::InvalidArgument("state belongs to another optimizer or shape".into())),
    }
    state.step += 1;
    let mut residual = None;
    if state.needs_refresh(cfg.update_freq) {
        let v = state.side_accumulator().expect("side accumulator set above");
        let out = inverse_sqrt(v, cfg.kernel, cfg.kernel_steps, cfg.eps, cfg.damping)?;
        residual = out.residual;
        state.cached = Some(vec![out.inv_sqrt]);
    }
    let lambda_inv = &state.cached.as_ref().expect("cache filled")[0];
    let mom = state.momentum.as_ref().expect("momentum set above");
    let u = match side {
        Side::Left => lambda_inv * mom,
        Side::Right => mom * lambda_inv,
    };
    Ok(apply_aligned(w, &u, lr, cfg.rms_align(), residual))
}

/// Diagonal right preconditioner, no bias correction.
pub fn dasgo_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "dasgo_step")?;
    let (m, n) = g.shape();
    let mom = state.momentum.get_or_insert_with(|| Matrix::zeros(m, n));
    ema(mom, cfg.beta1, g);
    if let Accumulator::Empty = state.accumulator {
        state.accumulator = Accumulator::Diagonal(vec![0.0; n]);
    }
    let Accumulator::Diagonal(v) = &mut state.accumulator else {
        return Err(Error::InvalidArgument("state belongs to another optimizer".into()));
    };
    for (j, vj) in v.iter_mut().enumerate() {
        let col_sq: f64 = (0..m).map(|i| g[(i, j)] * g[(i, j)]).sum();
        *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * col_sq;
    }
    state.step += 1;
    let scale: Vec<f64> = v
        .iter()
        .map(|&vj| {
            let d = (vj + cfg.eps).sqrt();
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();
    let u = Matrix::from_fn(m, n, |i, j| mom[(i, j)] * scale[j]);
    Ok(apply_aligned(w, &u, lr, cfg.rms_align(), None))
}

/// Muon with an exact SVD: `B = mu B + G`, `W -= lr U V^T`.
pub fn muon_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "muon_step")?;
    let (m, n) = g.shape();
    let b = state.momentum.get_or_insert_with(|| Matrix::zeros(m, n));
    *b = b.scale(cfg.beta1);
    *b += g;
    state.step += 1;
    if b.is_zero() {
        return Ok(StepInfo::skipped());
    }
    let o = svd(b, RANK_TOL)?.polar_factor();
    Ok(apply_aligned(w, &o, lr, cfg.rms_align(), None))
}

/// Two-sided Shampoo `W -= lr (L + eps I)^p G (R + eps I)^p`, `p` the
/// inverse order; EMA accumulators when `beta2 > 0`, sums otherwise.
pub fn shampoo_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "shampoo_step")?;
    let (m, n) = g.shape();
    if let Accumulator::Empty = state.accumulator {
        state.accumulator = Accumulator::TwoSided {
            left: Matrix::zeros(m, m),
            right: Matrix::zeros(n, n),
        };
    }
    let Accumulator::TwoSided { left, right } = &mut state.accumulator else {
        return Err(Error::InvalidArgument("state belongs to another optimizer".into()));
    };
    let (gl, gr) = (g.gram_rows(), g.gram_cols());
    if cfg.beta2 > 0.0 {
        ema(left, cfg.beta2, &gl);
        ema(right, cfg.beta2, &gr);
    } else {
        *left += &gl;
        *right += &gr;
    }
    state.step += 1;
    if g.is_zero() {
        return Ok(StepInfo::skipped());
    }
    if state.needs_refresh(cfg.update_freq) {
        let Accumulator::TwoSided { left, right } = &state.accumulator else {
            unreachable!()
        };
        let p = cfg.shampoo_inverse_order.exponent();
        let pl = psd_power(&left.add_diag(cfg.eps), p, 0.0)?;
        let pr = psd_power(&right.add_diag(cfg.eps), p, 0.0)?;
        state.cached = Some(vec![pl, pr]);
    }
    let c = state.cached.as_ref().expect("cache filled");
    let u = &(&c[0] * g) * &c[1];
    Ok(apply_aligned(w, &u, lr, cfg.rms_align(), None))
}

/// Full-matrix AdaGrad over the column-major vectorization of `G`.
pub fn full_matrix_adagrad_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "full_matrix_adagrad_step")?;
    let (m, n) = g.shape();
    let d = m * n;
    if d > cfg.adagrad_cap {
        return Err(Error::CapExceeded {
            size: d,
            cap: cfg.adagrad_cap,
        });
    }
    if let Accumulator::Empty = state.accumulator {
        state.accumulator = Accumulator::Full(Matrix::zeros(d, d));
    }
    let Accumulator::Full(h) = &mut state.accumulator else {
        return Err(Error::InvalidArgument("state belongs to another optimizer".into()));
    };
    let v = g.vec_cols();
    *h += &Matrix::outer(&v, &v);
    state.step += 1;
    if g.is_zero() {
        return Ok(StepInfo::skipped());
    }
    let eig = sym_eig(h, EIG_TOL)?;
    let cutoff = PINV_RTOL * eig.max().max(0.0);
    let eps = cfg.eps;
    let pinv = eig.reconstruct_with(|l| {
        if l <= cutoff && eps == 0.0 {
            0.0
        } else {
            1.0 / (l.max(0.0).sqrt() + eps)
        }
    });
    let col = Matrix::from_vec(d, 1, v).expect("finite gradient");
    let u = &pinv * &col;
    let u = Matrix::unvec_cols(u.as_slice(), m, n);
    Ok(apply(w, &u, lr, None))
}

/// AdamW with bias correction and decoupled weight decay.
pub fn adamw_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "adamw_step")?;
    let (m, n) = g.shape();
    let mom = state.momentum.get_or_insert_with(|| Matrix::zeros(m, n));
    ema(mom, cfg.beta1, g);
    if let Accumulator::Empty = state.accumulator {
        state.accumulator = Accumulator::Diagonal(vec![0.0; m * n]);
    }
    let Accumulator::Diagonal(v) = &mut state.accumulator else {
        return Err(Error::InvalidArgument("state belongs to another optimizer".into()));
    };
    for (vi, gi) in v.iter_mut().zip(g.as_slice()) {
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut u = Matrix::zeros(m, n);
    for ((ui, mi), vi) in u.as_mut_slice().iter_mut().zip(mom.as_slice()).zip(v.iter()) {
        *ui = (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
    }
    if cfg.weight_decay > 0.0 {
        u.axpy(cfg.weight_decay, w);
    }
    Ok(apply(w, &u, lr, None))
}

/// SGD with optional heavy-ball momentum `buf = beta1 buf + g`.
pub fn sgd_step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    check_pair(w, g, "sgd_step")?;
    state.step += 1;
    if cfg.beta1 == 0.0 {
        return Ok(apply(w, g, lr, None));
    }
    let buf = state.momentum.get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
    *buf = buf.scale(cfg.beta1);
    *buf += g;
    let u = buf.clone();
    Ok(apply(w, &u, lr, None))
}

/// Dispatches on `cfg.kind` with step size `lr`.
pub fn step(state: &mut OptimizerState, w: &mut Matrix, g: &Matrix, cfg: &OptimizerConfig, lr: f64) -> Result<StepInfo> {
    match cfg.kind {
        OptimizerKind::AsgoTheoretical => asgo_theoretical_step(state, w, g, lr, cfg.eps),
        OptimizerKind::AsgoPractical => practical_asgo_step(state, w, g, cfg, lr),
        OptimizerKind::Dasgo => dasgo_step(state, w, g, cfg, lr),
        OptimizerKind::Muon => muon_step(state, w, g, cfg, lr),
        OptimizerKind::Shampoo => shampoo_step(state, w, g, cfg, lr),
        OptimizerKind::FullMatrixAdagrad => full_matrix_adagrad_step(state, w, g, cfg, lr),
        OptimizerKind::Adamw => adamw_step(state, w, g, cfg, lr),
        OptimizerKind::Sgd => sgd_step(state, w, g, cfg, lr),
    }
}

/// `tr(A^T B) / (||A||_F ||B||_F)`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (na, nb) = (a.frobenius(), b.frobenius());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Logical split of a parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupReshape {
    #[default]
    None,
    /// `n x (h d)` treated as `h` independent `n x d` column blocks.
    Heads(usize),
}

impl GroupReshape {
    pub fn blocks(self, cols: usize) -> Result<usize> {
        match self {
            GroupReshape::None => Ok(1),
            GroupReshape::Heads(0) => Err(Error::InvalidArgument("heads(0) is not a grouping".into())),
            GroupReshape::Heads(h) if cols % h != 0 => Err(Error::InvalidArgument(format!(
                "{cols} columns do not split into {h} heads"
            ))),
            GroupReshape::Heads(h) => Ok(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub weight: Matrix,
    pub reshape: GroupReshape,
    /// Bias-like parameter; routed to AdamW under Muon.
    pub vector: bool,
}

impl ParamGroup {
    pub fn matrix(weight: Matrix) -> Self {
        Self {
            weight,
            reshape: GroupReshape::None,
            vector: false,
        }
    }

    pub fn vector(weight: Matrix) -> Self {
        Self {
            weight,
            reshape: GroupReshape::None,
            vector: true,
        }
    }

    pub fn heads(weight: Matrix, h: usize) -> Self {
        Self {
            weight,
            reshape: GroupReshape::Heads(h),
            vector: false,
        }
    }
}

/// Optimizer for one parameter group, one state per head block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOptimizer {
    pub config: OptimizerConfig,
    pub states: Vec<OptimizerState>,
}

impl GroupOptimizer {
    pub fn new(config: &OptimizerConfig, group: &ParamGroup) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        if group.vector && config.kind == OptimizerKind::Muon {
            config.kind = OptimizerKind::Adamw;
            config.rms_align = None;
        }
        let blocks = group.reshape.blocks(group.weight.cols())?;
        Ok(Self {
            config,
            states: vec![OptimizerState::new(); blocks],
        })
    }

    /// Steps every block; the reported update norm is over the whole group and
    /// the residual is the worst block's.
    pub fn step(&mut self, group: &mut ParamGroup, grad: &Matrix, lr: f64) -> Result<StepInfo> {
        if grad.shape() != group.weight.shape() {
            return Err(Error::DimensionMismatch {
                op: "GroupOptimizer::step",
                left: group.weight.shape(),
                right: grad.shape(),
            });
        }
        let h = self.states.len();
        if h == 1 {
            return step(&mut self.states[0], &mut group.weight, grad, &self.config, lr);
        }
        let width = grad.cols() / h;
        let mut sq = 0.0;
        let mut residual: Option<f64> = None;
        let mut skipped = true;
        for (k, state) in self.states.iter_mut().enumerate() {
            let mut wb = group.weight.column_block(k * width, width);
            let gb = grad.column_block(k * width, width);
            let info = step(state, &mut wb, &gb, &self.config, lr)?;
            group.weight.set_column_block(k * width, &wb);
            sq += info.update_frobenius * info.update_frobenius;
            skipped &= info.skipped;
            if let Some(r) = info.kernel_residual {
                residual = Some(residual.map_or(r, |x| x.max(r)));
            }
        }
        Ok(StepInfo {
            update_frobenius: sq.sqrt(),
            kernel_residual: residual,
            skipped,
        })
    }
}
