//! Desk-scale objectives with exact gradients, stochastic oracles with a
//! controlled noise structure, and the constants the bounds need.
//!
//! Parameters are always a list of matrices, one per parameter group. The
//! quadratic, low-rank and logistic problems have a single group.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_power, spectral_norm, Matrix};
use crate::rng::{gaussian, gaussian_matrix, random_orthogonal, random_spd, stream, Rng};

/// Gradient norm the logistic minimizer search stops at.
pub const MINIMIZER_GRAD_TOL: f64 = 1e-10;

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Shape of every parameter group.
    fn shapes(&self) -> Vec<(usize, usize)>;
    /// Which groups are bias-like vectors.
    fn vector_groups(&self) -> Vec<bool> {
        vec![false; self.shapes().len()]
    }
    fn loss(&self, params: &[Matrix]) -> f64;
    fn grad(&self, params: &[Matrix]) -> Vec<Matrix>;
    /// Unbiased estimate of [`Objective::grad`] averaged over `batch` draws.
    fn stoch_grad(&self, params: &[Matrix], batch: usize, rng: &mut Rng) -> Vec<Matrix>;
    fn init(&self, rng: &mut Rng) -> Vec<Matrix>;
    fn minimizer(&self) -> Option<&[Matrix]> {
        None
    }
    fn f_star(&self) -> Option<f64> {
        None
    }
    /// `L` with `f` 1-smooth in `||X||_L^2 = tr(X^T L X)`.
    fn smoothness(&self) -> Option<&Matrix> {
        None
    }
    /// `V` with `E[N N^T] <= V^2` for one draw.
    fn noise_bound(&self) -> Option<&Matrix> {
        None
    }
}

/// Additive gradient noise `N = A Z` with `Z` iid `N(0, 1/n)` entries, so
/// `E[N N^T] = A A^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub factor: Matrix,
    /// `(A A^T)^{1/2}`.
    pub v: Matrix,
}

impl NoiseModel {
    pub fn new(factor: Matrix) -> Result<Self> {
        let v = psd_power(&factor.gram_rows(), 0.5, 0.0)?;
        Ok(Self { factor, v })
    }

    /// Noise saturating `E[N N^T] = V^2` for symmetric PSD `V`.
    pub fn from_v(v: Matrix) -> Result<Self> {
        let factor = v.symmetrize();
        let v = psd_power(&factor.gram_rows(), 0.5, 0.0)?;
        Ok(Self { factor, v })
    }

    /// One draw with `n` columns.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix {
        let sd = 1.0 / (n as f64).sqrt();
        let z = Matrix::from_fn(self.factor.cols(), n, |_, _| sd * gaussian(rng));
        &self.factor * &z
    }

    /// Mean of `batch` independent draws.
    pub fn sample_mean(&self, n: usize, batch: usize, rng: &mut Rng) -> Matrix {
        let mut acc = self.sample(n, rng);
        for _ in 1..batch {
            acc += &self.sample(n, rng);
        }
        acc.scale(1.0 / batch.max(1) as f64)
    }
}

/// `f(W) = 1/2 tr((W - W*)^T L (W - W*))`, optionally with additive noise.
#[derive(Debug, Clone)]
pub struct Quadratic {
    name: &'static str,
    l: Matrix,
    w_star: [Matrix; 1],
    noise: Option<NoiseModel>,
    /// Low-rank regression keeps its design factor `A` with `L = A^T A`.
    design: Option<Matrix>,
}

/// Quadratic with symmetric positive definite `L`.
pub fn make_quadratic(l: Matrix, w_star: Matrix, noise: Option<NoiseModel>) -> Result<Quadratic> {
    if l.rows() != w_star.rows() || !l.is_square() {
        return Err(Error::DimensionMismatch {
            op: "make_quadratic",
            left: l.shape(),
            right: w_star.shape(),
        });
    }
    let lmin = min_eigenvalue(&l)?;
    if lmin <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "L must be positive definite, smallest eigenvalue {lmin:e}"
        )));
    }
    check_noise(&noise, l.rows())?;
    Ok(Quadratic {
        name: "quadratic",
        l: l.symmetrize(),
        w_star: [w_star],
        noise,
        design: None,
    })
}

fn check_noise(noise: &Option<NoiseModel>, m: usize) -> Result<()> {
    match noise {
        Some(nm) if nm.factor.rows() != m => Err(Error::DimensionMismatch {
            op: "noise model",
            left: nm.factor.shape(),
            right: (m, m),
        }),
        _ => Ok(()),
    }
}

/// `f(W) = 1/2 ||A (W - W*)||_F^2` with `A = U diag(s) V^T` of rank `s.len()`,
/// so `L = A^T A` and every deterministic gradient has rank at most `r`.
pub fn make_lowrank_regression(a: Matrix, w_star: Matrix, noise: Option<NoiseModel>) -> Result<Quadratic> {
    if a.rows() != w_star.rows() || !a.is_square() {
        return Err(Error::DimensionMismatch {
            op: "make_lowrank_regression",
            left: a.shape(),
            right: w_star.shape(),
        });
    }
    check_noise(&noise, a.rows())?;
    Ok(Quadratic {
        name: "lowrank-regression",
        l: a.gram_cols(),
        w_star: [w_star],
        noise,
        design: Some(a),
    })
}

/// Rank-`r` square design with singular values log-spaced from 1 down to
/// `1/condition`.
pub fn lowrank_design(m: usize, r: usize, condition: f64, rng: &mut Rng) -> Matrix {
    let u = random_orthogonal(m, rng).column_block(0, r);
    let v = random_orthogonal(m, rng).column_block(0, r);
    let s: Vec<f64> = (0..r)
        .map(|i| {
            let frac = if r == 1 { 0.0 } else { i as f64 / (r - 1) as f64 };
            condition.powf(-frac)
        })
        .collect();
    &(&u * &Matrix::from_diag(&s)) * &v.transpose()
}

impl Quadratic {
    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn w_star(&self) -> &Matrix {
        &self.w_star[0]
    }

    pub fn noise(&self) -> Option<&NoiseModel> {
        self.noise.as_ref()
    }

    pub fn design(&self) -> Option<&Matrix> {
        self.design.as_ref()
    }

    fn displacement(&self, w: &Matrix) -> Matrix {
        w - &self.w_star[0]
    }
}

impl Objective for Quadratic {
    fn name(&self) -> &'static str {
        self.name
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.w_star[0].shape()]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        let d = self.displacement(&params[0]);
        match &self.design {
            Some(a) => 0.5 * (a * &d).frobenius().powi(2),
            None => 0.5 * d.dot(&(&self.l * &d)),
        }
    }

    fn grad(&self, params: &[Matrix]) -> Vec<Matrix> {
        vec![&self.l * &self.displacement(&params[0])]
    }

    fn stoch_grad(&self, params: &[Matrix], batch: usize, rng: &mut Rng) -> Vec<Matrix> {
        let mut g = self.grad(params);
        if let Some(nm) = &self.noise {
            let n = g[0].cols();
            g[0] += &nm.sample_mean(n, batch, rng);
        }
        g
    }

    fn init(&self, _rng: &mut Rng) -> Vec<Matrix> {
        let (m, n) = self.w_star[0].shape();
        vec![Matrix::zeros(m, n)]
    }

    fn minimizer(&self) -> Option<&[Matrix]> {
        Some(&self.w_star)
    }

    fn f_star(&self) -> Option<f64> {
        Some(0.0)
    }

    fn smoothness(&self) -> Option<&Matrix> {
        Some(&self.l)
    }

    fn noise_bound(&self) -> Option<&Matrix> {
        self.noise.as_ref().map(|nm| &nm.v)
    }
}

/// l2-regularized multinomial logistic regression, `W` is `features x classes`.
#[derive(Debug)]
pub struct Logistic {
    x: Matrix,
    labels: Vec<usize>,
    classes: usize,
    l2: f64,
    seed: u64,
    cache_dir: Option<PathBuf>,
    solved: OnceLock<Option<([Matrix; 1], f64)>>,
}

/// Balanced synthetic data: class means at distance ~`separation` plus unit
/// Gaussian noise, label `i mod classes`.
pub fn make_logistic(samples: usize, features: usize, classes: usize, l2: f64, seed: u64) -> Result<Logistic> {
    if classes < 2 || features == 0 {
        return Err(Error::InvalidArgument("logistic needs >= 2 classes and >= 1 feature".into()));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be >= 0, got {l2}")));
    }
    let mut rng = stream(seed, "logistic/data");
    let means = gaussian_matrix(classes, features, &mut rng).scale(1.5 / (features as f64).sqrt());
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let x = Matrix::from_fn(samples, features, |i, j| means[(labels[i], j)] + gaussian(&mut rng));
    Ok(Logistic {
        x,
        labels,
        classes,
        l2,
        seed,
        cache_dir: None,
        solved: OnceLock::new(),
    })
}

impl Logistic {
    /// Minimizers are read from and written to `dir`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn data(&self) -> (&Matrix, &[usize]) {
        (&self.x, &self.labels)
    }

    fn features(&self) -> usize {
        self.x.cols()
    }

    /// Loss and gradient over the rows in `idx` (all rows when `None`).
    fn eval(&self, w: &Matrix, idx: Option<&[usize]>, want_grad: bool) -> (f64, Option<Matrix>) {
        let k = self.classes;
        let d = self.features();
        let rows: Vec<usize> = match idx {
            Some(i) => i.to_vec(),
            None => (0..self.x.rows()).collect(),
        };
        let count = rows.len();
        let mut loss = 0.0;
        let mut grad = want_grad.then(|| Matrix::zeros(d, k));
        let mut logits = vec![0.0; k];
        for &i in &rows {
            let xi = self.x.row(i);
            for (c, l) in logits.iter_mut().enumerate() {
                *l = (0..d).map(|j| xi[j] * w[(j, c)]).sum();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let y = self.labels[i];
            loss += mx + z.ln() - logits[y];
            if let Some(g) = grad.as_mut() {
                for c in 0..k {
                    let p = (logits[c] - mx).exp() / z - if c == y { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[(j, c)] += p * xi[j];
                    }
                }
            }
        }
        let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        loss = loss * scale + 0.5 * self.l2 * w.frobenius().powi(2);
        let grad = grad.map(|mut g| {
            g = g.scale(scale);
            g.axpy(self.l2, w);
            g
        });
        (loss, grad)
    }

    fn cache_path(&self) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| {
            d.join(format!(
                "logistic-n{}-d{}-k{}-l2{:e}-seed{}.wstar",
                self.x.rows(),
                self.features(),
                self.classes,
                self.l2,
                self.seed
            ))
        })
    }

    /// Accelerated gradient descent to `||grad||_F <= MINIMIZER_GRAD_TOL`.
    fn solve(&self) -> Option<Matrix> {
        let (d, k) = (self.features(), self.classes);
        let n = self.x.rows().max(1) as f64;
        let lip = 0.5 * spectral_norm(&self.x).ok()?.powi(2) / n + self.l2;
        if self.l2 <= 0.0 {
            return None;
        }
        let q = self.l2 / lip;
        let momentum = (1.0 - q.sqrt()) / (1.0 + q.sqrt());
        let mut w = Matrix::zeros(d, k);
        let mut prev = w.clone();
        for _ in 0..200_000 {
            let mut y = w.scale(1.0 + momentum);
            y.axpy(-momentum, &prev);
            let g = self.eval(&y, None, true).1.expect("gradient requested");
            prev = w;
            w = y;
            w.axpy(-1.0 / lip, &g);
            let gw = self.eval(&w, None, true).1.expect("gradient requested");
            if gw.frobenius() <= MINIMIZER_GRAD_TOL {
                return Some(w);
            }
        }
        None
    }

    fn solved(&self) -> Option<&([Matrix; 1], f64)> {
        self.solved
            .get_or_init(|| {
                let path = self.cache_path();
                let (d, k) = (self.features(), self.classes);
                let cached = path.as_ref().and_then(|p| read_matrix_cache(p, self.seed).ok());
                let w = match cached {
                    Some(w) if w.shape() == (d, k) => w,
                    _ => {
                        let w = self.solve()?;
                        if let Some(p) = &path {
                            // A failed cache write only costs a recomputation later.
                            let _ = write_matrix_cache(p, &w, self.seed);
                        }
                        w
                    }
                };
                let f = self.eval(&w, None, false).0;
                Some(([w], f))
            })
            .as_ref()
    }
}

impl Objective for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.features(), self.classes)]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        self.eval(&params[0], None, false).0
    }

    fn grad(&self, params: &[Matrix]) -> Vec<Matrix> {
        vec![self.eval(&params[0], None, true).1.expect("gradient requested")]
    }

    fn stoch_grad(&self, params: &[Matrix], batch: usize, rng: &mut Rng) -> Vec<Matrix> {
        let n = self.x.rows();
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        vec![self.eval(&params[0], Some(&idx), true).1.expect("gradient requested")]
    }

    fn init(&self, _rng: &mut Rng) -> Vec<Matrix> {
        vec![Matrix::zeros(self.features(), self.classes)]
    }

    fn minimizer(&self) -> Option<&[Matrix]> {
        self.solved().map(|(w, _)| &w[..])
    }

    fn f_star(&self) -> Option<f64> {
        self.solved().map(|(_, f)| *f)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ASGOWST1";

/// Header `magic, rows, cols, seed` (little endian), row-major `f64` data,
/// then the SHA-256 of everything before it.
pub fn write_matrix_cache(path: &Path, w: &Matrix, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(32 + 8 * w.as_slice().len() + 32);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(w.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(w.cols() as u64).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    for x in w.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_matrix_cache(path: &Path, seed: u64) -> Result<Matrix> {
    let buf = fs::read(path)?;
    let corrupt = |why: &str| Error::Io(format!("{}: {why}", path.display()));
    if buf.len() < 64 || &buf[..8] != CACHE_MAGIC {
        return Err(corrupt("not a minimizer cache"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body)[..] != *digest {
        return Err(corrupt("checksum mismatch"));
    }
    let word = |i: usize| u64::from_le_bytes(body[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
    let (rows, cols, stored_seed) = (word(0) as usize, word(1) as usize, word(2));
    if stored_seed != seed {
        return Err(corrupt("seed mismatch"));
    }
    if body.len() != 32 + 8 * rows * cols {
        return Err(corrupt("length mismatch"));
    }
    let data = body[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// One-hidden-layer tanh network with square loss. Groups are
/// `[W1 (h x d), b1 (h x 1), W2 (o x h), b2 (o x 1)]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    x: Matrix,
    y: Matrix,
    widths: [usize; 3],
}

/// Data from a random teacher network of the same shape plus 0.1 label noise.
pub fn make_mlp(widths: [usize; 3], samples: usize, seed: u64) -> Result<Mlp> {
    if widths.contains(&0) {
        return Err(Error::InvalidArgument("MLP widths must be positive".into()));
    }
    let [d, h, o] = widths;
    let mut rng = stream(seed, "mlp/data");
    let t1 = gaussian_matrix(h, d, &mut rng).scale(1.0 / (d as f64).sqrt());
    let t2 = gaussian_matrix(o, h, &mut rng).scale(1.0 / (h as f64).sqrt());
    let x = gaussian_matrix(samples, d, &mut rng);
    let hidden = (&x * &t1.transpose()).map(f64::tanh);
    let mut y = &hidden * &t2.transpose();
    y.axpy(0.1, &gaussian_matrix(samples, o, &mut rng));
    Ok(Mlp { x, y, widths })
}

impl Mlp {
    fn forward_backward(&self, p: &[Matrix], idx: Option<&[usize]>, want_grad: bool) -> (f64, Option<Vec<Matrix>>) {
        let [d, h, o] = self.widths;
        let rows: Vec<usize> = match idx {
            Some(i) => i.to_vec(),
            None => (0..self.x.rows()).collect(),
        };
        let (w1, b1, w2, b2) = (&p[0], &p[1], &p[2], &p[3]);
        let mut grads = want_grad.then(|| vec![Matrix::zeros(h, d), Matrix::zeros(h, 1), Matrix::zeros(o, h), Matrix::zeros(o, 1)]);
        if rows.is_empty() {
            return (0.0, grads);
        }
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        let mut hid = vec![0.0; h];
        let mut res = vec![0.0; o];
        let mut dz = vec![0.0; h];
        for &i in &rows {
            let xi = self.x.row(i);
            for (a, hv) in hid.iter_mut().enumerate() {
                let z: f64 = b1[(a, 0)] + (0..d).map(|j| w1[(a, j)] * xi[j]).sum::<f64>();
                *hv = z.tanh();
            }
            for (c, r) in res.iter_mut().enumerate() {
                *r = b2[(c, 0)] + (0..h).map(|a| w2[(c, a)] * hid[a]).sum::<f64>() - self.y[(i, c)];
                loss += 0.5 * *r * *r;
            }
            if let Some(g) = grads.as_mut() {
                for (a, dza) in dz.iter_mut().enumerate() {
                    let back: f64 = (0..o).map(|c| res[c] * w2[(c, a)]).sum();
                    *dza = back * (1.0 - hid[a] * hid[a]);
                }
                for c in 0..o {
                    g[3][(c, 0)] += res[c];
                    for a in 0..h {
                        g[2][(c, a)] += res[c] * hid[a];
                    }
                }
                for a in 0..h {
                    g[1][(a, 0)] += dz[a];
                    for j in 0..d {
                        g[0][(a, j)] += dz[a] * xi[j];
                    }
                }
            }
        }
        let grads = grads.map(|g| g.into_iter().map(|m| m.scale(scale)).collect());
        (loss * scale, grads)
    }
}

impl Objective for Mlp {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let [d, h, o] = self.widths;
        vec![(h, d), (h, 1), (o, h), (o, 1)]
    }

    fn vector_groups(&self) -> Vec<bool> {
        vec![false, true, false, true]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        self.forward_backward(params, None, false).0
    }

    fn grad(&self, params: &[Matrix]) -> Vec<Matrix> {
        self.forward_backward(params, None, true).1.expect("gradient requested")
    }

    fn stoch_grad(&self, params: &[Matrix], batch: usize, rng: &mut Rng) -> Vec<Matrix> {
        let n = self.x.rows();
        if n == 0 {
            return self.grad(params);
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        self.forward_backward(params, Some(&idx), true).1.expect("gradient requested")
    }

    fn init(&self, rng: &mut Rng) -> Vec<Matrix> {
        let [d, h, o] = self.widths;
        vec![
            gaussian_matrix(h, d, rng).scale(1.0 / (d as f64).sqrt()),
            Matrix::zeros(h, 1),
            gaussian_matrix(o, h, rng).scale(1.0 / (h as f64).sqrt()),
            Matrix::zeros(o, 1),
        ]
    }
}

/// Largest entrywise relative error between central differences with step
/// `h` and the analytic gradient, over all groups. Entries are compared
/// relative to `max(|fd|, |g|, 1e-3 max|g| + 1e-12)` so exact zeros do not
/// inflate the ratio.
pub fn finite_diff_check(p: &dyn Objective, params: &[Matrix], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let grads = p.grad(params);
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (gi, g) in grads.iter().enumerate() {
        let floor = 1e-3 * g.max_abs() + 1e-12;
        for k in 0..g.as_slice().len() {
            let orig = work[gi].as_slice()[k];
            work[gi].as_mut_slice()[k] = orig + h;
            let fp = p.loss(&work);
            work[gi].as_mut_slice()[k] = orig - h;
            let fm = p.loss(&work);
            work[gi].as_mut_slice()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice()[k];
            let denom = fd.abs().max(an.abs()).max(floor);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    Ok(worst)
}

fn default_condition() -> f64 {
    10.0
}
fn default_one() -> f64 {
    1.0
}
fn default_l2() -> f64 {
    1e-2
}

/// Config-addressable problem constructors; every instance is a pure function
/// of these parameters and the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        m: usize,
        n: usize,
        /// `lambda_max(L) / lambda_min(L)`.
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default = "default_one")]
        lambda_max: f64,
        /// `V = noise_scale * (SPD with unit top eigenvalue)`; 0 disables noise.
        #[serde(default)]
        noise_scale: f64,
        #[serde(default = "default_one")]
        noise_condition: f64,
    },
    LowrankRegression {
        m: usize,
        n: usize,
        rank: usize,
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default)]
        noise_scale: f64,
    },
    Logistic {
        samples: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_l2")]
        l2: f64,
        #[serde(default)]
        cache_dir: Option<PathBuf>,
    },
    Mlp {
        widths: [usize; 3],
        samples: usize,
    },
}

impl ProblemSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Objective>> {
        match self {
            &ProblemSpec::Quadratic {
                m,
                n,
                condition,
                lambda_max,
                noise_scale,
                noise_condition,
            } => {
                check_dims(m, n)?;
                let mut rng = stream(seed, "quadratic/instance");
                let l = random_spd(m, condition, lambda_max, &mut rng);
                let w_star = gaussian_matrix(m, n, &mut rng);
                let noise = noise_for(m, noise_scale, noise_condition, &mut rng)?;
                Ok(Box::new(make_quadratic(l, w_star, noise)?))
            }
            &ProblemSpec::LowrankRegression {
                m,
                n,
                rank,
                condition,
                noise_scale,
            } => {
                check_dims(m, n)?;
                if rank == 0 || rank > m {
                    return Err(Error::InvalidArgument(format!("rank must lie in 1..={m}, got {rank}")));
                }
                let mut rng = stream(seed, "lowrank/instance");
                let a = lowrank_design(m, rank, condition, &mut rng);
                let w_star = gaussian_matrix(m, n, &mut rng);
                let noise = noise_for(m, noise_scale, 1.0, &mut rng)?;
                Ok(Box::new(make_lowrank_regression(a, w_star, noise)?))
            }
            ProblemSpec::Logistic {
                samples,
                features,
                classes,
                l2,
                cache_dir,
            } => {
                let p = make_logistic(*samples, *features, *classes, *l2, seed)?;
                Ok(Box::new(match cache_dir {
                    Some(d) => p.with_cache_dir(d),
                    None => p,
                }))
            }
            ProblemSpec::Mlp { widths, samples } => Ok(Box::new(make_mlp(*widths, *samples, seed)?)),
        }
    }
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidShape {
            rows: m,
            cols: n,
            reason: "problem dimensions must be positive",
        });
    }
    Ok(())
}

fn noise_for(m: usize, scale: f64, condition: f64, rng: &mut Rng) -> Result<Option<NoiseModel>> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(None);
    }
    Ok(Some(NoiseModel::from_v(random_spd(m, condition, scale, rng))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{svd, trace_norm, RANK_TOL};

    struct TraceLoss(usize);

    impl Objective for TraceLoss {
        fn name(&self) -> &'static str {
            "trace"
        }
        fn shapes(&self) -> Vec<(usize, usize)> {
            vec![(self.0, self.0)]
        }
        fn loss(&self, p: &[Matrix]) -> f64 {
            p[0].trace().unwrap()
        }
        fn grad(&self, _: &[Matrix]) -> Vec<Matrix> {
            vec![Matrix::identity(self.0)]
        }
        fn stoch_grad(&self, p: &[Matrix], _: usize, _: &mut Rng) -> Vec<Matrix> {
            self.grad(p)
        }
        fn init(&self, _: &mut Rng) -> Vec<Matrix> {
            vec![Matrix::zeros(self.0, self.0)]
        }
    }

    fn quad(seed: u64, noise: f64) -> Quadratic {
        let mut rng = stream(seed, "t");
        let l = random_spd(4, 5.0, 2.0, &mut rng);
        let w = gaussian_matrix(4, 3, &mut rng);
        let nm = (noise > 0.0).then(|| NoiseModel::from_v(random_spd(4, 3.0, noise, &mut rng)).unwrap());
        make_quadratic(l, w, nm).unwrap()
    }

    #[test]
    fn trace_loss_fd_is_exact() {
        let mut rng = stream(1, "tr");
        let w = gaussian_matrix(3, 3, &mut rng);
        assert!(finite_diff_check(&TraceLoss(3), &[w], 1e-5).unwrap() <= 1e-10);
    }

    #[test]
    fn quadratic_examples() {
        let q = quad(2, 0.0);
        assert!(q.grad(&[q.w_star().clone()])[0].frobenius() <= 1e-10);
        let mut rng = stream(2, "pts");
        for _ in 0..10 {
            let w = gaussian_matrix(4, 3, &mut rng);
            assert!(finite_diff_check(&q, &[w.clone()], 1e-5).unwrap() <= 1e-6);
            let d = &w - q.w_star();
            let direct = 0.5 * (&(&d.transpose() * q.l()) * &d).trace().unwrap();
            assert!((q.loss(&[w]) - direct).abs() <= 1e-12 * direct.max(1.0));
        }
        let ident = make_quadratic(Matrix::identity(2), Matrix::from_rows(&[[1.0], [2.0]]), None).unwrap();
        let g = ident.grad(&[Matrix::from_rows(&[[4.0], [0.0]])]);
        assert_eq!(g[0], Matrix::from_rows(&[[3.0], [-2.0]]));
        assert!(make_quadratic(Matrix::from_diag(&[1.0, 0.0]), Matrix::zeros(2, 1), None).is_err());
    }

    #[test]
    fn stochastic_gradient_is_unbiased() {
        let q = quad(3, 0.5);
        let w = Matrix::from_fn(4, 3, |i, j| (i as f64) - (j as f64));
        let exact = q.grad(&[w.clone()]).remove(0);
        let mut rng = stream(3, "unbiased");
        let s = 20_000;
        let mut mean = Matrix::zeros(4, 3);
        let mut sq = Matrix::zeros(4, 3);
        for _ in 0..s {
            let g = q.stoch_grad(&[w.clone()], 1, &mut rng).remove(0);
            mean += &g;
            sq += &g.map(|x| x * x);
        }
        let mean = mean.scale(1.0 / s as f64);
        for k in 0..12 {
            let var = sq.as_slice()[k] / s as f64 - mean.as_slice()[k].powi(2);
            let se = (var / s as f64).sqrt();
            assert!((mean.as_slice()[k] - exact.as_slice()[k]).abs() <= 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn noise_covariance_and_batch_reduction() {
        let q = quad(4, 0.8);
        let nm = q.noise().unwrap();
        let v2 = nm.v.gram_rows();
        let mut rng = stream(4, "cov");
        for batch in [1usize, 4, 16] {
            let s = 20_000;
            let mut acc = Matrix::zeros(4, 4);
            let mut sq = Matrix::zeros(4, 4);
            for _ in 0..s {
                let nn = nm.sample_mean(3, batch, &mut rng).gram_rows();
                sq += &nn.map(|x| x * x);
                acc += &nn;
            }
            let emp = acc.scale(1.0 / s as f64);
            let target = v2.scale(1.0 / batch as f64);
            for k in 0..16 {
                let var = sq.as_slice()[k] / s as f64 - emp.as_slice()[k].powi(2);
                let se = (var / s as f64).sqrt();
                assert!((emp.as_slice()[k] - target.as_slice()[k]).abs() <= 5.0 * se, "batch {batch}");
            }
            let sigma = (0..16)
                .map(|k| (sq.as_slice()[k] / s as f64 - emp.as_slice()[k].powi(2)).max(0.0).sqrt())
                .fold(0.0, f64::max)
                / (s as f64).sqrt();
            assert!(crate::linalg::loewner_leq(&emp, &target.add_diag(5.0 * 4.0 * sigma), 0.0).unwrap());
        }
    }

    #[test]
    fn lowrank_gradients_have_low_rank() {
        let spec = ProblemSpec::LowrankRegression {
            m: 8,
            n: 6,
            rank: 1,
            condition: 1.0,
            noise_scale: 0.0,
        };
        let p = spec.build(5).unwrap();
        assert!(p.grad(p.minimizer().unwrap())[0].frobenius() <= 1e-10);
        let mut rng = stream(5, "lr");
        for _ in 0..5 {
            let g = p.grad(&[gaussian_matrix(8, 6, &mut rng)]).remove(0);
            assert!(svd(&g, RANK_TOL).unwrap().rank() <= 1);
        }
        let spec = ProblemSpec::LowrankRegression {
            m: 8,
            n: 6,
            rank: 3,
            condition: 4.0,
            noise_scale: 0.0,
        };
        let p = spec.build(6).unwrap();
        for _ in 0..5 {
            let w = gaussian_matrix(8, 6, &mut rng);
            let g = p.grad(&[w.clone()]).remove(0);
            assert!(svd(&g, RANK_TOL).unwrap().rank() <= 3);
            assert!(trace_norm(&g).unwrap() <= 3f64.sqrt() * g.frobenius() * (1.0 + 1e-12));
            assert!(finite_diff_check(p.as_ref(), &[w], 1e-5).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn logistic_examples() {
        let unreg = make_logistic(60, 5, 3, 0.0, 7).unwrap();
        let w0 = Matrix::zeros(5, 3);
        assert!((unreg.loss(&[w0.clone()]) - 3f64.ln()).abs() < 1e-14);
        let (x, labels) = unreg.data();
        let g = unreg.grad(&[w0.clone()]).remove(0);
        for c in 0..3 {
            for j in 0..5 {
                let mean: f64 = (0..60).map(|i| x[(i, j)]).sum::<f64>() / 60.0;
                let cls: f64 = (0..60).filter(|&i| labels[i] == c).map(|i| x[(i, j)]).sum::<f64>() / 60.0;
                assert!((g[(j, c)] - (mean / 3.0 - cls)).abs() < 1e-14);
            }
        }
        let p = make_logistic(60, 5, 3, 1e-2, 7).unwrap();
        let mut rng = stream(7, "fd");
        for _ in 0..5 {
            let w = gaussian_matrix(5, 3, &mut rng);
            assert!(finite_diff_check(&p, &[w], 1e-5).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn logistic_minimizer_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_logistic(80, 4, 3, 1e-2, 9).unwrap().with_cache_dir(dir.path());
        let w = p.minimizer().unwrap()[0].clone();
        assert!(p.grad(&[w.clone()])[0].frobenius() <= MINIMIZER_GRAD_TOL);
        let path = p.cache_path().unwrap();
        assert_eq!(read_matrix_cache(&path, 9).unwrap(), w);
        assert!(read_matrix_cache(&path, 10).is_err());
        let q = make_logistic(80, 4, 3, 1e-2, 9).unwrap().with_cache_dir(dir.path());
        assert_eq!(q.minimizer().unwrap()[0], w);
        assert!(q.f_star().unwrap() <= q.loss(&[Matrix::zeros(4, 3)]));

        let mut bytes = fs::read(&path).unwrap();
        bytes[40] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(read_matrix_cache(&path, 9).is_err());
    }

    #[test]
    fn mlp_examples() {
        let empty = make_mlp([3, 4, 2], 0, 1).unwrap();
        let mut rng = stream(1, "mlp");
        let p0 = empty.init(&mut rng);
        assert!(empty.grad(&p0).iter().all(Matrix::is_zero));

        let p = make_mlp([3, 5, 2], 40, 2).unwrap();
        for _ in 0..5 {
            let params: Vec<Matrix> = p.shapes().iter().map(|&(r, c)| gaussian_matrix(r, c, &mut rng)).collect();
            assert!(finite_diff_check(&p, &params, 1e-5).unwrap() <= 1e-5);
        }

        let mut params = p.init(&mut rng);
        let mut last = p.loss(&params);
        for _ in 0..50 {
            let g = p.grad(&params);
            for (w, gi) in params.iter_mut().zip(&g) {
                w.axpy(-0.05, gi);
            }
            let now = p.loss(&params);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn spec_parsing_is_strict() {
        let ok: ProblemSpec = serde_json::from_str(r#"{"name":"quadratic","m":4,"n":3}"#).unwrap();
        assert!(matches!(ok, ProblemSpec::Quadratic { condition, .. } if condition == 10.0));
        assert!(serde_json::from_str::<ProblemSpec>(r#"{"name":"quadratic","m":4,"n":3,"cond":2}"#).is_err());
        assert!(serde_json::from_str::<ProblemSpec>(r#"{"name":"cubic","m":4}"#).is_err());
        let a = ok.build(3).unwrap();
        let b = ok.build(3).unwrap();
        assert_eq!(a.minimizer().unwrap(), b.minimizer().unwrap());
    }
}
