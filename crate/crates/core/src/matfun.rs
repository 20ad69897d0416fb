//! Iterative matrix-function kernels for `X^{-1/2}`.
//!
//! The main kernel is the coupled Newton-Schulz iteration
//!
//! ```text
//! Y <- X / alpha,  alpha = ||X||_F + eps,  Z <- I
//! repeat K times:
//!     A <- Z Y
//!     B <- b A + c A^2
//!     Y <- a Y + Y B
//!     Z <- a Z + B Z
//! X^{-1/2} ~ Z / sqrt(alpha),   X^{1/2} ~ sqrt(alpha) Y
//! ```
//!
//! driven by either a fixed `(a, b, c)` triple or a per-iteration schedule.
//! Per eigenvalue this is the odd polynomial sign iteration
//! `x <- a x + b x^3 + c x^5` applied to `x = sqrt(lambda / alpha)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_power, psd_pseudo_power, Matrix, PINV_RTOL};

/// Quintic Newton-Schulz coefficients.
pub const QUINTIC: (f64, f64, f64) = (2.0, -1.5, 0.5);

/// The ten-step PolarExpress schedule, verbatim.
pub const POLAR_EXPRESS: [(f64, f64, f64); 10] = [
    (8.28721201814563, -23.595886519098837, 17.300387312530933),
    (4.107059111542203, -2.9478499167379106, 0.5448431082926601),
    (3.9486908534822946, -2.908902115962949, 0.5518191394370137),
    (3.3184196573706015, -2.488488024314874, 0.51004894012372),
    (2.300652019954817, -1.6689039845747493, 0.4188073119525673),
    (1.891301407787398, -1.2679958271945868, 0.37680408948524835),
    (1.8750014808534479, -1.2500016453999487, 0.3750001645474248),
    (1.875, -1.25, 0.375),
    (1.875, -1.25, 0.375),
    (1.875, -1.25, 0.375),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    /// One triple reused every iteration.
    FixedTriple,
    /// Iteration `k` uses `schedule[k]`.
    PerIterationList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsCoefficients {
    pub schedule: Vec<(f64, f64, f64)>,
    pub mode: CoefficientMode,
}

impl NsCoefficients {
    pub fn fixed(a: f64, b: f64, c: f64) -> Self {
        Self {
            schedule: vec![(a, b, c)],
            mode: CoefficientMode::FixedTriple,
        }
    }

    pub fn quintic() -> Self {
        let (a, b, c) = QUINTIC;
        Self::fixed(a, b, c)
    }

    pub fn per_iteration(schedule: Vec<(f64, f64, f64)>) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::InvalidArgument("empty coefficient schedule".into()));
        }
        Ok(Self {
            schedule,
            mode: CoefficientMode::PerIterationList,
        })
    }

    /// `"quintic"` or `"polar-express"`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "quintic" | "newton-schulz" => Ok(Self::quintic()),
            "polar-express" => Ok(polar_express_schedule()),
            other => Err(Error::InvalidArgument(format!(
                "unknown coefficient schedule {other:?}"
            ))),
        }
    }

    fn validate(&self, steps: usize) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument("empty coefficient schedule".into()));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("iteration count must be >= 1".into()));
        }
        match self.mode {
            CoefficientMode::FixedTriple if self.schedule.len() != 1 => Err(Error::InvalidArgument(
                "fixed-triple mode needs exactly one triple".into(),
            )),
            CoefficientMode::PerIterationList if steps > self.schedule.len() => {
                Err(Error::InvalidArgument(format!(
                    "{steps} steps requested but the schedule has {} entries",
                    self.schedule.len()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, k: usize) -> (f64, f64, f64) {
        match self.mode {
            CoefficientMode::FixedTriple => self.schedule[0],
            CoefficientMode::PerIterationList => self.schedule[k],
        }
    }
}

pub fn polar_express_schedule() -> NsCoefficients {
    NsCoefficients {
        schedule: POLAR_EXPRESS.to_vec(),
        mode: CoefficientMode::PerIterationList,
    }
}

#[derive(Debug, Clone)]
pub struct NsResult {
    /// Approximates `X^{-1/2}`; symmetrized.
    pub inv_sqrt: Matrix,
    /// Approximates `X^{1/2}`; symmetrized.
    pub sqrt: Matrix,
    pub iterations: usize,
    /// `||Z X Z - I||_F / sqrt(n)` with `Z = inv_sqrt`.
    pub residual: f64,
}

fn check_square(x: &Matrix, op: &'static str) -> Result<usize> {
    if !x.is_square() {
        return Err(Error::NotSquare {
            op,
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { context: op });
    }
    Ok(x.rows())
}

/// `||Z X Z - I||_F / sqrt(n)`.
pub fn inv_sqrt_residual(x: &Matrix, inv_sqrt: &Matrix) -> f64 {
    let n = x.rows();
    let zxz = &(inv_sqrt * x) * inv_sqrt;
    (&zxz - &Matrix::identity(n)).frobenius() / (n as f64).sqrt()
}

/// Coupled Newton-Schulz inverse square root with a fixed iteration count.
pub fn ns_sqrt_inverse(x: &Matrix, coeffs: &NsCoefficients, steps: usize, eps: f64) -> Result<NsResult> {
    ns_sqrt_inverse_damped(x, coeffs, steps, eps, 0.0)
}

/// As [`ns_sqrt_inverse`] but iterates on `X + damping * I`.
pub fn ns_sqrt_inverse_damped(
    x: &Matrix,
    coeffs: &NsCoefficients,
    steps: usize,
    eps: f64,
    damping: f64,
) -> Result<NsResult> {
    let n = check_square(x, "ns_sqrt_inverse")?;
    coeffs.validate(steps)?;
    if eps < 0.0 || damping < 0.0 {
        return Err(Error::InvalidArgument("eps and damping must be >= 0".into()));
    }
    let x = if damping > 0.0 { x.add_diag(damping) } else { x.clone() };
    let alpha = x.frobenius() + eps;
    if alpha == 0.0 {
        return Err(Error::Singular {
            context: "ns_sqrt_inverse",
            value: 0.0,
            hint: "zero input with eps = 0 has no normalization",
        });
    }
    let mut y = x.scale(1.0 / alpha);
    let mut z = Matrix::identity(n);
    for k in 0..steps {
        let (a, b, c) = coeffs.at(k);
        let am = &z * &y;
        let a2 = &am * &am;
        let mut bm = am.scale(b);
        bm.axpy(c, &a2);
        let mut y_next = y.scale(a);
        y_next += &(&y * &bm);
        let mut z_next = z.scale(a);
        z_next += &(&bm * &z);
        if !y_next.is_finite() || !z_next.is_finite() {
            return Err(Error::Divergence {
                kernel: "newton-schulz",
                iteration: k + 1,
            });
        }
        y = y_next;
        z = z_next;
    }
    let root = alpha.sqrt();
    let inv_sqrt = z.scale(1.0 / root).symmetrize();
    let sqrt = y.scale(root).symmetrize();
    let residual = inv_sqrt_residual(&x, &inv_sqrt);
    Ok(NsResult {
        inv_sqrt,
        sqrt,
        iterations: steps,
        residual,
    })
}

/// Denman-Beavers coupled iteration
/// `Y <- (Y + Z^{-1})/2`, `Z <- (Z + Y^{-1})/2` from `Y = X`, `Z = I`.
///
/// Stops early once `||Y_{k+1} - Y_k||_F <= tol * ||Y_k||_F`.
pub fn denman_beavers_inv_sqrt(x: &Matrix, steps: usize, tol: f64) -> Result<NsResult> {
    let n = check_square(x, "denman_beavers")?;
    if steps == 0 {
        return Err(Error::InvalidArgument("iteration count must be >= 1".into()));
    }
    let mut y = x.symmetrize();
    let mut z = Matrix::identity(n);
    let mut iterations = 0;
    for k in 0..steps {
        iterations = k + 1;
        let y_inv = y.inverse().map_err(|_| Error::Singular {
            context: "denman_beavers",
            value: 0.0,
            hint: "iterate not invertible; apply damping upstream",
        })?;
        let z_inv = z.inverse().map_err(|_| Error::Singular {
            context: "denman_beavers",
            value: 0.0,
            hint: "iterate not invertible; apply damping upstream",
        })?;
        let y_next = (&y + &z_inv).scale(0.5);
        let z_next = (&z + &y_inv).scale(0.5);
        if !y_next.is_finite() || !z_next.is_finite() {
            return Err(Error::Divergence {
                kernel: "denman-beavers",
                iteration: k + 1,
            });
        }
        let change = (&y_next - &y).frobenius();
        let scale = y.frobenius();
        y = y_next;
        z = z_next;
        if change <= tol * scale {
            break;
        }
    }
    let inv_sqrt = z.symmetrize();
    let residual = inv_sqrt_residual(x, &inv_sqrt);
    Ok(NsResult {
        inv_sqrt,
        sqrt: y.symmetrize(),
        iterations,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSignReport {
    /// Relative Frobenius error of the (1,2) block against `X^{1/2}`.
    pub sqrt_err: f64,
    /// Relative Frobenius error of the (2,1) block against `X^{-1/2}`.
    pub inv_sqrt_err: f64,
}

/// Runs the odd polynomial sign iteration on `[[0, X], [I, 0]]` and compares
/// its off-diagonal blocks with the eigendecomposition oracle. Diagnostic only.
pub fn block_msign_check(x: &Matrix, coeffs: &NsCoefficients, steps: usize) -> Result<BlockSignReport> {
    let n = check_square(x, "block_msign_check")?;
    coeffs.validate(steps)?;
    let alpha = x.frobenius();
    if alpha == 0.0 {
        return Err(Error::Singular {
            context: "block_msign_check",
            value: 0.0,
            hint: "zero input",
        });
    }
    // sign(sM) = sign(M); scaling by alpha^{-1/2} puts the spectrum in [-1, 1].
    let s = 1.0 / alpha.sqrt();
    let mut m = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            m[(i, n + j)] = s * x[(i, j)];
        }
        m[(n + i, i)] = s;
    }
    let id = Matrix::identity(2 * n);
    for k in 0..steps {
        let (a, b, c) = coeffs.at(k);
        let m2 = &m * &m;
        let mut poly = id.scale(a);
        poly.axpy(b, &m2);
        poly.axpy(c, &(&m2 * &m2));
        m = &m * &poly;
        if !m.is_finite() {
            return Err(Error::Divergence {
                kernel: "block-msign",
                iteration: k + 1,
            });
        }
    }
    let sqrt_block = m.block(0, n, n, n);
    let inv_block = m.block(n, 0, n, n);
    let sqrt_ref = psd_power(x, 0.5, 0.0)?;
    let inv_ref = psd_power(x, -0.5, 0.0)?;
    Ok(BlockSignReport {
        sqrt_err: (&sqrt_block - &sqrt_ref).frobenius() / sqrt_ref.frobenius(),
        inv_sqrt_err: (&inv_block - &inv_ref).frobenius() / inv_ref.frobenius(),
    })
}

/// Which routine computes a preconditioner's inverse square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// Eigendecomposition, pseudo-inverse on the null space.
    #[default]
    ExactEig,
    /// Quintic coupled Newton-Schulz.
    NewtonSchulz,
    /// Coupled Newton-Schulz with the PolarExpress schedule.
    PolarExpress,
    DenmanBeavers,
}

#[derive(Debug, Clone)]
pub struct KernelOutput {
    pub inv_sqrt: Matrix,
    /// Present for the iterative kernels.
    pub residual: Option<f64>,
}

/// `(X + damping I)^{-1/2}` with the selected kernel. `eps` is the
/// normalization offset of the Newton-Schulz kernels and is ignored otherwise.
pub fn inverse_sqrt(x: &Matrix, kernel: Kernel, steps: usize, eps: f64, damping: f64) -> Result<KernelOutput> {
    match kernel {
        Kernel::ExactEig => {
            let xd = if damping > 0.0 { x.add_diag(damping) } else { x.clone() };
            Ok(KernelOutput {
                inv_sqrt: psd_pseudo_power(&xd, -0.5, PINV_RTOL)?,
                residual: None,
            })
        }
        Kernel::NewtonSchulz | Kernel::PolarExpress => {
            let coeffs = if kernel == Kernel::NewtonSchulz {
                NsCoefficients::quintic()
            } else {
                polar_express_schedule()
            };
            let r = ns_sqrt_inverse_damped(x, &coeffs, steps, eps, damping)?;
            Ok(KernelOutput {
                inv_sqrt: r.inv_sqrt,
                residual: Some(r.residual),
            })
        }
        Kernel::DenmanBeavers => {
            let xd = if damping > 0.0 { x.add_diag(damping) } else { x.clone() };
            let r = denman_beavers_inv_sqrt(&xd, steps, 1e-14)?;
            Ok(KernelOutput {
                inv_sqrt: r.inv_sqrt,
                residual: Some(r.residual),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_spd, stream, substream};

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).frobenius() / b.frobenius()
    }

    #[test]
    fn polar_express_table() {
        let s = polar_express_schedule();
        assert_eq!(s.schedule.len(), 10);
        assert_eq!(s.schedule[0], (8.28721201814563, -23.595886519098837, 17.300387312530933));
        assert_eq!(s.schedule[9], (1.875, -1.25, 0.375));
        assert_eq!(s.mode, CoefficientMode::PerIterationList);
    }

    #[test]
    fn ns_identity() {
        let r = ns_sqrt_inverse(&Matrix::identity(4), &NsCoefficients::quintic(), 20, 0.0).unwrap();
        assert!((&r.inv_sqrt - &Matrix::identity(4)).max_abs() < 1e-6);
        assert!((&r.sqrt - &Matrix::identity(4)).max_abs() < 1e-6);
        assert_eq!(r.iterations, 20);
    }

    #[test]
    fn ns_diagonal() {
        let r = ns_sqrt_inverse(&Matrix::from_diag(&[4.0, 1.0]), &NsCoefficients::quintic(), 30, 0.0).unwrap();
        assert!((&r.inv_sqrt - &Matrix::from_diag(&[0.5, 1.0])).max_abs() < 1e-3);
    }

    #[test]
    fn ns_random_spd_matches_oracle() {
        let mut rng = stream(21, "ns-oracle");
        for _ in 0..5 {
            let x = random_spd(32, 100.0, 1.0, &mut rng);
            let r = ns_sqrt_inverse(&x, &NsCoefficients::quintic(), 50, 0.0).unwrap();
            let oracle = psd_power(&x, -0.5, 0.0).unwrap();
            assert!(rel(&r.inv_sqrt, &oracle) <= 1e-3);
        }
    }

    #[test]
    fn ns_rejects_bad_schedules() {
        let x = Matrix::identity(2);
        assert!(ns_sqrt_inverse(&x, &polar_express_schedule(), 11, 0.0).is_err());
        assert!(ns_sqrt_inverse(&x, &NsCoefficients::quintic(), 0, 0.0).is_err());
        assert!(ns_sqrt_inverse(&Matrix::zeros(2, 3), &NsCoefficients::quintic(), 3, 0.0).is_err());
        assert!(NsCoefficients::per_iteration(vec![]).is_err());
        assert!(NsCoefficients::by_name("cubic").is_err());
    }

    #[test]
    fn ns_reports_divergence() {
        let bad = NsCoefficients::fixed(50.0, 50.0, 50.0);
        let err = ns_sqrt_inverse(&Matrix::identity(3), &bad, 200, 0.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration, .. } if iteration > 1 && iteration <= 200));
    }

    #[test]
    fn ns_zero_input_without_eps_is_singular() {
        let e = ns_sqrt_inverse(&Matrix::zeros(3, 3), &NsCoefficients::quintic(), 5, 0.0);
        assert!(matches!(e, Err(Error::Singular { .. })));
    }

    #[test]
    fn ns_invariants_on_random_inputs() {
        for i in 0..100u64 {
            let mut rng = substream(77, "ns-props", i);
            let n = 2 + (i as usize % 10);
            let x = random_spd(n, 100.0, 2.0, &mut rng);
            let q = NsCoefficients::quintic();
            let r = ns_sqrt_inverse(&x, &q, 50, 0.0).unwrap();
            let id = Matrix::identity(n);
            let tol = 10.0 * r.residual.max(1e-14);
            assert!((&(&r.inv_sqrt * &r.sqrt) - &id).frobenius() / (n as f64).sqrt() <= tol);
            assert!((&(&r.sqrt * &r.sqrt) - &x).frobenius() <= tol * x.frobenius() * (n as f64).sqrt());
            // commutation
            let comm = &(&r.inv_sqrt * &x) - &(&x * &r.inv_sqrt);
            assert!(comm.frobenius() <= 1e-6 * x.frobenius());
            // scale covariance
            let c = 0.1 + (i as f64) * 0.37;
            let rc = ns_sqrt_inverse(&x.scale(c), &q, 50, 0.0).unwrap();
            assert!(rel(&rc.inv_sqrt, &r.inv_sqrt.scale(c.powf(-0.5))) <= 1e-6);
            // monotone improvement
            for k in [1usize, 2, 4, 8, 16] {
                let r1 = ns_sqrt_inverse(&x, &q, k, 0.0).unwrap().residual;
                let r2 = ns_sqrt_inverse(&x, &q, 2 * k, 0.0).unwrap().residual;
                assert!(r2 <= r1 + 1e-12, "k={k}: {r2} > {r1}");
            }
        }
    }

    #[test]
    fn ns_damping_shifts_target() {
        let x = Matrix::from_diag(&[3.0, 0.0]);
        let r = ns_sqrt_inverse_damped(&x, &NsCoefficients::quintic(), 40, 0.0, 1.0).unwrap();
        assert!((&r.inv_sqrt - &Matrix::from_diag(&[0.5, 1.0])).max_abs() < 1e-8);
    }

    #[test]
    fn denman_beavers_cases() {
        let r = denman_beavers_inv_sqrt(&Matrix::identity(3), 10, 1e-14).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.inv_sqrt, Matrix::identity(3));
        assert_eq!(r.sqrt, Matrix::identity(3));

        let r = denman_beavers_inv_sqrt(&Matrix::from_diag(&[9.0, 4.0]), 20, 1e-15).unwrap();
        assert!(r.iterations <= 20);
        assert!((&r.inv_sqrt - &Matrix::from_diag(&[1.0 / 3.0, 0.5])).max_abs() < 1e-10);

        let mut rng = stream(8, "db");
        let x = random_spd(24, 50.0, 1.0, &mut rng);
        let r = denman_beavers_inv_sqrt(&x, 50, 1e-14).unwrap();
        let oracle = psd_power(&x, -0.5, 0.0).unwrap();
        assert!(rel(&r.inv_sqrt, &oracle) <= 1e-8);

        assert!(matches!(
            denman_beavers_inv_sqrt(&Matrix::from_diag(&[1.0, 0.0]), 10, 1e-12),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn block_sign_cases() {
        let q = NsCoefficients::quintic();
        let r = block_msign_check(&Matrix::identity(3), &q, 50).unwrap();
        assert!(r.sqrt_err <= 1e-8 && r.inv_sqrt_err <= 1e-8);
        let r = block_msign_check(&Matrix::from_diag(&[4.0, 1.0]), &q, 50).unwrap();
        assert!(r.sqrt_err <= 1e-8, "{r:?}");
        let mut rng = stream(4, "block");
        let x = random_spd(16, 50.0, 1.0, &mut rng);
        let r = block_msign_check(&x, &q, 50).unwrap();
        assert!(r.sqrt_err <= 1e-2 && r.inv_sqrt_err <= 1e-2, "{r:?}");
    }

    #[test]
    fn kernels_agree_on_spd() {
        let mut rng = stream(5, "kernels");
        let x = random_spd(8, 20.0, 1.0, &mut rng);
        let exact = inverse_sqrt(&x, Kernel::ExactEig, 0, 0.0, 0.0).unwrap().inv_sqrt;
        for (k, steps, tol) in [
            (Kernel::NewtonSchulz, 40, 1e-8),
            (Kernel::PolarExpress, 10, 5e-2),
            (Kernel::DenmanBeavers, 50, 1e-10),
        ] {
            let out = inverse_sqrt(&x, k, steps, 0.0, 0.0).unwrap();
            assert!(rel(&out.inv_sqrt, &exact) <= tol, "{k:?}");
            assert!(out.residual.is_some());
        }
    }
}
