//! Property tests over randomly generated instances.

use asgo::linalg::{
    loewner_leq, min_eigenvalue, psd_power, spectral_norm, svd, sym_eig, trace_norm, Matrix, EIG_TOL, RANK_TOL,
};
use asgo::matfun::{ns_sqrt_inverse, NsCoefficients};
use asgo::optim::{
    asgo_theoretical_step, cosine_similarity, muon_step, practical_asgo_step, step, theoretical_lambda,
    GroupOptimizer, OptimizerConfig, OptimizerKind, OptimizerState, ParamGroup, SidePolicy,
};
use asgo::problems::ProblemSpec;
use asgo::rng::{gaussian_matrix, random_orthogonal, random_spd, stream};
use proptest::prelude::*;

fn rng(seed: u64) -> asgo::rng::Rng {
    stream(seed, "properties")
}

fn psd(n: usize, k: usize, seed: u64) -> Matrix {
    gaussian_matrix(n, k, &mut rng(seed)).gram_rows()
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).frobenius() / b.frobenius().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trace_identities(seed in any::<u64>(), n in 1usize..10, k in 1usize..10) {
        let mut r = rng(seed);
        let a = gaussian_matrix(n, k, &mut r);
        let b = gaussian_matrix(k, n, &mut r);
        let ab = (&a * &b).trace().unwrap();
        let ba = (&b * &a).trace().unwrap();
        prop_assert!((ab - ba).abs() <= 1e-10 * (a.frobenius() * b.frobenius()).max(1e-300));

        let x = gaussian_matrix(n, k, &mut r).gram_rows();
        let y = gaussian_matrix(n, n, &mut r).gram_rows();
        let tx = x.trace().unwrap();
        prop_assert!(tx >= 0.0);
        prop_assert!((tx - trace_norm(&x).unwrap()).abs() <= 1e-10 * tx.max(1.0));
        prop_assert!((&x * &y).trace().unwrap() >= -1e-10 * x.frobenius() * y.frobenius());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eig_invariants(seed in any::<u64>(), n in 1usize..16) {
        let x = gaussian_matrix(n, n, &mut rng(seed)).symmetrize();
        let e = sym_eig(&x, EIG_TOL).unwrap();
        let q = &e.eigenvectors;
        prop_assert!((&(q * &q.transpose()) - &Matrix::identity(n)).frobenius() <= 1e-10 * n as f64);
        let recon = e.reconstruct_with(|l| l);
        prop_assert!((&recon - &x).frobenius() <= 1e-9 * x.frobenius().max(1e-300));
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_invariants_and_idempotence(seed in any::<u64>(), m in 1usize..14, n in 1usize..14, k in 1usize..14) {
        let mut r = rng(seed);
        let x = &gaussian_matrix(m, k, &mut r) * &gaussian_matrix(k, n, &mut r);
        let s = svd(&x, RANK_TOL).unwrap();
        prop_assert_eq!(s.rank(), k.min(m).min(n));
        let r_ = s.rank();
        prop_assert!((&s.u.gram_cols() - &Matrix::identity(r_)).frobenius() <= 1e-10 * r_ as f64);
        prop_assert!((&s.v.gram_cols() - &Matrix::identity(r_)).frobenius() <= 1e-10 * r_ as f64);
        prop_assert!((&s.reconstruct() - &x).frobenius() <= 1e-9 * x.frobenius());
        let again = svd(&s.reconstruct(), RANK_TOL).unwrap();
        prop_assert_eq!(again.rank(), r_);
        for (a, b) in again.s.iter().zip(&s.s) {
            prop_assert!((a - b).abs() <= 1e-9 * b);
        }
    }

    #[test]
    fn psd_square_root_reconstructs(seed in any::<u64>(), n in 1usize..16, k in 1usize..20) {
        let x = psd(n, k, seed);
        let h = psd_power(&x, 0.5, 0.0).unwrap();
        prop_assert!((&(&h * &h) - &x).frobenius() <= 1e-8 * x.frobenius());
    }

    #[test]
    fn norm_ordering(seed in any::<u64>(), m in 1usize..12, n in 1usize..12) {
        let x = gaussian_matrix(m, n, &mut rng(seed));
        let (op, f, tr) = (spectral_norm(&x).unwrap(), x.frobenius(), trace_norm(&x).unwrap());
        let r = m.min(n) as f64;
        let tol = 1e-12 * tr;
        prop_assert!(op <= f + tol && f <= tr + tol && tr <= r.sqrt() * f + tol);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let mut r = rng(seed);
        let a = gaussian_matrix(m, n, &mut r);
        let b = gaussian_matrix(m, n, &mut r);
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() <= 1e-15);
        prop_assert!((cosine_similarity(&a, &a.scale(3.0)).unwrap() - 1.0).abs() <= 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn newton_schulz_consistency(seed in any::<u64>(), n in 2usize..12, cond in 1.0f64..100.0, c in 0.01f64..100.0) {
        let x = random_spd(n, cond, 1.0, &mut rng(seed));
        let r = ns_sqrt_inverse(&x, &NsCoefficients::quintic(), 50, 0.0).unwrap();
        let slack = 10.0 * r.residual.max(1e-14);
        prop_assert!((&(&r.inv_sqrt * &r.sqrt) - &Matrix::identity(n)).frobenius() <= slack * n as f64);
        prop_assert!((&(&r.sqrt * &r.sqrt) - &x).frobenius() <= slack * x.frobenius() * n as f64);
        let comm = (&(&r.inv_sqrt * &x) - &(&x * &r.inv_sqrt)).frobenius();
        prop_assert!(comm <= 1e-6 * x.frobenius());
        let scaled = ns_sqrt_inverse(&x.scale(c), &NsCoefficients::quintic(), 50, 0.0).unwrap();
        prop_assert!(rel(&scaled.inv_sqrt, &r.inv_sqrt.scale(c.powf(-0.5))) <= 1e-6);
    }

    #[test]
    fn newton_schulz_more_steps_do_not_hurt(seed in any::<u64>(), n in 2usize..12, cond in 1.0f64..100.0, k in 3usize..12) {
        let x = random_spd(n, cond, 1.0, &mut rng(seed));
        let a = ns_sqrt_inverse(&x, &NsCoefficients::quintic(), k, 0.0).unwrap();
        let b = ns_sqrt_inverse(&x, &NsCoefficients::quintic(), 2 * k, 0.0).unwrap();
        prop_assert!(b.residual <= a.residual.max(1e-12));
    }

    #[test]
    fn theoretical_accumulator_is_monotone(seed in any::<u64>(), m in 1usize..8, n in 1usize..8, eps in 1e-6f64..1e-1) {
        let mut r = rng(seed);
        let mut state = OptimizerState::new();
        let mut w = Matrix::zeros(m, n);
        let mut prev = Matrix::zeros(m, m);
        for _ in 0..6 {
            let g = gaussian_matrix(m, n, &mut r);
            asgo_theoretical_step(&mut state, &mut w, &g, 0.1, eps).unwrap();
            let v = state.side_accumulator().unwrap().clone();
            prop_assert!(loewner_leq(&prev, &v, 1e-9).unwrap());
            let lambda = theoretical_lambda(&v, eps).unwrap();
            prop_assert!(min_eigenvalue(&lambda).unwrap() >= eps - 1e-10);
            prev = v;
        }
    }

    #[test]
    fn muon_update_has_unit_spectral_norm(seed in any::<u64>(), m in 1usize..10, n in 1usize..10, mu in 0.0f64..0.99) {
        let mut r = rng(seed);
        let cfg = OptimizerConfig::new(OptimizerKind::Muon, 1.0).with_betas(mu, 0.0);
        let mut state = OptimizerState::new();
        let mut w = Matrix::zeros(m, n);
        for _ in 0..4 {
            let before = w.clone();
            muon_step(&mut state, &mut w, &gaussian_matrix(m, n, &mut r), &cfg, 1.0).unwrap();
            prop_assert!((spectral_norm(&(&w - &before)).unwrap() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn side_policy_transpose_symmetry(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let mut r = rng(seed);
        let mut left = OptimizerConfig::new(OptimizerKind::AsgoPractical, 0.05);
        left.side_policy = SidePolicy::ForceLeft;
        let mut right = left.clone();
        right.side_policy = SidePolicy::ForceRight;
        let (mut sa, mut sb) = (OptimizerState::new(), OptimizerState::new());
        let mut wa = gaussian_matrix(m, n, &mut r);
        let mut wb = wa.transpose();
        for _ in 0..5 {
            let g = gaussian_matrix(m, n, &mut r);
            practical_asgo_step(&mut sa, &mut wa, &g, &left, 0.05).unwrap();
            practical_asgo_step(&mut sb, &mut wb, &g.transpose(), &right, 0.05).unwrap();
            prop_assert!((&wa - &wb.transpose()).max_abs() <= 1e-12);
        }
    }

    #[test]
    fn grouped_equals_blockwise(seed in any::<u64>(), m in 1usize..6, width in 1usize..4, h in 1usize..4) {
        let mut r = rng(seed);
        let cfg = OptimizerConfig::new(OptimizerKind::AsgoPractical, 0.05);
        let w = gaussian_matrix(m, width * h, &mut r);
        let mut group = ParamGroup::heads(w.clone(), h);
        let mut opt = GroupOptimizer::new(&cfg, &group).unwrap();
        let mut blocks: Vec<Matrix> = (0..h).map(|k| w.column_block(k * width, width)).collect();
        let mut states = vec![OptimizerState::new(); h];
        for _ in 0..3 {
            let g = gaussian_matrix(m, width * h, &mut r);
            opt.step(&mut group, &g, 0.05).unwrap();
            for k in 0..h {
                step(&mut states[k], &mut blocks[k], &g.column_block(k * width, width), &cfg, 0.05).unwrap();
                prop_assert_eq!(&group.weight.column_block(k * width, width), &blocks[k]);
            }
        }
    }

    #[test]
    fn quadratic_gap_is_the_l_norm(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let spec = ProblemSpec::Quadratic { m, n, condition: 5.0, lambda_max: 1.0, noise_scale: 0.0, noise_condition: 1.0 };
        let p = spec.build(seed).unwrap();
        let w = vec![gaussian_matrix(m, n, &mut rng(seed ^ 1))];
        let d = &w[0] - &p.minimizer().unwrap()[0];
        let l = p.smoothness().unwrap();
        let expect = 0.5 * d.dot(&(l * &d));
        let gap = p.loss(&w) - p.f_star().unwrap();
        prop_assert!((gap - expect).abs() <= 1e-10 * expect.max(1.0));
    }
}

#[test]
fn stochastic_gradients_are_unbiased() {
    let spec = ProblemSpec::Quadratic {
        m: 4,
        n: 3,
        condition: 5.0,
        lambda_max: 1.0,
        noise_scale: 0.5,
        noise_condition: 2.0,
    };
    let p = spec.build(9).unwrap();
    let w = vec![gaussian_matrix(4, 3, &mut rng(2))];
    let exact = p.grad(&w).remove(0);
    let mut r = rng(3);
    let draws = 20_000;
    let mut sum = Matrix::zeros(4, 3);
    for _ in 0..draws {
        sum += &p.stoch_grad(&w, 1, &mut r)[0];
    }
    let mean = sum.scale(1.0 / draws as f64);
    // Per-entry noise sd is at most ||V||_op / sqrt(n) = 0.5 / sqrt(3); 5 sigma over the mean.
    let tol = 5.0 * 0.5 / (3f64.sqrt() * (draws as f64).sqrt());
    assert!((&mean - &exact).max_abs() <= tol);
}

#[test]
fn noise_covariance_is_bounded_by_v_squared() {
    let mut r = rng(11);
    let v = random_spd(5, 4.0, 0.7, &mut r);
    let noise = asgo::problems::NoiseModel::from_v(v.clone()).unwrap();
    let s = 100_000;
    let n = 3;
    let mut acc = Matrix::zeros(5, 5);
    for _ in 0..s {
        acc += &noise.sample(n, &mut r).gram_rows();
    }
    let emp = acc.scale(1.0 / s as f64);
    let v2 = v.gram_rows();
    // Each entry of N N^T has variance at most 2 ||V||_op^4 / n; the
    // spectral fluctuation is at most dimension times the entrywise one.
    let entry_sigma = (2.0 * spectral_norm(&v).unwrap().powi(4) / n as f64 / s as f64).sqrt();
    let sigma_stat = 5.0 * entry_sigma;
    assert!(loewner_leq(&emp, &v2.add_diag(5.0 * sigma_stat), 0.0).unwrap());
}

#[test]
fn orthogonal_factor_really_is_orthogonal() {
    let q = random_orthogonal(9, &mut rng(4));
    assert!((&q.gram_cols() - &Matrix::identity(9)).frobenius() <= 1e-12);
}
