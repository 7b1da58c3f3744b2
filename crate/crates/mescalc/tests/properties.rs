use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;

use mescalc::channels::{markov_t, max_correlation, random_uniform_marginal_state, BipartiteState};
use mescalc::fourier::{efron_stein, expand, partial_average, random_orthogonal, reconstruct, truncate, StandardBasis, Truncation};
use mescalc::games::{chsh, eval_strategy, Game, Strategy};
use mescalc::gaussian::{mc_run, normal_vec, ou_apply, random_poly, rng_for};
use mescalc::matfun::{lyapunov_solve, round_sub_povm, round_to_psd, tr_zeta};
use mescalc::matspace::{
    frobenius_norm, inner, is_hermitian, max_abs_entry, pos_part, pseudo_inverse, random_hermitian, random_with_spectrum,
    spectral_decompose, HermitianOp, MatrixC,
};
use mescalc::randop::{expect_tr_zeta, hybrid_gaps, hybrid_substitute, n2, np_mc, random_multilinear, random_traceless_rep};

fn herm(dim: usize, seed: u64) -> HermitianOp {
    HermitianOp::from_matrix(random_hermitian(dim, &mut rng_for(seed, 0))).unwrap()
}

fn herm_on(m: usize, n: usize, seed: u64) -> HermitianOp {
    HermitianOp::new(random_hermitian(m.pow(n as u32), &mut rng_for(seed, 0)), m, n).unwrap()
}

/// Two-outcome POVM `(E, id − E)` with `0 ⪯ E ⪯ id`.
fn random_povm<R: Rng>(dim: usize, rng: &mut R) -> Vec<HermitianOp> {
    let values: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let e = HermitianOp::from_matrix(random_with_spectrum(&values, rng)).unwrap();
    let rest = HermitianOp::from_matrix(MatrixC::identity(dim, dim) - e.matrix()).unwrap();
    vec![e, rest]
}

fn rel_gap(a: &MatrixC, b: &MatrixC) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigendecomposition_reconstructs(dim in 1usize..10, seed: u64) {
        let h = herm(dim, seed);
        let s = spectral_decompose(&h);
        prop_assert!(rel_gap(&s.compose(|x| x), h.matrix()) <= 1e-9);
    }

    #[test]
    fn pos_part_distance_is_tr_zeta(dim in 1usize..10, seed: u64) {
        let h = herm(dim, seed);
        let p = pos_part(&h);
        prop_assert!(spectral_decompose(&p).values.iter().all(|&v| v >= -1e-12));
        let d2 = frobenius_norm(&(p.matrix() - h.matrix()), false).powi(2);
        assert_relative_eq!(d2, tr_zeta(&h), epsilon = 1e-10, max_relative = 1e-9);
    }

    #[test]
    fn pseudo_inverse_is_moore_penrose(dim in 2usize..9, zeros in 0usize..3, seed: u64) {
        let mut rng = rng_for(seed, 1);
        let values: Vec<f64> = (0..dim).map(|i| if i < zeros.min(dim - 1) { 0.0 } else { rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 } }).collect();
        let h = HermitianOp::from_matrix(random_with_spectrum(&values, &mut rng)).unwrap();
        let (a, p) = (h.matrix(), pseudo_inverse(&h));
        let p = p.matrix();
        prop_assert!(max_abs_entry(&(a * p * a - a)) <= 1e-9);
        prop_assert!(max_abs_entry(&(p * a * p - p)) <= 1e-9);
        prop_assert!(is_hermitian(&(a * p)) && is_hermitian(&(p * a)));
    }

    #[test]
    fn inner_is_normalized_norm(dim in 1usize..10, seed: u64) {
        let h = herm(dim, seed);
        let ip = inner(h.matrix(), h.matrix()).unwrap();
        assert_relative_eq!(ip.re, frobenius_norm(h.matrix(), true).powi(2), max_relative = 1e-12);
        prop_assert!(ip.im.abs() <= 1e-12);
    }

    #[test]
    fn level_truncation_ignores_basis_rotation(m in 2usize..4, n in 1usize..3, t in 0usize..3, seed: u64) {
        let p = herm_on(m, n, seed);
        let basis = StandardBasis::gell_mann(m).unwrap();
        let rotated = basis.rotated(&random_orthogonal(m * m - 1, &mut rng_for(seed, 2))).unwrap();
        let a = reconstruct(&truncate(&expand(&p, &basis).unwrap(), Truncation::Exactly(t))).unwrap();
        let b = reconstruct(&truncate(&expand(&p, &rotated).unwrap(), Truncation::Exactly(t))).unwrap();
        prop_assert!(max_abs_entry(&(a.matrix() - b.matrix())) <= 1e-9);
    }

    #[test]
    fn partial_average_contracts(m in 2usize..4, n in 1usize..4, mask: u8, seed: u64) {
        let p = herm_on(m, n, seed);
        let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let avg = partial_average(&p, &s).unwrap();
        prop_assert!(frobenius_norm(avg.matrix(), true) <= frobenius_norm(p.matrix(), true) + 1e-12);
    }

    #[test]
    fn markov_commutes_with_efron_stein(m in 2usize..4, mask in 0usize..4, seed: u64) {
        let n = 2;
        let mut rng = rng_for(seed, 3);
        let psi = random_uniform_marginal_state(m, &mut rng).unwrap();
        let rho = max_correlation(&psi).unwrap();
        let basis = StandardBasis::gell_mann(m).unwrap();
        let q = herm_on(m, n, seed);
        let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let q_s = reconstruct(&efron_stein(&expand(&q, &basis).unwrap(), &s).unwrap()).unwrap();
        let lhs = markov_t(&q_s, &psi, n).unwrap();
        let tq = markov_t(&q, &psi, n).unwrap();
        let rhs = reconstruct(&efron_stein(&expand(&tq, &basis).unwrap(), &s).unwrap()).unwrap();
        prop_assert!(max_abs_entry(&(lhs.matrix() - rhs.matrix())) <= 1e-9);
        let bound = rho.powi(s.len() as i32) * frobenius_norm(q_s.matrix(), true) + 1e-9;
        prop_assert!(frobenius_norm(lhs.matrix(), true) <= bound);
    }

    #[test]
    fn round_to_psd_is_lipschitz(dim in 1usize..9, seed: u64) {
        let (a, b) = (herm(dim, seed), herm(dim, seed ^ 0xabc));
        let lhs = frobenius_norm(&(round_to_psd(&a).matrix() - round_to_psd(&b).matrix()), true);
        prop_assert!(lhs <= frobenius_norm(&(a.matrix() - b.matrix()), true) + 1e-12);
    }

    #[test]
    fn sub_povm_rounding_fixes_povms(dim in 1usize..9, seed: u64) {
        let xs = random_povm(dim, &mut rng_for(seed, 4));
        let p = round_sub_povm(&xs, false).unwrap();
        for (a, b) in p.elements().iter().zip(&xs) {
            prop_assert!(max_abs_entry(&(a.matrix() - b.matrix())) <= 1e-10);
        }
    }

    #[test]
    fn lyapunov_solution_is_hermitian(dim in 1usize..8, seed: u64) {
        let mut rng = rng_for(seed, 5);
        let values: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..3.0)).collect();
        let p = HermitianOp::from_matrix(random_with_spectrum(&values, &mut rng)).unwrap();
        let q = herm(dim, seed);
        let x = lyapunov_solve(&p, &q).unwrap();
        prop_assert!(is_hermitian(x.matrix()));
    }

    #[test]
    fn game_value_is_linear_in_state(alpha in 0.0f64..1.0, seed: u64) {
        let mut rng = rng_for(seed, 6);
        let game = if seed % 2 == 0 { chsh() } else { random_game(&mut rng) };
        let alice = (0..game.nx()).map(|_| random_povm(2, &mut rng)).collect::<Vec<_>>();
        let bob = (0..game.ny()).map(|_| random_povm(2, &mut rng)).collect::<Vec<_>>();
        let s = Strategy { alice, bob, copies: 1 };
        let psi1 = random_uniform_marginal_state(2, &mut rng).unwrap();
        let psi2 = BipartiteState::noisy_mes(2, rng.random_range(0.0..1.0)).unwrap();
        let mixed = eval_strategy(&game, &s, &psi1.mix(&psi2, alpha).unwrap()).unwrap();
        let split = alpha * eval_strategy(&game, &s, &psi1).unwrap() + (1.0 - alpha) * eval_strategy(&game, &s, &psi2).unwrap();
        prop_assert!((mixed - split).abs() <= 1e-10);
    }
}

fn random_game<R: Rng>(rng: &mut R) -> Game {
    let (nx, ny) = (rng.random_range(1..4), rng.random_range(1..4));
    let raw: Vec<Vec<f64>> = (0..nx).map(|_| (0..ny).map(|_| rng.random_range(0.1..1.0)).collect()).collect();
    let total: f64 = raw.iter().flatten().sum();
    let mu = raw.into_iter().map(|r| r.into_iter().map(|v| v / total).collect()).collect();
    let v = (0..nx * ny * 4).map(|_| u8::from(rng.random_bool(0.5))).collect();
    Game::new(nx, ny, 2, 2, mu, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gaussian_hypercontractivity(n in 1usize..5, d in 1usize..4, seed: u64) {
        let p = random_poly(n, d, true, &mut rng_for(seed, 7));
        let u = ou_apply(&p, 1.0 / 3f64.sqrt()).unwrap();
        let est = mc_run(1_000_000, seed, 1, |rng, out| {
            out[0] = u.eval(&normal_vec(n, rng)).powi(4);
        })[0];
        let n4 = est.mean.powf(0.25);
        let se = est.std_error / (4.0 * est.mean.powf(0.75));
        prop_assert!(n4 <= p.norm_sq().sqrt() * (1.0 + 5.0 * se), "N₄ = {n4} ± {se}, N₂ = {}", p.norm_sq().sqrt());
    }

    #[test]
    fn gaussian_law_is_rotation_invariant(n in 2usize..5, d in 1usize..4, seed: u64) {
        let mut rng = rng_for(seed, 8);
        let p = random_poly(n, d, true, &mut rng);
        let o = random_orthogonal(n, &mut rng);
        let samples = 200_000;
        let moments = |rotate: bool, s: u64| {
            mc_run(samples, s, 2, |rng, out| {
                let g = normal_vec(n, rng);
                let x: Vec<f64> = if rotate { (0..n).map(|i| (0..n).map(|j| o[(i, j)] * g[j]).sum()).collect() } else { g };
                let v = p.eval(&x);
                out[0] = v;
                out[1] = v * v;
            })
        };
        let (a, b) = (moments(false, seed), moments(true, seed.wrapping_add(1)));
        for k in 0..2 {
            let se = (a[k].std_error.powi(2) + b[k].std_error.powi(2)).sqrt();
            prop_assert!((a[k].mean - b[k].mean).abs() <= 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn random_operator_degree_norm_bound(m in 2usize..4, h in 1usize..3, n in 1usize..4, d in 1usize..4, seed: u64) {
        let basis = StandardBasis::gell_mann(m).unwrap();
        let p = random_multilinear(&basis, h, n, d, &mut rng_for(seed, 9)).unwrap();
        let n4 = np_mc(&p, 4, 50_000, seed).unwrap();
        let bound = 3f64.powf(d as f64 / 2.0) * (m as f64).powf(d as f64 / 4.0) * n2(&p);
        prop_assert!(n4.mean <= bound * (1.0 + 5.0 * n4.std_error));
    }

    #[test]
    fn hybrids_ignore_basis_choice(m in 2usize..4, n in 1usize..3, seed: u64) {
        let p = herm_on(m, n, seed);
        let basis = StandardBasis::gell_mann(m).unwrap();
        let rotated = basis.rotated(&random_orthogonal(m * m - 1, &mut rng_for(seed, 10))).unwrap();
        let (a, b) = (expand(&p, &basis).unwrap(), expand(&p, &rotated).unwrap());
        for k in 0..=n {
            let (ha, hb) = (hybrid_substitute(&a, k).unwrap(), hybrid_substitute(&b, k).unwrap());
            prop_assert!((n2(&ha) - n2(&hb)).abs() <= 1e-10);
            let (za, zb) = (expect_tr_zeta(&ha, 20_000, seed).unwrap(), expect_tr_zeta(&hb, 20_000, seed ^ 1).unwrap());
            let se = (za.std_error.powi(2) + zb.std_error.powi(2)).sqrt();
            prop_assert!((za.mean - zb.mean).abs() <= 4.0 * se + 1e-12);
        }
    }
}

#[test]
fn hybrid_gaps_shrink_with_influence() {
    let basis = StandardBasis::gell_mann(2).unwrap();
    let total = |tau: f64| -> f64 {
        (0..4)
            .map(|s| {
                let rep = random_traceless_rep(&basis, 3, 2, tau, &mut rng_for(s, 11)).unwrap();
                hybrid_gaps(&rep, 20_000, s).unwrap().iter().map(|g| g.gap.mean.abs()).sum::<f64>()
            })
            .sum()
    };
    let (large, small) = (total(1.0), total(0.01));
    assert!(small < large, "τ=0.01 gives {small}, τ=1 gives {large}");
}
