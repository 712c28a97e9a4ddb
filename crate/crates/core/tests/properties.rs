use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssm_sgmcmc::buffer_theory::{dobrushin_bound, extrapolate_buffer};
use ssm_sgmcmc::evaluation::{ksd_imq, nmi, param_mse_aligned};
use ssm_sgmcmc::linalg::standard_normal_vec;
use ssm_sgmcmc::preconditioners::precondition;
use ssm_sgmcmc::{synthetic_star, ArhmmParams, GaussianHmmParams, ModelParams, SyntheticTag};

fn phi_strategy(k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(1e-3..50.0f64, k * k).prop_map(move |v| DMatrix::from_vec(k, k, v))
}

fn lower_factor(seed: u64, m: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal_vec(&mut rng, m * m);
    DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => 0.5 + z[i * m + j].abs(),
        std::cmp::Ordering::Greater => 0.3 * z[i * m + j],
    })
}

fn arhmm(phi: DMatrix<f64>, seed: u64) -> ModelParams {
    let k = phi.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::Arhmm(ArhmmParams {
        phi,
        a: (0..k).map(|_| DMatrix::from_iterator(2, 2, standard_normal_vec(&mut rng, 4).iter().map(|v| 0.4 * v))).collect(),
        psi_q: (0..k).map(|s| lower_factor(seed + s as u64, 2)).collect(),
    })
}

fn labels(max_k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..max_k, 2..60)
}

proptest! {
    #[test]
    fn transition_rows_sum_to_one(phi in phi_strategy(3)) {
        let p = arhmm(phi, 1);
        for row in p.transition().unwrap().row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_round_trip(phi in phi_strategy(2), seed in 0u64..1000) {
        let p = arhmm(phi, seed);
        let back = p.from_unconstrained(&p.to_unconstrained()).unwrap();
        prop_assert!((back.constrained_vector() - p.constrained_vector()).amax() < 1e-12 * p.constrained_vector().amax().max(1.0));
    }

    #[test]
    fn dobrushin_constant_is_a_contraction_bound(phi in phi_strategy(3)) {
        let pi = ssm_sgmcmc::models::transition_from_phi(&phi);
        let d = dobrushin_bound(&pi).unwrap();
        prop_assert!((0.0..=1.0).contains(&d.l));
    }

    #[test]
    fn nmi_is_symmetric_and_relabel_invariant(a in labels(4), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|&x| if rand::Rng::random_bool(&mut rng, 0.3) { (x + 1) % 4 } else { x }).collect();
        let relabeled: Vec<usize> = b.iter().map(|&x| [2, 0, 3, 1][x]).collect();
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - nmi(&a, &relabeled).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn extrapolated_buffer_grows_as_tolerance_shrinks(b_hat in 0usize..40, rho in 0.05..0.95f64, e1 in 1e-6..1.0f64, e2 in 1e-6..1.0f64) {
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let at_lo = extrapolate_buffer(b_hat, 1e-2, lo, rho).unwrap();
        let at_hi = extrapolate_buffer(b_hat, 1e-2, hi, rho).unwrap();
        prop_assert!(at_lo >= at_hi);
        prop_assert_eq!(extrapolate_buffer(b_hat, 1e-2, 1e-2, rho).unwrap(), b_hat);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preconditioner_blocks_are_spd(phi in phi_strategy(2), seed in 0u64..1000, scale in 1.0..1e4f64) {
        let p = arhmm(phi, seed);
        let d = precondition(&p, 1e-4, scale).unwrap().to_dense();
        prop_assert!((&d - d.transpose()).amax() < 1e-9 * d.amax());
        let eig = d.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() > 0.0, "min eigenvalue {}", eig.min());
    }

    #[test]
    fn aligned_mse_vanishes_at_truth_and_ignores_labels(phi in phi_strategy(3), seed in 0u64..1000) {
        let p = arhmm(phi, seed);
        prop_assert!(param_mse_aligned(&p, &p).unwrap().total_sse < 1e-20);
        let ModelParams::Arhmm(q) = &p else { unreachable!() };
        let perm = [2usize, 0, 1];
        let swapped = ModelParams::Arhmm(ArhmmParams {
            phi: DMatrix::from_fn(3, 3, |i, j| q.phi[(perm[i], perm[j])]),
            a: perm.iter().map(|&i| q.a[i].clone()).collect(),
            psi_q: perm.iter().map(|&i| q.psi_q[i].clone()).collect(),
        });
        prop_assert!(param_mse_aligned(&swapped, &p).unwrap().total_sse < 1e-18);
    }

    #[test]
    fn ksd_ignores_sample_order(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<DVector<f64>> = (0..40).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let scores: Vec<DVector<f64>> = xs.iter().map(|x| -x).collect();
        let a = ksd_imq(&xs, &scores).unwrap();
        let rev = |v: &[DVector<f64>]| v.iter().rev().cloned().collect::<Vec<_>>();
        let b = ksd_imq(&rev(&xs), &rev(&scores)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

fn unaligned_sse(a: &ModelParams, b: &ModelParams) -> f64 {
    let na = a.natural_blocks().unwrap();
    let nb = b.natural_blocks().unwrap();
    na.iter().zip(&nb).map(|(x, y)| (&x.2 - &y.2).norm_squared()).sum()
}

#[test]
fn alignment_never_hurts() {
    let truth = synthetic_star(SyntheticTag::RcHmm);
    let ModelParams::Hmm(t) = &truth else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut mu: Vec<_> = t.mu.iter().map(|m| m + standard_normal_vec(&mut rng, m.len()) * 0.5).collect();
        mu.rotate_left(1);
        let noisy = ModelParams::Hmm(GaussianHmmParams {
            phi: t.phi.map(|v| v * (1.0 + 0.5 * rand::Rng::random::<f64>(&mut rng))),
            mu,
            psi: t.psi.clone(),
        });
        let aligned = param_mse_aligned(&noisy, &truth).unwrap().total_sse;
        assert!(aligned <= unaligned_sse(&noisy, &truth) + 1e-12);
    }
}
