use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::linalg::standard_normal_vec;
use crate::message_passing::marginal_loglik;
use crate::models::prior::log_prior;
use crate::models::simulate::simulate;
use crate::models::synthetic::{synthetic_star, SyntheticTag};
use crate::models::{ArhmmParams, GaussianHmmParams, LgssmParams, SldsParams};

fn jitter(params: &ModelParams, scale: f64, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = params.to_unconstrained();
    let noise = standard_normal_vec(&mut rng, u.len()) * scale;
    params.from_unconstrained(&(u + noise)).unwrap()
}

fn small_hmm() -> ModelParams {
    ModelParams::Hmm(GaussianHmmParams {
        phi: DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.5, 0.7, 4.0, 1.0, 1.0, 0.3, 3.0]),
        mu: vec![DVector::from_vec(vec![-2.0, 0.0]), DVector::from_vec(vec![2.0, 0.5]), DVector::from_vec(vec![0.0, 2.5])],
        psi: vec![DMatrix::identity(2, 2); 3],
    })
}

fn arhmm_two_lags() -> ModelParams {
    let ModelParams::Arhmm(p) = synthetic_star(SyntheticTag::Arhmm) else { unreachable!() };
    let a = p
        .a
        .iter()
        .map(|a| {
            let mut m = DMatrix::zeros(2, 4);
            m.view_mut((0, 0), (2, 2)).copy_from(&(a * 0.8));
            m.view_mut((0, 2), (2, 2)).fill_with_identity();
            m.view_mut((0, 2), (2, 2)).scale_mut(-0.1);
            m
        })
        .collect();
    ModelParams::Arhmm(ArhmmParams { phi: p.phi, a, psi_q: p.psi_q })
}

fn tall_lgssm() -> ModelParams {
    ModelParams::Lgssm(LgssmParams {
        a: crate::models::synthetic::rotation(0.4) * 0.8,
        psi_q: DMatrix::identity(2, 2) * 2.0,
        c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, -0.3]),
        psi_r: DMatrix::identity(3, 3),
    })
}

/// Central differences of `f` in unconstrained coordinates.
fn fd_gradient(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> DVector<f64> {
    let u0 = params.to_unconstrained();
    let h = 1e-5;
    DVector::from_iterator(
        u0.len(),
        (0..u0.len()).map(|i| {
            let mut up = u0.clone();
            up[i] += h;
            let mut dn = u0.clone();
            dn[i] -= h;
            (f(&params.from_unconstrained(&up).unwrap()) - f(&params.from_unconstrained(&dn).unwrap())) / (2.0 * h)
        }),
    )
}

fn check_full_gradient(base: ModelParams, seed: u64) {
    let params = jitter(&base, 0.1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let obs = simulate(&base, 50, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&params).unwrap();
    let prior = PriorSpec::default();
    let g = full_gradient(&params, &obs, Some(&prior), &p0).unwrap();
    let fd = fd_gradient(&params, |p| marginal_loglik(p, &obs, &p0).unwrap() + log_prior(p, &prior).unwrap());
    let rel = (&g.values - &fd).norm() / fd.norm();
    assert!(rel < 1e-4, "{:?}: relative error {rel:e}\n{}\n{}", base.family(), g.values, fd);
}

#[test]
fn hmm_full_gradient_matches_finite_differences() {
    check_full_gradient(small_hmm(), 11);
}

#[test]
fn arhmm_full_gradient_matches_finite_differences() {
    check_full_gradient(arhmm_two_lags(), 12);
}

#[test]
fn lgssm_full_gradient_matches_finite_differences() {
    check_full_gradient(synthetic_star(SyntheticTag::Lgssm), 13);
    check_full_gradient(tall_lgssm(), 14);
}

#[test]
fn wide_buffer_equals_unbiased() {
    for base in [small_hmm(), tall_lgssm()] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = simulate(&base, 40, &mut rng).unwrap().obs;
        let p0 = InitialDist::stationary(&base).unwrap();
        let sub = BufferedSubsequence::new(40, 17, 5, 40, SubsequenceScheme::Uniform).unwrap();
        let a = buffered_gradient(&base, &obs, &sub, None, &p0).unwrap();
        let b = unbiased_gradient(&base, &obs, &sub, None, &p0).unwrap();
        assert!((&a.values - &b.values).amax() < 1e-10 * (1.0 + b.norm()));
    }
}

#[test]
fn unbiased_estimator_averages_to_full_gradient() {
    let base = small_hmm();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = simulate(&base, 30, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&base).unwrap();
    let full = full_gradient(&base, &obs, None, &p0).unwrap();
    let steps = FullStepGradients::new(&base, &obs, &p0).unwrap();
    for scheme in [SubsequenceScheme::Uniform, SubsequenceScheme::Partition] {
        let subs = all_subsequences(30, 6, 0, scheme).unwrap();
        let mut mean = DVector::zeros(full.values.len());
        for s in &subs {
            mean += steps.unbiased(s);
        }
        mean /= subs.len() as f64;
        assert!((&mean - &full.values).amax() < 1e-9 * (1.0 + full.norm()), "{scheme:?}");
        let direct = unbiased_gradient(&base, &obs, &subs[2], None, &p0).unwrap();
        assert!((&direct.values - steps.unbiased(&subs[2])).amax() < 1e-9);
    }
}

#[test]
fn buffered_error_shrinks_with_buffer() {
    let base = synthetic_star(SyntheticTag::Lgssm);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = simulate(&base, 200, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&base).unwrap();
    let sub = BufferedSubsequence::new(200, 100, 10, 0, SubsequenceScheme::Uniform).unwrap();
    let exact = unbiased_gradient(&base, &obs, &sub, None, &p0).unwrap();
    let err = |b: usize| {
        let s = BufferedSubsequence::new(200, 100, 10, b, SubsequenceScheme::Uniform).unwrap();
        (&buffered_gradient(&base, &obs, &s, None, &p0).unwrap().values - &exact.values).norm()
    };
    let (e0, e5, e20) = (err(0), err(5), err(20));
    assert!(e0 > e5 && e5 > e20, "{e0} {e5} {e20}");
    assert!(e20 < 1e-3 * e0);
}

fn lgssm_as_slds(p: &LgssmParams) -> ModelParams {
    ModelParams::Slds(SldsParams {
        phi: DMatrix::from_element(1, 1, 2.0),
        a: vec![p.a.clone()],
        psi_q: vec![p.psi_q.clone()],
        c: p.c.clone(),
        psi_r: p.psi_r.clone(),
    })
}

#[test]
fn single_state_slds_z_marginal_matches_lgssm() {
    let base = tall_lgssm();
    let ModelParams::Lgssm(lp) = &base else { unreachable!() };
    let slds = lgssm_as_slds(lp);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = simulate(&base, 60, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&base).unwrap();
    let (mean, cov) = p0.gaussian().unwrap();
    let p0s = InitialDist::Switching { probs: DVector::from_element(1, 1.0), mean: mean.clone(), cov: cov.clone() };
    let sub = BufferedSubsequence::new(60, 20, 10, 5, SubsequenceScheme::Uniform).unwrap();
    let want = buffered_gradient(&base, &obs, &sub, None, &p0).unwrap();
    for est in [SldsEstimator::ZMarginal, SldsEstimator::XMarginal, SldsEstimator::Xz] {
        let cfg = SldsGibbsConfig { estimator: est, ..Default::default() };
        let got = slds_noisy_gradient(&slds, &obs, &sub, None, &p0s, &cfg, &mut rng).unwrap();
        assert_eq!(got.block("phi").unwrap(), &[0.0]);
        let tail = got.values.rows(1, want.values.len()).into_owned();
        if est == SldsEstimator::ZMarginal {
            assert!((&tail - &want.values).amax() < 1e-10, "{tail} {}", want.values);
        } else {
            assert!(tail.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn slds_sampled_estimators_agree_in_mean() {
    let base = synthetic_star(SyntheticTag::Slds);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = simulate(&base, 40, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&base).unwrap();
    let sub = BufferedSubsequence::new(40, 15, 10, 5, SubsequenceScheme::Uniform).unwrap();
    let mean_of = |est: SldsEstimator, rng: &mut ChaCha8Rng| {
        let cfg = SldsGibbsConfig { estimator: est, n_samples: 400, burn_in: 20, ..Default::default() };
        slds_noisy_gradient(&base, &obs, &sub, None, &p0, &cfg, rng).unwrap().values
    };
    let z = mean_of(SldsEstimator::ZMarginal, &mut rng);
    let x = mean_of(SldsEstimator::XMarginal, &mut rng);
    let xz = mean_of(SldsEstimator::Xz, &mut rng);
    let scale = z.norm();
    assert!((&z - &x).norm() < 0.25 * scale, "{z} {x}");
    assert!((&z - &xz).norm() < 0.25 * scale, "{z} {xz}");
}

#[test]
fn slds_gradients_reject_wrong_initial_distribution() {
    let base = synthetic_star(SyntheticTag::Slds);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = simulate(&base, 20, &mut rng).unwrap().obs;
    let sub = BufferedSubsequence::new(20, 0, 5, 2, SubsequenceScheme::Uniform).unwrap();
    let bad = InitialDist::Discrete(DVector::from_vec(vec![0.5, 0.5]));
    assert!(slds_noisy_gradient(&base, &obs, &sub, None, &bad, &SldsGibbsConfig::default(), &mut rng).is_err());
    assert!(full_gradient(&base, &obs, None, &InitialDist::stationary(&base).unwrap()).is_err());
}

#[test]
fn obs_proxy_init_runs() {
    let base = synthetic_star(SyntheticTag::Slds);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let obs = simulate(&base, 30, &mut rng).unwrap().obs;
    let p0 = InitialDist::stationary(&base).unwrap();
    let cfg = SldsGibbsConfig { init: SldsInitMode::ObsProxy, burn_in: 0, ..Default::default() };
    let draws = slds_gibbs_samples(&base, obs.as_slice(), &p0, &cfg, &mut rng).unwrap();
    assert_eq!(draws.len(), 1);
    assert_eq!(draws[0].z.len(), 30);
    assert_eq!(draws[0].sweeps, 1);
}
