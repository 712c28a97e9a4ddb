use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssm_sgmcmc::evaluation::ksd_imq;
use ssm_sgmcmc::grad_estimators::{sample_subsequence, slds_noisy_gradient, SldsGibbsConfig};
use ssm_sgmcmc::linalg::standard_normal_vec;
use ssm_sgmcmc::message_passing::{discrete_log_emissions, hmm_forward_backward, lgssm_smoother};
use ssm_sgmcmc::preconditioners::precondition;
use ssm_sgmcmc::samplers::sgrld_step;
use ssm_sgmcmc::{buffered_gradient, full_gradient, InitialDist, ModelParams, SubsequenceScheme, SyntheticTag};
use ssm_sgmcmc_bench::fixture;

fn message_passing(c: &mut Criterion) {
    let mut g = c.benchmark_group("message_passing");
    let (hmm, obs) = fixture(SyntheticTag::Arhmm, 1000, 1);
    let p0 = InitialDist::stationary(&hmm).unwrap();
    let pi = hmm.transition().unwrap();
    g.bench_function("arhmm_forward_backward_T1000", |b| {
        b.iter(|| {
            let em = discrete_log_emissions(&hmm, &obs, 0, obs.len()).unwrap();
            hmm_forward_backward(&em, &pi, p0.probs().unwrap()).unwrap()
        })
    });
    let (lg, obs) = fixture(SyntheticTag::Lgssm, 1000, 1);
    let ModelParams::Lgssm(p) = &lg else { unreachable!() };
    let p0 = InitialDist::stationary(&lg).unwrap();
    g.bench_function("lgssm_smoother_T1000", |b| b.iter(|| lgssm_smoother(p, &obs, 0, obs.len(), &p0).unwrap()));
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradients");
    for tag in [SyntheticTag::Arhmm, SyntheticTag::Lgssm] {
        let (params, obs) = fixture(tag, 10_000, 2);
        let p0 = InitialDist::stationary(&params).unwrap();
        for buffer in [0, 2, 10] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            g.bench_with_input(BenchmarkId::new(format!("{tag:?}_buffered_S2"), buffer), &buffer, |b, &buffer| {
                b.iter(|| {
                    let sub = sample_subsequence(obs.len(), 2, buffer, SubsequenceScheme::Uniform, &mut rng).unwrap();
                    buffered_gradient(&params, &obs, &sub, None, &p0).unwrap()
                })
            });
        }
        let (_, short) = fixture(tag, 1000, 2);
        g.bench_function(format!("{tag:?}_full_T1000"), |b| b.iter(|| full_gradient(&params, &short, None, &p0).unwrap()));
    }
    let (slds, obs) = fixture(SyntheticTag::Slds, 10_000, 3);
    let p0 = InitialDist::stationary(&slds).unwrap();
    let cfg = SldsGibbsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    g.bench_function("slds_noisy_S10_B10", |b| {
        b.iter(|| {
            let sub = sample_subsequence(obs.len(), 10, 10, SubsequenceScheme::Uniform, &mut rng).unwrap();
            slds_noisy_gradient(&slds, &obs, &sub, None, &p0, &cfg, &mut rng).unwrap()
        })
    });
    g.finish();
}

fn sampler_step(c: &mut Criterion) {
    let (params, obs) = fixture(SyntheticTag::Arhmm, 1000, 4);
    let p0 = InitialDist::stationary(&params).unwrap();
    let grad = full_gradient(&params, &obs, None, &p0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sgrld_step_arhmm", |b| {
        b.iter(|| {
            let blocks = precondition(&params, 1e-4, obs.len() as f64).unwrap();
            sgrld_step(&params, &grad, &blocks, 1e-6, &mut rng).unwrap()
        })
    });
}

fn ksd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<_> = (0..200).map(|_| standard_normal_vec(&mut rng, 4)).collect();
    let ss: Vec<_> = xs.iter().map(|x| -x).collect();
    c.bench_function("ksd_imq_n200_d4", |b| b.iter(|| ksd_imq(&xs, &ss).unwrap()));
}

criterion_group!(benches, message_passing, gradients, sampler_step, ksd);
criterion_main!(benches);
