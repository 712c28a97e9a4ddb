//! Forward simulation from a parameter set.

use nalgebra::DVector;
use rand::Rng;

use super::{InitialDist, ModelParams, ObservationSequence};
use crate::error::Result;
use crate::linalg;

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub obs: ObservationSequence,
    pub z: Option<Vec<usize>>,
    pub x: Option<Vec<DVector<f64>>>,
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, p) in probs.iter().enumerate() {
        if u < *p {
            return k;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Simulate `t_len` steps. The state before the first step is drawn from the stationary `p0`.
pub fn simulate<R: Rng + ?Sized>(params: &ModelParams, t_len: usize, rng: &mut R) -> Result<SimulatedData> {
    params.validate()?;
    let p0 = InitialDist::stationary(params)?;
    let pi = params.transition();
    let draw_chain = |rng: &mut R| -> Vec<usize> {
        let pi = pi.as_ref().expect("discrete family");
        let probs = p0.probs().expect("discrete p0");
        let mut prev = sample_categorical(rng, probs.as_slice());
        let mut z = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let row: Vec<f64> = pi.row(prev).iter().copied().collect();
            prev = sample_categorical(rng, &row);
            z.push(prev);
        }
        z
    };
    match params {
        ModelParams::Hmm(p) => {
            let z = draw_chain(rng);
            let ys = z
                .iter()
                .map(|&k| linalg::sample_mvn_factor(rng, &p.mu[k], &p.psi[k]))
                .collect::<Result<Vec<_>>>()?;
            Ok(SimulatedData { obs: ObservationSequence::new(ys)?, z: Some(z), x: None })
        }
        ModelParams::Arhmm(p) => {
            let z = draw_chain(rng);
            let m = p.psi_q[0].nrows();
            let lags = p.a[0].ncols() / m;
            let mut ys: Vec<DVector<f64>> = Vec::with_capacity(t_len);
            for (t, &k) in z.iter().enumerate() {
                let mut lag = DVector::zeros(m * lags);
                for i in 1..=lags {
                    if t >= i {
                        lag.rows_mut((i - 1) * m, m).copy_from(&ys[t - i]);
                    }
                }
                let mean = &p.a[k] * lag;
                ys.push(linalg::sample_mvn_factor(rng, &mean, &p.psi_q[k])?);
            }
            Ok(SimulatedData { obs: ObservationSequence::new(ys)?, z: Some(z), x: None })
        }
        ModelParams::Lgssm(p) => {
            let (mean, cov) = p0.gaussian().expect("gaussian p0");
            let mut prev = linalg::sample_mvn_cov(rng, mean, cov)?;
            let mut xs = Vec::with_capacity(t_len);
            let mut ys = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                let x = linalg::sample_mvn_factor(rng, &(&p.a * &prev), &p.psi_q)?;
                ys.push(linalg::sample_mvn_factor(rng, &(&p.c * &x), &p.psi_r)?);
                xs.push(x.clone());
                prev = x;
            }
            Ok(SimulatedData { obs: ObservationSequence::new(ys)?, z: None, x: Some(xs) })
        }
        ModelParams::Slds(p) => {
            let z = draw_chain(rng);
            let (mean, cov) = p0.gaussian().expect("gaussian p0");
            let mut prev = linalg::sample_mvn_cov(rng, mean, cov)?;
            let mut xs = Vec::with_capacity(t_len);
            let mut ys = Vec::with_capacity(t_len);
            for &k in &z {
                let x = linalg::sample_mvn_factor(rng, &(&p.a[k] * &prev), &p.psi_q[k])?;
                ys.push(linalg::sample_mvn_factor(rng, &(&p.c * &x), &p.psi_r)?);
                xs.push(x.clone());
                prev = x;
            }
            Ok(SimulatedData { obs: ObservationSequence::new(ys)?, z: Some(z), x: Some(xs) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::synthetic::{synthetic_star, SyntheticTag};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lgssm_sample_covariance_matches_stationary() {
        let p = synthetic_star(SyntheticTag::Lgssm);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = simulate(&p, 20_000, &mut rng).unwrap();
        let xs = d.x.unwrap();
        let v: f64 = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / xs.len() as f64;
        // V = Q / (1 - 0.49) for a scaled rotation.
        assert!((v - 0.1 / 0.51).abs() < 0.02, "{v}");
    }

    #[test]
    fn categorical_respects_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&mut rng, &[0.0, 1.0, 0.0]), 1);
        }
    }
}
