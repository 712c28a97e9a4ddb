//! Exact message passing over a window of a sequence.

pub mod discrete;
pub mod gaussian;

pub use discrete::{hmm_forward, hmm_forward_backward, hmm_sample_path, DiscreteMessages};
pub use gaussian::{GaussianMessages, InfoMessage, LinearGaussianChain, PairwiseGaussian};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::models::{GaussianNoise, InitialDist, LgssmParams, ModelParams, ObservationSequence};

/// Per-step log emission densities `ln p(y_t | z_t = k)` for `t` in `start..end`.
pub fn discrete_log_emissions(
    params: &ModelParams,
    obs: &ObservationSequence,
    start: usize,
    end: usize,
) -> Result<Vec<DVector<f64>>> {
    obs.check_dim(params.obs_dim())?;
    match params {
        ModelParams::Hmm(p) => {
            let noise = p.psi.iter().map(GaussianNoise::from_factor).collect::<Result<Vec<_>>>()?;
            Ok((start..end)
                .map(|t| {
                    let y = obs.y(t);
                    DVector::from_iterator(p.mu.len(), p.mu.iter().zip(&noise).map(|(mu, n)| n.logpdf(y, mu)))
                })
                .collect())
        }
        ModelParams::Arhmm(p) => {
            let noise = p.psi_q.iter().map(GaussianNoise::from_factor).collect::<Result<Vec<_>>>()?;
            let lags = params.lags();
            Ok((start..end)
                .map(|t| {
                    let y = obs.y(t);
                    let lag = obs.lag_vector(t, lags);
                    DVector::from_iterator(p.a.len(), p.a.iter().zip(&noise).map(|(a, n)| n.logpdf(y, &(a * &lag))))
                })
                .collect())
        }
        _ => Err(Error::Unsupported("discrete emissions need an HMM or ARHMM".into())),
    }
}

pub(crate) struct LgssmNoise {
    pub q: GaussianNoise,
    pub r: GaussianNoise,
}

impl LgssmNoise {
    pub fn new(p: &LgssmParams) -> Result<Self> {
        Ok(Self { q: GaussianNoise::from_factor(&p.psi_q)?, r: GaussianNoise::from_factor(&p.psi_r)? })
    }
}

/// Smoothed messages of an LGSSM over `start..end`.
pub fn lgssm_smoother(
    p: &LgssmParams,
    obs: &ObservationSequence,
    start: usize,
    end: usize,
    p0: &InitialDist,
) -> Result<GaussianMessages> {
    let noise = LgssmNoise::new(p)?;
    let (mean, cov) = p0
        .gaussian()
        .ok_or_else(|| Error::Config("LGSSM needs a Gaussian initial distribution".into()))?;
    let chain = LinearGaussianChain {
        dynamics: vec![(&p.a, &noise.q); end - start],
        c: &p.c,
        r: &noise.r,
        ys: &obs.as_slice()[start..end],
        prior_mean: mean,
        prior_cov: cov,
    };
    chain.smooth()
}

/// Exact marginal log likelihood `ln p(y | theta)` for the families with exact messages.
pub fn marginal_loglik(params: &ModelParams, obs: &ObservationSequence, p0: &InitialDist) -> Result<f64> {
    match params {
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => {
            let em = discrete_log_emissions(params, obs, 0, obs.len())?;
            let pi = params.transition().expect("discrete family");
            let probs = p0
                .probs()
                .ok_or_else(|| Error::Config("discrete family needs a discrete initial distribution".into()))?;
            let (_, norms) = hmm_forward(&em, &pi, probs)?;
            Ok(norms.iter().sum())
        }
        ModelParams::Lgssm(p) => {
            obs.check_dim(params.obs_dim())?;
            let noise = LgssmNoise::new(p)?;
            let (mean, cov) = p0
                .gaussian()
                .ok_or_else(|| Error::Config("LGSSM needs a Gaussian initial distribution".into()))?;
            let chain = LinearGaussianChain {
                dynamics: vec![(&p.a, &noise.q); obs.len()],
                c: &p.c,
                r: &noise.r,
                ys: obs.as_slice(),
                prior_mean: mean,
                prior_cov: cov,
            };
            Ok(chain.forward()?.2.iter().sum())
        }
        ModelParams::Slds(_) => Err(Error::Unsupported(
            "the SLDS marginal likelihood is intractable; use the Gibbs-based bound".into(),
        )),
    }
}
