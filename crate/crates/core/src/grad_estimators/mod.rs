//! Gradient estimators built on subsequences of the observed series.
//!
//! All estimators return the gradient of the log posterior (likelihood part
//! plus the optional prior) in unconstrained coordinates.

pub(crate) mod complete;
pub mod slds;
pub mod subsequence;

pub use slds::{slds_gibbs_samples, slds_noisy_gradient, SldsEstimator, SldsGibbsConfig, SldsGibbsState, SldsInitMode};
pub use subsequence::{
    all_subsequences, inclusion_probability, sample_subsequence, BufferedSubsequence, SubsequenceScheme,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::message_passing::{self, LinearGaussianChain};
use crate::models::prior::{log_prior_grad, PriorSpec};
use crate::models::{GradientVector, InitialDist, ModelParams, ObservationSequence};
use complete::{Encoder, Prepared};

fn discrete_p0(p0: &InitialDist) -> Result<&DVector<f64>> {
    p0.probs()
        .ok_or_else(|| Error::Config("discrete family needs a discrete initial distribution".into()))
}

/// Per-step expected complete-data gradients for `steps`, with messages passed over `[w0, w1)`.
///
/// Each returned vector is the unit-weight contribution of one step in unconstrained coordinates.
pub fn step_gradients(
    params: &ModelParams,
    obs: &ObservationSequence,
    w0: usize,
    w1: usize,
    steps: std::ops::Range<usize>,
    p0: &InitialDist,
) -> Result<Vec<DVector<f64>>> {
    let enc = Encoder::new(params);
    let mut out = Vec::with_capacity(steps.len());
    accumulate(params, obs, w0, w1, steps.map(|t| (t, 1.0)), p0, &enc, |g| out.push(enc.encode(g)))?;
    Ok(out)
}

/// Visit each `(t, w)` with messages over `[w0, w1)`, handing a freshly zeroed
/// set of block gradients holding `w` times the step contribution to `sink`.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    params: &ModelParams,
    obs: &ObservationSequence,
    w0: usize,
    w1: usize,
    steps: impl Iterator<Item = (usize, f64)>,
    p0: &InitialDist,
    enc: &Encoder,
    mut sink: impl FnMut(&[DMatrix<f64>]),
) -> Result<()> {
    if w1 > obs.len() || w0 >= w1 {
        return Err(Error::Config(format!("window [{w0}, {w1}) is empty or exceeds the sequence")));
    }
    obs.check_dim(params.obs_dim())?;
    let prep = Prepared::new(params)?;
    match params {
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => {
            let em = message_passing::discrete_log_emissions(params, obs, w0, w1)?;
            let pi = prep.pi.as_ref().expect("discrete family");
            let msgs = message_passing::hmm_forward_backward(&em, pi, discrete_p0(p0)?)?;
            let phi = params.phi().expect("discrete family");
            let lags = params.lags();
            for (t, w) in steps {
                let j = t - w0;
                let mut g = enc.zeros();
                complete::add_transition(phi, pi, &msgs.xi[j], w, &mut g[0]);
                let lag = (lags > 0).then(|| obs.lag_vector(t, lags));
                complete::add_discrete_emission(params, &prep, obs.y(t), lag.as_ref(), &msgs.gamma[j], w, &mut g);
                sink(&g);
            }
        }
        ModelParams::Lgssm(p) => {
            let (mean, cov) = p0
                .gaussian()
                .ok_or_else(|| Error::Config("LGSSM needs a Gaussian initial distribution".into()))?;
            let q = &prep.state_noise[0];
            let r = prep.emission_noise.as_ref().expect("emission noise");
            let chain = LinearGaussianChain {
                dynamics: vec![(&p.a, q); w1 - w0],
                c: &p.c,
                r,
                ys: &obs.as_slice()[w0..w1],
                prior_mean: mean,
                prior_cov: cov,
            };
            let msgs = chain.smooth()?;
            let n = p.a.nrows();
            for (t, w) in steps {
                let j = t - w0;
                let pw = chain.pairwise(&msgs, j)?;
                let m2 = pw.second_moment();
                let mut g = enc.zeros();
                let (ga, rest) = g.split_at_mut(1);
                complete::add_dynamics(&p.a, q, &m2, w, &mut ga[0], &mut rest[0]);
                let mean_t = pw.mean.rows(n, n).into_owned();
                let mxx = m2.view((n, n), (n, n)).into_owned();
                let (gc, gr) = rest[1..].split_at_mut(1);
                complete::add_emission(&p.c, r, obs.y(t), &mean_t, &mxx, w, &mut gc[0], &mut gr[0]);
                sink(&g);
            }
        }
        ModelParams::Slds(_) => {
            return Err(Error::Unsupported(
                "SLDS gradients need sampled latents; use slds_noisy_gradient".into(),
            ))
        }
    }
    Ok(())
}

fn weighted_sum(
    params: &ModelParams,
    obs: &ObservationSequence,
    w0: usize,
    w1: usize,
    steps: impl Iterator<Item = (usize, f64)>,
    p0: &InitialDist,
) -> Result<GradientVector> {
    let enc = Encoder::new(params);
    let mut total = enc.zeros();
    accumulate(params, obs, w0, w1, steps, p0, &enc, |g| {
        for (a, b) in total.iter_mut().zip(g) {
            *a += b;
        }
    })?;
    let values = enc.encode(&total);
    Ok(GradientVector { layout: enc.layout, values })
}

fn with_prior(mut g: GradientVector, params: &ModelParams, prior: Option<&PriorSpec>) -> Result<GradientVector> {
    if let Some(prior) = prior {
        g.add_assign(&log_prior_grad(params, prior)?);
    }
    Ok(g)
}

/// Buffered estimate: messages over the window, weighted contributions from the core.
pub fn buffered_gradient(
    params: &ModelParams,
    obs: &ObservationSequence,
    sub: &BufferedSubsequence,
    prior: Option<&PriorSpec>,
    p0: &InitialDist,
) -> Result<GradientVector> {
    check_sub(obs, sub)?;
    let g = weighted_sum(params, obs, sub.window_start, sub.window_end, sub.weighted_core(), p0)?;
    with_prior(g, params, prior)
}

/// Unbiased estimate: messages over the whole sequence, weighted contributions from the core.
pub fn unbiased_gradient(
    params: &ModelParams,
    obs: &ObservationSequence,
    sub: &BufferedSubsequence,
    prior: Option<&PriorSpec>,
    p0: &InitialDist,
) -> Result<GradientVector> {
    buffered_gradient(params, obs, &sub.with_full_window(), prior, p0)
}

/// Exact gradient of the log posterior over the whole sequence.
pub fn full_gradient(
    params: &ModelParams,
    obs: &ObservationSequence,
    prior: Option<&PriorSpec>,
    p0: &InitialDist,
) -> Result<GradientVector> {
    let t = obs.len();
    let g = weighted_sum(params, obs, 0, t, (0..t).map(|s| (s, 1.0)), p0)?;
    with_prior(g, params, prior)
}

/// Complete-data gradient of one step with the discrete states fixed to `z_prev -> z`.
pub fn complete_step_gradient(
    params: &ModelParams,
    obs: &ObservationSequence,
    t: usize,
    z_prev: usize,
    z: usize,
) -> Result<DVector<f64>> {
    let k = params.num_states();
    let (ModelParams::Hmm(_) | ModelParams::Arhmm(_)) = params else {
        return Err(Error::Unsupported("complete-step gradients need discrete latent states".into()));
    };
    if t >= obs.len() || z_prev >= k || z >= k {
        return Err(Error::Config("step or state out of range".into()));
    }
    obs.check_dim(params.obs_dim())?;
    let prep = Prepared::new(params)?;
    let enc = Encoder::new(params);
    let mut g = enc.zeros();
    let pi = prep.pi.as_ref().expect("discrete family");
    let mut xi = DMatrix::zeros(k, k);
    xi[(z_prev, z)] = 1.0;
    complete::add_transition(params.phi().expect("discrete family"), pi, &xi, 1.0, &mut g[0]);
    let mut gamma = DVector::zeros(k);
    gamma[z] = 1.0;
    let lags = params.lags();
    let lag = (lags > 0).then(|| obs.lag_vector(t, lags));
    complete::add_discrete_emission(params, &prep, obs.y(t), lag.as_ref(), &gamma, 1.0, &mut g);
    Ok(enc.encode(&g))
}

fn check_sub(obs: &ObservationSequence, sub: &BufferedSubsequence) -> Result<()> {
    if sub.t_len != obs.len() {
        return Err(Error::Config(format!(
            "subsequence built for length {} but the sequence has {}",
            sub.t_len,
            obs.len()
        )));
    }
    Ok(())
}

/// Unit-weight per-step contributions under full-sequence smoothing, so unbiased
/// estimates for many subsequences are cheap weighted sums.
pub struct FullStepGradients {
    pub layout: crate::models::Layout,
    pub steps: Vec<DVector<f64>>,
}

impl FullStepGradients {
    pub fn new(params: &ModelParams, obs: &ObservationSequence, p0: &InitialDist) -> Result<Self> {
        let steps = step_gradients(params, obs, 0, obs.len(), 0..obs.len(), p0)?;
        Ok(Self { layout: params.layout(), steps })
    }

    pub fn unbiased(&self, sub: &BufferedSubsequence) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim);
        for (t, w) in sub.weighted_core() {
            out += &self.steps[t] * w;
        }
        out
    }
}

#[cfg(test)]
mod tests;
