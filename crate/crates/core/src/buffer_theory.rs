//! Decay constants for the buffered-gradient error, the adaptive buffer
//! selector and empirical error curves.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_estimators::{
    all_subsequences, buffered_gradient, sample_subsequence, BufferedSubsequence, FullStepGradients, SubsequenceScheme,
};
use crate::linalg;
use crate::models::{Family, InitialDist, LgssmParams, ModelParams, ObservationSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySource {
    Dobrushin,
    LgssmAnalytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConstants {
    pub l_f: f64,
    pub l_b: f64,
    pub l: f64,
    /// Lipschitz constant of the complete-data gradient (in `x x^T` for the LGSSM).
    pub l_u: Option<f64>,
    /// Set when `l >= 1`, so no geometric decay is guaranteed.
    pub no_contraction: bool,
    /// The backward constant used the commuting, sub-stationary prior form.
    pub tight_backward: bool,
    pub source: DecaySource,
}

fn decay(l_f: f64, l_b: f64, l_u: Option<f64>, tight: bool, source: DecaySource) -> DecayConstants {
    let l = l_f.max(l_b);
    DecayConstants { l_f, l_b, l, l_u, no_contraction: !(l < 1.0), tight_backward: tight, source }
}

/// Strong-mixing bound `1 - sigma^- / sigma^+` with the uniform reference measure.
pub fn dobrushin_bound(pi: &DMatrix<f64>) -> Result<DecayConstants> {
    let k = pi.nrows();
    if k == 0 || pi.ncols() != k {
        return Err(Error::InvalidParams("transition matrix must be square and nonempty".into()));
    }
    for (i, row) in pi.row_iter().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParams(format!("row {i} of the transition matrix is not a distribution")));
        }
    }
    let (lo, hi) = (pi.min(), pi.max());
    let l = if lo <= 0.0 { 1.0 } else { 1.0 - lo / hi };
    Ok(decay(l, l, None, false, DecaySource::Dobrushin))
}

/// Forward and backward contraction constants of the LGSSM smoothing maps and
/// the Lipschitz constant of its complete-data gradient in `x x^T`.
///
/// `p0_cov` is the initial covariance; `None` means the stationary one.
pub fn lgssm_lipschitz(p: &LgssmParams, p0_cov: Option<&DMatrix<f64>>) -> Result<DecayConstants> {
    let n = p.a.nrows();
    let q = linalg::covariance_from_factor(&p.psi_q)?;
    let q_inv = linalg::precision_from_factor(&p.psi_q);
    let r_inv = linalg::precision_from_factor(&p.psi_r);
    let info = p.c.transpose() * &r_inv * &p.c;
    let eye = DMatrix::<f64>::identity(n, n);
    let inner = (&eye + &q * &info)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I + Q C^T R^-1 C is singular".into()))?;
    let l_f = linalg::spectral_norm(&(&p.a * inner));

    let commutes = (&p.a * &q - &q * &p.a).norm() < 1e-10;
    let sub_stationary = match (linalg::stationary_covariance(&p.a, &q), p0_cov) {
        (Some(_), None) => true,
        (Some(v), Some(c)) => (v - c).symmetric_eigenvalues().min() >= -1e-10,
        (None, _) => false,
    };
    let tight = commutes && sub_stationary;
    let l_b = if tight {
        l_f
    } else if p.a.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        let m = &q * p.a.transpose() * &q_inv * &p.a + &q * &info;
        match m.try_inverse() {
            Some(mi) => linalg::spectral_norm(&(&p.a * mi)),
            None => f64::INFINITY,
        }
    };

    // `||X kron Y|| = ||X|| ||Y||`
    let nrm = linalg::spectral_norm;
    let (a, c, qh) = (nrm(&p.a), nrm(&p.c), nrm(&p.psi_q));
    let qa = nrm(&(p.psi_q.transpose() * &p.a));
    let omega = [
        nrm(&q_inv),
        nrm(&(&q_inv * &p.a)),
        qh,
        qa,
        qh * a,
        qa * a,
        nrm(&r_inv),
        nrm(&(&r_inv * &p.c)),
        nrm(&(p.psi_r.transpose() * &p.c)) * c,
    ];
    let l_u = omega.iter().cloned().fold(0.0, f64::max);
    Ok(decay(l_f, l_b, Some(l_u), tight, DecaySource::LgssmAnalytic))
}

/// Decay constants for any family with an analytic bound.
pub fn decay_constants(params: &ModelParams) -> Result<DecayConstants> {
    match params {
        ModelParams::Lgssm(p) => lgssm_lipschitz(p, None),
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => dobrushin_bound(&params.transition().expect("discrete")),
        ModelParams::Slds(_) => Err(Error::Unsupported("no analytic decay constants for the SLDS".into())),
    }
}

/// `B_hat + log_rho(epsilon / eps_hat)`, rounded up and floored at zero.
pub fn extrapolate_buffer(b_hat: usize, eps_hat: f64, epsilon: f64, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0) || !(eps_hat > 0.0) || !(epsilon > 0.0) {
        return Err(Error::Config("extrapolation needs 0 < rho < 1 and positive errors".into()));
    }
    let extra = (epsilon / eps_hat).ln() / rho.ln();
    let b = b_hat as f64 + extra;
    // guard against ulp noise pushing an exact integer up by one
    let b = (b - 1e-9 * b.abs().max(1.0)).ceil();
    Ok(if b <= 0.0 { 0 } else { b as usize })
}

fn require_exact(params: &ModelParams) -> Result<()> {
    if params.family() == Family::Slds {
        return Err(Error::Unsupported("buffer studies need exact message passing".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveBufferOptions {
    pub b_star: usize,
    pub n_subsequences: usize,
    pub scheme: SubsequenceScheme,
}

impl Default for AdaptiveBufferOptions {
    fn default() -> Self {
        Self { b_star: 100, n_subsequences: 1000, scheme: SubsequenceScheme::Uniform }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveBufferResult {
    pub buffer: usize,
    /// The search ran up to `b_star`.
    pub saturated: bool,
    /// Every `(B, mean error against B*)` evaluated, in evaluation order.
    pub evaluations: Vec<(usize, f64)>,
}

/// Mean over `subs` of `|| g(B) - g(B*) ||` with cores shared.
pub fn buffer_error_against_reference(
    params: &ModelParams,
    obs: &ObservationSequence,
    subs: &[BufferedSubsequence],
    b: usize,
    b_star: usize,
    p0: &InitialDist,
) -> Result<f64> {
    let errs: Vec<f64> = subs
        .par_iter()
        .map(|s| {
            let at = |bb: usize| buffered_gradient(params, obs, &s.with_buffer(bb), None, p0);
            Ok((at(b)?.values - at(b_star)?.values).norm())
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Smallest buffer whose Monte Carlo error against `B*` is below `epsilon`,
/// searched by doubling and then bisection.
pub fn adaptive_buffer<R: Rng + ?Sized>(
    params: &ModelParams,
    obs: &ObservationSequence,
    s: usize,
    epsilon: f64,
    opts: &AdaptiveBufferOptions,
    rng: &mut R,
) -> Result<AdaptiveBufferResult> {
    require_exact(params)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    if opts.n_subsequences == 0 {
        return Err(Error::Config("need at least one subsequence".into()));
    }
    let t = obs.len();
    let subs = (0..opts.n_subsequences)
        .map(|_| sample_subsequence(t, s, 0, opts.scheme, rng))
        .collect::<Result<Vec<_>>>()?;
    let p0 = InitialDist::stationary(params)?;
    let mut evals = Vec::new();
    let err = |b: usize, evals: &mut Vec<(usize, f64)>| -> Result<bool> {
        let e = if b >= opts.b_star { 0.0 } else { buffer_error_against_reference(params, obs, &subs, b, opts.b_star, &p0)? };
        evals.push((b, e));
        Ok(e < epsilon)
    };
    if err(0, &mut evals)? {
        return Ok(AdaptiveBufferResult { buffer: 0, saturated: false, evaluations: evals });
    }
    let (mut lo, mut hi) = (0usize, 1usize);
    loop {
        if hi >= opts.b_star {
            hi = opts.b_star;
            break;
        }
        if err(hi, &mut evals)? {
            break;
        }
        lo = hi;
        hi *= 2;
    }
    // invariant: lo fails, hi passes (B* passes by definition)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if err(mid, &mut evals)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(AdaptiveBufferResult { buffer: hi, saturated: hi >= opts.b_star, evaluations: evals })
}

/// One row of an error curve table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveRow {
    pub s: usize,
    pub b: usize,
    pub mean_err: f64,
    pub sd_err: f64,
    pub n_trials: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

/// `|| g_bar - g_tilde ||` for each buffer in `b_list` on one core.
fn core_errors(
    params: &ModelParams,
    obs: &ObservationSequence,
    full: &FullStepGradients,
    core: &BufferedSubsequence,
    b_list: &[usize],
    p0: &InitialDist,
) -> Result<Vec<f64>> {
    let exact = full.unbiased(core);
    b_list
        .iter()
        .map(|&b| Ok((buffered_gradient(params, obs, &core.with_buffer(b), None, p0)?.values - &exact).norm()))
        .collect()
}

fn rows_from(s: usize, b_list: &[usize], per_trial: &[Vec<f64>]) -> Vec<ErrorCurveRow> {
    b_list
        .iter()
        .enumerate()
        .map(|(bi, &b)| {
            let col: Vec<f64> = per_trial.iter().map(|r| r[bi]).collect();
            let (mean_err, sd_err) = mean_sd(&col);
            ErrorCurveRow { s, b, mean_err, sd_err, n_trials: col.len() }
        })
        .collect()
}

/// Sampled error curve: `n_trials` cores per `S`, shared across every `B`.
///
/// Cores for each `S` come from an independent ChaCha stream, so rows do not
/// depend on which other `S` values are requested.
pub fn empirical_grad_error_curve(
    params: &ModelParams,
    obs: &ObservationSequence,
    s_list: &[usize],
    b_list: &[usize],
    n_trials: usize,
    seed: u64,
    scheme: SubsequenceScheme,
) -> Result<Vec<ErrorCurveRow>> {
    require_exact(params)?;
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be positive".into()));
    }
    let p0 = InitialDist::stationary(params)?;
    let full = FullStepGradients::new(params, obs, &p0)?;
    let mut rows = Vec::new();
    for &s in s_list {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let cores = (0..n_trials)
            .map(|_| sample_subsequence(obs.len(), s, 0, scheme, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let per_trial = cores
            .par_iter()
            .map(|c| core_errors(params, obs, &full, c, b_list, &p0))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(rows_from(s, b_list, &per_trial));
    }
    Ok(rows)
}

/// Error curve averaged over every subsequence the scheme can produce.
pub fn exhaustive_grad_error_curve(
    params: &ModelParams,
    obs: &ObservationSequence,
    s: usize,
    b_list: &[usize],
    scheme: SubsequenceScheme,
) -> Result<Vec<ErrorCurveRow>> {
    require_exact(params)?;
    let p0 = InitialDist::stationary(params)?;
    let full = FullStepGradients::new(params, obs, &p0)?;
    let cores = all_subsequences(obs.len(), s, 0, scheme)?;
    let per_trial = cores
        .par_iter()
        .map(|c| core_errors(params, obs, &full, c, b_list, &p0))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_from(s, b_list, &per_trial))
}

/// Least-squares line with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

/// Fit `ln(mean_err)` against `B` over rows with positive error. The fitted
/// intercept, exponentiated, is the reported error constant.
pub fn log_error_fit(rows: &[ErrorCurveRow]) -> Result<LinearFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_err > 0.0)
        .map(|r| (r.b as f64, r.mean_err.ln()))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    linear_fit(&xs, &ys)
}

/// Largest one-step difference of the complete-data gradient over pairs of
/// discrete latent configurations, on steps `t0..t1`.
pub fn discrete_gradient_lipschitz(params: &ModelParams, obs: &ObservationSequence, t0: usize, t1: usize) -> Result<f64> {
    use crate::grad_estimators::complete_step_gradient;
    let k = match params {
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => params.num_states(),
        _ => return Err(Error::Unsupported("discrete latent states only".into())),
    };
    if t1 > obs.len() || t0 >= t1 {
        return Err(Error::Config("step range is empty or exceeds the sequence".into()));
    }
    let mut best = 0.0f64;
    for t in t0..t1 {
        let grads: Vec<DVector<f64>> = (0..k * k)
            .map(|c| complete_step_gradient(params, obs, t, c / k, c % k))
            .collect::<Result<_>>()?;
        for a in 0..grads.len() {
            for b in a + 1..grads.len() {
                best = best.max((&grads[a] - &grads[b]).norm());
            }
        }
    }
    Ok(best)
}
