//! Gradient estimates for the SLDS from blocked Gibbs draws of the latents.
//!
//! Within the window, `x | z, y` is a time-varying linear Gaussian chain and
//! `z | x, y` is a discrete chain whose emissions are the transition densities
//! of `x`. The three estimators average the complete-data gradient over the
//! draws, optionally integrating out `x` (given `z`) or `z` (given `x`) exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::complete::{self, Encoder, SldsIdx};
use super::subsequence::BufferedSubsequence;
use crate::error::{Error, Result};
use crate::linalg;
use crate::message_passing::{hmm_forward_backward, hmm_sample_path, LinearGaussianChain};
use crate::models::prior::{log_prior_grad, PriorSpec};
use crate::models::simulate::sample_categorical;
use crate::models::{GaussianNoise, GradientVector, InitialDist, ModelParams, ObservationSequence, SldsParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SldsEstimator {
    /// Complete-data gradient at the sampled `(x, z)`.
    Xz,
    /// Sampled `z`, exact expectation over `x`.
    #[default]
    ZMarginal,
    /// Sampled `x`, exact expectation over `z`.
    XMarginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SldsInitMode {
    /// Sequential draws of `z_t` from per-candidate Kalman updates.
    #[default]
    Filtered,
    /// Treat the leading latent-dimension coordinates of `y` as `x`.
    ObsProxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SldsGibbsConfig {
    pub estimator: SldsEstimator,
    pub n_samples: usize,
    pub burn_in: usize,
    pub init: SldsInitMode,
}

impl Default for SldsGibbsConfig {
    fn default() -> Self {
        Self { estimator: SldsEstimator::ZMarginal, n_samples: 1, burn_in: 2, init: SldsInitMode::Filtered }
    }
}

/// Latents over one window plus the state just before it.
#[derive(Clone, Debug, PartialEq)]
pub struct SldsGibbsState {
    pub x_prev: DVector<f64>,
    pub x: Vec<DVector<f64>>,
    pub z_prev: usize,
    pub z: Vec<usize>,
    pub sweeps: usize,
}

pub(crate) struct SldsPrep<'a> {
    pub p: &'a SldsParams,
    pub pi: DMatrix<f64>,
    pub q: Vec<GaussianNoise>,
    pub r: GaussianNoise,
    pub probs: DVector<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

impl<'a> SldsPrep<'a> {
    pub fn new(params: &'a ModelParams, p0: &InitialDist) -> Result<Self> {
        let ModelParams::Slds(p) = params else {
            return Err(Error::Unsupported("expected SLDS parameters".into()));
        };
        let (probs, mean0, cov0) = match p0 {
            InitialDist::Switching { probs, mean, cov } => (probs.clone(), mean.clone(), cov.clone()),
            _ => return Err(Error::Config("SLDS needs a switching initial distribution".into())),
        };
        Ok(Self {
            p,
            pi: params.transition().expect("discrete states"),
            q: p.psi_q.iter().map(GaussianNoise::from_factor).collect::<Result<_>>()?,
            r: GaussianNoise::from_factor(&p.psi_r)?,
            probs,
            mean0,
            cov0,
        })
    }

    fn chain<'b>(&'b self, z: &[usize], ys: &'b [DVector<f64>]) -> LinearGaussianChain<'b> {
        LinearGaussianChain {
            dynamics: z.iter().map(|&k| (&self.p.a[k], &self.q[k])).collect(),
            c: &self.p.c,
            r: &self.r,
            ys,
            prior_mean: &self.mean0,
            prior_cov: &self.cov0,
        }
    }

    /// `ln N(x_j | A_k x_{j-1}, Q_k)` for each window step and state.
    fn z_log_em(&self, x_prev: &DVector<f64>, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let k = self.p.a.len();
        xs.iter()
            .enumerate()
            .map(|(j, x)| {
                let prev = if j == 0 { x_prev } else { &xs[j - 1] };
                DVector::from_iterator(k, (0..k).map(|s| self.q[s].logpdf(x, &(&self.p.a[s] * prev))))
            })
            .collect()
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, z: &[usize], ys: &[DVector<f64>], rng: &mut R) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        self.chain(z, ys).sample(rng)
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, x_prev: &DVector<f64>, xs: &[DVector<f64>], rng: &mut R) -> Result<(usize, Vec<usize>)> {
        hmm_sample_path(&self.z_log_em(x_prev, xs), &self.pi, &self.probs, rng)
    }

    fn filtered_z<R: Rng + ?Sized>(&self, ys: &[DVector<f64>], rng: &mut R) -> Result<(usize, Vec<usize>)> {
        let k = self.p.a.len();
        let c = &self.p.c;
        let mut mean = self.mean0.clone();
        let mut cov = self.cov0.clone();
        let mut z: Vec<usize> = Vec::with_capacity(ys.len());
        let first_prior = self.pi.tr_mul(&self.probs);
        for (j, y) in ys.iter().enumerate() {
            let mut cand = Vec::with_capacity(k);
            let mut logw = Vec::with_capacity(k);
            for s in 0..k {
                let a = &self.p.a[s];
                let p_pred = linalg::symmetrize(&(&self.q[s].cov + a * &cov * a.transpose()));
                let m_pred = a * &mean;
                let sy = linalg::symmetrize(&(c * &p_pred * c.transpose() + &self.r.cov));
                let ll = linalg::mvn_logpdf_cov(y, &(c * &m_pred), &sy)?;
                let prior = if j == 0 { first_prior[s] } else { self.pi[(z[j - 1], s)] };
                logw.push(prior.ln() + ll);
                cand.push((m_pred, p_pred, sy));
            }
            let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|v| (v - mx).exp()).collect();
            let s = sample_categorical(rng, &w);
            let (m_pred, p_pred, sy) = &cand[s];
            let gain = p_pred * c.transpose() * linalg::spd_inverse(sy, "innovation covariance")?;
            mean = m_pred + &gain * (y - c * m_pred);
            cov = linalg::symmetrize(&(p_pred - &gain * sy * gain.transpose()));
            z.push(s);
        }
        let back: Vec<f64> = (0..k).map(|i| self.probs[i] * self.pi[(i, z.first().copied().unwrap_or(0))]).collect();
        Ok((sample_categorical(rng, &back), z))
    }

    pub fn init_state<R: Rng + ?Sized>(&self, ys: &[DVector<f64>], mode: SldsInitMode, rng: &mut R) -> Result<SldsGibbsState> {
        let n = self.mean0.len();
        let (z_prev, z) = match mode {
            SldsInitMode::Filtered => self.filtered_z(ys, rng)?,
            SldsInitMode::ObsProxy => {
                if n > self.p.c.nrows() {
                    return Err(Error::Config(
                        "observation-proxy initialization needs latent dim <= observation dim".into(),
                    ));
                }
                let proxy: Vec<DVector<f64>> = ys.iter().map(|y| y.rows(0, n).into_owned()).collect();
                self.sample_z(&self.mean0, &proxy, rng)?
            }
        };
        let (x_prev, x) = self.sample_x(&z, ys, rng)?;
        Ok(SldsGibbsState { x_prev, x, z_prev, z, sweeps: 0 })
    }

    /// One sweep: `x | z` then `z | x`.
    pub fn sweep<R: Rng + ?Sized>(&self, st: &mut SldsGibbsState, ys: &[DVector<f64>], rng: &mut R) -> Result<()> {
        let (x_prev, x) = self.sample_x(&st.z, ys, rng)?;
        let (z_prev, z) = self.sample_z(&x_prev, &x, rng)?;
        *st = SldsGibbsState { x_prev, x, z_prev, z, sweeps: st.sweeps + 1 };
        Ok(())
    }
}

/// Run the blocked Gibbs sampler on a window and return the `n_samples` retained states.
pub fn slds_gibbs_samples<R: Rng + ?Sized>(
    params: &ModelParams,
    ys: &[DVector<f64>],
    p0: &InitialDist,
    cfg: &SldsGibbsConfig,
    rng: &mut R,
) -> Result<Vec<SldsGibbsState>> {
    if cfg.n_samples == 0 {
        return Err(Error::Config("SLDS gradient needs at least one Gibbs sample".into()));
    }
    let prep = SldsPrep::new(params, p0)?;
    let mut st = prep.init_state(ys, cfg.init, rng)?;
    for _ in 0..cfg.burn_in {
        prep.sweep(&mut st, ys, rng)?;
    }
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        prep.sweep(&mut st, ys, rng)?;
        out.push(st.clone());
    }
    Ok(out)
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

fn indicator(k: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    m[(i, j)] = 1.0;
    m
}

/// Add one retained draw's contribution for the core steps of `sub`.
fn add_draw(
    prep: &SldsPrep<'_>,
    st: &SldsGibbsState,
    ys: &[DVector<f64>],
    sub: &BufferedSubsequence,
    estimator: SldsEstimator,
    scale: f64,
    g: &mut [DMatrix<f64>],
) -> Result<()> {
    let p = prep.p;
    let k = p.a.len();
    let n = prep.mean0.len();
    let idx = SldsIdx { k };
    let w0 = sub.window_start;
    let (ic, ir) = (idx.c(), idx.r());
    match estimator {
        SldsEstimator::Xz => {
            for (t, w) in sub.weighted_core() {
                let j = t - w0;
                let w = w * scale;
                let zp = if j == 0 { st.z_prev } else { st.z[j - 1] };
                let xp = if j == 0 { &st.x_prev } else { &st.x[j - 1] };
                let s = st.z[j];
                complete::add_transition(&p.phi, &prep.pi, &indicator(k, zp, s), w, &mut g[0]);
                let v = complete::stack(xp, &st.x[j]);
                let (ga, gq) = pair_mut(g, idx.a(s), idx.q(s));
                complete::add_dynamics(&p.a[s], &prep.q[s], &(&v * v.transpose()), w, ga, gq);
                let (gc, gr) = pair_mut(g, ic, ir);
                let xx = &st.x[j] * st.x[j].transpose();
                complete::add_emission(&p.c, &prep.r, &ys[j], &st.x[j], &xx, w, gc, gr);
            }
        }
        SldsEstimator::ZMarginal => {
            let chain = prep.chain(&st.z, ys);
            let msgs = chain.smooth()?;
            for (t, w) in sub.weighted_core() {
                let j = t - w0;
                let w = w * scale;
                let zp = if j == 0 { st.z_prev } else { st.z[j - 1] };
                let s = st.z[j];
                complete::add_transition(&p.phi, &prep.pi, &indicator(k, zp, s), w, &mut g[0]);
                let pw = chain.pairwise(&msgs, j)?;
                let m2 = pw.second_moment();
                let (ga, gq) = pair_mut(g, idx.a(s), idx.q(s));
                complete::add_dynamics(&p.a[s], &prep.q[s], &m2, w, ga, gq);
                let mean_t = pw.mean.rows(n, n).into_owned();
                let mxx = m2.view((n, n), (n, n)).into_owned();
                let (gc, gr) = pair_mut(g, ic, ir);
                complete::add_emission(&p.c, &prep.r, &ys[j], &mean_t, &mxx, w, gc, gr);
            }
        }
        SldsEstimator::XMarginal => {
            let em = prep.z_log_em(&st.x_prev, &st.x);
            let msgs = hmm_forward_backward(&em, &prep.pi, &prep.probs)?;
            for (t, w) in sub.weighted_core() {
                let j = t - w0;
                let w = w * scale;
                complete::add_transition(&p.phi, &prep.pi, &msgs.xi[j], w, &mut g[0]);
                let xp = if j == 0 { &st.x_prev } else { &st.x[j - 1] };
                let v = complete::stack(xp, &st.x[j]);
                let m2 = &v * v.transpose();
                for s in 0..k {
                    let ws = w * msgs.gamma[j][s];
                    if ws != 0.0 {
                        let (ga, gq) = pair_mut(g, idx.a(s), idx.q(s));
                        complete::add_dynamics(&p.a[s], &prep.q[s], &m2, ws, ga, gq);
                    }
                }
                let (gc, gr) = pair_mut(g, ic, ir);
                let xx = &st.x[j] * st.x[j].transpose();
                complete::add_emission(&p.c, &prep.r, &ys[j], &st.x[j], &xx, w, gc, gr);
            }
        }
    }
    Ok(())
}

/// Noisy buffered gradient for the SLDS from `n_samples` blocked Gibbs draws over the window.
pub fn slds_noisy_gradient<R: Rng + ?Sized>(
    params: &ModelParams,
    obs: &ObservationSequence,
    sub: &BufferedSubsequence,
    prior: Option<&PriorSpec>,
    p0: &InitialDist,
    cfg: &SldsGibbsConfig,
    rng: &mut R,
) -> Result<GradientVector> {
    obs.check_dim(params.obs_dim())?;
    if sub.t_len != obs.len() {
        return Err(Error::Config("subsequence length does not match the sequence".into()));
    }
    let ys = &obs.as_slice()[sub.window_start..sub.window_end];
    let draws = slds_gibbs_samples(params, ys, p0, cfg, rng)?;
    let prep = SldsPrep::new(params, p0)?;
    let enc = Encoder::new(params);
    let mut g = enc.zeros();
    let scale = 1.0 / draws.len() as f64;
    for st in &draws {
        add_draw(&prep, st, ys, sub, cfg.estimator, scale, &mut g)?;
    }
    let mut out = GradientVector { values: enc.encode(&g), layout: enc.layout };
    if let Some(prior) = prior {
        out.add_assign(&log_prior_grad(params, prior)?);
    }
    Ok(out)
}
