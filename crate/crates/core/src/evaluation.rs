//! Metrics: held-out and predictive likelihoods, label-aligned parameter
//! error, kernel Stein discrepancy, segmentation NMI, latent RMSE and the SLDS
//! Monte Carlo EM bound.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::grad_estimators::{slds_gibbs_samples, SldsGibbsConfig, SldsGibbsState, SldsInitMode};
use crate::linalg;
use crate::message_passing::{discrete_log_emissions, hmm_forward, hmm_forward_backward, lgssm_smoother, marginal_loglik, InfoMessage};
use crate::models::io::fmt_f64;
use crate::models::{BlockGroup, GaussianNoise, GradientVector, InitialDist, Layout, ModelParams, ObservationSequence};

/// One metric value with free-form metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub block: String,
    pub value: f64,
    pub meta: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, block: &str, value: f64, meta: serde_json::Value) -> Self {
        Self { metric: metric.into(), block: block.into(), value, meta }
    }
}

fn metrics_header() -> &'static str {
    "metric,block,value,meta_json"
}

fn write_rows(w: &mut impl Write, reports: &[MetricReport]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in reports {
        csv.write_record([r.metric.as_str(), r.block.as_str(), &fmt_f64(r.value), &serde_json::to_string(&r.meta)?])?;
    }
    csv.flush()?;
    Ok(())
}

/// Write `metric,block,value,meta_json`, replacing any existing file.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", metrics_header())?;
    write_rows(&mut w, reports)?;
    w.flush()?;
    Ok(())
}

/// Append to a metrics CSV, writing the header if the file is new.
pub fn append_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let fresh = !path.exists();
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{}", metrics_header())?;
    }
    write_rows(&mut w, reports)?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != metrics_header() {
        return Err(Error::Format(format!("metrics CSV must have header {}", metrics_header())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let value: f64 = rec[2].parse().map_err(|_| Error::Format(format!("bad metric value '{}'", &rec[2])))?;
        out.push(MetricReport::new(&rec[0], &rec[1], value, serde_json::from_str(&rec[3])?));
    }
    Ok(out)
}

/// Exact marginal log likelihood of a test sequence under the stationary initial distribution.
pub fn heldout_loglik(params: &ModelParams, test: &ObservationSequence) -> Result<f64> {
    if let ModelParams::Slds(_) = params {
        return Err(Error::Unsupported(
            "the SLDS marginal likelihood is intractable; use slds_em_lower_bound".into(),
        ));
    }
    marginal_loglik(params, test, &InitialDist::stationary(params)?)
}

/// `sum_t ln p(y_{t+k} | y_{<=t})` over `t = 0..T-k`.
///
/// For the ARHMM the regressors of `y_{t+k}` are the observed lags.
pub fn predictive_k_step(params: &ModelParams, obs: &ObservationSequence, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("prediction horizon must be >= 1".into()));
    }
    let t_len = obs.len();
    if k >= t_len {
        return Ok(0.0);
    }
    obs.check_dim(params.obs_dim())?;
    let p0 = InitialDist::stationary(params)?;
    match params {
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => {
            let pi = params.transition().expect("discrete family");
            let em = discrete_log_emissions(params, obs, 0, t_len)?;
            let (log_alpha, _) = hmm_forward(&em, &pi, p0.probs().expect("discrete"))?;
            let mut pik = DMatrix::identity(pi.nrows(), pi.nrows());
            for _ in 0..k {
                pik = &pik * &pi;
            }
            let mut total = 0.0;
            for t in 0..t_len - k {
                let a = log_alpha[t].map(f64::exp);
                let pred = pik.tr_mul(&(&a / a.sum()));
                let le = &em[t + k];
                let mx = le.max();
                let s: f64 = pred.iter().zip(le.iter()).map(|(p, l)| p * (l - mx).exp()).sum();
                total += mx + s.ln();
            }
            Ok(total)
        }
        ModelParams::Lgssm(p) => {
            let (m0, v0) = p0.gaussian().expect("gaussian");
            let q = linalg::covariance_from_factor(&p.psi_q)?;
            let r = linalg::covariance_from_factor(&p.psi_r)?;
            let filtered = kalman_filter_moments(&p.a, &q, &p.c, &r, obs, m0, v0)?;
            let mut total = 0.0;
            for (t, (m, v)) in filtered.iter().enumerate().take(t_len - k) {
                let (mut m, mut v) = (m.clone(), v.clone());
                for _ in 0..k {
                    m = &p.a * m;
                    v = linalg::symmetrize(&(&p.a * v * p.a.transpose() + &q));
                }
                let s = linalg::symmetrize(&(&p.c * v * p.c.transpose() + &r));
                total += linalg::mvn_logpdf_cov(obs.y(t + k), &(&p.c * m), &s)?;
            }
            Ok(total)
        }
        ModelParams::Slds(_) => Err(Error::Unsupported("predictive likelihood needs exact message passing".into())),
    }
}

/// Moment-form Kalman filter; entry `t` is the law of `x_t | y_{<=t}`.
/// The prior `(m0, v0)` is for the state before the first step.
fn kalman_filter_moments(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    obs: &ObservationSequence,
    m0: &DVector<f64>,
    v0: &DMatrix<f64>,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let (mut m, mut v) = (m0.clone(), v0.clone());
    let mut out = Vec::with_capacity(obs.len());
    for y in obs.as_slice() {
        let mp = a * &m;
        let vp = linalg::symmetrize(&(a * &v * a.transpose() + q));
        let s = linalg::symmetrize(&(c * &vp * c.transpose() + r));
        let gain = &vp * c.transpose() * linalg::spd_inverse(&s, "innovation covariance")?;
        m = &mp + &gain * (y - c * &mp);
        v = linalg::symmetrize(&(&vp - &gain * &s * gain.transpose()));
        out.push((m.clone(), v.clone()));
    }
    Ok(out)
}

/// Per-block mean squared error after the best relabeling of the estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedMse {
    /// Truth state `i` is matched with estimate state `perm[i]`.
    pub perm: Vec<usize>,
    pub blocks: Vec<(String, f64)>,
    /// Squared error summed over every natural-parameter entry.
    pub total_sse: f64,
}

impl AlignedMse {
    pub fn block(&self, name: &str) -> Option<f64> {
        self.blocks.iter().find(|b| b.0 == name).map(|b| b.1)
    }
}

fn sse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|v| v * v).sum()
}

/// Up to this many states the label search is exhaustive.
pub const EXHAUSTIVE_ALIGNMENT_MAX_K: usize = 8;

/// Minimize total squared error over relabelings of `est`.
///
/// The search is exhaustive for `K <= 8`. Above that an assignment problem on
/// per-state costs (state blocks plus self-transition) is solved instead.
pub fn param_mse_aligned(est: &ModelParams, truth: &ModelParams) -> Result<AlignedMse> {
    if est.family() != truth.family() || est.layout() != truth.layout() {
        return dim("estimate and truth differ in family or shape".to_string());
    }
    let k = truth.num_states();
    let nt = truth.natural_blocks()?;
    let ne = est.natural_blocks()?;
    let pi_t = truth.transition();
    let pi_e = est.transition();
    // state_cost[i][j]: squared error of truth state i against estimate state j over per-state blocks
    let mut state_cost = vec![vec![0.0; k]; k];
    for bt in &nt {
        let Some(i) = state_of(&bt.0) else { continue };
        let prefix = bt.0.trim_end_matches(|c: char| c.is_ascii_digit());
        for (j, cost) in state_cost[i].iter_mut().enumerate() {
            let be = ne.iter().find(|b| b.0 == format!("{prefix}{j}")).expect("same layout");
            *cost += sse(&bt.2, &be.2);
        }
    }
    let shared: f64 = nt
        .iter()
        .zip(&ne)
        .filter(|(b, _)| state_of(&b.0).is_none() && b.1 != BlockGroup::Pi)
        .map(|(a, b)| sse(&a.2, &b.2))
        .sum();
    let total_for = |perm: &[usize]| -> f64 {
        let mut s = shared;
        for (i, &j) in perm.iter().enumerate() {
            s += state_cost[i][j];
        }
        if let (Some(pt), Some(pe)) = (&pi_t, &pi_e) {
            for i in 0..k {
                for l in 0..k {
                    s += (pt[(i, l)] - pe[(perm[i], perm[l])]).powi(2);
                }
            }
        }
        s
    };
    let perm = if pi_t.is_none() {
        Vec::new()
    } else if k <= EXHAUSTIVE_ALIGNMENT_MAX_K {
        let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
        for p in (0..k).permutations(k) {
            let s = total_for(&p);
            if s < best.0 {
                best = (s, p);
            }
        }
        best.1
    } else {
        let (pt, pe) = (pi_t.as_ref().expect("discrete"), pi_e.as_ref().expect("discrete"));
        let scale = 1e9 / (1.0 + state_cost.iter().flatten().cloned().fold(0.0, f64::max));
        let w = pathfinding::matrix::Matrix::from_fn(k, k, |(i, j)| {
            let c = state_cost[i][j] + (pt[(i, i)] - pe[(j, j)]).powi(2);
            -((c * scale).round() as i64)
        });
        pathfinding::kuhn_munkres::kuhn_munkres(&w).1
    };
    let aligned = if perm.is_empty() { est.clone() } else { est.permuted(&perm) };
    let na = aligned.natural_blocks()?;
    let mut blocks = Vec::with_capacity(nt.len());
    let mut total = 0.0;
    for (a, b) in nt.iter().zip(&na) {
        let s = sse(&a.2, &b.2);
        total += s;
        blocks.push((a.0.clone(), s / a.2.len() as f64));
    }
    Ok(AlignedMse { perm, blocks, total_sse: total })
}

fn state_of(name: &str) -> Option<usize> {
    let digits: String = name.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || name == "Pi" {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Running averages `(1/s) sum_{i<=s} theta_i` in natural-parameter space.
pub fn running_average(samples: &[ModelParams]) -> Result<Vec<ModelParams>> {
    let first = samples.first().ok_or_else(|| Error::Config("empty trace".into()))?;
    let mut acc: Vec<DMatrix<f64>> = first.natural_blocks()?.into_iter().map(|b| b.2 * 0.0).collect();
    let mut out = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().enumerate() {
        for (a, b) in acc.iter_mut().zip(p.natural_blocks()?) {
            *a += b.2;
        }
        let mean: Vec<DMatrix<f64>> = acc.iter().map(|a| a / (s + 1) as f64).collect();
        out.push(first.from_natural_blocks(&mean)?);
    }
    Ok(out)
}

/// `(1 + ||x - y||^2)^(-1/2)`.
pub fn imq_kernel(x: &[f64], y: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    (1.0 + r2).powf(-0.5)
}

/// Kernel Stein discrepancy with the IMQ kernel: `sum_d sqrt(mean_{i,j} k0^d(x_i, x_j))`.
///
/// `scores[i]` is the gradient of the target log density at `samples[i]`.
pub fn ksd_imq(samples: &[DVector<f64>], scores: &[DVector<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config("KSD needs at least two samples".into()));
    }
    if scores.len() != n {
        return dim("one score per sample is required".to_string());
    }
    let d = samples[0].len();
    if samples.iter().chain(scores).any(|v| v.len() != d) {
        return dim("samples and scores must share one dimension".to_string());
    }
    let rows: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = DVector::zeros(d);
            let (x, sx) = (&samples[i], &scores[i]);
            for j in 0..n {
                let (y, sy) = (&samples[j], &scores[j]);
                let diff = x - y;
                let u = 1.0 + diff.norm_squared();
                let k = u.powf(-0.5);
                let u3 = u.powf(-1.5);
                let u5 = u.powf(-2.5);
                for c in 0..d {
                    let dx = -u3 * diff[c];
                    let dy = u3 * diff[c];
                    let dxy = u3 - 3.0 * u5 * diff[c] * diff[c];
                    acc[c] += sx[c] * k * sy[c] + sy[c] * dx + sx[c] * dy + dxy;
                }
            }
            acc
        })
        .collect();
    let mut total = DVector::zeros(d);
    for r in &rows {
        total += r;
    }
    let n2 = (n * n) as f64;
    Ok(total.iter().map(|v| (v / n2).max(0.0).sqrt()).sum())
}

/// KSD per parameter block in constrained coordinates.
///
/// `grad_fn(i, theta_i)` returns the unconstrained log-posterior gradient, which is mapped
/// back to constrained coordinates by removing the log-Jacobian term and
/// dividing by `dc/du`.
pub fn ksd_by_block(
    samples: &[ModelParams],
    grad_fn: impl Fn(usize, &ModelParams) -> Result<GradientVector> + Sync,
) -> Result<Vec<(String, f64)>> {
    let first = samples.first().ok_or_else(|| Error::Config("KSD needs samples".into()))?;
    let layout: Layout = first.layout();
    let mask = layout.log_mask();
    let scored: Vec<(DVector<f64>, DVector<f64>)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = grad_fn(i, p)?;
            let c = p.constrained_vector();
            let r = p.chain_factors();
            let sc = DVector::from_iterator(
                c.len(),
                (0..c.len()).map(|i| (g.values[i] - if mask[i] { 1.0 } else { 0.0 }) / r[i]),
            );
            Ok((c, sc))
        })
        .collect::<Result<_>>()?;
    layout
        .blocks
        .iter()
        .map(|b| {
            let xs: Vec<DVector<f64>> = scored.iter().map(|s| s.0.rows(b.offset, b.len).into_owned()).collect();
            let ss: Vec<DVector<f64>> = scored.iter().map(|s| s.1.rows(b.offset, b.len).into_owned()).collect();
            Ok((b.name.clone(), ksd_imq(&xs, &ss)?))
        })
        .collect()
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts.values().filter(|c| **c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// `I(a, b) / sqrt(H(a) H(b))`. Two constant labelings score 1; otherwise a
/// constant labeling scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return dim("label sequences must be nonempty and of equal length".to_string());
    }
    let n = a.len() as f64;
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    let mut cab = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0.0) += 1.0;
        *cb.entry(y).or_insert(0.0) += 1.0;
        *cab.entry((x, y)).or_insert(0.0) += 1.0;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ca.len() == 1 && cb.len() == 1 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &cab {
        let p = c / n;
        mi += p * (p / ((ca[&x] / n) * (cb[&y] / n))).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// `sqrt(mean_t ||x_t - x'_t||^2)`, or `sum_t ||x_t - x'_t||` when `literal_sum` is set.
pub fn latent_rmse(x: &[DVector<f64>], x_true: &[DVector<f64>], literal_sum: bool) -> Result<f64> {
    if x.len() != x_true.len() || x.is_empty() {
        return dim("latent sequences must be nonempty and of equal length".to_string());
    }
    if x.iter().zip(x_true).any(|(a, b)| a.len() != b.len()) {
        return dim("latent dimensions differ".to_string());
    }
    if literal_sum {
        Ok(x.iter().zip(x_true).map(|(a, b)| (a - b).norm()).sum())
    } else {
        let ms = x.iter().zip(x_true).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / x.len() as f64;
        Ok(ms.sqrt())
    }
}

/// Point estimates of the latent path: smoothed modes and means, or Gibbs
/// frequencies and averages for the SLDS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentEstimate {
    pub z: Option<Vec<usize>>,
    pub x: Option<Vec<DVector<f64>>>,
}

pub fn latent_estimates<R: Rng + ?Sized>(
    params: &ModelParams,
    obs: &ObservationSequence,
    n_mc: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<LatentEstimate> {
    let p0 = InitialDist::stationary(params)?;
    let argmax = |v: &DVector<f64>| v.argmax().0;
    match params {
        ModelParams::Hmm(_) | ModelParams::Arhmm(_) => {
            let em = discrete_log_emissions(params, obs, 0, obs.len())?;
            let msgs = hmm_forward_backward(&em, &params.transition().expect("discrete"), p0.probs().expect("discrete"))?;
            Ok(LatentEstimate { z: Some(msgs.gamma.iter().map(argmax).collect()), x: None })
        }
        ModelParams::Lgssm(p) => {
            let msgs = lgssm_smoother(p, obs, 0, obs.len(), &p0)?;
            let x = msgs
                .alpha
                .iter()
                .zip(&msgs.beta)
                .map(|(a, b)| Ok(InfoMessage { h: &a.h + &b.h, lambda: &a.lambda + &b.lambda }.moments()?.0))
                .collect::<Result<_>>()?;
            Ok(LatentEstimate { z: None, x: Some(x) })
        }
        ModelParams::Slds(_) => {
            let cfg = SldsGibbsConfig { n_samples: n_mc.max(1), burn_in, init: SldsInitMode::Filtered, ..Default::default() };
            let draws = slds_gibbs_samples(params, obs.as_slice(), &p0, &cfg, rng)?;
            let k = params.num_states();
            let n = params.latent_dim().expect("latent family");
            let mut counts = vec![DVector::<f64>::zeros(k); obs.len()];
            let mut xs = vec![DVector::<f64>::zeros(n); obs.len()];
            for d in &draws {
                for t in 0..obs.len() {
                    counts[t][d.z[t]] += 1.0;
                    xs[t] += &d.x[t];
                }
            }
            let nd = draws.len() as f64;
            Ok(LatentEstimate { z: Some(counts.iter().map(argmax).collect()), x: Some(xs.into_iter().map(|x| x / nd).collect()) })
        }
    }
}

/// `ln p(y, x, z | theta)` for one SLDS latent draw, including the state before the window.
pub fn slds_complete_loglik(params: &ModelParams, obs: &ObservationSequence, st: &SldsGibbsState, p0: &InitialDist) -> Result<f64> {
    let ModelParams::Slds(p) = params else {
        return Err(Error::Unsupported("expected SLDS parameters".into()));
    };
    let InitialDist::Switching { probs, mean, cov } = p0 else {
        return Err(Error::Config("SLDS needs a switching initial distribution".into()));
    };
    if st.x.len() != obs.len() || st.z.len() != obs.len() {
        return dim("latent draw does not cover the sequence".to_string());
    }
    let pi = params.transition().expect("discrete");
    let q: Vec<GaussianNoise> = p.psi_q.iter().map(GaussianNoise::from_factor).collect::<Result<_>>()?;
    let r = GaussianNoise::from_factor(&p.psi_r)?;
    let mut total = probs[st.z_prev].ln() + linalg::mvn_logpdf_cov(&st.x_prev, mean, cov)?;
    for t in 0..obs.len() {
        let (zp, xp) = if t == 0 { (st.z_prev, &st.x_prev) } else { (st.z[t - 1], &st.x[t - 1]) };
        let k = st.z[t];
        total += pi[(zp, k)].ln();
        total += q[k].logpdf(&st.x[t], &(&p.a[k] * xp));
        total += r.logpdf(obs.y(t), &(&p.c * &st.x[t]));
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmBound {
    pub mean: f64,
    pub std_err: f64,
    pub n_mc: usize,
}

/// Monte Carlo average of `ln p(y, x, z | theta)` over blocked Gibbs draws.
pub fn slds_em_lower_bound<R: Rng + ?Sized>(
    params: &ModelParams,
    obs: &ObservationSequence,
    n_mc: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<EmBound> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be >= 1".into()));
    }
    let p0 = InitialDist::stationary(params)?;
    let cfg = SldsGibbsConfig { n_samples: n_mc, burn_in, init: SldsInitMode::Filtered, ..Default::default() };
    let draws = slds_gibbs_samples(params, obs.as_slice(), &p0, &cfg, rng)?;
    let vals = draws
        .iter()
        .map(|st| slds_complete_loglik(params, obs, st, &p0))
        .collect::<Result<Vec<_>>>()?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(EmBound { mean, std_err: (var / n).sqrt(), n_mc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::simulate::simulate;
    use crate::models::synthetic::{synthetic_star, SyntheticTag};
    use crate::models::{GaussianHmmParams, LgssmParams, SldsParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn imq_spot_values() {
        assert_eq!(imq_kernel(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(imq_kernel(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]), 0.5);
    }

    #[test]
    fn ksd_prefers_target_samples() {
        let mut wins = 0;
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let xs: Vec<DVector<f64>> = (0..200).map(|_| linalg::standard_normal_vec(&mut rng, 1)).collect();
            let shifted: Vec<DVector<f64>> = xs.iter().map(|x| x.add_scalar(2.0)).collect();
            let score = |v: &[DVector<f64>]| v.iter().map(|x| -x).collect::<Vec<_>>();
            if ksd_imq(&xs, &score(&xs)).unwrap() < ksd_imq(&shifted, &score(&shifted)).unwrap() {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn ksd_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<DVector<f64>> = (0..30).map(|_| linalg::standard_normal_vec(&mut rng, 2)).collect();
        let ss: Vec<DVector<f64>> = xs.iter().map(|x| -x).collect();
        let (mut xr, mut sr) = (xs.clone(), ss.clone());
        xr.reverse();
        sr.reverse();
        let (a, b) = (ksd_imq(&xs, &ss).unwrap(), ksd_imq(&xr, &sr).unwrap());
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn nmi_cases() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = [2, 2, 0, 0, 1, 1];
        assert!((nmi(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..4)).collect();
        let y: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..4)).collect();
        assert!(nmi(&x, &y).unwrap() < 0.01);
        assert!((nmi(&x, &y).unwrap() - nmi(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_cases() {
        let x: Vec<DVector<f64>> = (0..7).map(|t| DVector::from_vec(vec![t as f64, 1.0])).collect();
        assert_eq!(latent_rmse(&x, &x, false).unwrap(), 0.0);
        let shifted: Vec<DVector<f64>> = x.iter().map(|v| v + DVector::from_vec(vec![1.0, 0.0])).collect();
        assert!((latent_rmse(&x, &shifted, false).unwrap() - 1.0).abs() < 1e-15);
        assert!((latent_rmse(&x, &shifted, true).unwrap() - 7.0).abs() < 1e-12);
        let a = [DVector::from_vec(vec![3.0, 0.0]), DVector::from_vec(vec![0.0, 0.0])];
        let b = [DVector::from_vec(vec![0.0, 4.0]), DVector::from_vec(vec![1.0, 0.0])];
        assert!((latent_rmse(&a, &b, false).unwrap() - 13f64.sqrt()).abs() < 1e-12);
        assert!((latent_rmse(&a, &b, true).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_mse_cases() {
        let truth = synthetic_star(SyntheticTag::RcHmm);
        let same = param_mse_aligned(&truth, &truth).unwrap();
        assert_eq!(same.perm, (0..8).collect::<Vec<_>>());
        assert_eq!(same.total_sse, 0.0);
        let swap: Vec<usize> = vec![3, 1, 2, 0, 4, 5, 7, 6];
        let r = param_mse_aligned(&truth.permuted(&swap), &truth).unwrap();
        assert_eq!(r.total_sse, 0.0);
        for (i, &j) in r.perm.iter().enumerate() {
            assert_eq!(swap[j], i);
        }
    }

    #[test]
    fn aligned_mse_of_known_perturbation() {
        let truth = synthetic_star(SyntheticTag::Arhmm);
        let ModelParams::Arhmm(mut p) = truth.clone() else { unreachable!() };
        let delta = DMatrix::from_row_slice(2, 2, &[0.01, -0.01, -0.02, 0.02]);
        p.phi += &delta;
        let r = param_mse_aligned(&ModelParams::Arhmm(p), &truth).unwrap();
        let want = delta.iter().map(|d| d * d).sum::<f64>() / 4.0;
        assert!((r.block("Pi").unwrap() - want).abs() < 1e-12);
        assert_eq!(r.perm, vec![0, 1]);
    }

    #[test]
    fn hungarian_path_for_many_states() {
        let k = 10;
        let mu: Vec<DVector<f64>> = (0..k).map(|i| DVector::from_vec(vec![10.0 * i as f64])).collect();
        let mut phi = DMatrix::from_element(k, k, 0.1 / (k - 1) as f64);
        phi.fill_diagonal(0.9);
        let truth = ModelParams::Hmm(GaussianHmmParams { phi, mu, psi: vec![DMatrix::identity(1, 1); k] });
        let perm: Vec<usize> = (0..k).rev().collect();
        let r = param_mse_aligned(&truth.permuted(&perm), &truth).unwrap();
        assert!(r.total_sse < 1e-20);
    }

    #[test]
    fn alignment_never_hurts() {
        let truth = synthetic_star(SyntheticTag::Slds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = truth.to_unconstrained();
        let est = truth.from_unconstrained(&(&u + linalg::standard_normal_vec(&mut rng, u.len()) * 0.3)).unwrap();
        let r = param_mse_aligned(&est, &truth).unwrap();
        let ident: f64 = truth
            .natural_blocks()
            .unwrap()
            .iter()
            .zip(est.natural_blocks().unwrap())
            .map(|(a, b)| sse(&a.2, &b.2))
            .sum();
        assert!(r.total_sse <= ident + 1e-12);
    }

    #[test]
    fn one_step_predictive_telescopes() {
        for tag in [SyntheticTag::Lgssm, SyntheticTag::Arhmm, SyntheticTag::RcHmm] {
            let p = synthetic_star(tag);
            let obs = simulate(&p, 40, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().obs;
            let total = heldout_loglik(&p, &obs).unwrap();
            let first = heldout_loglik(&p, &obs.slice(0, 1)).unwrap();
            let pred = predictive_k_step(&p, &obs, 1).unwrap();
            assert!((pred - (total - first)).abs() < 1e-10 * total.abs(), "{tag:?}: {pred} vs {}", total - first);
        }
    }

    #[test]
    fn two_step_predictive_matches_enumeration() {
        let pi = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let p = ModelParams::Hmm(GaussianHmmParams {
            phi: pi.clone(),
            mu: vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.5])],
            psi: vec![DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 0.5)],
        });
        let ys = [0.3, -1.2, 2.0, 0.7];
        let obs = ObservationSequence::new(ys.iter().map(|v| DVector::from_vec(vec![*v])).collect()).unwrap();
        let p0 = InitialDist::stationary(&p).unwrap();
        let pr0 = p0.probs().unwrap();
        let dens = |j: usize, y: f64| {
            let (m, s) = if j == 0 { (-1.0, 1.0) } else { (1.5, 2.0) };
            (-(y - m) * (y - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut want = 0.0;
        for t in 0..2 {
            // p(z_{t+2}, y_{<=t}) by enumerating the predecessor and z_0..z_{t+2}
            let len = t + 3;
            let mut joint = [0.0; 2];
            for code in 0..(2usize.pow(len as u32 + 1)) {
                let z: Vec<usize> = (0..=len).map(|b| (code >> b) & 1).collect();
                let mut w = pr0[z[0]];
                for s in 1..=len {
                    w *= pi[(z[s - 1], z[s])];
                }
                for s in 0..=t {
                    w *= dens(z[s + 1], ys[s]);
                }
                joint[z[len]] += w;
            }
            let tot: f64 = joint.iter().sum();
            want += (0..2).map(|j| joint[j] / tot * dens(j, ys[t + 2])).sum::<f64>().ln();
        }
        let got = predictive_k_step(&p, &obs, 2).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn running_average_of_constant_trace() {
        let p = synthetic_star(SyntheticTag::Slds);
        let avg = running_average(&vec![p.clone(); 5]).unwrap();
        for a in avg {
            assert!(param_mse_aligned(&a, &p).unwrap().total_sse < 1e-20);
        }
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let r = vec![
            MetricReport::new("mse", "Pi", 0.125, serde_json::json!({"perm": [1, 0]})),
            MetricReport::new("heldout_loglik", "", -12.5, serde_json::json!({})),
        ];
        write_metrics_csv(&path, &r[..1]).unwrap();
        append_metrics_csv(&path, &r[1..]).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), r);
    }

    #[test]
    fn latent_estimates_track_truth() {
        let p = synthetic_star(SyntheticTag::RcHmm);
        let sim = simulate(&p, 300, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let est = latent_estimates(&p, &sim.obs, 1, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(nmi(est.z.as_ref().unwrap(), sim.z.as_ref().unwrap()).unwrap() > 0.5);
        let p = synthetic_star(SyntheticTag::Lgssm);
        let sim = simulate(&p, 300, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let est = latent_estimates(&p, &sim.obs, 1, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x_true = sim.x.unwrap();
        let zeros = vec![DVector::zeros(x_true[0].len()); x_true.len()];
        assert!(latent_rmse(est.x.as_ref().unwrap(), &x_true, false).unwrap() < latent_rmse(&zeros, &x_true, false).unwrap());
    }

    fn k1_slds() -> (ModelParams, ModelParams) {
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.5]);
        let lg = ModelParams::Lgssm(LgssmParams {
            a: a.clone(),
            psi_q: DMatrix::identity(2, 2),
            c: DMatrix::identity(2, 2),
            psi_r: DMatrix::identity(2, 2),
        });
        let sl = ModelParams::Slds(SldsParams {
            phi: DMatrix::from_element(1, 1, 1.0),
            a: vec![a],
            psi_q: vec![DMatrix::identity(2, 2)],
            c: DMatrix::identity(2, 2),
            psi_r: DMatrix::identity(2, 2),
        });
        (lg, sl)
    }

    /// Exact `E[ln p(y, x)]` under the posterior: `ln p(y) - H(x | y)` from the dense joint.
    fn exact_complete_expectation(lg: &ModelParams, obs: &ObservationSequence) -> f64 {
        let ModelParams::Lgssm(p) = lg else { unreachable!() };
        let p0 = InitialDist::stationary(lg).unwrap();
        let (_, v0) = p0.gaussian().unwrap();
        let t = obs.len();
        let n = 2;
        let dim_x = n * (t + 1);
        // joint covariance of (x_prev, x_0..x_{T-1})
        let q = linalg::covariance_from_factor(&p.psi_q).unwrap();
        let mut cov = DMatrix::zeros(dim_x, dim_x);
        let mut marg = vec![v0.clone()];
        for s in 1..=t {
            let prev = marg[s - 1].clone();
            marg.push(&p.a * prev * p.a.transpose() + &q);
        }
        for i in 0..=t {
            for j in i..=t {
                let mut b = marg[i].clone();
                for _ in i..j {
                    b = &p.a * b;
                }
                cov.view_mut((j * n, i * n), (n, n)).copy_from(&b);
                cov.view_mut((i * n, j * n), (n, n)).copy_from(&b.transpose());
            }
        }
        let r = linalg::covariance_from_factor(&p.psi_r).unwrap();
        let mut cxy = DMatrix::zeros(dim_x, n * t);
        let mut cyy = DMatrix::zeros(n * t, n * t);
        for s in 0..t {
            for u in 0..=t {
                let blk = cov.view((u * n, (s + 1) * n), (n, n)) * p.c.transpose();
                cxy.view_mut((u * n, s * n), (n, n)).copy_from(&blk);
            }
            for s2 in 0..t {
                let mut blk = &p.c * cov.view(((s + 1) * n, (s2 + 1) * n), (n, n)) * p.c.transpose();
                if s == s2 {
                    blk += &r;
                }
                cyy.view_mut((s * n, s2 * n), (n, n)).copy_from(&blk);
            }
        }
        let y = DVector::from_iterator(n * t, obs.as_slice().iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()));
        let log_py = linalg::mvn_logpdf_cov(&y, &DVector::zeros(n * t), &cyy).unwrap();
        let post = &cov - &cxy * cyy.clone().try_inverse().unwrap() * cxy.transpose();
        let ent = 0.5 * (dim_x as f64 * (1.0 + linalg::LN_2PI) + post.determinant().ln());
        log_py - ent
    }

    #[test]
    fn em_bound_single_state_matches_exact_expectation() {
        let (lg, sl) = k1_slds();
        let obs = simulate(&lg, 5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap().obs;
        let exact = exact_complete_expectation(&lg, &obs);
        let est = slds_em_lower_bound(&sl, &obs, 2000, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((est.mean - exact).abs() < 4.0 * est.std_err, "{} ± {} vs {exact}", est.mean, est.std_err);
        let loglik = heldout_loglik(&lg, &obs).unwrap();
        assert!(est.mean <= loglik + 4.0 * est.std_err);
        let again = slds_em_lower_bound(&sl, &obs, 2000, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(est, again);
        assert!(heldout_loglik(&sl, &obs).is_err());
    }
}
