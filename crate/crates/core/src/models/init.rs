//! Data-driven initialization: k-means clustering and per-cluster moment fits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    ArhmmParams, Family, GaussianHmmParams, LgssmParams, ModelParams, ObservationSequence, SldsParams,
};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centers: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
}

fn nearest(p: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| (k, (p - c).norm_squared()))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded at the
/// point farthest from its current center.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Config("number of clusters must be positive".into()));
    }
    let mut distinct: Vec<&DVector<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|d| *d == p) {
            distinct.push(p);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {} distinct points",
            distinct.len()
        )));
    }
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(points[pick].clone());
    }
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (l, _) = nearest(p, &centers);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p - &centers[labels[i]]).norm_squared()))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                centers[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KMeansResult { centers, labels })
}

/// Settings for [`init_params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub family: Family,
    pub num_states: usize,
    pub lags: usize,
    pub latent_dim: usize,
    pub dirichlet_alpha: f64,
    pub kmeans_iters: usize,
    /// Column variance of the matrix-normal draw of the LGSSM `A`.
    pub lgssm_a_col_var: f64,
    /// Wishart draws for initial precisions: degrees of freedom and inverse scale.
    pub wishart_nu: Option<f64>,
    pub wishart_scale: Option<f64>,
    /// Start the transition weights at all ones instead of the K-means transition counts.
    pub uniform_transition: bool,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            family: Family::Hmm,
            num_states: 2,
            lags: 1,
            latent_dim: 2,
            dirichlet_alpha: 1.0,
            kmeans_iters: 100,
            lgssm_a_col_var: 1.0,
            wishart_nu: None,
            wishart_scale: None,
            uniform_transition: false,
        }
    }
}

/// Draw a lower Cholesky factor of a Wishart precision with inverse scale `scale * I`.
pub fn sample_wishart_factor<R: Rng + ?Sized>(rng: &mut R, n: usize, nu: f64, scale: f64) -> Result<DMatrix<f64>> {
    if nu <= n as f64 - 1.0 || !(scale > 0.0) {
        return Err(Error::Config("invalid Wishart degrees of freedom or scale".into()));
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::Config(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt().max(1e-8);
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(a / scale.sqrt())
}

fn covariance(points: &[DVector<f64>]) -> DMatrix<f64> {
    let d = points[0].len();
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let mut c = DMatrix::zeros(d, d);
    for p in points {
        let e = p - &mean;
        c += &e * e.transpose();
    }
    c / n.max(1.0)
}

fn ridge(c: DMatrix<f64>) -> DMatrix<f64> {
    let d = c.nrows();
    let s = (c.trace() / d as f64).max(1e-8);
    c + DMatrix::identity(d, d) * (1e-6 * s)
}

fn phi_from_labels(labels: &[usize], k: usize, alpha: f64) -> DMatrix<f64> {
    let mut phi = DMatrix::from_element(k, k, alpha);
    for w in labels.windows(2) {
        phi[(w[0], w[1])] += 1.0;
    }
    phi
}

/// Least-squares regression `y ~ A x` per cluster, falling back to pooled fits for small clusters.
fn regress(
    targets: &[DVector<f64>],
    inputs: &[DVector<f64>],
    labels: &[usize],
    k: usize,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let m = targets[0].len();
    let d = inputs[0].len();
    let fit = |idx: &[usize]| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut sxx = DMatrix::zeros(d, d);
        let mut syx = DMatrix::zeros(m, d);
        for &i in idx {
            sxx += &inputs[i] * inputs[i].transpose();
            syx += &targets[i] * inputs[i].transpose();
        }
        let s = (sxx.trace() / d as f64).max(1e-8);
        let reg = sxx + DMatrix::identity(d, d) * (1e-6 * s);
        let a = linalg::spd_inverse(&reg, "regression Gram matrix").map(|inv| syx * inv)?;
        let res: Vec<DVector<f64>> = idx.iter().map(|&i| &targets[i] - &a * &inputs[i]).collect();
        let mut q = DMatrix::zeros(m, m);
        for r in &res {
            q += r * r.transpose();
        }
        Ok((a, ridge(q / idx.len() as f64)))
    };
    let all: Vec<usize> = (0..targets.len()).collect();
    let pooled = fit(&all)?;
    let mut a_out = Vec::with_capacity(k);
    let mut q_out = Vec::with_capacity(k);
    for c in 0..k {
        let idx: Vec<usize> = all.iter().copied().filter(|&i| labels[i] == c).collect();
        let (a, q) = if idx.len() > d + m { fit(&idx)? } else { pooled.clone() };
        a_out.push(a);
        q_out.push(q);
    }
    Ok((a_out, q_out))
}

fn stacked(obs: &ObservationSequence, lags: usize) -> Vec<DVector<f64>> {
    let m = obs.dim();
    (0..obs.len())
        .map(|t| {
            let mut v = DVector::zeros(m * (lags + 1));
            v.rows_mut(0, m).copy_from(obs.y(t));
            v.rows_mut(m, m * lags).copy_from(&obs.lag_vector(t, lags));
            v
        })
        .collect()
}

/// Initialize parameters from data.
///
/// Discrete families cluster (lag-stacked) observations with k-means, fit
/// per-cluster moments or regressions and set `phi` to transition counts plus
/// the Dirichlet concentration. The LGSSM is drawn from the prior.
pub fn init_params<R: Rng + ?Sized>(
    obs: &ObservationSequence,
    spec: &InitSpec,
    rng: &mut R,
) -> Result<ModelParams> {
    if obs.is_empty() {
        return Err(Error::Config("cannot initialize from an empty sequence".into()));
    }
    let m = obs.dim();
    let k = spec.num_states;
    let mut out = match spec.family {
        Family::Hmm => {
            let km = kmeans(obs.as_slice(), k, spec.kmeans_iters, rng)?;
            let pooled = ridge(covariance(obs.as_slice()));
            let mut psi = Vec::with_capacity(k);
            for c in 0..k {
                let pts: Vec<DVector<f64>> = obs
                    .as_slice()
                    .iter()
                    .zip(&km.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p.clone())
                    .collect();
                let cov = if pts.len() > m { ridge(covariance(&pts)) } else { pooled.clone() };
                psi.push(linalg::factor_from_covariance(&cov)?);
            }
            ModelParams::Hmm(GaussianHmmParams {
                phi: phi_from_labels(&km.labels, k, spec.dirichlet_alpha),
                mu: km.centers,
                psi,
            })
        }
        Family::Arhmm => {
            if spec.lags == 0 {
                return Err(Error::Config("ARHMM needs at least one lag".into()));
            }
            let pts = stacked(obs, spec.lags);
            let km = kmeans(&pts, k, spec.kmeans_iters, rng)?;
            let inputs: Vec<DVector<f64>> = (0..obs.len()).map(|t| obs.lag_vector(t, spec.lags)).collect();
            let (a, q) = regress(obs.as_slice(), &inputs, &km.labels, k)?;
            ModelParams::Arhmm(ArhmmParams {
                phi: phi_from_labels(&km.labels, k, spec.dirichlet_alpha),
                a,
                psi_q: q.iter().map(linalg::factor_from_covariance).collect::<Result<_>>()?,
            })
        }
        Family::Slds => {
            let n = spec.latent_dim;
            let mut c = DMatrix::zeros(m, n);
            for i in 0..m.min(n) {
                c[(i, i)] = 1.0;
            }
            let nu_r = spec.wishart_nu.unwrap_or(m as f64 + 1.0);
            let psi_r = sample_wishart_factor(rng, m, nu_r, spec.wishart_scale.unwrap_or(nu_r))?;
            let (phi, a, psi_q) = if n <= m {
                let proxy: Vec<DVector<f64>> = obs.as_slice().iter().map(|y| y.rows(0, n).into_owned()).collect();
                let proxy = ObservationSequence::new(proxy)?;
                let pts = stacked(&proxy, 1);
                let km = kmeans(&pts, k, spec.kmeans_iters, rng)?;
                let inputs: Vec<DVector<f64>> = (0..proxy.len()).map(|t| proxy.lag_vector(t, 1)).collect();
                let (a, q) = regress(proxy.as_slice(), &inputs, &km.labels, k)?;
                let psi_q = q.iter().map(linalg::factor_from_covariance).collect::<Result<_>>()?;
                (phi_from_labels(&km.labels, k, spec.dirichlet_alpha), a, psi_q)
            } else {
                let km = kmeans(obs.as_slice(), k, spec.kmeans_iters, rng)?;
                (
                    phi_from_labels(&km.labels, k, spec.dirichlet_alpha),
                    vec![DMatrix::identity(n, n) * 0.5; k],
                    vec![DMatrix::identity(n, n); k],
                )
            };
            ModelParams::Slds(SldsParams { phi, a, psi_q, c, psi_r })
        }
        Family::Lgssm => {
            let n = spec.latent_dim;
            let nu_q = spec.wishart_nu.unwrap_or(n as f64 + 1.0);
            let nu_r = spec.wishart_nu.unwrap_or(m as f64 + 1.0);
            let psi_q = sample_wishart_factor(rng, n, nu_q, spec.wishart_scale.unwrap_or(nu_q))?;
            let psi_r = sample_wishart_factor(rng, m, nu_r, spec.wishart_scale.unwrap_or(nu_r))?;
            // A ~ MN(0, Q, v I): A = Q^{1/2} Z v^{1/2} with Q^{1/2} = psi^{-T}.
            let z = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = psi_q
                .tr_solve_lower_triangular(&z)
                .ok_or_else(|| Error::Numerical("singular precision factor".into()))?
                * spec.lgssm_a_col_var.sqrt();
            let mut c = DMatrix::zeros(m, n);
            for i in 0..m.min(n) {
                c[(i, i)] = 1.0;
            }
            ModelParams::Lgssm(LgssmParams { a, psi_q, c, psi_r })
        }
    };
    if spec.uniform_transition {
        let ones = DMatrix::from_element(k, k, 1.0);
        match &mut out {
            ModelParams::Hmm(p) => p.phi = ones,
            ModelParams::Arhmm(p) => p.phi = ones,
            ModelParams::Slds(p) => p.phi = ones,
            ModelParams::Lgssm(_) => {}
        }
    }
    out.validate()?;
    Ok(out)
}
