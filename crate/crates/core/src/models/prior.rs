//! Conjugate-style priors and their log densities in unconstrained coordinates.
//!
//! * every `phi` entry is `Gamma(alpha, 1)`, so normalized rows are Dirichlet;
//! * mean and regression blocks are matrix normal with row covariance equal to
//!   the matching noise covariance and column covariance `v I`;
//! * every precision `psi psi^T` is Wishart with `nu` degrees of freedom and
//!   inverse scale `Psi`.
//!
//! Densities are reported up to additive constants that do not depend on the
//! parameters. The unconstrained density includes the Jacobians of
//! `P -> psi` and of the log transforms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{GradientVector, ModelParams};
use crate::error::{invalid, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub dirichlet_alpha: AlphaSpec,
    /// Every entry of the matrix-normal mean.
    pub matnormal_mean: f64,
    /// Column covariance is `matnormal_col_var * I`.
    pub matnormal_col_var: f64,
    /// Degrees of freedom; `None` means `dim + 1`.
    pub wishart_nu: Option<f64>,
    /// Inverse scale is `wishart_scale * I`; `None` means `nu * I`.
    pub wishart_scale: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            dirichlet_alpha: AlphaSpec::Scalar(1.0),
            matnormal_mean: 0.0,
            matnormal_col_var: 100.0,
            wishart_nu: None,
            wishart_scale: None,
        }
    }
}

impl PriorSpec {
    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        match &self.dirichlet_alpha {
            AlphaSpec::Scalar(a) => *a,
            AlphaSpec::Matrix(m) => m[i][j],
        }
    }

    pub fn nu(&self, dim: usize) -> f64 {
        self.wishart_nu.unwrap_or(dim as f64 + 1.0)
    }

    pub fn wishart_psi(&self, dim: usize) -> f64 {
        self.wishart_scale.unwrap_or_else(|| self.nu(dim))
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let k = params.num_states();
        match &self.dirichlet_alpha {
            AlphaSpec::Scalar(a) if !(*a > 0.0) => return invalid("dirichlet_alpha must be positive"),
            AlphaSpec::Matrix(m) => {
                if params.phi().is_some() && (m.len() != k || m.iter().any(|r| r.len() != k)) {
                    return invalid(format!("dirichlet_alpha must be {k}x{k}"));
                }
                if m.iter().flatten().any(|a| !(*a > 0.0)) {
                    return invalid("dirichlet_alpha entries must be positive");
                }
            }
            _ => {}
        }
        if !(self.matnormal_col_var > 0.0) || !self.matnormal_mean.is_finite() {
            return invalid("matrix-normal column variance must be positive");
        }
        for b in params.layout().blocks {
            if b.kind == super::BlockKind::Cholesky {
                let n = b.rows;
                if self.nu(n) < n as f64 + 1.0 {
                    return invalid(format!("wishart_nu must be at least {}", n + 1));
                }
                if !(self.wishart_psi(n) > 0.0) {
                    return invalid("wishart_scale must be positive");
                }
            }
        }
        Ok(())
    }
}

struct Accum {
    value: f64,
    grads: Vec<DMatrix<f64>>,
}

fn gamma_phi(prior: &PriorSpec, phi: &DMatrix<f64>, acc: &mut Accum, idx: usize) {
    for i in 0..phi.nrows() {
        for j in 0..phi.ncols() {
            let a = prior.alpha(i, j);
            let x = phi[(i, j)];
            acc.value += (a - 1.0) * x.ln() - x;
            acc.grads[idx][(i, j)] += (a - 1.0) / x - 1.0;
        }
    }
}

/// Matrix normal on `x` with row precision `psi psi^T` and column covariance `v I`.
fn matnormal(prior: &PriorSpec, x: &DMatrix<f64>, psi: &DMatrix<f64>, acc: &mut Accum, ix: usize, ipsi: usize) {
    let v = prior.matnormal_col_var;
    let d = x.map(|e| e - prior.matnormal_mean);
    let prec = linalg::precision_from_factor(psi);
    let pd = &prec * &d;
    acc.value += -0.5 * d.dot(&pd) / v + x.ncols() as f64 * linalg::half_log_det_factor(psi);
    acc.grads[ix] -= pd / v;
    let gpsi = -(&d * d.transpose() * psi) / v;
    acc.grads[ipsi] += linalg::lower_part(&gpsi);
    for i in 0..psi.nrows() {
        acc.grads[ipsi][(i, i)] += x.ncols() as f64 / psi[(i, i)];
    }
}

/// Wishart on `psi psi^T`, including the Jacobian of `P -> psi`.
fn wishart(prior: &PriorSpec, psi: &DMatrix<f64>, acc: &mut Accum, idx: usize) {
    let n = psi.nrows();
    let nu = prior.nu(n);
    let s = prior.wishart_psi(n);
    acc.value += -0.5 * s * psi.norm_squared();
    acc.grads[idx] -= linalg::lower_part(&(psi * s));
    for i in 0..n {
        let c = (nu - n as f64 - 1.0) + (n - i) as f64;
        acc.value += c * psi[(i, i)].ln();
        acc.grads[idx][(i, i)] += c / psi[(i, i)];
    }
}

/// Log prior density of the constrained coordinates and its gradient per block.
pub fn log_prior_constrained(params: &ModelParams, prior: &PriorSpec) -> Result<(f64, Vec<DMatrix<f64>>)> {
    prior.validate(params)?;
    let mut acc = Accum { value: 0.0, grads: params.zero_block_grads() };
    let layout = params.layout();
    let idx = |name: &str| layout.blocks.iter().position(|b| b.name == name).expect("block exists");
    match params {
        ModelParams::Hmm(p) => {
            gamma_phi(prior, &p.phi, &mut acc, 0);
            for k in 0..p.mu.len() {
                let mu = DMatrix::from_column_slice(p.mu[k].len(), 1, p.mu[k].as_slice());
                let (im, ip) = (idx(&format!("mu{k}")), idx(&format!("psi_sigma{k}")));
                matnormal(prior, &mu, &p.psi[k], &mut acc, im, ip);
                wishart(prior, &p.psi[k], &mut acc, ip);
            }
        }
        ModelParams::Arhmm(p) => {
            gamma_phi(prior, &p.phi, &mut acc, 0);
            for k in 0..p.a.len() {
                let (ia, iq) = (idx(&format!("A{k}")), idx(&format!("psi_Q{k}")));
                matnormal(prior, &p.a[k], &p.psi_q[k], &mut acc, ia, iq);
                wishart(prior, &p.psi_q[k], &mut acc, iq);
            }
        }
        ModelParams::Lgssm(p) => {
            let (ia, iq, ir) = (idx("A"), idx("psi_Q"), idx("psi_R"));
            matnormal(prior, &p.a, &p.psi_q, &mut acc, ia, iq);
            wishart(prior, &p.psi_q, &mut acc, iq);
            wishart(prior, &p.psi_r, &mut acc, ir);
        }
        ModelParams::Slds(p) => {
            gamma_phi(prior, &p.phi, &mut acc, 0);
            for k in 0..p.a.len() {
                let (ia, iq) = (idx(&format!("A{k}")), idx(&format!("psi_Q{k}")));
                matnormal(prior, &p.a[k], &p.psi_q[k], &mut acc, ia, iq);
                wishart(prior, &p.psi_q[k], &mut acc, iq);
            }
            wishart(prior, &p.psi_r, &mut acc, idx("psi_R"));
        }
    }
    Ok((acc.value, acc.grads))
}

/// Log prior density in unconstrained coordinates.
pub fn log_prior(params: &ModelParams, prior: &PriorSpec) -> Result<f64> {
    let (v, _) = log_prior_constrained(params, prior)?;
    let u = params.to_unconstrained();
    let jac: f64 = u.iter().zip(params.layout().log_mask()).filter(|(_, l)| *l).map(|(x, _)| x).sum();
    Ok(v + jac)
}

/// Gradient of [`log_prior`] in unconstrained coordinates.
pub fn log_prior_grad(params: &ModelParams, prior: &PriorSpec) -> Result<GradientVector> {
    let (_, grads) = log_prior_constrained(params, prior)?;
    let mut g = params.encode_gradient(&grads);
    for (i, l) in g.layout.log_mask().into_iter().enumerate() {
        if l {
            g.values[i] += 1.0;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LgssmParams, GaussianHmmParams};
    use nalgebra::DVector;

    fn fd_check(p: &ModelParams, prior: &PriorSpec) {
        let g = log_prior_grad(p, prior).unwrap();
        let u = p.to_unconstrained();
        for i in 0..u.len() {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fp = log_prior(&p.from_unconstrained(&up).unwrap(), prior).unwrap();
            let fm = log_prior(&p.from_unconstrained(&dn).unwrap(), prior).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.values[i]).abs() < 1e-5 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn phi_derivative_with_unit_alpha() {
        let p = ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            mu: vec![DVector::zeros(1), DVector::zeros(1)],
            psi: vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        });
        let (_, g) = log_prior_constrained(&p, &PriorSpec::default()).unwrap();
        assert!(g[0].iter().all(|v| (*v + 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_regression_has_zero_gradient() {
        let p = ModelParams::Lgssm(LgssmParams {
            a: DMatrix::zeros(2, 2),
            psi_q: DMatrix::identity(2, 2) * 2.0,
            c: DMatrix::identity(2, 2),
            psi_r: DMatrix::identity(2, 2),
        });
        let (_, g) = log_prior_constrained(&p, &PriorSpec::default()).unwrap();
        assert!(g[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[1.5, 2.0, 0.3, 4.0]),
            mu: vec![DVector::from_vec(vec![0.3, -1.0]), DVector::from_vec(vec![2.0, 0.5])],
            psi: vec![
                DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.4, 0.8]),
                DMatrix::from_row_slice(2, 2, &[0.7, 0.0, -0.2, 1.1]),
            ],
        });
        fd_check(&p, &PriorSpec::default());
        let prior = PriorSpec {
            dirichlet_alpha: AlphaSpec::Scalar(2.5),
            matnormal_mean: 0.2,
            matnormal_col_var: 3.0,
            wishart_nu: Some(5.0),
            wishart_scale: Some(1.5),
        };
        fd_check(&p, &prior);
        let l = ModelParams::Lgssm(LgssmParams {
            a: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]),
            psi_q: DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.4, 0.8]),
            c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.4, -0.3]),
            psi_r: DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.1, 0.9, 0.0, 0.2, 0.3, 1.4]),
        });
        fd_check(&l, &prior);
    }

    #[test]
    fn invalid_nu_rejected() {
        let p = ModelParams::Lgssm(LgssmParams {
            a: DMatrix::zeros(2, 2),
            psi_q: DMatrix::identity(2, 2),
            c: DMatrix::identity(2, 2),
            psi_r: DMatrix::identity(2, 2),
        });
        let prior = PriorSpec { wishart_nu: Some(2.0), ..Default::default() };
        assert!(log_prior(&p, &prior).is_err());
    }
}
