//! Forward-backward for a discrete chain with scaled messages.
//!
//! Messages are normalized every step; the per-step normalizers are the one-step
//! predictive log likelihoods. The state just before the window is drawn from
//! `p0` and moves into the first window step through the transition matrix.

use nalgebra::{DMatrix, DVector};

use rand::Rng;

use crate::error::{dim, Error, Result};
use crate::models::simulate::sample_categorical;

#[derive(Clone, Debug)]
pub struct DiscreteMessages {
    /// Filtered log marginals `ln Pr(z_j | y_{0..=j})` per window step.
    pub log_alpha: Vec<DVector<f64>>,
    /// Scaled backward log messages; `gamma_j = alpha_j * beta_j` up to normalization.
    pub log_beta: Vec<DVector<f64>>,
    /// `ln p(y_j | y_{<j})` per window step.
    pub log_norm: Vec<f64>,
    /// Smoothed marginals per window step.
    pub gamma: Vec<DVector<f64>>,
    /// `xi[j][(i, k)] = Pr(z_{j-1} = i, z_j = k | y)`; `j = 0` pairs with the state before the window.
    pub xi: Vec<DMatrix<f64>>,
}

impl DiscreteMessages {
    pub fn loglik(&self) -> f64 {
        self.log_norm.iter().sum()
    }
}

pub(crate) struct Filtered {
    pub alpha: Vec<DVector<f64>>,
    /// Per step: max log emission and scaled mass, so that `ln_norm = shift + ln(mass)`.
    pub shift: Vec<f64>,
    pub mass: Vec<f64>,
    /// Per step `exp(log_em - shift)`.
    pub scaled_em: Vec<DVector<f64>>,
}

fn check_inputs(log_em: &[DVector<f64>], pi: &DMatrix<f64>, p0: &DVector<f64>) -> Result<usize> {
    let k = pi.nrows();
    if pi.ncols() != k || p0.len() != k {
        return dim("transition matrix and p0 must agree in size");
    }
    if log_em.iter().any(|e| e.len() != k) {
        return dim("emission rows must have one entry per state");
    }
    Ok(k)
}

pub(crate) fn filter(log_em: &[DVector<f64>], pi: &DMatrix<f64>, p0: &DVector<f64>) -> Result<Filtered> {
    check_inputs(log_em, pi, p0)?;
    let l = log_em.len();
    let mut out = Filtered {
        alpha: Vec::with_capacity(l),
        shift: Vec::with_capacity(l),
        mass: Vec::with_capacity(l),
        scaled_em: Vec::with_capacity(l),
    };
    let mut pred = pi.tr_mul(p0);
    for (j, le) in log_em.iter().enumerate() {
        let shift = le.max();
        if !shift.is_finite() {
            return Err(Error::Numerical(format!("no state can emit observation at window step {j}")));
        }
        let em = le.map(|v| (v - shift).exp());
        let w = pred.component_mul(&em);
        let mass = w.sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Numerical(format!("zero predictive mass at window step {j}")));
        }
        let a = w / mass;
        pred = pi.tr_mul(&a);
        out.alpha.push(a);
        out.shift.push(shift);
        out.mass.push(mass);
        out.scaled_em.push(em);
    }
    Ok(out)
}

/// Filtered log marginals and one-step predictive log likelihoods.
pub fn hmm_forward(
    log_em: &[DVector<f64>],
    pi: &DMatrix<f64>,
    p0: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let f = filter(log_em, pi, p0)?;
    let norms = f.shift.iter().zip(&f.mass).map(|(s, m)| s + m.ln()).collect();
    Ok((f.alpha.iter().map(|a| a.map(f64::ln)).collect(), norms))
}

/// Full forward-backward over a window of emissions.
pub fn hmm_forward_backward(
    log_em: &[DVector<f64>],
    pi: &DMatrix<f64>,
    p0: &DVector<f64>,
) -> Result<DiscreteMessages> {
    let f = filter(log_em, pi, p0)?;
    let l = log_em.len();
    let k = pi.nrows();
    let mut beta = vec![DVector::from_element(k, 1.0); l];
    for j in (0..l.saturating_sub(1)).rev() {
        let next = f.scaled_em[j + 1].component_mul(&beta[j + 1]) / f.mass[j + 1];
        beta[j] = pi * next;
    }
    let mut gamma = Vec::with_capacity(l);
    let mut xi = Vec::with_capacity(l);
    for j in 0..l {
        let g = f.alpha[j].component_mul(&beta[j]);
        let s = g.sum();
        gamma.push(g / s);
        let prev = if j == 0 { p0 } else { &f.alpha[j - 1] };
        let right = f.scaled_em[j].component_mul(&beta[j]);
        let mut x = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                x[(a, b)] = prev[a] * pi[(a, b)] * right[b];
            }
        }
        let s = x.sum();
        if !(s > 0.0) {
            return Err(Error::Numerical(format!("degenerate pairwise marginal at window step {j}")));
        }
        xi.push(x / s);
    }
    Ok(DiscreteMessages {
        log_alpha: f.alpha.iter().map(|a| a.map(f64::ln)).collect(),
        log_beta: beta.iter().map(|b| b.map(f64::ln)).collect(),
        log_norm: f.shift.iter().zip(&f.mass).map(|(s, m)| s + m.ln()).collect(),
        gamma,
        xi,
    })
}

/// Draw a path from the window posterior: scaled backward messages, then forward
/// sampling. Returns the state before the window and the window states.
pub fn hmm_sample_path<R: Rng + ?Sized>(
    log_em: &[DVector<f64>],
    pi: &DMatrix<f64>,
    p0: &DVector<f64>,
    rng: &mut R,
) -> Result<(usize, Vec<usize>)> {
    let k = check_inputs(log_em, pi, p0)?;
    let l = log_em.len();
    let em: Vec<DVector<f64>> = log_em
        .iter()
        .map(|le| {
            let s = le.max();
            le.map(|v| (v - s).exp())
        })
        .collect();
    let mut beta = vec![DVector::from_element(k, 1.0); l];
    for j in (0..l.saturating_sub(1)).rev() {
        let b = pi * em[j + 1].component_mul(&beta[j + 1]);
        let s = b.sum();
        if !(s > 0.0) {
            return Err(Error::Numerical(format!("zero backward mass at window step {j}")));
        }
        beta[j] = b / s;
    }
    let mut z = Vec::with_capacity(l);
    let mut prior = pi.tr_mul(p0);
    for j in 0..l {
        let w = prior.component_mul(&em[j]).component_mul(&beta[j]);
        if !(w.sum() > 0.0) {
            return Err(Error::Numerical(format!("zero sampling mass at window step {j}")));
        }
        let s = sample_categorical(rng, w.as_slice());
        z.push(s);
        prior = pi.row(s).transpose();
    }
    let first = z.first().copied().unwrap_or(0);
    let back: Vec<f64> = (0..k).map(|i| p0[i] * pi[(i, first)]).collect();
    let z_prev = sample_categorical(rng, &back);
    Ok((z_prev, z))
}
