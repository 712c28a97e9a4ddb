//! Reference parameter sets used by the synthetic experiments.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use super::{ArhmmParams, GaussianHmmParams, LgssmParams, ModelParams, SldsParams};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTag {
    Arhmm,
    Lgssm,
    Slds,
    RcHmm,
}

impl FromStr for SyntheticTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "arhmm" => Ok(SyntheticTag::Arhmm),
            "lgssm" => Ok(SyntheticTag::Lgssm),
            "slds" => Ok(SyntheticTag::Slds),
            "rc_hmm" | "rc-hmm" | "rchmm" => Ok(SyntheticTag::RcHmm),
            other => Err(Error::Config(format!("unknown synthetic tag '{other}'"))),
        }
    }
}

pub fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

fn scaled_identity_factor(var: f64, n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) / var.sqrt()
}

pub fn synthetic_star(tag: SyntheticTag) -> ModelParams {
    match tag {
        SyntheticTag::Arhmm => ModelParams::Arhmm(ArhmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.9, 0.1]),
            a: vec![rotation(-PI / 4.0) * 0.9, rotation(PI / 4.0) * 0.9],
            psi_q: vec![scaled_identity_factor(0.1, 2), scaled_identity_factor(0.1, 2)],
        }),
        SyntheticTag::Lgssm => ModelParams::Lgssm(LgssmParams {
            a: rotation(PI / 4.0) * 0.7,
            psi_q: scaled_identity_factor(0.1, 2),
            c: DMatrix::identity(2, 2),
            psi_r: DMatrix::identity(2, 2),
        }),
        SyntheticTag::Slds => ModelParams::Slds(SldsParams {
            phi: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]),
            a: vec![rotation(-PI / 4.0) * 0.9, rotation(PI / 4.0) * 0.9],
            psi_q: vec![scaled_identity_factor(0.1, 2), scaled_identity_factor(0.1, 2)],
            c: DMatrix::identity(2, 2),
            psi_r: scaled_identity_factor(0.1, 2),
        }),
        SyntheticTag::RcHmm => rc_hmm(),
    }
}

/// Eight-state Gaussian HMM with two rare, strongly preferred transitions
/// (`0 -> 1` with probability 0.99 and `2 -> 0` with 0.85) and means on a circle.
fn rc_hmm() -> ModelParams {
    let k = 8;
    let mut pi = DMatrix::zeros(k, k);
    for i in 0..k {
        let (target, mass) = match i {
            0 => (1, 0.99),
            2 => (0, 0.85),
            _ => (i, 0.9),
        };
        for j in 0..k {
            pi[(i, j)] = if j == target { mass } else { (1.0 - mass) / (k - 1) as f64 };
        }
    }
    let mu = (0..k)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / k as f64;
            DVector::from_vec(vec![20.0 * th.cos(), 20.0 * th.sin()])
        })
        .collect();
    let psi = vec![scaled_identity_factor(20.0, 2); k];
    ModelParams::Hmm(GaussianHmmParams { phi: pi, mu, psi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_tags_validate() {
        for tag in [SyntheticTag::Arhmm, SyntheticTag::Lgssm, SyntheticTag::Slds, SyntheticTag::RcHmm] {
            synthetic_star(tag).validate().unwrap();
        }
    }

    #[test]
    fn rc_rows_are_stochastic() {
        let pi = synthetic_star(SyntheticTag::RcHmm).transition().unwrap();
        for r in pi.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!((pi[(0, 1)] - 0.99).abs() < 1e-12);
        assert!((pi[(2, 0)] - 0.85).abs() < 1e-12);
        assert!(pi.iter().all(|v| *v > 0.0));
    }
}
