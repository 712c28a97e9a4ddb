//! Expected complete-data log-likelihood gradients, one time step at a time.
//!
//! Contributions are accumulated as constrained-space matrices shaped like
//! the parameter blocks and mapped to unconstrained coordinates by an
//! [`Encoder`].

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg;
use crate::models::{GaussianNoise, Layout, ModelParams};

/// Precomputed chain-rule map from block gradients to unconstrained coordinates.
pub(crate) struct Encoder {
    pub layout: Layout,
    entries: Vec<Vec<(usize, usize, bool)>>,
    values: Vec<DMatrix<f64>>,
}

impl Encoder {
    pub fn new(params: &ModelParams) -> Self {
        let layout = params.layout();
        let entries = layout.blocks.iter().map(|b| b.entries()).collect();
        Self { layout, entries, values: params.block_values() }
    }

    pub fn zeros(&self) -> Vec<DMatrix<f64>> {
        self.values.iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect()
    }

    pub fn encode(&self, grads: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim);
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            for (idx, &(i, j, log)) in self.entries[bi].iter().enumerate() {
                let g = grads[bi][(i, j)];
                out[b.offset + idx] = if log { g * self.values[bi][(i, j)] } else { g };
            }
        }
        out
    }
}

/// Noise objects and transition matrix shared by every step.
pub(crate) struct Prepared {
    pub pi: Option<DMatrix<f64>>,
    pub state_noise: Vec<GaussianNoise>,
    pub emission_noise: Option<GaussianNoise>,
}

impl Prepared {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let from = |f: &[DMatrix<f64>]| f.iter().map(GaussianNoise::from_factor).collect::<Result<Vec<_>>>();
        Ok(match params {
            ModelParams::Hmm(p) => Self { pi: params.transition(), state_noise: from(&p.psi)?, emission_noise: None },
            ModelParams::Arhmm(p) => Self { pi: params.transition(), state_noise: from(&p.psi_q)?, emission_noise: None },
            ModelParams::Lgssm(p) => Self {
                pi: None,
                state_noise: vec![GaussianNoise::from_factor(&p.psi_q)?],
                emission_noise: Some(GaussianNoise::from_factor(&p.psi_r)?),
            },
            ModelParams::Slds(p) => Self {
                pi: params.transition(),
                state_noise: from(&p.psi_q)?,
                emission_noise: Some(GaussianNoise::from_factor(&p.psi_r)?),
            },
        })
    }
}

/// `d/dphi` of `sum xi_ij ln Pi_ij`, stored in constrained form.
pub(crate) fn add_transition(phi: &DMatrix<f64>, pi: &DMatrix<f64>, xi: &DMatrix<f64>, w: f64, g: &mut DMatrix<f64>) {
    let k = phi.nrows();
    for i in 0..k {
        let row: f64 = xi.row(i).sum();
        if row == 0.0 {
            continue;
        }
        for j in 0..k {
            g[(i, j)] += w * (xi[(i, j)] - pi[(i, j)] * row) / phi[(i, j)];
        }
    }
}

/// Gaussian residual term `d/dmean` and `d/dpsi` for `y - mean` with second moment `ee`.
fn add_noise_factor(noise: &GaussianNoise, ee: &DMatrix<f64>, w: f64, g: &mut DMatrix<f64>) {
    *g += linalg::lower_part(&((&noise.cov - ee) * &noise.psi)) * w;
}

/// Dynamics `x_t = A x_{t-1} + N(0, Q)` given the second moment of `(x_{t-1}, x_t)`.
pub(crate) fn add_dynamics(
    a: &DMatrix<f64>,
    q: &GaussianNoise,
    m2: &DMatrix<f64>,
    w: f64,
    ga: &mut DMatrix<f64>,
    gq: &mut DMatrix<f64>,
) {
    let n = a.nrows();
    let mpp = m2.view((0, 0), (n, n));
    let mcp = m2.view((n, 0), (n, n));
    let mcc = m2.view((n, n), (n, n));
    let a_mpc = a * mcp.transpose();
    *ga += &q.prec * (mcp - a * mpp) * w;
    let ee = mcc - &a_mpc - a_mpc.transpose() + a * mpp * a.transpose();
    add_noise_factor(q, &linalg::symmetrize(&ee), w, gq);
}

/// Emission `y = C x + N(0, R)` given `E[x]` and `E[x x^T]`.
pub(crate) fn add_emission(
    c: &DMatrix<f64>,
    r: &GaussianNoise,
    y: &DVector<f64>,
    mean: &DVector<f64>,
    mxx: &DMatrix<f64>,
    w: f64,
    gc: &mut DMatrix<f64>,
    gr: &mut DMatrix<f64>,
) {
    let ymt = y * mean.transpose();
    *gc += &r.prec * (&ymt - c * mxx) * w;
    let cyt = c * ymt.transpose();
    let ee = y * y.transpose() - &cyt - cyt.transpose() + c * mxx * c.transpose();
    add_noise_factor(r, &linalg::symmetrize(&ee), w, gr);
}

/// Discrete-state emission term for a step with posterior `gamma`.
pub(crate) fn add_discrete_emission(
    params: &ModelParams,
    prep: &Prepared,
    y: &DVector<f64>,
    lag: Option<&DVector<f64>>,
    gamma: &DVector<f64>,
    w: f64,
    grads: &mut [DMatrix<f64>],
) {
    let k = gamma.len();
    for s in 0..k {
        let ws = w * gamma[s];
        if ws == 0.0 {
            continue;
        }
        let noise = &prep.state_noise[s];
        match params {
            ModelParams::Hmm(p) => {
                let e = y - &p.mu[s];
                grads[1 + s] += &noise.prec * &e * ws;
                add_noise_factor(noise, &(&e * e.transpose()), ws, &mut grads[1 + k + s]);
            }
            ModelParams::Arhmm(p) => {
                let lag = lag.expect("ARHMM steps carry a lag vector");
                let e = y - &p.a[s] * lag;
                grads[1 + s] += &noise.prec * &e * lag.transpose() * ws;
                add_noise_factor(noise, &(&e * e.transpose()), ws, &mut grads[1 + k + s]);
            }
            _ => unreachable!("discrete emission for a continuous family"),
        }
    }
}

/// Block indices of the SLDS layout.
pub(crate) struct SldsIdx {
    pub k: usize,
}

impl SldsIdx {
    pub fn a(&self, s: usize) -> usize {
        1 + s
    }
    pub fn q(&self, s: usize) -> usize {
        1 + self.k + s
    }
    pub fn c(&self) -> usize {
        1 + 2 * self.k
    }
    pub fn r(&self) -> usize {
        2 + 2 * self.k
    }
}

/// Stacked `[u; v]`.
pub(crate) fn stack(u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(u.len() + v.len());
    out.rows_mut(0, u.len()).copy_from(u);
    out.rows_mut(u.len(), v.len()).copy_from(v);
    out
}
