//! Model families, parameter containers and the unconstrained parameterization.
//!
//! Each family stores constrained parameters: `phi` (positive expanded means of
//! the transition rows), free mean/regression matrices and lower Cholesky
//! factors `psi` of precisions (`psi psi^T = Sigma^{-1}`). Samplers work in an
//! unconstrained vector obtained by taking logs of `phi` and of the `psi`
//! diagonals; everything else passes through unchanged.

pub mod init;
pub mod io;
pub mod prior;
pub(crate) mod serde_mat;
pub mod simulate;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Hmm,
    Arhmm,
    Lgssm,
    Slds,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Hmm => "hmm",
            Family::Arhmm => "arhmm",
            Family::Lgssm => "lgssm",
            Family::Slds => "slds",
        }
    }

    pub fn has_discrete_states(self) -> bool {
        !matches!(self, Family::Lgssm)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hmm" | "gaussian_hmm" => Ok(Family::Hmm),
            "arhmm" => Ok(Family::Arhmm),
            "lgssm" => Ok(Family::Lgssm),
            "slds" => Ok(Family::Slds),
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// Gaussian emission HMM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHmmParams {
    #[serde(with = "serde_mat::mat")]
    pub phi: DMatrix<f64>,
    #[serde(with = "serde_mat::vecs")]
    pub mu: Vec<DVector<f64>>,
    #[serde(with = "serde_mat::mats")]
    pub psi: Vec<DMatrix<f64>>,
}

/// Autoregressive HMM of order `p`; each `a[k]` is `m x (m p)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArhmmParams {
    #[serde(with = "serde_mat::mat")]
    pub phi: DMatrix<f64>,
    #[serde(with = "serde_mat::mats")]
    pub a: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::mats")]
    pub psi_q: Vec<DMatrix<f64>>,
}

/// Linear Gaussian state space model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    #[serde(with = "serde_mat::mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub psi_q: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub psi_r: DMatrix<f64>,
}

/// Switching linear dynamical system with shared emission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SldsParams {
    #[serde(with = "serde_mat::mat")]
    pub phi: DMatrix<f64>,
    #[serde(with = "serde_mat::mats")]
    pub a: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::mats")]
    pub psi_q: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub psi_r: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelParams {
    Hmm(GaussianHmmParams),
    Arhmm(ArhmmParams),
    Lgssm(LgssmParams),
    Slds(SldsParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Every entry positive, unconstrained by `log`.
    Positive,
    /// Every entry free.
    Free,
    /// Lower-triangular factor with positive diagonal; `log` on the diagonal.
    Cholesky,
    /// Free entries outside a frozen leading `frozen x frozen` identity block.
    Masked { frozen: usize },
}

impl BlockKind {
    /// Coordinates of the block in column-major order, with a flag marking log-transformed entries.
    pub fn entries(self, rows: usize, cols: usize) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        for j in 0..cols {
            for i in 0..rows {
                match self {
                    BlockKind::Positive => out.push((i, j, true)),
                    BlockKind::Free => out.push((i, j, false)),
                    BlockKind::Cholesky => {
                        if i >= j {
                            out.push((i, j, i == j));
                        }
                    }
                    BlockKind::Masked { frozen } => {
                        if !(i < frozen && j < frozen) {
                            out.push((i, j, false));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockGroup {
    Pi,
    Mu,
    Sigma,
    A,
    Q,
    C,
    R,
}

impl BlockGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockGroup::Pi => "pi",
            BlockGroup::Mu => "mu",
            BlockGroup::Sigma => "sigma",
            BlockGroup::A => "A",
            BlockGroup::Q => "Q",
            BlockGroup::C => "C",
            BlockGroup::R => "R",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub group: BlockGroup,
    pub kind: BlockKind,
    pub state: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

impl BlockInfo {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn entries(&self) -> Vec<(usize, usize, bool)> {
        self.kind.entries(self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub blocks: Vec<BlockInfo>,
    pub dim: usize,
}

impl Layout {
    pub fn block(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Per coordinate: is it a log-transformed entry.
    pub fn log_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            out.extend(b.entries().into_iter().map(|e| e.2));
        }
        out
    }

    /// Per coordinate column names of the form `block_i_j`.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            for (i, j, _) in b.entries() {
                out.push(format!("{}_{}_{}", b.name, i, j));
            }
        }
        out
    }
}

/// A vector in the unconstrained coordinates together with its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub layout: Layout,
    pub values: DVector<f64>,
}

impl GradientVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = DVector::zeros(layout.dim);
        Self { layout, values }
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let b = self.layout.block(name)?;
        Some(&self.values.as_slice()[b.range()])
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        self.values += &other.values;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.values *= s;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Row-normalize `phi` into a transition matrix.
pub fn transition_from_phi(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pi = phi.clone();
    for mut row in pi.row_iter_mut() {
        let s: f64 = row.sum();
        row /= s;
    }
    pi
}

/// A constrained block as `(name, group, kind, state, value)`.
type RawBlock = (String, BlockGroup, BlockKind, Option<usize>, DMatrix<f64>);

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn check_phi(phi: &DMatrix<f64>) -> Result<usize> {
    let k = phi.nrows();
    if k == 0 || phi.ncols() != k {
        return dim(format!("phi must be square and non-empty, got {}x{}", k, phi.ncols()));
    }
    if phi.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return invalid("phi entries must be finite and positive");
    }
    Ok(k)
}

fn check_factor(psi: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if psi.nrows() != n || psi.ncols() != n {
        return dim(format!("{what} must be {n}x{n}, got {}x{}", psi.nrows(), psi.ncols()));
    }
    for j in 0..n {
        for i in 0..n {
            let v = psi[(i, j)];
            if !v.is_finite() {
                return invalid(format!("{what} has a non-finite entry"));
            }
            if i < j && v != 0.0 {
                return invalid(format!("{what} must be lower triangular"));
            }
            if i == j && v <= 0.0 {
                return invalid(format!("{what} must have a positive diagonal"));
            }
        }
    }
    Ok(())
}

fn check_emission_c(c: &DMatrix<f64>, m: usize, n: usize) -> Result<()> {
    if c.nrows() != m || c.ncols() != n {
        return dim(format!("C must be {m}x{n}, got {}x{}", c.nrows(), c.ncols()));
    }
    let k = m.min(n);
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 1.0 } else { 0.0 };
            if c[(i, j)] != want {
                return invalid("leading block of C must be the identity");
            }
        }
    }
    if c.iter().any(|v| !v.is_finite()) {
        return invalid("C has a non-finite entry");
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{what} has a non-finite entry"));
    }
    Ok(())
}

impl ModelParams {
    pub fn family(&self) -> Family {
        match self {
            ModelParams::Hmm(_) => Family::Hmm,
            ModelParams::Arhmm(_) => Family::Arhmm,
            ModelParams::Lgssm(_) => Family::Lgssm,
            ModelParams::Slds(_) => Family::Slds,
        }
    }

    /// Number of discrete states (1 for the LGSSM).
    pub fn num_states(&self) -> usize {
        match self {
            ModelParams::Hmm(p) => p.phi.nrows(),
            ModelParams::Arhmm(p) => p.phi.nrows(),
            ModelParams::Lgssm(_) => 1,
            ModelParams::Slds(p) => p.phi.nrows(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ModelParams::Hmm(p) => p.psi[0].nrows(),
            ModelParams::Arhmm(p) => p.psi_q[0].nrows(),
            ModelParams::Lgssm(p) => p.c.nrows(),
            ModelParams::Slds(p) => p.c.nrows(),
        }
    }

    /// Continuous latent dimension, if any.
    pub fn latent_dim(&self) -> Option<usize> {
        match self {
            ModelParams::Lgssm(p) => Some(p.a.nrows()),
            ModelParams::Slds(p) => Some(p.a[0].nrows()),
            _ => None,
        }
    }

    /// Autoregressive order (0 for families without lags).
    pub fn lags(&self) -> usize {
        match self {
            ModelParams::Arhmm(p) => p.a[0].ncols() / p.a[0].nrows(),
            _ => 0,
        }
    }

    pub fn phi(&self) -> Option<&DMatrix<f64>> {
        match self {
            ModelParams::Hmm(p) => Some(&p.phi),
            ModelParams::Arhmm(p) => Some(&p.phi),
            ModelParams::Slds(p) => Some(&p.phi),
            ModelParams::Lgssm(_) => None,
        }
    }

    /// Row-stochastic transition matrix for families with discrete states.
    pub fn transition(&self) -> Option<DMatrix<f64>> {
        self.phi().map(transition_from_phi)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Hmm(p) => {
                let k = check_phi(&p.phi)?;
                if p.mu.len() != k || p.psi.len() != k {
                    return dim(format!("expected {k} emission blocks"));
                }
                let m = p.mu[0].len();
                if m == 0 {
                    return dim("observation dimension must be positive");
                }
                for (mu, psi) in p.mu.iter().zip(&p.psi) {
                    if mu.len() != m {
                        return dim("emission means must share one dimension");
                    }
                    check_finite(&col(mu), "mu")?;
                    check_factor(psi, m, "psi")?;
                }
            }
            ModelParams::Arhmm(p) => {
                let k = check_phi(&p.phi)?;
                if p.a.len() != k || p.psi_q.len() != k {
                    return dim(format!("expected {k} autoregressive blocks"));
                }
                let m = p.psi_q[0].nrows();
                if m == 0 || p.a[0].ncols() == 0 || p.a[0].ncols() % m != 0 {
                    return dim("A blocks must be m x (m p) with p >= 1");
                }
                let cols = p.a[0].ncols();
                for (a, q) in p.a.iter().zip(&p.psi_q) {
                    if a.nrows() != m || a.ncols() != cols {
                        return dim(format!("A blocks must be {m}x{cols}"));
                    }
                    check_finite(a, "A")?;
                    check_factor(q, m, "psi_Q")?;
                }
            }
            ModelParams::Lgssm(p) => {
                let n = p.a.nrows();
                if n == 0 || p.a.ncols() != n {
                    return dim("A must be square and non-empty");
                }
                check_finite(&p.a, "A")?;
                check_factor(&p.psi_q, n, "psi_Q")?;
                let m = p.c.nrows();
                check_emission_c(&p.c, m, n)?;
                check_factor(&p.psi_r, m, "psi_R")?;
            }
            ModelParams::Slds(p) => {
                let k = check_phi(&p.phi)?;
                if p.a.len() != k || p.psi_q.len() != k {
                    return dim(format!("expected {k} dynamics blocks"));
                }
                let n = p.a[0].nrows();
                if n == 0 {
                    return dim("latent dimension must be positive");
                }
                for (a, q) in p.a.iter().zip(&p.psi_q) {
                    if a.nrows() != n || a.ncols() != n {
                        return dim(format!("A blocks must be {n}x{n}"));
                    }
                    check_finite(a, "A")?;
                    check_factor(q, n, "psi_Q")?;
                }
                let m = p.c.nrows();
                check_emission_c(&p.c, m, n)?;
                check_factor(&p.psi_r, m, "psi_R")?;
            }
        }
        Ok(())
    }

    fn raw_blocks(&self) -> Vec<RawBlock> {
        let mut out: Vec<RawBlock> = Vec::new();
        let phi_block = |phi: &DMatrix<f64>| -> RawBlock {
            ("phi".into(), BlockGroup::Pi, BlockKind::Positive, None, phi.clone())
        };
        match self {
            ModelParams::Hmm(p) => {
                out.push(phi_block(&p.phi));
                for (k, mu) in p.mu.iter().enumerate() {
                    out.push((format!("mu{k}"), BlockGroup::Mu, BlockKind::Free, Some(k), col(mu)));
                }
                for (k, psi) in p.psi.iter().enumerate() {
                    out.push((format!("psi_sigma{k}"), BlockGroup::Sigma, BlockKind::Cholesky, Some(k), psi.clone()));
                }
            }
            ModelParams::Arhmm(p) => {
                out.push(phi_block(&p.phi));
                for (k, a) in p.a.iter().enumerate() {
                    out.push((format!("A{k}"), BlockGroup::A, BlockKind::Free, Some(k), a.clone()));
                }
                for (k, q) in p.psi_q.iter().enumerate() {
                    out.push((format!("psi_Q{k}"), BlockGroup::Q, BlockKind::Cholesky, Some(k), q.clone()));
                }
            }
            ModelParams::Lgssm(p) => {
                let frozen = p.c.nrows().min(p.c.ncols());
                out.push(("A".into(), BlockGroup::A, BlockKind::Free, None, p.a.clone()));
                out.push(("psi_Q".into(), BlockGroup::Q, BlockKind::Cholesky, None, p.psi_q.clone()));
                out.push(("C".into(), BlockGroup::C, BlockKind::Masked { frozen }, None, p.c.clone()));
                out.push(("psi_R".into(), BlockGroup::R, BlockKind::Cholesky, None, p.psi_r.clone()));
            }
            ModelParams::Slds(p) => {
                let frozen = p.c.nrows().min(p.c.ncols());
                out.push(phi_block(&p.phi));
                for (k, a) in p.a.iter().enumerate() {
                    out.push((format!("A{k}"), BlockGroup::A, BlockKind::Free, Some(k), a.clone()));
                }
                for (k, q) in p.psi_q.iter().enumerate() {
                    out.push((format!("psi_Q{k}"), BlockGroup::Q, BlockKind::Cholesky, Some(k), q.clone()));
                }
                out.push(("C".into(), BlockGroup::C, BlockKind::Masked { frozen }, None, p.c.clone()));
                out.push(("psi_R".into(), BlockGroup::R, BlockKind::Cholesky, None, p.psi_r.clone()));
            }
        }
        out
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, group, kind, state, value) in self.raw_blocks() {
            let len = kind.entries(value.nrows(), value.ncols()).len();
            blocks.push(BlockInfo {
                name,
                group,
                kind,
                state,
                rows: value.nrows(),
                cols: value.ncols(),
                offset,
                len,
            });
            offset += len;
        }
        Layout { blocks, dim: offset }
    }

    /// Constrained block matrices in layout order (`mu` blocks are columns).
    pub fn block_values(&self) -> Vec<DMatrix<f64>> {
        self.raw_blocks().into_iter().map(|b| b.4).collect()
    }

    /// Rebuild parameters of the same shape from block matrices in layout order.
    pub fn with_block_values(&self, vals: Vec<DMatrix<f64>>) -> Result<Self> {
        let expected = self.layout().blocks.len();
        if vals.len() != expected {
            return dim(format!("expected {expected} blocks, got {}", vals.len()));
        }
        let mut it = vals.into_iter();
        let mut next = || it.next().expect("block count checked");
        let out = match self {
            ModelParams::Hmm(p) => {
                let k = p.mu.len();
                let phi = next();
                let mu = (0..k).map(|_| next().column(0).into_owned()).collect();
                let psi = (0..k).map(|_| next()).collect();
                ModelParams::Hmm(GaussianHmmParams { phi, mu, psi })
            }
            ModelParams::Arhmm(p) => {
                let k = p.a.len();
                let phi = next();
                let a = (0..k).map(|_| next()).collect();
                let psi_q = (0..k).map(|_| next()).collect();
                ModelParams::Arhmm(ArhmmParams { phi, a, psi_q })
            }
            ModelParams::Lgssm(_) => ModelParams::Lgssm(LgssmParams {
                a: next(),
                psi_q: next(),
                c: next(),
                psi_r: next(),
            }),
            ModelParams::Slds(p) => {
                let k = p.a.len();
                let phi = next();
                let a = (0..k).map(|_| next()).collect();
                let psi_q = (0..k).map(|_| next()).collect();
                ModelParams::Slds(SldsParams { phi, a, psi_q, c: next(), psi_r: next() })
            }
        };
        out.validate()?;
        Ok(out)
    }

    /// Constrained coordinates in layout order.
    pub fn constrained_vector(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for (_, _, kind, _, v) in self.raw_blocks() {
            for (i, j, _) in kind.entries(v.nrows(), v.ncols()) {
                out.push(v[(i, j)]);
            }
        }
        DVector::from_vec(out)
    }

    /// Rebuild from constrained coordinates in layout order.
    pub fn from_constrained_vector(&self, c: &[f64]) -> Result<Self> {
        let layout = self.layout();
        if c.len() != layout.dim {
            return dim(format!("expected {} coordinates, got {}", layout.dim, c.len()));
        }
        let mut vals = self.block_values();
        for (b, v) in layout.blocks.iter().zip(vals.iter_mut()) {
            for ((i, j, _), x) in b.entries().into_iter().zip(&c[b.range()]) {
                v[(i, j)] = *x;
            }
        }
        self.with_block_values(vals)
    }

    pub fn to_unconstrained(&self) -> DVector<f64> {
        let mask = self.layout().log_mask();
        let c = self.constrained_vector();
        DVector::from_iterator(c.len(), c.iter().zip(mask).map(|(v, l)| if l { v.ln() } else { *v }))
    }

    pub fn from_unconstrained(&self, u: &DVector<f64>) -> Result<Self> {
        let mask = self.layout().log_mask();
        if u.len() != mask.len() {
            return dim(format!("expected {} coordinates, got {}", mask.len(), u.len()));
        }
        let c: Vec<f64> = u.iter().zip(mask).map(|(v, l)| if l { v.exp() } else { *v }).collect();
        self.from_constrained_vector(&c)
    }

    /// `dc/du` per coordinate: the constrained value for log entries, 1 otherwise.
    pub fn chain_factors(&self) -> DVector<f64> {
        let mask = self.layout().log_mask();
        let c = self.constrained_vector();
        DVector::from_iterator(c.len(), c.iter().zip(mask).map(|(v, l)| if l { *v } else { 1.0 }))
    }

    /// Map per-block constrained gradients (matrices shaped like the blocks) to unconstrained coordinates.
    pub fn encode_gradient(&self, grads: &[DMatrix<f64>]) -> GradientVector {
        let layout = self.layout();
        let vals = self.block_values();
        let mut out = DVector::zeros(layout.dim);
        for ((b, g), v) in layout.blocks.iter().zip(grads).zip(&vals) {
            for (idx, (i, j, log)) in b.entries().into_iter().enumerate() {
                let x = g[(i, j)];
                out[b.offset + idx] = if log { x * v[(i, j)] } else { x };
            }
        }
        GradientVector { layout, values: out }
    }

    /// Zero constrained gradient matrices shaped like the blocks.
    pub fn zero_block_grads(&self) -> Vec<DMatrix<f64>> {
        self.block_values()
            .iter()
            .map(|v| DMatrix::zeros(v.nrows(), v.ncols()))
            .collect()
    }

    /// Natural parameters: transition matrix, means, covariances and regression matrices.
    pub fn natural_blocks(&self) -> Result<Vec<(String, BlockGroup, DMatrix<f64>)>> {
        let mut out = Vec::new();
        if let Some(pi) = self.transition() {
            out.push(("Pi".to_string(), BlockGroup::Pi, pi));
        }
        match self {
            ModelParams::Hmm(p) => {
                for (k, mu) in p.mu.iter().enumerate() {
                    out.push((format!("mu{k}"), BlockGroup::Mu, col(mu)));
                }
                for (k, psi) in p.psi.iter().enumerate() {
                    out.push((format!("Sigma{k}"), BlockGroup::Sigma, linalg::covariance_from_factor(psi)?));
                }
            }
            ModelParams::Arhmm(p) => {
                for (k, a) in p.a.iter().enumerate() {
                    out.push((format!("A{k}"), BlockGroup::A, a.clone()));
                }
                for (k, q) in p.psi_q.iter().enumerate() {
                    out.push((format!("Q{k}"), BlockGroup::Q, linalg::covariance_from_factor(q)?));
                }
            }
            ModelParams::Lgssm(p) => {
                out.push(("A".into(), BlockGroup::A, p.a.clone()));
                out.push(("Q".into(), BlockGroup::Q, linalg::covariance_from_factor(&p.psi_q)?));
                out.push(("C".into(), BlockGroup::C, p.c.clone()));
                out.push(("R".into(), BlockGroup::R, linalg::covariance_from_factor(&p.psi_r)?));
            }
            ModelParams::Slds(p) => {
                for (k, a) in p.a.iter().enumerate() {
                    out.push((format!("A{k}"), BlockGroup::A, a.clone()));
                }
                for (k, q) in p.psi_q.iter().enumerate() {
                    out.push((format!("Q{k}"), BlockGroup::Q, linalg::covariance_from_factor(q)?));
                }
                out.push(("C".into(), BlockGroup::C, p.c.clone()));
                out.push(("R".into(), BlockGroup::R, linalg::covariance_from_factor(&p.psi_r)?));
            }
        }
        Ok(out)
    }

    /// Inverse of [`natural_blocks`](Self::natural_blocks): build parameters of the same
    /// shape from natural blocks. `phi` is set to the transition matrix itself.
    pub fn from_natural_blocks(&self, nat: &[DMatrix<f64>]) -> Result<Self> {
        let mut it = nat.iter();
        let mut next = || {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Dimension("too few natural blocks".into()))
        };
        let fac = |m: DMatrix<f64>| linalg::factor_from_covariance(&m);
        let out = match self {
            ModelParams::Hmm(p) => {
                let k = p.mu.len();
                let phi = next()?;
                let mut mu = Vec::with_capacity(k);
                for _ in 0..k {
                    mu.push(next()?.column(0).into_owned());
                }
                let mut psi = Vec::with_capacity(k);
                for _ in 0..k {
                    psi.push(fac(next()?)?);
                }
                ModelParams::Hmm(GaussianHmmParams { phi, mu, psi })
            }
            ModelParams::Arhmm(p) => {
                let k = p.a.len();
                let phi = next()?;
                let mut a = Vec::with_capacity(k);
                for _ in 0..k {
                    a.push(next()?);
                }
                let mut psi_q = Vec::with_capacity(k);
                for _ in 0..k {
                    psi_q.push(fac(next()?)?);
                }
                ModelParams::Arhmm(ArhmmParams { phi, a, psi_q })
            }
            ModelParams::Lgssm(_) => ModelParams::Lgssm(LgssmParams {
                a: next()?,
                psi_q: fac(next()?)?,
                c: next()?,
                psi_r: fac(next()?)?,
            }),
            ModelParams::Slds(p) => {
                let k = p.a.len();
                let phi = next()?;
                let mut a = Vec::with_capacity(k);
                for _ in 0..k {
                    a.push(next()?);
                }
                let mut psi_q = Vec::with_capacity(k);
                for _ in 0..k {
                    psi_q.push(fac(next()?)?);
                }
                ModelParams::Slds(SldsParams { phi, a, psi_q, c: next()?, psi_r: fac(next()?)? })
            }
        };
        out.validate()?;
        Ok(out)
    }

    /// Relabel discrete states: new state `i` takes the parameters of old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let phi_p = |phi: &DMatrix<f64>| {
            DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[(perm[i], perm[j])])
        };
        fn pick<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
            perm.iter().map(|&k| v[k].clone()).collect()
        }
        match self {
            ModelParams::Hmm(p) => ModelParams::Hmm(GaussianHmmParams {
                phi: phi_p(&p.phi),
                mu: pick(&p.mu, perm),
                psi: pick(&p.psi, perm),
            }),
            ModelParams::Arhmm(p) => ModelParams::Arhmm(ArhmmParams {
                phi: phi_p(&p.phi),
                a: pick(&p.a, perm),
                psi_q: pick(&p.psi_q, perm),
            }),
            ModelParams::Lgssm(p) => ModelParams::Lgssm(p.clone()),
            ModelParams::Slds(p) => ModelParams::Slds(SldsParams {
                phi: phi_p(&p.phi),
                a: pick(&p.a, perm),
                psi_q: pick(&p.psi_q, perm),
                c: p.c.clone(),
                psi_r: p.psi_r.clone(),
            }),
        }
    }
}

/// Precision, covariance and half log-determinant of a precision factor.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    pub psi: DMatrix<f64>,
    pub prec: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub half_log_det_prec: f64,
}

impl GaussianNoise {
    pub fn from_factor(psi: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            psi: psi.clone(),
            prec: linalg::precision_from_factor(psi),
            cov: linalg::covariance_from_factor(psi)?,
            half_log_det_prec: linalg::half_log_det_factor(psi),
        })
    }

    pub fn logpdf(&self, y: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        linalg::mvn_logpdf_factor(y, mean, &self.psi)
    }
}

/// Observations `y_0..y_{T-1}`, all of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    data: Vec<DVector<f64>>,
}

impl ObservationSequence {
    pub fn new(data: Vec<DVector<f64>>) -> Result<Self> {
        if let Some(first) = data.first() {
            let m = first.len();
            if m == 0 {
                return dim("observations must have positive dimension");
            }
            for (t, y) in data.iter().enumerate() {
                if y.len() != m {
                    return dim(format!("observation {t} has dimension {} not {m}", y.len()));
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!("observation {t} is not finite")));
                }
            }
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.first().map_or(0, |y| y.len())
    }

    pub fn y(&self, t: usize) -> &DVector<f64> {
        &self.data[t]
    }

    pub fn as_slice(&self) -> &[DVector<f64>] {
        &self.data
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { data: self.data[start..end].to_vec() }
    }

    /// Lag vector `[y_{t-1}; ...; y_{t-p}]`, zero-padded before the start.
    pub fn lag_vector(&self, t: usize, p: usize) -> DVector<f64> {
        let m = self.dim();
        let mut out = DVector::zeros(m * p);
        for i in 1..=p {
            if t >= i {
                out.rows_mut((i - 1) * m, m).copy_from(&self.data[t - i]);
            }
        }
        out
    }

    pub fn check_dim(&self, m: usize) -> Result<()> {
        if !self.is_empty() && self.dim() != m {
            return dim(format!("observations have dimension {} but the model expects {m}", self.dim()));
        }
        Ok(())
    }
}

/// Distribution of the latent state immediately before the first modeled step.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialDist {
    Discrete(DVector<f64>),
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    Switching { probs: DVector<f64>, mean: DVector<f64>, cov: DMatrix<f64> },
}

impl InitialDist {
    /// Stationary choice: the stationary distribution of the transition matrix and/or
    /// the zero-mean steady-state covariance of the dynamics (`10 I` if unstable).
    pub fn stationary(params: &ModelParams) -> Result<Self> {
        match params {
            ModelParams::Hmm(_) | ModelParams::Arhmm(_) => {
                Ok(InitialDist::Discrete(stationary_distribution(&params.transition().unwrap())))
            }
            ModelParams::Lgssm(p) => {
                let q = linalg::covariance_from_factor(&p.psi_q)?;
                let n = p.a.nrows();
                let cov = linalg::stationary_covariance(&p.a, &q)
                    .unwrap_or_else(|| DMatrix::identity(n, n) * 10.0);
                Ok(InitialDist::Gaussian { mean: DVector::zeros(n), cov })
            }
            ModelParams::Slds(p) => {
                let probs = stationary_distribution(&transition_from_phi(&p.phi));
                let n = p.a[0].nrows();
                let qs = p
                    .psi_q
                    .iter()
                    .map(linalg::covariance_from_factor)
                    .collect::<Result<Vec<_>>>()?;
                let cov = mixture_stationary_covariance(&probs, &p.a, &qs)
                    .unwrap_or_else(|| DMatrix::identity(n, n) * 10.0);
                Ok(InitialDist::Switching { probs, mean: DVector::zeros(n), cov })
            }
        }
    }

    pub fn probs(&self) -> Option<&DVector<f64>> {
        match self {
            InitialDist::Discrete(p) => Some(p),
            InitialDist::Switching { probs, .. } => Some(probs),
            InitialDist::Gaussian { .. } => None,
        }
    }

    pub fn gaussian(&self) -> Option<(&DVector<f64>, &DMatrix<f64>)> {
        match self {
            InitialDist::Gaussian { mean, cov } | InitialDist::Switching { mean, cov, .. } => {
                Some((mean, cov))
            }
            InitialDist::Discrete(_) => None,
        }
    }
}

/// Stationary distribution by power iteration on the lazy chain `(I + Pi)/2`.
pub fn stationary_distribution(pi: &DMatrix<f64>) -> DVector<f64> {
    let k = pi.nrows();
    let mut p = DVector::from_element(k, 1.0 / k as f64);
    for _ in 0..1_000_000 {
        let next = (&p + pi.tr_mul(&p)) * 0.5;
        let next = &next / next.sum();
        let diff = (&next - &p).amax();
        p = next;
        if diff < 1e-12 {
            break;
        }
    }
    p
}

/// Fixed point of `V = sum_k w_k (Q_k + A_k V A_k^T)`, if the iteration is contractive.
fn mixture_stationary_covariance(
    w: &DVector<f64>,
    a: &[DMatrix<f64>],
    q: &[DMatrix<f64>],
) -> Option<DMatrix<f64>> {
    let n = a[0].nrows();
    let mut op = DMatrix::zeros(n * n, n * n);
    for (k, ak) in a.iter().enumerate() {
        op += ak.kronecker(ak) * w[k];
    }
    if linalg::spectral_radius(&op) >= 1.0 {
        return None;
    }
    let qbar = q.iter().zip(w.iter()).fold(DMatrix::zeros(n, n), |acc, (qk, wk)| acc + qk * *wk);
    let mut v = qbar.clone();
    for _ in 0..100_000 {
        let mut next = qbar.clone();
        for (k, ak) in a.iter().enumerate() {
            next += ak * &v * ak.transpose() * w[k];
        }
        let next = linalg::symmetrize(&next);
        let diff = (&next - &v).amax();
        v = next;
        if diff <= 1e-14 * v.amax().max(1.0) {
            break;
        }
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hmm() -> ModelParams {
        ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]),
            mu: vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![-1.0, 2.0])],
            psi: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 2.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.1, 1.5]),
            ],
        })
    }

    #[test]
    fn unconstrained_round_trip() {
        let p = hmm();
        let u = p.to_unconstrained();
        assert_eq!(u.len(), 4 + 4 + 6);
        let back = p.from_unconstrained(&u).unwrap();
        let d = (back.constrained_vector() - p.constrained_vector()).amax();
        assert!(d < 1e-12);
    }

    #[test]
    fn layout_names_are_unique() {
        let names = hmm().layout().coordinate_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn json_round_trip() {
        let p = hmm();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"family\":\"hmm\""));
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn stationary_of_symmetric_chain_is_uniform() {
        let pi = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.9, 0.1]);
        let s = stationary_distribution(&pi);
        assert_relative_eq!(s[0], 0.5, epsilon = 1e-12);
        let pi = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = stationary_distribution(&pi);
        assert_relative_eq!(s[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_factor() {
        let ModelParams::Hmm(mut p) = hmm() else { unreachable!() };
        p.psi[0][(0, 1)] = 0.2;
        assert!(ModelParams::Hmm(p.clone()).validate().is_err());
        p.psi[0][(0, 1)] = 0.0;
        p.phi[(0, 0)] = -1.0;
        assert!(ModelParams::Hmm(p).validate().is_err());
    }

    #[test]
    fn permutation_relabels_transition() {
        let p = hmm();
        let q = p.permuted(&[1, 0]);
        let (a, b) = (p.transition().unwrap(), q.transition().unwrap());
        assert_relative_eq!(a[(0, 1)], b[(1, 0)], epsilon = 1e-15);
    }
}
