//! Complete-data Fisher preconditioners `D(theta)` and their divergence
//! corrections `Gamma(theta)`, expressed in the unconstrained coordinates.
//!
//! Each block is built in constrained coordinates and transported by the
//! diagonal Jacobian of the log transforms: `D_u = S D_c S` with
//! `S = diag(1 / (dc/du))`, and
//! `Gamma_u,i = Gamma_c,i / r_i - sum_{j log} D_u,ij - [i log] D_u,ii`
//! where `r_i = dc_i/du_i`.
//!
//! Every block is either diagonal or block diagonal over the columns of the
//! parameter matrix, so products, solves and noise factors never form the
//! Kronecker products densely.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim, Error, Result};
use crate::linalg;
use crate::models::{BlockGroup, BlockInfo, BlockKind, GradientVector, Layout, ModelParams};

pub const DEFAULT_NU_PHI: f64 = 1e-4;

/// A symmetric matrix over one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockMatrix {
    Identity(usize),
    Diagonal(DVector<f64>),
    /// Consecutive dense diagonal blocks.
    BlockDiagonal(Vec<DMatrix<f64>>),
}

impl BlockMatrix {
    pub fn dim(&self) -> usize {
        match self {
            BlockMatrix::Identity(n) => *n,
            BlockMatrix::Diagonal(d) => d.len(),
            BlockMatrix::BlockDiagonal(bs) => bs.iter().map(|b| b.nrows()).sum(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, BlockMatrix::Identity(_))
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        match self {
            BlockMatrix::Identity(_) => x.to_vec(),
            BlockMatrix::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            BlockMatrix::BlockDiagonal(bs) => {
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for b in bs {
                    let n = b.nrows();
                    let seg = DVector::from_column_slice(&x[off..off + n]);
                    out.extend((b * seg).iter());
                    off += n;
                }
                out
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            BlockMatrix::Identity(n) => vec![1.0; *n],
            BlockMatrix::Diagonal(d) => d.iter().copied().collect(),
            BlockMatrix::BlockDiagonal(bs) => bs.iter().flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>()).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        match self {
            BlockMatrix::Identity(_) => DMatrix::identity(n, n),
            BlockMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
            BlockMatrix::BlockDiagonal(bs) => {
                let mut out = DMatrix::zeros(n, n);
                let mut off = 0;
                for b in bs {
                    out.view_mut((off, off), b.shape()).copy_from(b);
                    off += b.nrows();
                }
                out
            }
        }
    }

    /// `S M S` for diagonal `S`.
    fn scaled(&self, s: &[f64]) -> BlockMatrix {
        match self {
            BlockMatrix::Identity(_) => BlockMatrix::Diagonal(DVector::from_iterator(s.len(), s.iter().map(|v| v * v))),
            BlockMatrix::Diagonal(d) => BlockMatrix::Diagonal(DVector::from_iterator(
                d.len(),
                d.iter().zip(s).map(|(a, v)| a * v * v),
            )),
            BlockMatrix::BlockDiagonal(bs) => {
                let mut off = 0;
                let out = bs
                    .iter()
                    .map(|b| {
                        let n = b.nrows();
                        let m = DMatrix::from_fn(n, n, |i, j| b[(i, j)] * s[off + i] * s[off + j]);
                        off += n;
                        m
                    })
                    .collect();
                BlockMatrix::BlockDiagonal(out)
            }
        }
    }

    /// Lower factor `F` with `F F^T = M`.
    pub fn factor(&self) -> Result<BlockMatrix> {
        Ok(match self {
            BlockMatrix::Identity(n) => BlockMatrix::Identity(*n),
            BlockMatrix::Diagonal(d) => {
                if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Numerical("diagonal preconditioner block is not positive".into()));
                }
                BlockMatrix::Diagonal(d.map(f64::sqrt))
            }
            BlockMatrix::BlockDiagonal(bs) => BlockMatrix::BlockDiagonal(
                bs.iter()
                    .map(|b| linalg::chol(b, "preconditioner block").map(|c| c.l()))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            BlockMatrix::Identity(_) => Ok(x.to_vec()),
            BlockMatrix::Diagonal(d) => Ok(d.iter().zip(x).map(|(a, b)| b / a).collect()),
            BlockMatrix::BlockDiagonal(bs) => {
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for b in bs {
                    let n = b.nrows();
                    let c = linalg::chol(b, "preconditioner block")?;
                    out.extend(c.solve(&DVector::from_column_slice(&x[off..off + n])).iter());
                    off += n;
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerBlock {
    pub name: String,
    pub d: BlockMatrix,
    pub gamma: DVector<f64>,
    pub factor: BlockMatrix,
}

/// Block-diagonal `D` and `Gamma` over the unconstrained layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerBlocks {
    pub layout: Layout,
    pub blocks: Vec<PreconditionerBlock>,
}

impl PreconditionerBlocks {
    pub fn identity(layout: &Layout) -> Self {
        let blocks = layout
            .blocks
            .iter()
            .map(|b| PreconditionerBlock {
                name: b.name.clone(),
                d: BlockMatrix::Identity(b.len),
                gamma: DVector::zeros(b.len),
                factor: BlockMatrix::Identity(b.len),
            })
            .collect();
        Self { layout: layout.clone(), blocks }
    }

    pub fn is_identity(&self) -> bool {
        self.blocks.iter().all(|b| b.d.is_identity())
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.layout.dim {
            return dim(format!("preconditioner has {} coordinates, vector has {n}", self.layout.dim));
        }
        Ok(())
    }

    fn blockwise(&self, x: &DVector<f64>, f: impl Fn(&PreconditionerBlock, &[f64]) -> Result<Vec<f64>>) -> Result<DVector<f64>> {
        self.check(x.len())?;
        let mut out = DVector::zeros(x.len());
        for (info, b) in self.layout.blocks.iter().zip(&self.blocks) {
            let r = f(b, &x.as_slice()[info.range()])?;
            out.as_mut_slice()[info.range()].copy_from_slice(&r);
        }
        Ok(out)
    }

    /// `D g`.
    pub fn apply(&self, g: &GradientVector) -> Result<GradientVector> {
        if g.layout != self.layout {
            return dim("gradient layout does not match the preconditioner".to_string());
        }
        Ok(GradientVector { layout: g.layout.clone(), values: self.apply_vec(&g.values)? })
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(x, |b, s| Ok(b.d.mul(s)))
    }

    /// `D^{-1} x`.
    pub fn solve(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(x, |b, s| b.d.solve(s))
    }

    /// `F xi` with `F F^T = D`.
    pub fn noise(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.blockwise(xi, |b, s| Ok(b.factor.mul(s)))
    }

    pub fn gamma(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim);
        for (info, b) in self.layout.blocks.iter().zip(&self.blocks) {
            out.as_mut_slice()[info.range()].copy_from_slice(b.gamma.as_slice());
        }
        out
    }

    /// Per-block noise factors.
    pub fn noise_factor(&self) -> Vec<&BlockMatrix> {
        self.blocks.iter().map(|b| &b.factor).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.layout.dim, self.layout.dim);
        for (info, b) in self.layout.blocks.iter().zip(&self.blocks) {
            out.view_mut((info.offset, info.offset), (info.len, info.len)).copy_from(&b.d.to_dense());
        }
        out
    }
}

/// Constrained-space `D_c` and `Gamma_c` for every block in layout order.
///
/// Non-transition blocks are divided by `fisher_scale`; the transition block
/// already carries the scale of the data through `phi`.
pub fn constrained_blocks(params: &ModelParams, nu_phi: f64, fisher_scale: f64) -> Result<Vec<(BlockMatrix, DVector<f64>)>> {
    if !(nu_phi >= 0.0) || !(fisher_scale > 0.0) {
        return Err(Error::Config("nu_phi must be >= 0 and fisher_scale > 0".into()));
    }
    params.validate()?;
    let layout = params.layout();
    let vals = params.block_values();
    layout
        .blocks
        .iter()
        .zip(&vals)
        .map(|(b, v)| {
            let (d, g) = constrained_block(params, b, v, nu_phi)?;
            if b.group == BlockGroup::Pi {
                Ok((d, g))
            } else {
                let s = 1.0 / fisher_scale;
                let d = match d {
                    BlockMatrix::BlockDiagonal(bs) => BlockMatrix::BlockDiagonal(bs.into_iter().map(|m| m * s).collect()),
                    BlockMatrix::Diagonal(x) => BlockMatrix::Diagonal(x * s),
                    BlockMatrix::Identity(n) => BlockMatrix::Diagonal(DVector::from_element(n, s)),
                };
                Ok((d, g * s))
            }
        })
        .collect()
}

fn noise_covariance(params: &ModelParams, b: &BlockInfo) -> Result<DMatrix<f64>> {
    let psi = match (params, b.group) {
        (ModelParams::Hmm(p), BlockGroup::Mu) => &p.psi[b.state.expect("per-state block")],
        (ModelParams::Arhmm(p), BlockGroup::A) => &p.psi_q[b.state.expect("per-state block")],
        (ModelParams::Slds(p), BlockGroup::A) => &p.psi_q[b.state.expect("per-state block")],
        (ModelParams::Lgssm(p), BlockGroup::A) => &p.psi_q,
        (ModelParams::Lgssm(p), BlockGroup::C) => &p.psi_r,
        (ModelParams::Slds(p), BlockGroup::C) => &p.psi_r,
        _ => return Err(Error::Unsupported(format!("no noise covariance for block {}", b.name))),
    };
    linalg::covariance_from_factor(psi)
}

fn constrained_block(params: &ModelParams, b: &BlockInfo, v: &DMatrix<f64>, nu_phi: f64) -> Result<(BlockMatrix, DVector<f64>)> {
    match b.kind {
        BlockKind::Positive => {
            let d = DVector::from_iterator(b.len, b.entries().into_iter().map(|(i, j, _)| v[(i, j)] + nu_phi));
            Ok((BlockMatrix::Diagonal(d), DVector::from_element(b.len, 1.0)))
        }
        BlockKind::Cholesky => {
            let m = v.nrows();
            let prec = linalg::precision_from_factor(v);
            let blocks = (0..m).map(|j| prec.view((j, j), (m - j, m - j)) * 0.5).collect();
            let gamma = DVector::from_iterator(
                b.len,
                b.entries().into_iter().map(|(i, j, _)| 0.5 * (m - j + 1) as f64 * v[(i, j)]),
            );
            Ok((BlockMatrix::BlockDiagonal(blocks), gamma))
        }
        BlockKind::Free => {
            let cov = noise_covariance(params, b)?;
            Ok((BlockMatrix::BlockDiagonal(vec![cov; b.cols]), DVector::zeros(b.len)))
        }
        BlockKind::Masked { frozen } => {
            let cov = noise_covariance(params, b)?;
            let rows = b.rows;
            let mut blocks = Vec::new();
            for j in 0..b.cols {
                let lo = if j < frozen { frozen } else { 0 };
                if lo < rows {
                    blocks.push(cov.view((lo, lo), (rows - lo, rows - lo)).into_owned());
                }
            }
            Ok((BlockMatrix::BlockDiagonal(blocks), DVector::zeros(b.len)))
        }
    }
}

/// Unconstrained-space preconditioner for `params`.
pub fn precondition(params: &ModelParams, nu_phi: f64, fisher_scale: f64) -> Result<PreconditionerBlocks> {
    let layout = params.layout();
    let r = params.chain_factors();
    let mask = layout.log_mask();
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for (info, (dc, gc)) in layout.blocks.iter().zip(constrained_blocks(params, nu_phi, fisher_scale)?) {
        let range = info.range();
        let ri = &r.as_slice()[range.clone()];
        let li = &mask[range];
        let s: Vec<f64> = ri.iter().map(|v| 1.0 / v).collect();
        let d = dc.scaled(&s);
        let ind: Vec<f64> = li.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let row_log = d.mul(&ind);
        let diag = d.diagonal();
        let gamma = DVector::from_iterator(
            info.len,
            (0..info.len).map(|i| gc[i] / ri[i] - row_log[i] - ind[i] * diag[i]),
        );
        let factor = d.factor()?;
        blocks.push(PreconditionerBlock { name: info.name.clone(), d, gamma, factor });
    }
    Ok(PreconditionerBlocks { layout, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_vec;
    use crate::models::synthetic::{synthetic_star, SyntheticTag};
    use crate::models::{GaussianHmmParams, LgssmParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixtures() -> Vec<ModelParams> {
        let mut out: Vec<ModelParams> = [SyntheticTag::Arhmm, SyntheticTag::Lgssm, SyntheticTag::Slds]
            .into_iter()
            .map(synthetic_star)
            .collect();
        out.push(ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.5, 2.0]),
            mu: vec![DVector::from_vec(vec![0.0, 1.0, 2.0]), DVector::from_vec(vec![1.0, -1.0, 0.0])],
            psi: vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 2.0],
        }));
        out.push(ModelParams::Lgssm(LgssmParams {
            a: DMatrix::identity(2, 2) * 0.5,
            psi_q: DMatrix::identity(2, 2),
            c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.3, 0.2]),
            psi_r: DMatrix::identity(3, 3),
        }));
        out
    }

    fn jitter(p: &ModelParams, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = p.to_unconstrained();
        p.from_unconstrained(&(&u + standard_normal_vec(&mut rng, u.len()) * 0.3)).unwrap()
    }

    #[test]
    fn identity_covariance_gives_identity_mean_block() {
        let p = ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_element(2, 2, 1.0),
            mu: vec![DVector::zeros(2); 2],
            psi: vec![DMatrix::identity(2, 2); 2],
        });
        let blocks = constrained_blocks(&p, 1e-4, 1.0).unwrap();
        assert_eq!(blocks[1].0.to_dense(), DMatrix::identity(2, 2));
        assert_eq!(blocks[0].0.to_dense(), DMatrix::identity(4, 4) * (1.0 + 1e-4));
        assert!(blocks[0].1.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn gamma_is_divergence_of_d() {
        for (fi, base) in fixtures().into_iter().enumerate() {
            for rep in 0..5 {
                let p = jitter(&base, 100 * fi as u64 + rep);
                let pre = precondition(&p, DEFAULT_NU_PHI, 3.0).unwrap();
                let u = p.to_unconstrained();
                let h = 1e-5;
                for (info, blk) in pre.layout.blocks.iter().zip(&pre.blocks) {
                    let mut fd = DVector::zeros(info.len);
                    for j in 0..info.len {
                        let at = |s: f64| {
                            let mut v = u.clone();
                            v[info.offset + j] += s;
                            precondition(&p.from_unconstrained(&v).unwrap(), DEFAULT_NU_PHI, 3.0).unwrap().to_dense()
                        };
                        let (dp, dm) = (at(h), at(-h));
                        for i in 0..info.len {
                            let (a, b) = (info.offset + i, info.offset + j);
                            fd[i] += (dp[(a, b)] - dm[(a, b)]) / (2.0 * h);
                        }
                    }
                    let err = (&fd - &blk.gamma).norm();
                    let scale = fd.norm().max(blk.gamma.norm()).max(1e-8);
                    assert!(err / scale < 1e-4 || err < 1e-9, "{} rep {rep}: {} vs {}", info.name, blk.gamma, fd);
                }
            }
        }
    }

    #[test]
    fn kronecker_product_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = DMatrix::from_fn(3, 3, |i, j| if i >= j { 1.0 + (i + j) as f64 * 0.3 } else { 0.0 });
        let q = &l * l.transpose();
        let m = BlockMatrix::BlockDiagonal(vec![q.clone(); 3]);
        let g = DMatrix::from_column_slice(3, 3, standard_normal_vec(&mut rng, 9).as_slice());
        let got = m.mul(g.as_slice());
        let want = &q * &g;
        let dense = DMatrix::identity(3, 3).kronecker(&q) * DVector::from_column_slice(g.as_slice());
        for i in 0..9 {
            assert!((got[i] - want.as_slice()[i]).abs() < 1e-12);
            assert!((got[i] - dense[i]).abs() < 1e-12);
        }
        let f = m.factor().unwrap().to_dense();
        assert!((&f * f.transpose() - DMatrix::identity(3, 3).kronecker(&q)).amax() < 1e-12);
    }

    #[test]
    fn apply_then_solve_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (fi, base) in fixtures().into_iter().enumerate() {
            let p = jitter(&base, fi as u64);
            let pre = precondition(&p, DEFAULT_NU_PHI, 10.0).unwrap();
            let x = standard_normal_vec(&mut rng, pre.layout.dim);
            let back = pre.solve(&pre.apply_vec(&x).unwrap()).unwrap();
            assert!((&back - &x).amax() < 1e-10);
            let dense = pre.to_dense();
            assert!(dense.clone().symmetric_eigenvalues().min() > 0.0);
            let f = DMatrix::from_fn(pre.layout.dim, pre.layout.dim, |i, j| {
                let mut e = DVector::zeros(pre.layout.dim);
                e[j] = 1.0;
                pre.noise(&e).unwrap()[i]
            });
            assert!((&f * f.transpose() - &dense).amax() < 1e-9 * dense.amax());
        }
    }

    #[test]
    fn identity_blocks_pass_through() {
        let p = synthetic_star(SyntheticTag::Slds);
        let pre = PreconditionerBlocks::identity(&p.layout());
        let x = DVector::from_fn(pre.layout.dim, |i, _| i as f64);
        assert_eq!(pre.apply_vec(&x).unwrap(), x);
        assert_eq!(pre.noise(&x).unwrap(), x);
        assert!(pre.gamma().iter().all(|v| *v == 0.0));
        assert!(pre.is_identity());
    }

    #[test]
    fn nu_guard_keeps_phi_factor_finite() {
        let p = ModelParams::Hmm(GaussianHmmParams {
            phi: DMatrix::from_row_slice(2, 2, &[1e-12, 1.0, 1.0, 1e-12]),
            mu: vec![DVector::zeros(1); 2],
            psi: vec![DMatrix::identity(1, 1); 2],
        });
        let c = constrained_blocks(&p, DEFAULT_NU_PHI, 1.0).unwrap();
        let f = c[0].0.factor().unwrap();
        assert!(f.diagonal().iter().all(|v| v.is_finite() && *v >= DEFAULT_NU_PHI.sqrt()));
    }

    #[test]
    fn fisher_scale_divides_non_transition_blocks() {
        let p = synthetic_star(SyntheticTag::Arhmm);
        let a = constrained_blocks(&p, 0.0, 1.0).unwrap();
        let b = constrained_blocks(&p, 0.0, 4.0).unwrap();
        assert_eq!(a[0], b[0]);
        for (x, y) in a.iter().zip(&b).skip(1) {
            assert!((x.0.to_dense() / 4.0 - y.0.to_dense()).amax() < 1e-15);
        }
    }
}
