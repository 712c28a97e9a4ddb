//! Information-form Kalman filtering, smoothing and backward sampling.
//!
//! A chain is described per window step `j` by the dynamics `(A_j, Q_j)` that
//! map `x_{j-1}` to `x_j`, a shared emission `(C, R)` and a Gaussian on the
//! state just before the window.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{dim, Result};
use crate::linalg;
use crate::models::GaussianNoise;

#[derive(Clone, Debug, PartialEq)]
pub struct InfoMessage {
    pub h: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl InfoMessage {
    pub fn zeros(n: usize) -> Self {
        Self { h: DVector::zeros(n), lambda: DMatrix::zeros(n, n) }
    }

    /// Mean and covariance; fails when the precision is singular.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let c = linalg::chol(&self.lambda, "information matrix")?;
        Ok((c.solve(&self.h), linalg::symmetrize(&c.inverse())))
    }
}

/// Joint Gaussian of `(x_{j-1}, x_j)`.
#[derive(Clone, Debug)]
pub struct PairwiseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PairwiseGaussian {
    /// Second moment `E[x x^T]` of the stacked pair.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

#[derive(Clone, Debug)]
pub struct GaussianMessages {
    /// Information form of the distribution on the state before the window.
    pub prior: InfoMessage,
    /// Filtered messages per window step.
    pub alpha: Vec<InfoMessage>,
    /// Backward messages per window step (zero at the last step).
    pub beta: Vec<InfoMessage>,
    /// Backward message at the state before the window.
    pub prior_beta: InfoMessage,
    /// `ln p(y_j | y_{<j})` per window step.
    pub log_norm: Vec<f64>,
}

impl GaussianMessages {
    pub fn loglik(&self) -> f64 {
        self.log_norm.iter().sum()
    }
}

/// Linear Gaussian chain over one window.
pub struct LinearGaussianChain<'a> {
    pub dynamics: Vec<(&'a DMatrix<f64>, &'a GaussianNoise)>,
    pub c: &'a DMatrix<f64>,
    pub r: &'a GaussianNoise,
    pub ys: &'a [DVector<f64>],
    pub prior_mean: &'a DVector<f64>,
    pub prior_cov: &'a DMatrix<f64>,
}

impl<'a> LinearGaussianChain<'a> {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    fn check(&self) -> Result<usize> {
        let n = self.prior_mean.len();
        if self.dynamics.len() != self.ys.len() {
            return dim("one dynamics pair per window step is required");
        }
        if self.c.ncols() != n || self.prior_cov.nrows() != n {
            return dim("latent dimensions disagree");
        }
        if self.ys.iter().any(|y| y.len() != self.c.nrows()) {
            return dim("observation dimension disagrees with C");
        }
        Ok(n)
    }

    fn ct_rinv(&self) -> DMatrix<f64> {
        self.c.transpose() * &self.r.prec
    }

    pub fn prior_info(&self) -> Result<InfoMessage> {
        let lambda = linalg::spd_inverse(self.prior_cov, "initial covariance")?;
        let h = &lambda * self.prior_mean;
        Ok(InfoMessage { h, lambda })
    }

    /// Filtered information messages and one-step predictive log likelihoods.
    pub fn forward(&self) -> Result<(InfoMessage, Vec<InfoMessage>, Vec<f64>)> {
        self.check()?;
        let prior = self.prior_info()?;
        let ctr = self.ct_rinv();
        let ctrc = &ctr * self.c;
        let mut mean = self.prior_mean.clone();
        let mut cov = self.prior_cov.clone();
        let mut alpha = Vec::with_capacity(self.len());
        let mut norms = Vec::with_capacity(self.len());
        for (j, y) in self.ys.iter().enumerate() {
            let (a, q) = self.dynamics[j];
            let p_pred = linalg::symmetrize(&(&q.cov + a * &cov * a.transpose()));
            let m_pred = a * &mean;
            let s = linalg::symmetrize(&(self.c * &p_pred * self.c.transpose() + &self.r.cov));
            norms.push(linalg::mvn_logpdf_cov(y, &(self.c * &m_pred), &s)?);
            let p_inv = linalg::spd_inverse(&p_pred, "predictive covariance")?;
            let lambda = linalg::symmetrize(&(&ctrc + &p_inv));
            let h = &ctr * y + &p_inv * &m_pred;
            let ch = linalg::chol(&lambda, "filtered precision")?;
            mean = ch.solve(&h);
            cov = linalg::symmetrize(&ch.inverse());
            alpha.push(InfoMessage { h, lambda });
        }
        Ok((prior, alpha, norms))
    }

    /// Backward information messages for the window steps and the state before the window.
    pub fn backward(&self) -> Result<(InfoMessage, Vec<InfoMessage>)> {
        let n = self.check()?;
        let l = self.len();
        let ctr = self.ct_rinv();
        let ctrc = &ctr * self.c;
        let mut beta = vec![InfoMessage::zeros(n); l];
        let step = |next: &InfoMessage, j_next: usize| -> Result<InfoMessage> {
            let (a, q) = self.dynamics[j_next];
            let qa = &q.prec * a;
            let j_mat = linalg::symmetrize(&(&q.prec + &ctrc + &next.lambda));
            let ch = linalg::chol(&j_mat, "backward information")?;
            let lambda = linalg::symmetrize(&(a.transpose() * &qa - qa.transpose() * ch.solve(&qa)));
            let h = qa.transpose() * ch.solve(&(&ctr * &self.ys[j_next] + &next.h));
            Ok(InfoMessage { h, lambda })
        };
        for j in (0..l.saturating_sub(1)).rev() {
            beta[j] = step(&beta[j + 1], j + 1)?;
        }
        let prior_beta = if l > 0 { step(&beta[0], 0)? } else { InfoMessage::zeros(n) };
        Ok((prior_beta, beta))
    }

    pub fn smooth(&self) -> Result<GaussianMessages> {
        let (prior, alpha, log_norm) = self.forward()?;
        let (prior_beta, beta) = self.backward()?;
        Ok(GaussianMessages { prior, alpha, beta, prior_beta, log_norm })
    }

    /// Joint smoothed marginal of `(x_{j-1}, x_j)`; `j = 0` pairs with the state before the window.
    pub fn pairwise(&self, msgs: &GaussianMessages, j: usize) -> Result<PairwiseGaussian> {
        let n = self.prior_mean.len();
        let (a, q) = self.dynamics[j];
        let prev = if j == 0 { &msgs.prior } else { &msgs.alpha[j - 1] };
        let ctr = self.ct_rinv();
        let qa = &q.prec * a;
        let mut lam = DMatrix::zeros(2 * n, 2 * n);
        lam.view_mut((0, 0), (n, n)).copy_from(&(&prev.lambda + a.transpose() * &qa));
        lam.view_mut((0, n), (n, n)).copy_from(&(-qa.transpose()));
        lam.view_mut((n, 0), (n, n)).copy_from(&(-&qa));
        lam.view_mut((n, n), (n, n))
            .copy_from(&(&ctr * self.c + &q.prec + &msgs.beta[j].lambda));
        let mut h = DVector::zeros(2 * n);
        h.rows_mut(0, n).copy_from(&prev.h);
        h.rows_mut(n, n).copy_from(&(&ctr * &self.ys[j] + &msgs.beta[j].h));
        let ch = linalg::chol(&lam, "pairwise precision")?;
        Ok(PairwiseGaussian { mean: ch.solve(&h), cov: linalg::symmetrize(&ch.inverse()) })
    }

    /// Smoothed marginal of `x_j`.
    pub fn marginal(&self, msgs: &GaussianMessages, j: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        InfoMessage {
            h: &msgs.alpha[j].h + &msgs.beta[j].h,
            lambda: &msgs.alpha[j].lambda + &msgs.beta[j].lambda,
        }
        .moments()
    }

    /// Forward filter, backward sample. Returns the state before the window and the window states.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let (prior, alpha, _) = self.forward()?;
        let l = self.len();
        let mut xs = vec![DVector::zeros(self.prior_mean.len()); l];
        let draw = |rng: &mut R, msg: &InfoMessage, next: Option<(&DVector<f64>, usize)>| -> Result<DVector<f64>> {
            let (h, lambda) = match next {
                None => (msg.h.clone(), msg.lambda.clone()),
                Some((x_next, j_next)) => {
                    let (a, q) = self.dynamics[j_next];
                    let atq = a.transpose() * &q.prec;
                    (&msg.h + &atq * x_next, &msg.lambda + &atq * a)
                }
            };
            let ch = linalg::chol(&lambda, "sampling precision")?;
            let mean = ch.solve(&h);
            let z = linalg::standard_normal_vec(rng, mean.len());
            let l_fac = ch.l();
            let dx = l_fac.tr_solve_lower_triangular(&z).expect("factor is nonsingular");
            Ok(mean + dx)
        };
        if l == 0 {
            return Ok((draw(rng, &prior, None)?, xs));
        }
        xs[l - 1] = draw(rng, &alpha[l - 1], None)?;
        for j in (0..l - 1).rev() {
            let next = xs[j + 1].clone();
            xs[j] = draw(rng, &alpha[j], Some((&next, j + 1)))?;
        }
        let x0 = xs[0].clone();
        let x_prev = draw(rng, &prior, Some((&x0, 0)))?;
        Ok((x_prev, xs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        a: DMatrix<f64>,
        q: GaussianNoise,
        c: DMatrix<f64>,
        r: GaussianNoise,
        ys: Vec<DVector<f64>>,
        m0: DVector<f64>,
        v0: DMatrix<f64>,
    }

    fn fixture(t: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_row_slice(2, 2, &[0.6, -0.3, 0.2, 0.5]);
        let qc = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let rc = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 0.8]);
        let q = GaussianNoise::from_factor(&linalg::factor_from_covariance(&qc).unwrap()).unwrap();
        let r = GaussianNoise::from_factor(&linalg::factor_from_covariance(&rc).unwrap()).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 1.0]);
        let ys = (0..t).map(|_| linalg::standard_normal_vec(&mut rng, 2)).collect();
        let m0 = DVector::from_vec(vec![0.3, -0.2]);
        let v0 = DMatrix::from_row_slice(2, 2, &[1.2, 0.2, 0.2, 0.9]);
        Fixture { a, q, c, r, ys, m0, v0 }
    }

    fn chain(f: &Fixture) -> LinearGaussianChain<'_> {
        LinearGaussianChain {
            dynamics: vec![(&f.a, &f.q); f.ys.len()],
            c: &f.c,
            r: &f.r,
            ys: &f.ys,
            prior_mean: &f.m0,
            prior_cov: &f.v0,
        }
    }

    /// Joint Gaussian over `(x_{-1}, x_0..x_{T-1}, y_0..y_{T-1})` built in moment form.
    fn joint(f: &Fixture) -> (DVector<f64>, DMatrix<f64>) {
        let t = f.ys.len();
        let n = 2;
        let nx = n * (t + 1);
        // x = L w + offset where w stacks (x_{-1} noise, process noises).
        let mut lx = DMatrix::zeros(nx, nx);
        let mut mx = DVector::zeros(nx);
        let l0 = linalg::chol(&f.v0, "v0").unwrap().l();
        let lq = linalg::chol(&f.q.cov, "q").unwrap().l();
        lx.view_mut((0, 0), (n, n)).copy_from(&l0);
        mx.rows_mut(0, n).copy_from(&f.m0);
        for j in 1..=t {
            let prev_rows = lx.rows((j - 1) * n, n).into_owned();
            let prev_mean = mx.rows((j - 1) * n, n).into_owned();
            let mut rows = &f.a * prev_rows;
            rows.view_mut((0, j * n), (n, n)).copy_from(&lq);
            lx.rows_mut(j * n, n).copy_from(&rows);
            mx.rows_mut(j * n, n).copy_from(&(&f.a * prev_mean));
        }
        let cov_x = &lx * lx.transpose();
        let total = nx + 2 * t;
        let mut mean = DVector::zeros(total);
        let mut cov = DMatrix::zeros(total, total);
        mean.rows_mut(0, nx).copy_from(&mx);
        cov.view_mut((0, 0), (nx, nx)).copy_from(&cov_x);
        // y_j = C x_j + v.
        let mut h = DMatrix::zeros(2 * t, nx);
        for j in 0..t {
            h.view_mut((2 * j, (j + 1) * n), (2, n)).copy_from(&f.c);
        }
        let mut rbig = DMatrix::zeros(2 * t, 2 * t);
        for j in 0..t {
            rbig.view_mut((2 * j, 2 * j), (2, 2)).copy_from(&f.r.cov);
        }
        mean.rows_mut(nx, 2 * t).copy_from(&(&h * &mx));
        let cxy = &cov_x * h.transpose();
        cov.view_mut((0, nx), (nx, 2 * t)).copy_from(&cxy);
        cov.view_mut((nx, 0), (2 * t, nx)).copy_from(&cxy.transpose());
        cov.view_mut((nx, nx), (2 * t, 2 * t)).copy_from(&(&h * &cov_x * h.transpose() + rbig));
        (mean, cov)
    }

    #[test]
    fn smoother_matches_joint_gaussian_conditioning() {
        for seed in 0..5 {
            let f = fixture(5, seed);
            let (mean, cov) = joint(&f);
            let nx = 12;
            let ny = 10;
            let yv = DVector::from_iterator(ny, f.ys.iter().flat_map(|y| y.iter().copied()));
            let sxx = cov.view((0, 0), (nx, nx)).into_owned();
            let sxy = cov.view((0, nx), (nx, ny)).into_owned();
            let syy = cov.view((nx, nx), (ny, ny)).into_owned();
            let syy_inv = syy.clone().try_inverse().unwrap();
            let post_mean = mean.rows(0, nx) + &sxy * &syy_inv * (&yv - mean.rows(nx, ny));
            let post_cov = &sxx - &sxy * &syy_inv * sxy.transpose();
            let ll = linalg::mvn_logpdf_cov(&yv, &mean.rows(nx, ny).into_owned(), &syy).unwrap();

            let ch = chain(&f);
            let msgs = ch.smooth().unwrap();
            assert!((msgs.loglik() - ll).abs() < 1e-8);
            for j in 0..5 {
                let pw = ch.pairwise(&msgs, j).unwrap();
                let want_mean = post_mean.rows(j * 2, 4).into_owned();
                let want_cov = post_cov.view((j * 2, j * 2), (4, 4)).into_owned();
                assert!((&pw.mean - &want_mean).amax() < 1e-8, "pair mean {j}");
                assert!((&pw.cov - &want_cov).amax() < 1e-8, "pair cov {j}");
                let (m, v) = ch.marginal(&msgs, j).unwrap();
                assert!((&m - post_mean.rows((j + 1) * 2, 2)).amax() < 1e-8);
                assert!((&v - post_cov.view(((j + 1) * 2, (j + 1) * 2), (2, 2))).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_dynamics_precision_is_constant() {
        let mut f = fixture(4, 1);
        f.a = DMatrix::zeros(2, 2);
        f.m0 = DVector::zeros(2);
        f.v0 = f.q.cov.clone();
        let ch = chain(&f);
        let (_, alpha, _) = ch.forward().unwrap();
        let want = f.c.transpose() * &f.r.prec * &f.c + &f.q.prec;
        for a in alpha {
            assert!((&a.lambda - &want).amax() < 1e-10);
        }
    }

    #[test]
    fn single_step_loglik() {
        let f = fixture(1, 2);
        let ch = chain(&f);
        let (_, _, norms) = ch.forward().unwrap();
        let m1 = &f.a * &f.m0;
        let v1 = &f.q.cov + &f.a * &f.v0 * f.a.transpose();
        let want = linalg::mvn_logpdf_cov(&f.ys[0], &(&f.c * m1), &(&f.c * v1 * f.c.transpose() + &f.r.cov)).unwrap();
        assert!((norms[0] - want).abs() < 1e-12);
    }

    #[test]
    fn backward_samples_match_smoothed_moments() {
        let f = fixture(3, 4);
        let ch = chain(&f);
        let msgs = ch.smooth().unwrap();
        let (m, v) = ch.marginal(&msgs, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut acc = DVector::zeros(2);
        let mut acc2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let (_, xs) = ch.sample(&mut rng).unwrap();
            acc += &xs[1];
            acc2 += &xs[1] * xs[1].transpose();
        }
        let mean = acc / n as f64;
        let cov = acc2 / n as f64 - &mean * mean.transpose();
        assert!((&mean - &m).amax() < 0.03);
        assert!((&cov - &v).amax() < 0.03);
    }
}
