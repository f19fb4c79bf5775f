//! Helpers shared by the integration suites: random problem generators and
//! dense nalgebra oracles that do not go through the crate's own linear
//! algebra.
#![allow(dead_code)]

use emfield::geometry::Point;
use emfield::kernels::{HyperParams, KernelFamily, KernelSpec};
use emfield::linalg::Mat;
use emfield::meanfn::{basis_eval, MeanMode, MeanSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point<f64>> {
    (0..n).map(|_| Point::new(rng.random_range(0.2..4.8), rng.random_range(0.2..4.8))).collect()
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Moderate log-parameters: length scales and weights around 1, noise
/// variance in [1e-3, 1e-1].
pub fn random_kernel(rng: &mut ChaCha8Rng, family: KernelFamily) -> KernelSpec<f64> {
    let mut h = HyperParams::<f64>::default_for(family);
    h.log_signal_var = rng.random_range(-1.0..1.0);
    for l in h.log_len.iter_mut() {
        *l = rng.random_range(-0.5..0.8);
    }
    for e in h.extras.iter_mut() {
        *e = match family {
            KernelFamily::Periodic => rng.random_range(0.5..1.6),
            _ => rng.random_range(-1.0..1.0),
        };
    }
    h.log_noise_var = rng.random_range(1e-3f64.ln()..1e-1f64.ln());
    KernelSpec::new(family, h).unwrap()
}

/// Basis mean over the canonical centres with a random prior mean and a
/// prior variance drawn log-uniformly from [0.1, 10].
pub fn random_basis_mean(rng: &mut ChaCha8Rng) -> MeanSpec<f64> {
    let base = MeanSpec::<f64>::basis_default();
    let k = base.n_basis();
    let var = rng.random_range(0.1f64.ln()..10f64.ln()).exp();
    let a: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    MeanSpec::basis(base.centers, a, var)
}

pub fn to_dmatrix(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

fn cov_block(k: &KernelSpec<f64>, a: &[Point<f64>], b: &[Point<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| k.eval(&a[i], &b[j]))
}

fn basis_block(mean: &MeanSpec<f64>, x: &[Point<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(mean.centers.len(), x.len(), |i, j| basis_eval(&mean.centers[i], &x[j]))
}

/// Prior mean and covariance of the latent field at `x` once the basis
/// weights are integrated out.
pub fn prior_moments(k: &KernelSpec<f64>, mean: &MeanSpec<f64>, x: &[Point<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let mut cov = cov_block(k, x, x);
    let mut mu = DVector::zeros(x.len());
    if mean.mode == MeanMode::Basis {
        let g = basis_block(mean, x);
        let a = DVector::from_column_slice(&mean.prior_mean);
        mu = g.transpose() * a;
        cov += g.transpose() * to_dmatrix(&mean.prior_cov) * &g;
    }
    (mu, cov)
}

/// Conditions the joint Gaussian of (readings at `x`, field at `xq`) on the
/// readings. `diag` is the total diagonal added to the training block.
pub fn dense_condition(
    k: &KernelSpec<f64>,
    mean: &MeanSpec<f64>,
    x: &[Point<f64>],
    y: &[f64],
    xq: &[Point<f64>],
    diag: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut all = x.to_vec();
    all.extend_from_slice(xq);
    let (mu, cov) = prior_moments(k, mean, &all);
    let n = x.len();
    let q = xq.len();
    let mut syy = cov.view((0, 0), (n, n)).into_owned();
    for i in 0..n {
        syy[(i, i)] += diag;
    }
    let sqy = cov.view((n, 0), (q, n)).into_owned();
    let sqq = cov.view((n, n), (q, q)).into_owned();
    let resid = DVector::from_column_slice(y) - mu.rows(0, n);
    let inv = syy.try_inverse().expect("training covariance is invertible");
    let m = mu.rows(n, q) + &sqy * &inv * resid;
    let c = sqq - &sqy * &inv * sqy.transpose();
    (m, c)
}

/// Dense log marginal likelihood of the readings.
pub fn dense_lml(k: &KernelSpec<f64>, mean: &MeanSpec<f64>, x: &[Point<f64>], y: &[f64], diag: f64) -> f64 {
    let (mu, mut cov) = prior_moments(k, mean, x);
    for i in 0..x.len() {
        cov[(i, i)] += diag;
    }
    let r = DVector::from_column_slice(y) - mu;
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    -0.5 * quad - 0.5 * log_det - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn min_eigenvalue(m: &Mat<f64>) -> f64 {
    to_dmatrix(m).symmetric_eigen().eigenvalues.min()
}

/// Central finite-difference gradient.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut p = at.to_vec();
            let mut m = at.to_vec();
            p[i] += step;
            m[i] -= step;
            (f(&p) - f(&m)) / (2.0 * step)
        })
        .collect()
}
