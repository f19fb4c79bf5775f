//! Exact GP inference with either a zero mean or the basis-function mean.
//!
//! Throughout, `K = K_hh + σ_η² I` (plus any jitter) and every solve goes
//! through the one Cholesky factor cached at fit time. With the basis mean
//! the weights are integrated out, which turns the marginal covariance into
//! `V = K + Gᵀ A G`; `V` is never factorised directly, the Woodbury
//! identity reduces it to `K` and the `K × K` precision `W = A⁻¹ + G K⁻¹ Gᵀ`:
//!
//! ```text
//! V⁻¹    = K⁻¹ − K⁻¹ Gᵀ W⁻¹ G K⁻¹
//! log|V| = log|K| + log|A| + log|W|
//! V⁻¹ (Y − Gᵀa) = K⁻¹ (Y − Gᵀ Ω̄)
//! ```
//!
//! Prediction follows the usual three steps: the conditional of the query
//! values given the latent values at the sensors, the posterior of those
//! latent values given the readings, and the marginal of the first over the
//! second. The result is
//!
//! ```text
//! m*   = G*ᵀ Ω̄ + K*ᵀ K⁻¹ (Y − Gᵀ Ω̄)
//! cov* = K** − K*ᵀ K⁻¹ K* + Rᵀ W⁻¹ R,   R = G* − G K⁻¹ K*
//! ```

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::kernels::{draw_mvn, factor_with_jitter, gram, gram_noisy, gram_with_grad, KernelSpec};
use crate::linalg::{dot, Cholesky, Mat};
use crate::meanfn::{design_matrix, prior_factors, weight_posterior_with, MeanMode, MeanSpec, WeightPosterior};
use crate::scalar::Real;

/// Log marginal likelihood split into its data-fit and complexity parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmlTerms<T> {
    /// `−½ Uᵀ V⁻¹ U`
    pub data_fit: T,
    /// `−½ log|V|`
    pub complexity: T,
    /// `−(n/2) log 2π`
    pub constant: T,
    pub total: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisState<T> {
    /// Design matrix `G` at the training inputs, `K × n`.
    pub g: Mat<T>,
    /// `L⁻¹ Gᵀ`, `n × K`.
    pub l_inv_gt: Mat<T>,
    pub weights: WeightPosterior<T>,
    pub log_det_prior: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub x: Vec<Point<T>>,
    pub y: Vec<T>,
    pub kernel: KernelSpec<T>,
    pub mean: MeanSpec<T>,
    /// Lower Cholesky factor of `K`.
    pub chol_k: Cholesky<T>,
    pub jitter: T,
    /// `K⁻¹ (Y − Gᵀ Ω̄)`, or `K⁻¹ Y` for a zero mean.
    pub alpha: Vec<T>,
    pub basis: Option<BasisState<T>>,
    pub lml: LmlTerms<T>,
}

fn check_inputs<T: Real>(x: &[Point<T>], y: &[T]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Contract("fit needs at least one observation".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("target {i} is not finite")));
    }
    for i in 0..x.len() {
        for j in 0..i {
            if x[i] == x[j] {
                return Err(Error::DuplicateInput { first: j, second: i });
            }
        }
    }
    Ok(())
}

/// Factorises the training covariance and caches everything prediction and
/// the likelihood need.
pub fn fit<T: Real>(x: &[Point<T>], y: &[T], kernel: &KernelSpec<T>, mean: &MeanSpec<T>) -> Result<TrainedModel<T>> {
    check_inputs(x, y)?;
    kernel.validate()?;
    mean.validate()?;
    let n = x.len();
    let (gm, chol) = gram_noisy(kernel, x)?;
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let constant = -T::lit(n as f64) / two * (two * T::PI()).ln();
    let log_det_k = chol.log_det();

    let (alpha, basis, data_fit, complexity) = match mean.mode {
        MeanMode::Zero => {
            let alpha = chol.solve(y);
            let data_fit = -half * dot(y, &alpha);
            (alpha, None, data_fit, -half * log_det_k)
        }
        MeanMode::Basis => {
            let g = design_matrix(mean, x)?;
            let pf = prior_factors(mean)?;
            let wp = weight_posterior_with(mean, &pf, &g, &chol, y)?;
            // U = Y − Gᵀa
            let prior_fit = g.tr_matvec(&mean.prior_mean);
            let u: Vec<T> = y.iter().zip(&prior_fit).map(|(&a, &b)| a - b).collect();
            let kinv_u = chol.solve(&u);
            let c = g.matvec(&kinv_u);
            let quad = dot(&u, &kinv_u) - dot(&c, &wp.precision_chol.solve(&c));
            let complexity = -half * (log_det_k + pf.log_det_a + wp.precision_chol.log_det());

            let fitted = g.tr_matvec(&wp.omega_bar);
            let resid: Vec<T> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
            let alpha = chol.solve(&resid);
            let l_inv_gt = chol.solve_lower_mat(&g.transpose());
            let state = BasisState { g, l_inv_gt, weights: wp, log_det_prior: pf.log_det_a };
            (alpha, Some(state), -half * quad, complexity)
        }
    };
    let total = data_fit + complexity + constant;
    if !total.is_finite() {
        return Err(Error::numerical(format!("log marginal likelihood is not finite ({total})")));
    }
    Ok(TrainedModel {
        x: x.to_vec(),
        y: y.to_vec(),
        kernel: kernel.clone(),
        mean: mean.clone(),
        chol_k: chol,
        jitter: gm.jitter_applied,
        alpha,
        basis,
        lml: LmlTerms { data_fit, complexity, constant, total },
    })
}

pub fn log_marginal<T: Real>(model: &TrainedModel<T>) -> T {
    model.lml.total
}

impl<T: Real> TrainedModel<T> {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn omega_bar(&self) -> Option<&[T]> {
        self.basis.as_ref().map(|b| b.weights.omega_bar.as_slice())
    }

    /// Dense `V⁻¹`, the inverse of the marginal covariance of `Y`.
    pub fn marginal_precision(&self) -> Mat<T> {
        let kinv = self.chol_k.inverse();
        match &self.basis {
            None => kinv,
            Some(b) => {
                let p = self.chol_k.solve_mat(&b.g.transpose());
                let q = b.weights.precision_chol.solve_mat(&p.transpose());
                let mut v = kinv.sub(&p.matmul(&q));
                v.symmetrize();
                v
            }
        }
    }
}

/// `∂ log p(Y) / ∂θ` for every log-domain hyperparameter, in the flat order
/// of [`crate::kernels::HyperParams::to_vec`]. Mean hyperparameters are held
/// fixed.
pub fn lml_gradient<T: Real>(model: &TrainedModel<T>) -> Vec<T> {
    let (_, dk) = gram_with_grad(&model.kernel, &model.x);
    let r = &model.alpha;
    let vinv = model.marginal_precision();
    let n = model.n();
    // M = r rᵀ − V⁻¹, ∂lml/∂θ = ½ tr(M ∂K/∂θ)
    let m = Mat::from_fn(n, n, |i, j| r[i] * r[j] - vinv[(i, j)]);
    let half = T::lit(0.5);
    let mut grad: Vec<T> = dk.iter().map(|d| half * m.frobenius_dot(d)).collect();
    grad.push(half * model.kernel.hyper.noise_var() * m.trace());
    grad
}

/// `∂ log p(Y) / ∂a`, the gradient with respect to the weight prior mean.
pub fn lml_gradient_prior_mean<T: Real>(model: &TrainedModel<T>) -> Vec<T> {
    match &model.basis {
        Some(b) => b.g.matvec(&model.alpha),
        None => vec![],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    pub covariance: Option<Mat<T>>,
    /// Number of variances that came out negative and were clamped to 0.
    pub clamped: usize,
}

/// Posterior predictive mean and variance at `xq`. `include_noise` adds
/// `σ_η²` (predicting a reading rather than the field); `full_cov` also
/// returns the joint covariance.
pub fn predict<T: Real>(model: &TrainedModel<T>, xq: &[Point<T>], include_noise: bool, full_cov: bool) -> Prediction<T> {
    let q = xq.len();
    let ks = gram(&model.kernel, &model.x, xq).values; // n × q
    let mut mean = ks.tr_matvec(&model.alpha);
    let v = model.chol_k.solve_lower_mat(&ks); // L⁻¹ K*, n × q
    let prior_var: Vec<T> = xq.iter().map(|p| model.kernel.eval(p, p)).collect();
    let mut variance: Vec<T> = (0..q)
        .map(|j| {
            let s: T = (0..v.rows()).map(|k| v[(k, j)] * v[(k, j)]).sum();
            prior_var[j] - s
        })
        .collect();
    let mut cov = if full_cov {
        let mut c = gram(&model.kernel, xq, xq).values.sub(&v.transpose().matmul(&v));
        c.symmetrize();
        Some(c)
    } else {
        None
    };

    if let Some(b) = &model.basis {
        let gq = design_matrix(&model.mean, xq).expect("basis mode has a design matrix");
        for (m, f) in mean.iter_mut().zip(gq.tr_matvec(&b.weights.omega_bar)) {
            *m = *m + f;
        }
        // R = G* − (L⁻¹Gᵀ)ᵀ (L⁻¹K*), S = L_W⁻¹ R
        let r = gq.sub(&b.l_inv_gt.transpose().matmul(&v));
        let s = b.weights.precision_chol.solve_lower_mat(&r);
        for (j, var) in variance.iter_mut().enumerate() {
            let add: T = (0..s.rows()).map(|k| s[(k, j)] * s[(k, j)]).sum();
            *var = *var + add;
        }
        if let Some(c) = cov.as_mut() {
            *c = c.add(&s.transpose().matmul(&s));
            c.symmetrize();
        }
    }

    let noise = model.kernel.hyper.noise_var();
    if include_noise {
        for var in variance.iter_mut() {
            *var = *var + noise;
        }
        if let Some(c) = cov.as_mut() {
            c.add_diag(noise);
        }
    }
    let mut clamped = 0;
    for var in variance.iter_mut() {
        if *var < T::zero() {
            *var = T::zero();
            clamped += 1;
        }
    }
    Prediction { mean, variance, covariance: cov, clamped }
}

/// Joint draws from the posterior predictive at `xq`.
pub fn sample_posterior<T: Real>(model: &TrainedModel<T>, xq: &[Point<T>], n_draws: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if n_draws == 0 {
        return Err(Error::Contract("n_draws must be >= 1".into()));
    }
    let p = predict(model, xq, false, true);
    let cov = p.covariance.expect("full covariance requested");
    let (chol, _) = factor_with_jitter(&cov, model.kernel.hyper.signal_var())?;
    Ok(draw_mvn(&p.mean, &chol, n_draws, seed))
}
