//! Covariance functions, gram matrices and GP prior sampling.
//!
//! Every hyperparameter is stored as a natural log so positivity holds by
//! construction. The flat parameter vector used by the optimiser is laid out
//! as `[ln σ², ln ℓ.., extras.., ln σ_η²]`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::linalg::{Cholesky, Mat};
use crate::scalar::Real;

/// Input dimension of the spatial model.
pub const INPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "se")]
    SquaredExponential,
    #[serde(rename = "matern12")]
    Matern12,
    #[serde(rename = "matern32")]
    Matern32,
    #[serde(rename = "matern52")]
    Matern52,
    #[serde(rename = "rq")]
    RationalQuadratic,
    #[serde(rename = "periodic")]
    Periodic,
    #[serde(rename = "nn")]
    NeuralNet,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 7] = [
        KernelFamily::SquaredExponential,
        KernelFamily::Matern12,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
        KernelFamily::RationalQuadratic,
        KernelFamily::Periodic,
        KernelFamily::NeuralNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "se",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::RationalQuadratic => "rq",
            KernelFamily::Periodic => "periodic",
            KernelFamily::NeuralNet => "nn",
        }
    }

    /// Number of length scales: one per input dimension for SE and Matérn,
    /// a single shared one for RQ and periodic, none for the network kernel.
    pub fn n_lengths(self) -> usize {
        match self {
            KernelFamily::SquaredExponential
            | KernelFamily::Matern12
            | KernelFamily::Matern32
            | KernelFamily::Matern52 => INPUT_DIM,
            KernelFamily::RationalQuadratic | KernelFamily::Periodic => 1,
            KernelFamily::NeuralNet => 0,
        }
    }

    /// RQ: `ln α`; periodic: `ln p`; network: `ln σ₀² .. ln σ_B²`.
    pub fn n_extras(self) -> usize {
        match self {
            KernelFamily::RationalQuadratic | KernelFamily::Periodic => 1,
            KernelFamily::NeuralNet => INPUT_DIM + 1,
            _ => 0,
        }
    }

    /// Kernel parameters, excluding the noise variance.
    pub fn n_kernel_params(self) -> usize {
        1 + self.n_lengths() + self.n_extras()
    }

    /// Kernel parameters plus the noise variance.
    pub fn n_params(self) -> usize {
        self.n_kernel_params() + 1
    }

    pub fn is_stationary(self) -> bool {
        self != KernelFamily::NeuralNet
    }

    /// Names of the natural-domain parameters in flat-vector order.
    pub fn param_names(self) -> Vec<String> {
        let mut v = vec!["signal_var".to_string()];
        match self.n_lengths() {
            1 => v.push("length".into()),
            n => v.extend((1..=n).map(|i| format!("length_{i}"))),
        }
        match self {
            KernelFamily::RationalQuadratic => v.push("alpha".into()),
            KernelFamily::Periodic => v.push("period".into()),
            KernelFamily::NeuralNet => v.extend((0..self.n_extras()).map(|i| format!("weight_var_{i}"))),
            _ => {}
        }
        v.push("noise_var".into());
        v
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown kernel family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<T> {
    pub log_signal_var: T,
    pub log_len: Vec<T>,
    pub log_noise_var: T,
    pub extras: Vec<T>,
}

impl<T: Real> HyperParams<T> {
    /// Unit signal variance and length scales, noise variance 0.01, RQ
    /// `α = 1`, period 4, unit network weight variances.
    pub fn default_for(family: KernelFamily) -> Self {
        let extras = match family {
            KernelFamily::Periodic => vec![T::lit(4f64.ln())],
            _ => vec![T::zero(); family.n_extras()],
        };
        HyperParams {
            log_signal_var: T::zero(),
            log_len: vec![T::zero(); family.n_lengths()],
            log_noise_var: T::lit(0.01f64.ln()),
            extras,
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(2 + self.log_len.len() + self.extras.len());
        v.push(self.log_signal_var);
        v.extend_from_slice(&self.log_len);
        v.extend_from_slice(&self.extras);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_vec(family: KernelFamily, v: &[T]) -> Result<Self> {
        if v.len() != family.n_params() {
            return Err(Error::Contract(format!(
                "{family} expects {} parameters, got {}",
                family.n_params(),
                v.len()
            )));
        }
        let nl = family.n_lengths();
        let ne = family.n_extras();
        Ok(HyperParams {
            log_signal_var: v[0],
            log_len: v[1..1 + nl].to_vec(),
            extras: v[1 + nl..1 + nl + ne].to_vec(),
            log_noise_var: v[1 + nl + ne],
        })
    }

    /// Natural-domain values in flat-vector order.
    pub fn natural(&self) -> Vec<T> {
        self.to_vec().into_iter().map(|v| v.exp()).collect()
    }

    pub fn from_natural(family: KernelFamily, values: &[T]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Config(format!("hyperparameters must be positive, got {v}")));
        }
        Self::from_vec(family, &values.iter().map(|v| v.ln()).collect::<Vec<_>>())
    }

    pub fn signal_var(&self) -> T {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> T {
        self.log_noise_var.exp()
    }

    pub fn lengths(&self) -> Vec<T> {
        self.log_len.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<T> {
    pub family: KernelFamily,
    pub hyper: HyperParams<T>,
}

impl<T: Real> KernelSpec<T> {
    pub fn new(family: KernelFamily, hyper: HyperParams<T>) -> Result<Self> {
        let spec = KernelSpec { family, hyper };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(family: KernelFamily) -> Self {
        KernelSpec { family, hyper: HyperParams::default_for(family) }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if h.log_len.len() != self.family.n_lengths() || h.extras.len() != self.family.n_extras() {
            return Err(Error::Contract(format!(
                "{} expects {} length scales and {} extra parameters, got {} and {}",
                self.family,
                self.family.n_lengths(),
                self.family.n_extras(),
                h.log_len.len(),
                h.extras.len()
            )));
        }
        if h.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("hyperparameters must be finite".into()));
        }
        Ok(())
    }

    pub fn with_params(&self, v: &[T]) -> Result<Self> {
        Ok(KernelSpec { family: self.family, hyper: HyperParams::from_vec(self.family, v)? })
    }

    /// `k(a, b)`.
    pub fn eval(&self, a: &Point<T>, b: &Point<T>) -> T {
        self.eval_impl(a, b, None)
    }

    /// `k(a, b)` and, in `grad`, its derivatives with respect to the
    /// kernel's log-parameters (noise excluded), in flat-vector order.
    pub fn eval_grad(&self, a: &Point<T>, b: &Point<T>, grad: &mut [T]) -> T {
        assert_eq!(grad.len(), self.family.n_kernel_params());
        self.eval_impl(a, b, Some(grad))
    }

    fn eval_impl(&self, a: &Point<T>, b: &Point<T>, grad: Option<&mut [T]>) -> T {
        let h = &self.hyper;
        let s2 = h.log_signal_var.exp();
        let d = [a.x - b.x, a.y - b.y];
        let one = T::one();
        let two = T::lit(2.0);
        match self.family {
            KernelFamily::SquaredExponential
            | KernelFamily::Matern12
            | KernelFamily::Matern32
            | KernelFamily::Matern52 => {
                // q_l = d_l² / ℓ_l², r² = Σ q_l
                let mut q = [T::zero(); INPUT_DIM];
                for l in 0..INPUT_DIM {
                    let s = d[l] / h.log_len[l].exp();
                    q[l] = s * s;
                }
                let r2: T = q.iter().copied().sum();
                let r = r2.sqrt();
                // k = s2·φ(r); dk/dlnℓ_l = s2·c·q_l for a family-specific c.
                let (phi, c) = match self.family {
                    KernelFamily::SquaredExponential => {
                        let e = (-r2 / two).exp();
                        (e, e)
                    }
                    KernelFamily::Matern12 => {
                        let e = (-r).exp();
                        let c = if r > T::zero() { e / r } else { T::zero() };
                        (e, c)
                    }
                    KernelFamily::Matern32 => {
                        let s3 = T::lit(3f64.sqrt());
                        let e = (-s3 * r).exp();
                        ((one + s3 * r) * e, T::lit(3.0) * e)
                    }
                    _ => {
                        let s5 = T::lit(5f64.sqrt());
                        let e = (-s5 * r).exp();
                        let phi = (one + s5 * r + T::lit(5.0 / 3.0) * r2) * e;
                        (phi, T::lit(5.0 / 3.0) * (one + s5 * r) * e)
                    }
                };
                let k = s2 * phi;
                if let Some(g) = grad {
                    g[0] = k;
                    for l in 0..INPUT_DIM {
                        g[1 + l] = s2 * c * q[l];
                    }
                }
                k
            }
            KernelFamily::RationalQuadratic => {
                let ell = h.log_len[0].exp();
                let alpha = h.extras[0].exp();
                let r2 = d[0] * d[0] + d[1] * d[1];
                let u = r2 / (two * alpha * ell * ell);
                let lp = u.ln_1p();
                let k = s2 * (-alpha * lp).exp();
                if let Some(g) = grad {
                    g[0] = k;
                    g[1] = two * alpha * u * k / (one + u);
                    g[2] = alpha * k * (u / (one + u) - lp);
                }
                k
            }
            KernelFamily::Periodic => {
                let ell = h.log_len[0].exp();
                let p = h.extras[0].exp();
                let pi = T::PI();
                let mut s = T::zero();
                let mut dp = T::zero();
                for &dl in &d {
                    let t = pi * dl / p;
                    let sn = t.sin();
                    s = s + sn * sn;
                    dp = dp + t * (two * t).sin();
                }
                let w = two / (ell * ell);
                let k = s2 * (-w * s).exp();
                if let Some(g) = grad {
                    g[0] = k;
                    g[1] = two * w * s * k;
                    g[2] = w * dp * k;
                }
                k
            }
            KernelFamily::NeuralNet => {
                // x̂ = (1, x₁, x₂), Σ = diag(σ₀², σ₁², σ₂²)
                let xa = [one, a.x, a.y];
                let xb = [one, b.x, b.y];
                let wv: Vec<T> = h.extras.iter().map(|e| e.exp()).collect();
                let mut num = T::zero();
                let mut da = one;
                let mut db = one;
                for i in 0..3 {
                    num = num + two * wv[i] * (xa[i] * xb[i]);
                    da = da + two * wv[i] * xa[i] * xa[i];
                    db = db + two * wv[i] * xb[i] * xb[i];
                }
                let den = (da * db).sqrt();
                let z = num / den;
                let scale = two / T::PI();
                let k = s2 * scale * z.asin();
                if let Some(g) = grad {
                    g[0] = k;
                    let dasin = s2 * scale / (one - z * z).sqrt();
                    for i in 0..3 {
                        let dz = two * wv[i] * xa[i] * xb[i] / den
                            - z * wv[i] * (xa[i] * xa[i] / da + xb[i] * xb[i] / db);
                        g[1 + i] = dasin * dz;
                    }
                }
                k
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    pub values: Mat<T>,
    pub jitter_applied: T,
}

/// Cross-covariance `K[i][j] = k(a_i, b_j)`. When `a` and `b` are the same
/// slice the result is made exactly symmetric.
pub fn gram<T: Real>(spec: &KernelSpec<T>, a: &[Point<T>], b: &[Point<T>]) -> GramMatrix<T> {
    let mut values = Mat::from_fn(a.len(), b.len(), |i, j| spec.eval(&a[i], &b[j]));
    if std::ptr::eq(a, b) {
        values.symmetrize();
    }
    GramMatrix { values, jitter_applied: T::zero() }
}

pub fn gram_sym<T: Real>(spec: &KernelSpec<T>, a: &[Point<T>]) -> GramMatrix<T> {
    gram(spec, a, a)
}

/// Gram matrix and its per-parameter derivatives (kernel log-parameters
/// only; the noise derivative is `σ_η² I`).
pub fn gram_with_grad<T: Real>(spec: &KernelSpec<T>, a: &[Point<T>]) -> (Mat<T>, Vec<Mat<T>>) {
    let n = a.len();
    let np = spec.family.n_kernel_params();
    let mut k = Mat::zeros(n, n);
    let mut dk = vec![Mat::zeros(n, n); np];
    let mut g = vec![T::zero(); np];
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..=i {
            let mut v = spec.eval_grad(&a[i], &a[j], &mut g);
            if i != j && !spec.family.is_stationary() {
                let mut g2 = vec![T::zero(); np];
                let v2 = spec.eval_grad(&a[j], &a[i], &mut g2);
                v = (v + v2) * half;
                for (x, y) in g.iter_mut().zip(&g2) {
                    *x = (*x + *y) * half;
                }
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
            for p in 0..np {
                dk[p][(i, j)] = g[p];
                dk[p][(j, i)] = g[p];
            }
        }
    }
    (k, dk)
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Factorises `base + j·I` for `j` in `0, 1e-10·σ², 1e-9·σ², .., 1e-4·σ²`,
/// returning the first success.
pub fn factor_with_jitter<T: Real>(base: &Mat<T>, signal_var: T) -> Result<(Cholesky<T>, T)> {
    if !(signal_var > T::zero()) || !signal_var.is_finite() {
        return Err(Error::numerical(format!("signal variance {signal_var} is not positive and finite")));
    }
    let steps = (JITTER_MAX / JITTER_START).log10().round() as i32;
    let mut last_err = None;
    for k in -1..=steps {
        let jitter = if k < 0 { T::zero() } else { T::lit(JITTER_START * 10f64.powi(k)) * signal_var };
        let mut m = base.clone();
        if jitter > T::zero() {
            m.add_diag(jitter);
        }
        match Cholesky::new(&m) {
            Ok(c) => return Ok((c, jitter)),
            Err(e) => last_err = Some(e),
        }
    }
    let last_err = last_err.map(|e| e.to_string()).unwrap_or_default();
    let diag_max = (0..base.rows()).map(|i| base[(i, i)]).fold(T::zero(), |a, b| a.max(b));
    let cond = diag_max / (T::lit(JITTER_MAX) * signal_var);
    Err(Error::numerical(format!(
        "cholesky failed at maximum jitter {:e} (condition estimate > {:e}): {}",
        JITTER_MAX * signal_var.to_f64_lossy(),
        cond.to_f64_lossy(),
        last_err
    )))
}

/// `K(A, A) + σ_η² I` plus the smallest jitter that makes it factorise.
pub fn gram_noisy<T: Real>(spec: &KernelSpec<T>, a: &[Point<T>]) -> Result<(GramMatrix<T>, Cholesky<T>)> {
    let mut g = gram_sym(spec, a);
    g.values.add_diag(spec.hyper.noise_var());
    let (chol, jitter) = factor_with_jitter(&g.values, spec.hyper.signal_var())?;
    g.values.add_diag(jitter);
    g.jitter_applied = jitter;
    Ok((g, chol))
}

/// Draws `mean + L z` with `L` the (jittered, noise-free) Cholesky factor
/// of `K(X, X)`.
pub fn sample_gp<T: Real>(
    spec: &KernelSpec<T>,
    mean: &[T],
    x: &[Point<T>],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    if n_draws == 0 {
        return Err(Error::Contract("n_draws must be >= 1".into()));
    }
    if mean.len() != x.len() {
        return Err(Error::Contract("mean and point list differ in length".into()));
    }
    let g = gram_sym(spec, x);
    let (chol, _) = factor_with_jitter(&g.values, spec.hyper.signal_var())?;
    Ok(draw_mvn(mean, &chol, n_draws, seed))
}

/// `n_draws` samples of `N(mean, L Lᵀ)`.
pub fn draw_mvn<T: Real>(mean: &[T], chol: &Cholesky<T>, n_draws: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mean.len();
    let l = chol.factor();
    (0..n_draws)
        .map(|_| {
            let z: Vec<T> = (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::lit(v)
                })
                .collect();
            (0..n).map(|i| mean[i] + crate::linalg::dot(&l.row(i)[..=i], &z[..=i])).collect()
        })
        .collect()
}
