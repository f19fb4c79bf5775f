//! Basis-function mean `m(x) = g(x)ᵀ Ω` with inverse-square-distance bumps
//! `g_k(x) = 1 / (1 + |x − c_k|²)` and a Gaussian weight prior `Ω ~ N(a, A)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonical_source_points, Point};
use crate::linalg::{Cholesky, Mat};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    Zero,
    Basis,
}

impl std::str::FromStr for MeanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(MeanMode::Zero),
            "basis" => Ok(MeanMode::Basis),
            _ => Err(Error::Config(format!("unknown mean mode '{s}' (expected zero|basis)"))),
        }
    }
}

impl std::fmt::Display for MeanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeanMode::Zero => "zero",
            MeanMode::Basis => "basis",
        })
    }
}

/// Default prior weight variance for [`MeanSpec::basis_default`].
pub const DEFAULT_PRIOR_VAR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSpec<T> {
    pub mode: MeanMode,
    pub centers: Vec<Point<T>>,
    /// `a`
    pub prior_mean: Vec<T>,
    /// `A`
    pub prior_cov: Mat<T>,
}

impl<T: Real> MeanSpec<T> {
    pub fn zero() -> Self {
        MeanSpec { mode: MeanMode::Zero, centers: vec![], prior_mean: vec![], prior_cov: Mat::zeros(0, 0) }
    }

    /// Basis mean over the given centres with prior `N(a, var·I)`.
    pub fn basis(centers: Vec<Point<T>>, prior_mean: Vec<T>, prior_var: T) -> Self {
        let k = centers.len();
        MeanSpec { mode: MeanMode::Basis, centers, prior_mean, prior_cov: Mat::identity(k).scale(prior_var) }
    }

    /// One centre per canonical source position, prior `N(0, 100·I)`.
    pub fn basis_default() -> Self {
        let centers = canonical_source_points();
        let k = centers.len();
        Self::basis(centers, vec![T::zero(); k], T::lit(DEFAULT_PRIOR_VAR))
    }

    pub fn for_mode(mode: MeanMode) -> Self {
        match mode {
            MeanMode::Zero => Self::zero(),
            MeanMode::Basis => Self::basis_default(),
        }
    }

    pub fn n_basis(&self) -> usize {
        match self.mode {
            MeanMode::Zero => 0,
            MeanMode::Basis => self.centers.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == MeanMode::Zero {
            return Ok(());
        }
        let k = self.centers.len();
        if k == 0 {
            return Err(Error::Config("basis mean needs at least one centre".into()));
        }
        if self.prior_mean.len() != k || self.prior_cov.rows() != k || self.prior_cov.cols() != k {
            return Err(Error::Config(format!("basis prior must have dimension {k}")));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (self.prior_cov[(i, j)], self.prior_cov[(j, i)]);
                if (a - b).abs() > T::lit(1e-12) * (a.abs() + b.abs() + T::one()) {
                    return Err(Error::Config("basis prior covariance is not symmetric".into()));
                }
            }
        }
        Cholesky::new(&self.prior_cov)
            .map_err(|_| Error::Config("basis prior covariance is not positive definite".into()))?;
        Ok(())
    }

    /// Mean-function values `Gᵀ w` at the points, for a weight vector `w`.
    pub fn values(&self, x: &[Point<T>], weights: &[T]) -> Result<Vec<T>> {
        match self.mode {
            MeanMode::Zero => Ok(vec![T::zero(); x.len()]),
            MeanMode::Basis => Ok(design_matrix(self, x)?.tr_matvec(weights)),
        }
    }
}

/// `1 / (1 + |x − c|²)`, in `(0, 1]`.
pub fn basis_eval<T: Real>(center: &Point<T>, x: &Point<T>) -> T {
    T::one() / (T::one() + center.dist2(x))
}

/// `G[k][i] = g_k(x_i)`, shape `K × n`.
pub fn design_matrix<T: Real>(spec: &MeanSpec<T>, x: &[Point<T>]) -> Result<Mat<T>> {
    if spec.mode != MeanMode::Basis {
        return Err(Error::Contract("design matrix requested for a zero mean".into()));
    }
    Ok(Mat::from_fn(spec.centers.len(), x.len(), |k, i| basis_eval(&spec.centers[k], &x[i])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior<T> {
    /// `Ω̄ = W⁻¹ (A⁻¹ a + G K⁻¹ Y)`
    pub omega_bar: Vec<T>,
    /// `W = A⁻¹ + G K⁻¹ Gᵀ`
    pub precision: Mat<T>,
    pub precision_chol: Cholesky<T>,
}

/// Quantities derived from the weight prior that the likelihood reuses.
#[derive(Debug, Clone)]
pub(crate) struct PriorFactors<T> {
    pub a_inv: Mat<T>,
    pub log_det_a: T,
}

pub(crate) fn prior_factors<T: Real>(spec: &MeanSpec<T>) -> Result<PriorFactors<T>> {
    let ca = Cholesky::new(&spec.prior_cov)
        .map_err(|e| Error::numerical(format!("prior covariance A: {e}")))?;
    Ok(PriorFactors { a_inv: ca.inverse(), log_det_a: ca.log_det() })
}

/// Posterior over basis weights given observations `y`, the design matrix
/// `g` and the Cholesky factor of `K = K_hh + σ_η² I`.
pub fn weight_posterior<T: Real>(
    spec: &MeanSpec<T>,
    g: &Mat<T>,
    k_chol: &Cholesky<T>,
    y: &[T],
) -> Result<WeightPosterior<T>> {
    let pf = prior_factors(spec)?;
    weight_posterior_with(spec, &pf, g, k_chol, y)
}

pub(crate) fn weight_posterior_with<T: Real>(
    spec: &MeanSpec<T>,
    pf: &PriorFactors<T>,
    g: &Mat<T>,
    k_chol: &Cholesky<T>,
    y: &[T],
) -> Result<WeightPosterior<T>> {
    if g.cols() != y.len() || g.rows() != spec.centers.len() {
        return Err(Error::Contract("design matrix shape does not match data".into()));
    }
    // B = L⁻¹ Gᵀ so that G K⁻¹ Gᵀ = Bᵀ B.
    let b = k_chol.solve_lower_mat(&g.transpose());
    let mut w = pf.a_inv.add(&b.transpose().matmul(&b));
    w.symmetrize();
    let w_chol = Cholesky::new(&w).map_err(|e| Error::numerical(format!("weight precision W: {e}")))?;
    let kinv_y = k_chol.solve(y);
    let rhs: Vec<T> = pf
        .a_inv
        .matvec(&spec.prior_mean)
        .into_iter()
        .zip(g.matvec(&kinv_y))
        .map(|(u, v)| u + v)
        .collect();
    let omega_bar = w_chol.solve(&rhs);
    Ok(WeightPosterior { omega_bar, precision: w, precision_chol: w_chol })
}
