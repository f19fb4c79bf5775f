//! MAP hyperparameter learning: the negative log hyper-posterior and a
//! multi-restart scaled-conjugate-gradient search over it.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::gp::{fit, lml_gradient, lml_gradient_prior_mean};
use crate::kernels::{HyperParams, KernelFamily, KernelSpec};
use crate::meanfn::{MeanMode, MeanSpec};
use crate::optim::{inf_norm, minimize, IterRecord, ScgOptions};
use crate::scalar::Real;

/// Independent Gaussian prior on every log-domain hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    pub mean: f64,
    pub std: f64,
    /// `(mean, std)` for individual flat-vector indices.
    pub overrides: BTreeMap<usize, (f64, f64)>,
}

impl Default for HyperPrior {
    fn default() -> Self {
        HyperPrior { mean: 0.0, std: 3.0, overrides: BTreeMap::new() }
    }
}

impl HyperPrior {
    pub fn with_std(std: f64) -> Self {
        HyperPrior { std, ..Default::default() }
    }

    pub fn moments(&self, index: usize) -> (f64, f64) {
        self.overrides.get(&index).copied().unwrap_or((self.mean, self.std))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: f64| !(s > 0.0) || !s.is_finite();
        if bad(self.std) || self.overrides.values().any(|&(_, s)| bad(s)) {
            return Err(Error::Config("hyperprior standard deviations must be positive".into()));
        }
        Ok(())
    }

    /// Negative log density up to its normalising constant, and gradient.
    pub fn neg_log_density<T: Real>(&self, v: &[T]) -> (T, Vec<T>) {
        let half = T::lit(0.5);
        let mut value = T::zero();
        let grad = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (m, s) = self.moments(i);
                let z = (x - T::lit(m)) / T::lit(s);
                value = value + half * z * z;
                z / T::lit(s)
            })
            .collect();
        (value, grad)
    }
}

/// Whether the weight-prior mean `a` is learned alongside the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanProfile {
    #[default]
    Fixed,
    LearnPriorMean,
}

/// Negative log hyper-posterior `−log p(Y|θ) − log p(θ)` and its gradient
/// in the log-domain parameters of `kernel`.
pub fn map_objective<T: Real>(
    x: &[Point<T>],
    y: &[T],
    kernel: &KernelSpec<T>,
    mean: &MeanSpec<T>,
    prior: &HyperPrior,
) -> Result<(T, Vec<T>)> {
    let params = kernel.hyper.to_vec();
    let model = fit(x, y, kernel, mean).map_err(|e| with_params(e, &params))?;
    let (pv, pg) = prior.neg_log_density(&params);
    let g = lml_gradient(&model);
    let grad = g.iter().zip(&pg).map(|(&a, &b)| b - a).collect();
    Ok((pv - model.lml.total, grad))
}

fn with_params<T: Real>(e: Error, params: &[T]) -> Error {
    let p: Vec<f64> = params.iter().map(|v| v.to_f64_lossy()).collect();
    match e {
        Error::Numerical { msg } => Error::Numerical { msg: format!("{msg} at log-params {p:?}") },
        other => other,
    }
}

/// Objective over the extended vector `[kernel params, a]` used by
/// [`MeanProfile::LearnPriorMean`]; `a` carries no prior.
fn map_objective_with_mean<T: Real>(
    x: &[Point<T>],
    y: &[T],
    family: KernelFamily,
    mean: &MeanSpec<T>,
    prior: &HyperPrior,
    v: &[T],
) -> Result<(T, Vec<T>)> {
    let np = family.n_params();
    let kernel = KernelSpec { family, hyper: HyperParams::from_vec(family, &v[..np])? };
    let mut mean = mean.clone();
    mean.prior_mean = v[np..].to_vec();
    let model = fit(x, y, &kernel, &mean).map_err(|e| with_params(e, v))?;
    let (pv, pg) = prior.neg_log_density(&v[..np]);
    let mut grad: Vec<T> = lml_gradient(&model).iter().zip(&pg).map(|(&a, &b)| b - a).collect();
    grad.extend(lml_gradient_prior_mean(&model).into_iter().map(|g| -g));
    Ok((pv - model.lml.total, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub id: usize,
    pub start: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub trace: Vec<IterRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult<T> {
    pub family: KernelFamily,
    pub best_params: HyperParams<T>,
    /// Learned weight-prior mean, for [`MeanProfile::LearnPriorMean`].
    pub best_prior_mean: Option<Vec<T>>,
    pub best_objective: T,
    pub best_restart: usize,
    pub restarts: Vec<RestartTrace>,
    pub seed: u64,
}

impl<T: Real> OptResult<T> {
    pub fn kernel(&self) -> KernelSpec<T> {
        KernelSpec { family: self.family, hyper: self.best_params.clone() }
    }

    /// The mean spec with any learned prior mean substituted.
    pub fn mean(&self, base: &MeanSpec<T>) -> MeanSpec<T> {
        let mut m = base.clone();
        if let Some(a) = &self.best_prior_mean {
            m.prior_mean = a.clone();
        }
        m
    }

    /// One line per optimiser iteration: restart id, iteration, objective,
    /// gradient ∞-norm.
    pub fn trace_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.restarts {
            for it in &r.trace {
                out.push(format!("{} {} {:.12e} {:.6e}", r.id, it.iter, it.objective, it.grad_norm));
            }
            if let Some(e) = &r.error {
                out.push(format!("{} failed: {e}", r.id));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub restarts: usize,
    pub seed: u64,
    pub scg: ScgOptions,
    pub profile: MeanProfile,
    pub parallel: bool,
}

impl OptimizeConfig {
    pub fn new(restarts: usize, seed: u64) -> Self {
        OptimizeConfig { restarts, seed, scg: ScgOptions::default(), profile: MeanProfile::Fixed, parallel: true }
    }
}

/// MAP search from `restarts` seeded starting points (prior mean plus a
/// standard normal perturbation per log-parameter). The restart with the
/// lowest objective wins; ties go to the earlier restart.
pub fn optimize<T: Real>(
    x: &[Point<T>],
    y: &[T],
    family: KernelFamily,
    mean: &MeanSpec<T>,
    prior: &HyperPrior,
    cfg: &OptimizeConfig,
) -> Result<OptResult<T>> {
    if cfg.restarts == 0 {
        return Err(Error::Config("restarts must be >= 1".into()));
    }
    prior.validate()?;
    let learn_mean = cfg.profile == MeanProfile::LearnPriorMean;
    if learn_mean && mean.mode != MeanMode::Basis {
        return Err(Error::Config("learning the prior mean requires a basis mean".into()));
    }
    let np = family.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<T>> = (0..cfg.restarts)
        .map(|_| {
            let mut v: Vec<T> = (0..np)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(prior.moments(i).0 + z)
                })
                .collect();
            if learn_mean {
                v.extend_from_slice(&mean.prior_mean);
            }
            v
        })
        .collect();

    let run = |(id, start): (usize, &Vec<T>)| -> (RestartTrace, Option<(T, Vec<T>)>) {
        let objective = |v: &[T]| -> Result<(T, Vec<T>)> {
            if learn_mean {
                map_objective_with_mean(x, y, family, mean, prior, v)
            } else {
                let kernel = KernelSpec { family, hyper: HyperParams::from_vec(family, v)? };
                map_objective(x, y, &kernel, mean, prior)
            }
        };
        let start_f64 = start.iter().map(|v| v.to_f64_lossy()).collect();
        match minimize(objective, start.clone(), &cfg.scg) {
            Ok(rep) => {
                let tr = RestartTrace {
                    id,
                    start: start_f64,
                    initial_objective: rep.initial_objective.to_f64_lossy(),
                    final_objective: rep.objective.to_f64_lossy(),
                    iterations: rep.iterations,
                    grad_norm: inf_norm(&rep.gradient).to_f64_lossy(),
                    converged: rep.converged,
                    error: None,
                    trace: rep.trace,
                };
                (tr, Some((rep.objective, rep.x)))
            }
            Err(e) => {
                let tr = RestartTrace {
                    id,
                    start: start_f64,
                    initial_objective: f64::NAN,
                    final_objective: f64::NAN,
                    iterations: 0,
                    grad_norm: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                    trace: vec![],
                };
                (tr, None)
            }
        }
    };

    let results: Vec<(RestartTrace, Option<(T, Vec<T>)>)> = if cfg.parallel {
        starts.par_iter().enumerate().map(run).collect()
    } else {
        starts.iter().enumerate().map(run).collect()
    };

    let mut best: Option<(usize, T, Vec<T>)> = None;
    for (id, (_, res)) in results.iter().enumerate() {
        if let Some((f, v)) = res {
            if best.as_ref().is_none_or(|(_, bf, _)| *f < *bf) {
                best = Some((id, *f, v.clone()));
            }
        }
    }
    let restarts: Vec<RestartTrace> = results.into_iter().map(|(t, _)| t).collect();
    let Some((best_restart, best_objective, v)) = best else {
        let msgs: Vec<String> =
            restarts.iter().map(|r| format!("restart {}: {}", r.id, r.error.as_deref().unwrap_or("?"))).collect();
        return Err(Error::Optimization(msgs.join("; ")));
    };
    Ok(OptResult {
        family,
        best_params: HyperParams::from_vec(family, &v[..np])?,
        best_prior_mean: learn_mean.then(|| v[np..].to_vec()),
        best_objective,
        best_restart,
        restarts,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|analytic − numeric| / max(abs_tol, rel_tol·|numeric|)`;
    /// the check passes when this is at most 1.
    pub worst_ratio: f64,
}

impl GradientCheck {
    pub fn passes(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Central finite-difference check of an objective's analytic gradient.
pub fn check_gradient<F>(mut f: F, at: &[f64], step: f64, abs_tol: f64, rel_tol: f64) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(at)?;
    let mut numeric = Vec::with_capacity(at.len());
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut xp = at.to_vec();
        let mut xm = at.to_vec();
        xp[i] += step;
        xm[i] -= step;
        let fd = (f(&xp)?.0 - f(&xm)?.0) / (2.0 * step);
        let bound = abs_tol.max(rel_tol * fd.abs());
        worst = worst.max((analytic[i] - fd).abs() / bound);
        numeric.push(fd);
    }
    Ok(GradientCheck { analytic, numeric, worst_ratio: worst })
}
