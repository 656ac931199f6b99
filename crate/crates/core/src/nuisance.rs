//! Per-site nuisance models: propensity score, outcome regressions, and the
//! exponential-tilt density ratio.
//!
//! The logistic and density-ratio fits are damped Newton iterations on convex
//! objectives: each full Newton step is halved until the objective stops
//! increasing, and the iteration stops once the gradient sup-norm falls below
//! the tolerance.

use serde::{Deserialize, Serialize};

use crate::data::{Basis, OutcomeKind, SiteData};
use crate::error::{FaceError, Result};
use crate::linalg::{dot, inf_norm, Matrix};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::fit_tolerance(),
            max_iter: 100,
        }
    }
}

const MAX_HALVINGS: usize = 60;

/// Slack for comparing objective values that agree up to rounding.
fn round_off<T: Real>(v: T) -> T {
    T::lit(4.0) * T::epsilon() * (T::one() + v.abs())
}

#[inline]
pub fn expit<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + eˣ)` without overflow.
#[inline]
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct LogisticFit<T: Real> {
    pub coef: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: T,
}

impl<T: Real> LogisticFit<T> {
    pub fn linear_predictor(&self, x_row: &[T]) -> T {
        dot(&self.coef, x_row)
    }

    pub fn predict(&self, x_row: &[T]) -> T {
        expit(self.linear_predictor(x_row))
    }
}

fn rows_of(n: usize, subset: Option<&[usize]>) -> Vec<usize> {
    subset.map_or_else(|| (0..n).collect(), <[usize]>::to_vec)
}

fn check_full_rank<T: Real>(design: &Matrix<T>, rows: &[usize]) -> Result<()> {
    let mut w = vec![T::zero(); design.rows()];
    for &i in rows {
        w[i] = T::one();
    }
    design.weighted_gram(&w).cholesky().map(|_| ())
}

/// Logistic regression of `y ∈ {0,1}` on `design` (intercept included),
/// optionally restricted to the rows in `subset`.
///
/// Perfect separation does not error: the fit comes back with
/// `converged = false` and the caller decides what to do with it.
pub fn fit_logistic<T: Real>(
    y: &[T],
    design: &Matrix<T>,
    subset: Option<&[usize]>,
    opts: &FitOptions<T>,
) -> Result<LogisticFit<T>> {
    let rows = rows_of(design.rows(), subset);
    if rows.is_empty() {
        return Err(FaceError::Validation("logistic fit on empty subset".into()));
    }
    let ones = rows.iter().filter(|&&i| y[i] == T::one()).count();
    if ones == 0 || ones == rows.len() {
        return Err(FaceError::Validation(
            "logistic fit needs both outcome classes".into(),
        ));
    }
    check_full_rank(design, &rows)?;

    let q = design.cols();
    let m = T::from_count(rows.len());
    let loss = |b: &[T]| -> T {
        rows.iter()
            .map(|&i| {
                let eta = dot(design.row(i), b);
                softplus(eta) - y[i] * eta
            })
            .sum::<T>()
            / m
    };

    let mut coef = vec![T::zero(); q];
    let mut current = loss(&coef);
    let mut iterations = 0;
    let mut converged = false;
    let mut score_norm;
    loop {
        let mut grad = vec![T::zero(); q];
        let mut curv = vec![T::zero(); design.rows()];
        for &i in &rows {
            let x = design.row(i);
            let p = expit(dot(x, &coef));
            let r = y[i] - p;
            for (g, &xj) in grad.iter_mut().zip(x) {
                *g = *g + r * xj;
            }
            curv[i] = p * (T::one() - p);
        }
        grad.iter_mut().for_each(|g| *g = *g / m);
        score_norm = inf_norm(&grad);
        if score_norm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let hess = design.weighted_gram(&curv).scale(T::one() / m);
        let step = match hess.cholesky() {
            Ok(c) => c.solve(&grad),
            // probabilities saturated at 0/1: separation
            Err(_) => break,
        };
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<T> = coef.iter().zip(&step).map(|(&c, &s)| c + t * s).collect();
            let l = loss(&trial);
            if l <= current + round_off(current) {
                coef = trial;
                current = l;
                accepted = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    // fitted probabilities numerically 0 or 1: the score vanishes only
    // asymptotically and the coefficients are not identified
    let saturated = rows.iter().any(|&i| {
        let p = expit(dot(design.row(i), &coef));
        p * (T::one() - p) < T::lit(1e-10).max(T::epsilon())
    });
    if saturated {
        converged = false;
    }
    if !converged {
        log::warn!(
            "logistic fit stopped after {iterations} iterations with score norm {score_norm}"
        );
    }
    Ok(LogisticFit {
        coef,
        converged,
        iterations,
        score_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct LinearFit<T: Real> {
    pub coef: Vec<T>,
    pub residual_variance: T,
}

/// Ordinary least squares through the normal equations, with one round of
/// iterative refinement.
pub fn fit_linear<T: Real>(
    y: &[T],
    design: &Matrix<T>,
    subset: Option<&[usize]>,
) -> Result<LinearFit<T>> {
    let rows = rows_of(design.rows(), subset);
    let q = design.cols();
    let mut w = vec![T::zero(); design.rows()];
    for &i in &rows {
        w[i] = T::one();
    }
    let gram = design.weighted_gram(&w);
    let chol = gram.cholesky()?;
    let xty = |r: &dyn Fn(usize) -> T| {
        let mut v = vec![T::zero(); q];
        for &i in &rows {
            let ri = r(i);
            for (acc, &x) in v.iter_mut().zip(design.row(i)) {
                *acc = *acc + ri * x;
            }
        }
        v
    };
    let mut coef = chol.solve(&xty(&|i| y[i]));
    let correction = chol.solve(&xty(&|i| y[i] - dot(design.row(i), &coef)));
    for (c, d) in coef.iter_mut().zip(&correction) {
        *c = *c + *d;
    }
    let rss: T = rows
        .iter()
        .map(|&i| {
            let e = y[i] - dot(design.row(i), &coef);
            e * e
        })
        .sum();
    let dof = rows.len().saturating_sub(q);
    let residual_variance = if dof > 0 {
        rss / T::from_count(dof)
    } else {
        T::zero()
    };
    Ok(LinearFit {
        coef,
        residual_variance,
    })
}

/// Outcome regression `E[Y | A = a, X]`; the family follows the outcome type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "family",
    rename_all = "snake_case",
    bound(deserialize = "T: Real")
)]
pub enum OutcomeModel<T: Real> {
    Logistic(LogisticFit<T>),
    Linear(LinearFit<T>),
}

impl<T: Real> OutcomeModel<T> {
    pub fn coef(&self) -> &[T] {
        match self {
            OutcomeModel::Logistic(f) => &f.coef,
            OutcomeModel::Linear(f) => &f.coef,
        }
    }

    pub fn predict(&self, x_row: &[T]) -> T {
        match self {
            OutcomeModel::Logistic(f) => f.predict(x_row),
            OutcomeModel::Linear(f) => dot(&f.coef, x_row),
        }
    }

    /// Derivative of the mean with respect to the linear predictor.
    pub fn slope(&self, x_row: &[T]) -> T {
        match self {
            OutcomeModel::Logistic(f) => {
                let p = f.predict(x_row);
                p * (T::one() - p)
            }
            OutcomeModel::Linear(_) => T::one(),
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            OutcomeModel::Logistic(f) => f.converged,
            OutcomeModel::Linear(_) => true,
        }
    }
}

pub fn fit_outcome<T: Real>(
    kind: OutcomeKind,
    y: &[T],
    design: &Matrix<T>,
    subset: &[usize],
    opts: &FitOptions<T>,
) -> Result<OutcomeModel<T>> {
    Ok(match kind {
        OutcomeKind::Binary => OutcomeModel::Logistic(fit_logistic(y, design, Some(subset), opts)?),
        OutcomeKind::Continuous => OutcomeModel::Linear(fit_linear(y, design, Some(subset))?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct DensityRatioFit<T: Real> {
    pub gamma: Vec<T>,
    pub moment_residual_norm: T,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Real> DensityRatioFit<T> {
    /// `ω(ψᵢ) = exp(γᵀψᵢ)` for every row of `psi`.
    pub fn weights(&self, psi: &Matrix<T>) -> Vec<T> {
        (0..psi.rows())
            .map(|i| dot(&self.gamma, psi.row(i)).exp())
            .collect()
    }
}

/// Solves `n⁻¹ Σ exp(γᵀψᵢ) ψᵢ = ψ̄_T` by minimising the convex objective
/// `n⁻¹ Σ exp(γᵀψᵢ) − γᵀψ̄_T`. If `ψ̄_T` lies outside the convex hull of the
/// site's `ψ` values the minimiser does not exist and the fit reports
/// `converged = false`.
pub fn fit_density_ratio<T: Real>(
    psi: &Matrix<T>,
    psi_bar_target: &[T],
    opts: &FitOptions<T>,
) -> Result<DensityRatioFit<T>> {
    let q = psi.cols();
    if psi_bar_target.len() != q {
        return Err(FaceError::Validation(format!(
            "target covariate summary has length {}, site basis has {q}",
            psi_bar_target.len()
        )));
    }
    check_full_rank(psi, &(0..psi.rows()).collect::<Vec<_>>())?;
    let n = T::from_count(psi.rows());
    let objective = |g: &[T]| -> T {
        let s: T = (0..psi.rows()).map(|i| dot(g, psi.row(i)).exp()).sum();
        s / n - dot(g, psi_bar_target)
    };

    let mut gamma = vec![T::zero(); q];
    let mut current = objective(&gamma);
    let mut iterations = 0;
    let mut converged = false;
    let mut residual;
    loop {
        let w: Vec<T> = (0..psi.rows())
            .map(|i| dot(&gamma, psi.row(i)).exp())
            .collect();
        let mut grad = psi.tr_mul_vec(&w);
        for (g, &t) in grad.iter_mut().zip(psi_bar_target) {
            *g = *g / n - t;
        }
        residual = inf_norm(&grad);
        if residual <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter || !residual.is_finite() {
            break;
        }
        let hess = psi.weighted_gram(&w).scale(T::one() / n);
        let step = match hess.cholesky() {
            Ok(c) => c.solve(&grad),
            Err(_) => break,
        };
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<T> = gamma.iter().zip(&step).map(|(&g, &s)| g - t * s).collect();
            let f = objective(&trial);
            if f <= current + round_off(current) {
                gamma = trial;
                current = f;
                accepted = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(DensityRatioFit {
        gamma,
        moment_residual_norm: residual,
        converged,
        iterations,
    })
}

/// The three per-site regression fits plus the design they were fitted on.
#[derive(Debug, Clone)]
pub struct NuisanceFits<T: Real> {
    pub propensity: LogisticFit<T>,
    pub outcome1: OutcomeModel<T>,
    pub outcome0: OutcomeModel<T>,
}

impl<T: Real> NuisanceFits<T> {
    pub fn converged(&self) -> bool {
        self.propensity.converged && self.outcome1.converged() && self.outcome0.converged()
    }
}

pub fn fit_nuisances<T: Real>(
    data: &SiteData<T>,
    basis: Basis,
    opts: &FitOptions<T>,
) -> Result<NuisanceFits<T>> {
    let design = basis.design(data.x());
    let a: Vec<T> = data
        .treated()
        .iter()
        .map(|&t| if t { T::one() } else { T::zero() })
        .collect();
    let treated: Vec<usize> = (0..data.n()).filter(|&i| data.treated()[i]).collect();
    let control: Vec<usize> = (0..data.n()).filter(|&i| !data.treated()[i]).collect();
    let propensity = fit_logistic(&a, &design, None, opts)?;
    let outcome1 = fit_outcome(data.outcome_kind(), data.y(), &design, &treated, opts)?;
    let outcome0 = fit_outcome(data.outcome_kind(), data.y(), &design, &control, opts)?;
    Ok(NuisanceFits {
        propensity,
        outcome1,
        outcome0,
    })
}

/// Per-row influence of an M-estimator whose estimating function is
/// `maskᵢ · xᵢ · residualᵢ`: row `i` is `H⁻¹ xᵢ residualᵢ` with
/// `H = n⁻¹ Σ maskᵢ · curvatureᵢ · xᵢxᵢᵀ` (rows outside the mask get zero).
pub fn m_estimator_influence<T: Real>(
    design: &Matrix<T>,
    mask: &[bool],
    residual: &[T],
    curvature: &[T],
) -> Result<Matrix<T>> {
    let n = design.rows();
    let w: Vec<T> = (0..n)
        .map(|i| if mask[i] { curvature[i] } else { T::zero() })
        .collect();
    let h = design.weighted_gram(&w).scale(T::one() / T::from_count(n));
    let chol = h.cholesky()?;
    let mut out = Matrix::zeros(n, design.cols());
    for i in 0..n {
        if !mask[i] || residual[i] == T::zero() {
            continue;
        }
        let rhs: Vec<T> = design.row(i).iter().map(|&x| x * residual[i]).collect();
        out.row_mut(i).copy_from_slice(&chol.solve(&rhs));
    }
    Ok(out)
}
