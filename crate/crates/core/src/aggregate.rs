//! Adaptive L1-penalised aggregation of target and source summaries.
//!
//! With `h(η) = h₀ + Bη` the coefficient vector applied to the pooled target
//! `(M̂, δ̂, ψ̄)`, the objective is
//!
//! ```text
//! f(η) = N [Σ_k η_k² σ̂_k² + h(η)ᵀ S h(η)] + λ Σ_k w_k |η_k|
//!      = ηᵀAη + 2bᵀη + c + λ Σ_k w_k |η_k|
//! ```
//!
//! where `S = Σ_t (n_t/N_T)² Σ̂_t`, `h₀ = (1, 1, 0, …)` and column `k` of `B`
//! is `(−t_k, −1, d̂_kᵀ)ᵀ` with `t_k = 1` for transported sources and `0`
//! for anchored ones. The penalty weight is `w_k = (Δ̂_k − Δ̂_T)²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{FaceError, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;
use crate::summary::{SourceSummary, TargetPool, TargetSummary};

pub const LAMBDA_GRID: [f64; 11] = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];
pub const MAX_SWEEPS: usize = 10_000;
pub const STEP_TOL: f64 = 1e-10;
pub const KKT_TOL: f64 = 1e-6;

/// The summaries a leading site works from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct SummarySet<T: Real> {
    pub targets: Vec<TargetSummary<T>>,
    pub sources: Vec<SourceSummary<T>>,
}

#[derive(Debug, Clone)]
pub struct AggregationProblem<T: Real> {
    pub target: TargetPool<T>,
    /// Usable sources only.
    pub sources: Vec<SourceSummary<T>>,
    pub lambda: T,
    pub n_total: usize,
}

impl<T: Real> AggregationProblem<T> {
    pub fn new(set: &SummarySet<T>, lambda: T) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(FaceError::Validation(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        for t in &set.targets {
            t.validate()?;
        }
        let target = TargetPool::combine(&set.targets)?;
        let mut sources = Vec::new();
        for s in &set.sources {
            s.validate()?;
            if !s.usable {
                log::warn!(
                    "source {} left out of the aggregation: {}",
                    s.site_id,
                    s.note.as_deref().unwrap_or("unusable")
                );
                continue;
            }
            if s.d_hat.len() != target.q() {
                return Err(FaceError::Validation(format!(
                    "source {} reports d_hat of length {}, target covariate summary has {}",
                    s.site_id,
                    s.d_hat.len(),
                    target.q()
                )));
            }
            sources.push(s.clone());
        }
        let mut ids: Vec<&str> = set
            .targets
            .iter()
            .map(|t| t.site_id.as_str())
            .chain(sources.iter().map(|s| s.site_id.as_str()))
            .collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(FaceError::Validation(format!("duplicate site id {}", w[0])));
        }
        let n_total = target.n_target + sources.iter().map(|s| s.n_k).sum::<usize>();
        Ok(Self {
            target,
            sources,
            lambda,
            n_total,
        })
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    /// `Δ̂_k` for every source.
    pub fn site_estimates(&self) -> Vec<T> {
        self.sources
            .iter()
            .map(|s| s.site_estimate(self.target.m_hat))
            .collect()
    }

    pub fn penalty_weights(&self) -> Vec<T> {
        let base = self.target.big_delta_hat;
        self.site_estimates()
            .into_iter()
            .map(|e| (e - base) * (e - base))
            .collect()
    }

    /// `S` with every target block projected onto the PSD cone.
    pub fn target_covariance(&self) -> Matrix<T> {
        let dim = self.target.q() + 2;
        self.target
            .blocks
            .iter()
            .fold(Matrix::zeros(dim, dim), |acc, (w, s)| {
                let (p, clipped) = s.symmetrized().psd_projection();
                if clipped {
                    log::warn!(
                        "a target covariance block was not PSD; negative eigenvalues floored at 0"
                    );
                }
                acc.add(&p.scale(*w * *w))
            })
    }

    fn h0(&self) -> Vec<T> {
        let mut h = vec![T::zero(); self.target.q() + 2];
        h[0] = T::one();
        h[1] = T::one();
        h
    }

    /// Column `k` of `B`.
    fn b_column(&self, k: usize) -> Vec<T> {
        let s = &self.sources[k];
        let mut col = Vec::with_capacity(self.target.q() + 2);
        col.push(if s.is_transported() {
            -T::one()
        } else {
            T::zero()
        });
        col.push(-T::one());
        col.extend_from_slice(&s.d_hat);
        col
    }

    /// `h(η) = h₀ + Bη`
    pub fn h(&self, eta: &[T]) -> Vec<T> {
        let mut h = self.h0();
        for (k, &e) in eta.iter().enumerate() {
            for (hi, c) in h.iter_mut().zip(self.b_column(k)) {
                *hi = *hi + e * c;
            }
        }
        h
    }

    pub fn quadratic(&self) -> Quadratic<T> {
        let k = self.k();
        let n = T::from_count(self.n_total);
        let s = self.target_covariance();
        let cols: Vec<Vec<T>> = (0..k).map(|j| self.b_column(j)).collect();
        let s_cols: Vec<Vec<T>> = cols.iter().map(|c| s.mul_vec(c)).collect();
        let mut a = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let mut v = dot(&cols[i], &s_cols[j]);
                if i == j {
                    v = v + self.sources[i].sigma2_hat;
                }
                a.row_mut(i)[j] = n * v;
            }
        }
        let h0 = self.h0();
        let b = s_cols.iter().map(|sc| n * dot(sc, &h0)).collect();
        let c = n * s.quad_form(&h0);
        Quadratic {
            a: a.symmetrized(),
            b,
            c,
        }
    }
}

/// `ηᵀAη + 2bᵀη + c`
#[derive(Debug, Clone)]
pub struct Quadratic<T: Real> {
    pub a: Matrix<T>,
    pub b: Vec<T>,
    pub c: T,
}

impl<T: Real> Quadratic<T> {
    pub fn value(&self, eta: &[T]) -> T {
        if eta.is_empty() {
            return self.c;
        }
        self.a.quad_form(eta) + T::lit(2.0) * dot(&self.b, eta) + self.c
    }

    /// `∂/∂η (ηᵀAη + 2bᵀη)`
    pub fn gradient(&self, eta: &[T]) -> Vec<T> {
        let two = T::lit(2.0);
        self.a
            .mul_vec(eta)
            .iter()
            .zip(&self.b)
            .map(|(&ax, &b)| two * (ax + b))
            .collect()
    }

    pub fn penalised(&self, eta: &[T], lambda: T, w: &[T]) -> T {
        let pen: T = eta.iter().zip(w).map(|(&e, &w)| w * e.abs()).sum();
        self.value(eta) + lambda * pen
    }
}

fn soft_threshold<T: Real>(z: T, t: T) -> T {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        T::zero()
    }
}

/// Largest violation of the subgradient optimality conditions.
pub fn kkt_residual<T: Real>(quad: &Quadratic<T>, eta: &[T], lambda: T, w: &[T]) -> T {
    let g = quad.gradient(eta);
    g.iter()
        .zip(eta)
        .zip(w)
        .map(|((&g, &e), &w)| {
            let t = lambda * w;
            if e > T::zero() {
                (g + t).abs()
            } else if e < T::zero() {
                (g - t).abs()
            } else {
                (g.abs() - t).max(T::zero())
            }
        })
        .fold(T::zero(), T::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateDescent<T> {
    pub eta: Vec<T>,
    /// Penalised objective before the first sweep and after every sweep.
    pub objective_trace: Vec<T>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Minimises `ηᵀAη + 2bᵀη + λ Σ w_k|η_k|` by cyclic coordinate descent with
/// exact soft-threshold updates. Coordinates with a non-positive diagonal
/// are held at zero.
pub fn coordinate_descent<T: Real>(
    quad: &Quadratic<T>,
    lambda: T,
    w: &[T],
) -> CoordinateDescent<T> {
    let k = quad.b.len();
    let mut eta = vec![T::zero(); k];
    let mut trace = vec![quad.penalised(&eta, lambda, w)];
    let tol = T::lit(STEP_TOL);
    let mut converged = k == 0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        let mut max_change = T::zero();
        for j in 0..k {
            let ajj = quad.a[(j, j)];
            if !(ajj > T::zero()) {
                continue;
            }
            let row = quad.a.row(j);
            let off: T = (0..k).filter(|&i| i != j).map(|i| row[i] * eta[i]).sum();
            let z = -(quad.b[j] + off);
            let new = soft_threshold(z, lambda * w[j] / T::lit(2.0)) / ajj;
            max_change = max_change.max((new - eta[j]).abs());
            eta[j] = new;
        }
        sweeps += 1;
        trace.push(quad.penalised(&eta, lambda, w));
        converged = max_change <= tol;
    }
    if !converged {
        log::warn!("coordinate descent stopped after {MAX_SWEEPS} sweeps");
    }
    CoordinateDescent {
        eta,
        objective_trace: trace,
        sweeps,
        converged,
    }
}

/// Re-solves the stationarity equations on the support found by coordinate
/// descent. Kept only if signs are preserved and the objective does not get
/// worse beyond rounding, so it can only tighten the KKT residual.
fn polish<T: Real>(quad: &Quadratic<T>, eta: &[T], lambda: T, w: &[T]) -> Option<Vec<T>> {
    let support: Vec<usize> = (0..eta.len()).filter(|&j| eta[j] != T::zero()).collect();
    if support.is_empty() {
        return None;
    }
    let m = support.len();
    let mut a = Matrix::zeros(m, m);
    let mut rhs = vec![T::zero(); m];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a.row_mut(r)[c] = quad.a[(i, j)];
        }
        let sign = if eta[i] > T::zero() {
            T::one()
        } else {
            -T::one()
        };
        rhs[r] = -quad.b[i] - lambda * w[i] * sign / T::lit(2.0);
    }
    let sol = a.cholesky().ok()?.solve(&rhs);
    let mut out = vec![T::zero(); eta.len()];
    for (r, &i) in support.iter().enumerate() {
        if sol[r] * eta[i] <= T::zero() {
            return None;
        }
        out[i] = sol[r];
    }
    let before = quad.penalised(eta, lambda, w);
    let slack = T::lit(64.0) * T::epsilon() * (before.abs() + T::one());
    let better = quad.penalised(&out, lambda, w) <= before + slack;
    let tighter = kkt_residual(quad, &out, lambda, w) <= kkt_residual(quad, eta, lambda, w);
    (better && tighter).then_some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct LambdaPoint<T: Real> {
    pub lambda: T,
    pub loss: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct AggregationResult<T: Real> {
    /// Source site ids in the order of `eta`.
    pub site_ids: Vec<String>,
    pub eta: Vec<T>,
    pub delta_face: T,
    pub v_hat: T,
    pub ci: (T, T),
    pub alpha: T,
    pub lambda_used: T,
    pub selected: Vec<String>,
    pub excluded: Vec<String>,
    pub n_total: usize,
    pub target_estimate: T,
    pub site_estimates: Vec<T>,
    pub penalty_weights: Vec<T>,
    pub objective_trace: Vec<T>,
    pub sweeps: usize,
    pub converged: bool,
    pub kkt_residual: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_curve: Option<Vec<LambdaPoint<T>>>,
}

/// `(1 − Σ η_k) Δ̂_T + Σ η_k Δ̂_k`
pub fn face_estimate<T: Real>(
    eta: &[T],
    target: &TargetPool<T>,
    sources: &[SourceSummary<T>],
) -> T {
    let total: T = eta.iter().copied().sum();
    let mixed: T = eta
        .iter()
        .zip(sources)
        .map(|(&e, s)| e * s.site_estimate(target.m_hat))
        .sum();
    (T::one() - total) * target.big_delta_hat + mixed
}

/// The same combination written on the components:
/// `(1 − Σ_tr η_k) M̂_T + (1 − Σ η_k) δ̂_T + Σ η_k s_k`, where `s_k` is the
/// statistic source `k` reports.
pub fn face_estimate_components<T: Real>(
    eta: &[T],
    target: &TargetPool<T>,
    sources: &[SourceSummary<T>],
) -> T {
    let total: T = eta.iter().copied().sum();
    let transported: T = eta
        .iter()
        .zip(sources)
        .filter(|(_, s)| s.is_transported())
        .map(|(&e, _)| e)
        .sum();
    let stats: T = eta
        .iter()
        .zip(sources)
        .map(|(&e, s)| e * s.statistic())
        .sum();
    (T::one() - transported) * target.m_hat + (T::one() - total) * target.delta_hat + stats
}

/// `V̂ = N [Σ η_k² σ̂_k² + h(η)ᵀ S h(η)]`
pub fn face_variance<T: Real>(problem: &AggregationProblem<T>, eta: &[T]) -> T {
    let n = T::from_count(problem.n_total);
    let s = problem.target_covariance();
    let own: T = eta
        .iter()
        .zip(&problem.sources)
        .map(|(&e, src)| e * e * src.sigma2_hat)
        .sum();
    (n * (own + s.quad_form(&problem.h(eta)))).max(T::zero())
}

/// `Δ̂ ± z_{1−α/2} √(V̂/N)`
pub fn face_ci<T: Real>(delta_face: T, v_hat: T, n: usize, alpha: T) -> Result<(T, T)> {
    let a = alpha.to_f64_lossy();
    if !(a > 0.0 && a <= 1.0) {
        return Err(FaceError::Validation(format!(
            "alpha must be in (0, 1], got {a}"
        )));
    }
    let z = Normal::standard().inverse_cdf(1.0 - a / 2.0);
    let half = T::lit(z) * (v_hat / T::from_count(n)).sqrt();
    Ok((delta_face - half, delta_face + half))
}

/// Solves for `η` at `problem.lambda` and assembles the full result.
pub fn solve_eta<T: Real>(
    problem: &AggregationProblem<T>,
    alpha: T,
) -> Result<AggregationResult<T>> {
    let quad = problem.quadratic();
    let w = problem.penalty_weights();
    let lambda = problem.lambda;
    let mut cd = coordinate_descent(&quad, lambda, &w);
    if let Some(p) = polish(&quad, &cd.eta, lambda, &w) {
        cd.eta = p;
    }
    let kkt = kkt_residual(&quad, &cd.eta, lambda, &w);
    if kkt > T::lit(KKT_TOL) {
        log::warn!("aggregation KKT residual {kkt} above {KKT_TOL}");
    }
    let delta_face = face_estimate(&cd.eta, &problem.target, &problem.sources);
    let v_hat = face_variance(problem, &cd.eta);
    let ci = face_ci(delta_face, v_hat, problem.n_total, alpha)?;
    let site_ids: Vec<String> = problem.sources.iter().map(|s| s.site_id.clone()).collect();
    let selected = site_ids
        .iter()
        .zip(&cd.eta)
        .filter(|(_, &e)| e != T::zero())
        .map(|(id, _)| id.clone())
        .collect();
    Ok(AggregationResult {
        site_ids,
        eta: cd.eta,
        delta_face,
        v_hat,
        ci,
        alpha,
        lambda_used: lambda,
        selected,
        excluded: Vec::new(),
        n_total: problem.n_total,
        target_estimate: problem.target.big_delta_hat,
        site_estimates: problem.site_estimates(),
        penalty_weights: w,
        objective_trace: cd.objective_trace,
        sweeps: cd.sweeps,
        converged: cd.converged,
        kkt_residual: kkt,
        lambda_curve: None,
    })
}

/// Estimated mean squared error of the combination `η` on held-out
/// summaries. With `D_k = Δ̂_k − Δ̂_T` on the validation half,
///
/// ```text
/// loss(η) = (Σ η_k D_k)² − Var(Σ η_k D_k) + V̂(η)/N
///         = (Σ η_k D_k)² + 2bᵀη/N + c/N
/// ```
///
/// i.e. squared bias (debiased by the sampling variance of the differences)
/// plus variance, both evaluated on the validation summaries.
pub fn validation_loss<T: Real>(validation: &AggregationProblem<T>, eta: &[T]) -> T {
    let quad = validation.quadratic();
    let n = T::from_count(validation.n_total);
    let base = validation.target.big_delta_hat;
    let shift: T = eta
        .iter()
        .zip(validation.site_estimates())
        .map(|(&e, d)| e * (d - base))
        .sum();
    shift * shift + (T::lit(2.0) * dot(&quad.b, eta) + quad.c) / n
}

/// Picks `λ` from `grid` by solving on `train` and scoring on `validation`.
/// Only sources usable in both halves take part. Ties go to the smaller
/// `λ`.
pub fn select_lambda<T: Real>(
    train: &SummarySet<T>,
    validation: &SummarySet<T>,
    grid: &[T],
) -> Result<(T, Vec<LambdaPoint<T>>)> {
    if grid.is_empty() {
        return Err(FaceError::Validation("lambda grid is empty".into()));
    }
    let find = |set: &SummarySet<T>, id: &str| {
        set.sources
            .iter()
            .find(|s| s.site_id == id && s.usable)
            .cloned()
    };
    let ids: Vec<String> = train
        .sources
        .iter()
        .filter(|s| find(train, &s.site_id).is_some() && find(validation, &s.site_id).is_some())
        .map(|s| s.site_id.clone())
        .collect();
    let keep = |set: &SummarySet<T>| SummarySet {
        targets: set.targets.clone(),
        sources: ids.iter().filter_map(|id| find(set, id)).collect(),
    };
    let (train, validation) = (keep(train), keep(validation));
    let val = AggregationProblem::new(&validation, T::zero())?;
    let curve: Vec<LambdaPoint<T>> = grid
        .par_iter()
        .map(|&lambda| {
            let problem = AggregationProblem::new(&train, lambda)?;
            let quad = problem.quadratic();
            let w = problem.penalty_weights();
            let mut cd = coordinate_descent(&quad, lambda, &w);
            if let Some(p) = polish(&quad, &cd.eta, lambda, &w) {
                cd.eta = p;
            }
            Ok(LambdaPoint {
                lambda,
                loss: validation_loss(&val, &cd.eta),
            })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..curve.len()).collect();
    order.sort_by(|&i, &j| {
        curve[i]
            .loss
            .partial_cmp(&curve[j].loss)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                curve[i]
                    .lambda
                    .partial_cmp(&curve[j].lambda)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    Ok((curve[order[0]].lambda, curve))
}

/// `N^{1/3}`
pub fn default_lambda<T: Real>(n_total: usize) -> T {
    T::from_count(n_total).cbrt()
}
