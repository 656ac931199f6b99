//! Source-site step: density-ratio weighted augmentation, its conditional
//! variance given the target covariate summary, and its derivative with
//! respect to that summary.

use serde::{Deserialize, Serialize};

use crate::data::SiteData;
use crate::error::{FaceError, Result};
use crate::linalg::{mean, Matrix};
use crate::nuisance::{fit_density_ratio, fit_nuisances, DensityRatioFit, NuisanceFits};
use crate::scalar::Real;
use crate::site::{
    add_projection, weighted_col_mean, AipwRows, InfluenceForm, NuisanceInfluence, StepOptions,
    VarianceMethod,
};
use crate::summary::SourceSummary;
use crate::target::{bootstrap, center, sample_covariance};

/// What a source site contributes besides its weighted augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// The site also reports `n⁻¹ Σ ωᵢ (m̂₁ − m̂₀)(Xᵢ)` from its own outcome
    /// models, giving a self-contained estimate of the target effect.
    #[default]
    Transported,
    /// Only the weighted augmentation; the site estimate borrows the target
    /// plug-in component.
    Anchored,
}

impl std::str::FromStr for SourceMode {
    type Err = FaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transported" => Ok(SourceMode::Transported),
            "anchored" => Ok(SourceMode::Anchored),
            other => Err(FaceError::Validation(format!(
                "unknown source mode {other:?} (expected transported or anchored)"
            ))),
        }
    }
}

/// `n⁻¹ Σ ωᵢ rᵢ`
pub fn source_augmentation<T: Real>(rows: &AipwRows<T>, w: &[T]) -> T {
    mean(
        &rows
            .r
            .iter()
            .zip(w)
            .map(|(&r, &w)| w * r)
            .collect::<Vec<_>>(),
    )
}

/// `n⁻¹ Σ ωᵢ (m̂₁(Xᵢ) − m̂₀(Xᵢ))`
pub fn source_plug_in<T: Real>(rows: &AipwRows<T>, w: &[T]) -> T {
    mean(
        &(0..rows.n())
            .map(|i| w[i] * rows.contrast(i))
            .collect::<Vec<_>>(),
    )
}

/// Per-row summand `sᵢ` of the contributed statistic `n⁻¹ Σ ωᵢ sᵢ`.
fn summand<T: Real>(rows: &AipwRows<T>, mode: SourceMode) -> Vec<T> {
    (0..rows.n())
        .map(|i| match mode {
            SourceMode::Transported => rows.r[i] + rows.contrast(i),
            SourceMode::Anchored => rows.r[i],
        })
        .collect()
}

/// `G = n⁻¹ Σ ωᵢ ψᵢψᵢᵀ`, the derivative of the moment condition in `γ`.
fn tilt_gram<T: Real>(rows: &AipwRows<T>, w: &[T]) -> Matrix<T> {
    rows.design
        .weighted_gram(w)
        .scale(T::one() / T::from_count(rows.n()))
}

/// Derivative of the contributed statistic with respect to the target
/// covariate summary: `(n⁻¹ Σ ωᵢ sᵢ ψᵢᵀ) G⁻¹`. Moving `ψ̄_T` by `dψ̄` moves
/// `γ̂` by `G⁻¹ dψ̄`.
pub fn source_d_hat<T: Real>(rows: &AipwRows<T>, w: &[T], mode: SourceMode) -> Result<Vec<T>> {
    let s = summand(rows, mode);
    let ws: Vec<T> = s.iter().zip(w).map(|(&s, &w)| s * w).collect();
    let score = weighted_col_mean(&rows.design, Some(&ws));
    Ok(tilt_gram(rows, w).cholesky()?.solve(&score))
}

/// Influence-function estimate of the conditional variance of the
/// contributed statistic given `ψ̄_T`.
pub fn source_sigma2_influence<T: Real>(
    rows: &AipwRows<T>,
    fits: &NuisanceFits<T>,
    w: &[T],
    psi_bar_target: &[T],
    mode: SourceMode,
    opts: &StepOptions<T>,
) -> Result<T> {
    let n = rows.n();
    let s = summand(rows, mode);
    let ws: Vec<T> = s.iter().zip(w).map(|(&s, &w)| s * w).collect();
    let tau = mean(&ws);
    let mut xi: Vec<T> = ws.iter().map(|&v| v - tau).collect();
    if opts.influence == InfluenceForm::Full {
        let grads = rows.residual_gradients(fits);
        let inf = NuisanceInfluence::new(rows, fits, &grads)?;
        let transported = mode == SourceMode::Transported;
        let mut d_b1 = weighted_col_mean(&grads.beta1, Some(w));
        let mut d_b0 = weighted_col_mean(&grads.beta0, Some(w));
        if transported {
            let w1: Vec<T> = (0..n).map(|i| w[i] * grads.slope1[i]).collect();
            let w0: Vec<T> = (0..n).map(|i| w[i] * grads.slope0[i]).collect();
            let p1 = weighted_col_mean(&rows.design, Some(&w1));
            let p0 = weighted_col_mean(&rows.design, Some(&w0));
            d_b1.iter_mut().zip(p1).for_each(|(d, p)| *d = *d + p);
            d_b0.iter_mut().zip(p0).for_each(|(d, p)| *d = *d - p);
        }
        add_projection(
            &mut xi,
            &inf.alpha,
            &weighted_col_mean(&grads.alpha, Some(w)),
        );
        add_projection(&mut xi, &inf.beta1, &d_b1);
        add_projection(&mut xi, &inf.beta0, &d_b0);

        // γ̂ solves n⁻¹ Σ ωᵢψᵢ = ψ̄_T with ψ̄_T held fixed
        let chol = tilt_gram(rows, w).cholesky()?;
        let d_gamma = weighted_col_mean(&rows.design, Some(&ws));
        let lever = chol.solve(&d_gamma);
        for i in 0..n {
            let x = rows.design.row(i);
            let moment: T = (0..x.len())
                .map(|j| (w[i] * x[j] - psi_bar_target[j]) * lever[j])
                .sum();
            xi[i] = xi[i] - moment;
        }
        center(&mut xi);
    }
    let factor = if opts.dof_correction {
        let params = 4 * rows.q();
        if n > 2 * params {
            T::from_count(n) / T::from_count(n - params)
        } else {
            T::one()
        }
    } else {
        T::one()
    };
    let nn = T::from_count(n);
    Ok(factor * xi.iter().map(|&v| v * v).sum::<T>() / (nn * nn))
}

/// Bootstrap conditional variance: resamples the site's rows, refits the
/// nuisance and density-ratio models with `ψ̄_T` held fixed.
pub fn source_sigma2_bootstrap<T: Real>(
    data: &SiteData<T>,
    psi_bar_target: &[T],
    mode: SourceMode,
    opts: &StepOptions<T>,
    replicates: usize,
    seed: u64,
) -> Result<T> {
    let draws = bootstrap(data, replicates, seed, |d| {
        let fits = fit_nuisances(d, opts.basis, &opts.fit)?;
        let rows = AipwRows::new(d, &fits, opts.basis, opts.truncation);
        let dr = fit_density_ratio(&rows.design, psi_bar_target, &opts.fit)?;
        if !dr.converged {
            return Err(FaceError::NonConvergence {
                what: "density ratio",
                iterations: dr.iterations,
                residual: dr.moment_residual_norm.to_f64_lossy(),
            });
        }
        let w = dr.weights(&rows.design);
        let s = summand(&rows, mode);
        Ok(vec![mean(
            &s.iter().zip(&w).map(|(&s, &w)| s * w).collect::<Vec<_>>(),
        )])
    })?;
    Ok(sample_covariance(&draws)[(0, 0)])
}

/// Everything a source site computes before it reports.
#[derive(Debug, Clone)]
pub struct SourceFit<T: Real> {
    pub fits: NuisanceFits<T>,
    pub density_ratio: DensityRatioFit<T>,
    pub rows: AipwRows<T>,
    pub weights: Vec<T>,
}

pub fn fit_source<T: Real>(
    data: &SiteData<T>,
    psi_bar_target: &[T],
    opts: &StepOptions<T>,
) -> Result<SourceFit<T>> {
    let fits = fit_nuisances(data, opts.basis, &opts.fit)?;
    let rows = AipwRows::new(data, &fits, opts.basis, opts.truncation);
    let density_ratio = fit_density_ratio(&rows.design, psi_bar_target, &opts.fit)?;
    let weights = density_ratio.weights(&rows.design);
    Ok(SourceFit {
        fits,
        density_ratio,
        rows,
        weights,
    })
}

/// Source step for one site. Sites whose nuisance or density-ratio fits
/// break down numerically come back marked unusable rather than as errors;
/// malformed inputs are still errors.
pub fn summarize_source<T: Real>(
    data: &SiteData<T>,
    psi_bar_target: &[T],
    mode: SourceMode,
    opts: &StepOptions<T>,
) -> Result<SourceSummary<T>> {
    let q = opts.basis.dim(data.p());
    let unusable = |why: String| {
        log::warn!("source {} excluded: {why}", data.site_id());
        Ok(SourceSummary::unusable(data.site_id(), data.n(), q, why))
    };
    let sf = match fit_source(data, psi_bar_target, opts) {
        Ok(sf) => sf,
        Err(e) if e.is_numerical() => return unusable(e.to_string()),
        Err(e) => return Err(e),
    };
    if !sf.density_ratio.converged {
        return unusable(format!(
            "density ratio did not converge (moment residual {})",
            sf.density_ratio.moment_residual_norm
        ));
    }
    if !sf.fits.converged() {
        log::warn!("source {}: a nuisance fit did not converge", data.site_id());
    }
    let delta_hat = source_augmentation(&sf.rows, &sf.weights);
    let plug_in_hat = match mode {
        SourceMode::Transported => Some(source_plug_in(&sf.rows, &sf.weights)),
        SourceMode::Anchored => None,
    };
    let d_hat = match source_d_hat(&sf.rows, &sf.weights, mode) {
        Ok(d) => d,
        Err(e) => return unusable(e.to_string()),
    };
    let sigma2 = match opts.variance {
        VarianceMethod::Influence => {
            source_sigma2_influence(&sf.rows, &sf.fits, &sf.weights, psi_bar_target, mode, opts)
        }
        VarianceMethod::Bootstrap { replicates, seed } => {
            source_sigma2_bootstrap(data, psi_bar_target, mode, opts, replicates, seed)
        }
    };
    let sigma2_hat = match sigma2 {
        Ok(v) => v,
        Err(e) if e.is_numerical() => return unusable(e.to_string()),
        Err(e) => return Err(e),
    };
    let s = SourceSummary {
        site_id: data.site_id().to_string(),
        n_k: data.n(),
        delta_hat,
        sigma2_hat,
        d_hat,
        plug_in_hat,
        n_truncated: sf.rows.n_truncated,
        usable: true,
        note: None,
    };
    match s.validate() {
        Ok(()) => Ok(s),
        Err(e) => unusable(e.to_string()),
    }
}
