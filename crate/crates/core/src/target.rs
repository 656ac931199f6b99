//! Target-site step: doubly robust components, covariate summary, and their
//! joint covariance.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SiteData;
use crate::error::{FaceError, Result};
use crate::linalg::{mean, Matrix};
use crate::nuisance::{fit_nuisances, NuisanceFits};
use crate::scalar::Real;
use crate::site::{
    add_projection, stream_seed, weighted_col_mean, AipwRows, InfluenceForm, NuisanceInfluence,
    StepOptions, VarianceMethod, MIN_BOOTSTRAP_REPLICATES,
};
use crate::summary::TargetSummary;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEstimates<T> {
    pub m_hat: T,
    pub delta_hat: T,
    pub psi_bar: Vec<T>,
    pub n_truncated: usize,
}

/// Centered per-row influence values of `(M̂, δ̂, ψ̄)`.
#[derive(Debug, Clone)]
pub struct InfluenceRows<T: Real> {
    pub zeta: Vec<T>,
    pub xi: Vec<T>,
    pub psi_rows: Matrix<T>,
}

impl<T: Real> InfluenceRows<T> {
    /// `n⁻² Σ UᵢUᵢᵀ` with `Uᵢ = (ζᵢ, ξᵢ, ψᵢᵀ − ψ̄ᵀ)ᵀ`.
    pub fn covariance(&self, psi_bar: &[T]) -> Matrix<T> {
        let n = self.zeta.len();
        let q = psi_bar.len();
        let mut u = Matrix::zeros(n, q + 2);
        for i in 0..n {
            let row = u.row_mut(i);
            row[0] = self.zeta[i];
            row[1] = self.xi[i];
            for j in 0..q {
                row[2 + j] = self.psi_rows.row(i)[j] - psi_bar[j];
            }
        }
        let nn = T::from_count(n);
        u.weighted_gram(&vec![T::one(); n])
            .scale(T::one() / (nn * nn))
            .symmetrized()
    }
}

pub fn target_components<T: Real>(rows: &AipwRows<T>) -> TargetEstimates<T> {
    let contrast: Vec<T> = (0..rows.n()).map(|i| rows.contrast(i)).collect();
    TargetEstimates {
        m_hat: mean(&contrast),
        delta_hat: mean(&rows.r),
        psi_bar: weighted_col_mean(&rows.design, None),
        n_truncated: rows.n_truncated,
    }
}

pub fn target_influence<T: Real>(
    rows: &AipwRows<T>,
    fits: &NuisanceFits<T>,
    est: &TargetEstimates<T>,
    form: InfluenceForm,
) -> Result<InfluenceRows<T>> {
    let n = rows.n();
    let mut zeta: Vec<T> = (0..n).map(|i| rows.contrast(i) - est.m_hat).collect();
    let mut xi: Vec<T> = rows.r.iter().map(|&r| r - est.delta_hat).collect();
    if form == InfluenceForm::Full {
        let grads = rows.residual_gradients(fits);
        let inf = NuisanceInfluence::new(rows, fits, &grads)?;
        let dm1 = weighted_col_mean(&rows.design, Some(&grads.slope1));
        let dm0: Vec<T> = weighted_col_mean(&rows.design, Some(&grads.slope0))
            .into_iter()
            .map(|v| -v)
            .collect();
        add_projection(&mut zeta, &inf.beta1, &dm1);
        add_projection(&mut zeta, &inf.beta0, &dm0);
        add_projection(&mut xi, &inf.alpha, &weighted_col_mean(&grads.alpha, None));
        add_projection(&mut xi, &inf.beta1, &weighted_col_mean(&grads.beta1, None));
        add_projection(&mut xi, &inf.beta0, &weighted_col_mean(&grads.beta0, None));
        // the nuisance scores vanish only up to the fit tolerance
        center(&mut zeta);
        center(&mut xi);
    }
    Ok(InfluenceRows {
        zeta,
        xi,
        psi_rows: rows.design.clone(),
    })
}

pub(crate) fn center<T: Real>(v: &mut [T]) {
    let m = mean(v);
    v.iter_mut().for_each(|x| *x = *x - m);
}

fn dof_factor<T: Real>(n: usize, params: usize) -> T {
    if n > 2 * params {
        T::from_count(n) / T::from_count(n - params)
    } else {
        log::warn!("n = {n} too small for a {params}-parameter variance correction");
        T::one()
    }
}

/// Influence-function covariance of `(M̂, δ̂, ψ̄)`.
pub fn target_sigma_influence<T: Real>(
    rows: &AipwRows<T>,
    fits: &NuisanceFits<T>,
    est: &TargetEstimates<T>,
    opts: &StepOptions<T>,
) -> Result<Matrix<T>> {
    let mut inf = target_influence(rows, fits, est, opts.influence)?;
    if opts.dof_correction {
        let c = dof_factor::<T>(rows.n(), 3 * rows.q()).sqrt();
        inf.zeta.iter_mut().for_each(|v| *v = *v * c);
        inf.xi.iter_mut().for_each(|v| *v = *v * c);
    }
    Ok(inf.covariance(&est.psi_bar))
}

/// Row indices of one nonparametric bootstrap resample.
pub(crate) fn resample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n).collect();
    let mut idx: Vec<usize> = (0..n)
        .map(|_| *all.choose(&mut rng).expect("n >= 1"))
        .collect();
    idx.sort_unstable();
    idx
}

/// Runs `stat` on `replicates` resamples in parallel, dropping the resamples
/// on which it fails. Errors if fewer than the minimum replicate count
/// succeed.
pub(crate) fn bootstrap<T: Real, F>(
    data: &SiteData<T>,
    replicates: usize,
    seed: u64,
    stat: F,
) -> Result<Vec<Vec<T>>>
where
    F: Fn(&SiteData<T>) -> Result<Vec<T>> + Sync,
{
    if replicates < MIN_BOOTSTRAP_REPLICATES {
        return Err(FaceError::Validation(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {replicates}"
        )));
    }
    let draws: Vec<Vec<T>> = (0..replicates)
        .into_par_iter()
        .filter_map(|b| {
            let s = stream_seed(seed, data.site_id(), b as u64);
            let resample = data.subset(&resample_indices(data.n(), s)).ok()?;
            stat(&resample).ok()
        })
        .collect();
    if draws.len() < MIN_BOOTSTRAP_REPLICATES {
        return Err(FaceError::NonConvergence {
            what: "bootstrap",
            iterations: replicates,
            residual: (replicates - draws.len()) as f64,
        });
    }
    if draws.len() < replicates {
        log::warn!(
            "site {}: {} of {replicates} bootstrap resamples failed",
            data.site_id(),
            replicates - draws.len()
        );
    }
    Ok(draws)
}

pub(crate) fn sample_covariance<T: Real>(draws: &[Vec<T>]) -> Matrix<T> {
    let b = draws.len();
    let d = draws[0].len();
    let mut centre = vec![T::zero(); d];
    for v in draws {
        for (c, &x) in centre.iter_mut().zip(v) {
            *c = *c + x;
        }
    }
    centre.iter_mut().for_each(|c| *c = *c / T::from_count(b));
    let mut m = Matrix::zeros(b, d);
    for (i, v) in draws.iter().enumerate() {
        for j in 0..d {
            m.row_mut(i)[j] = v[j] - centre[j];
        }
    }
    m.weighted_gram(&vec![T::one(); b])
        .scale(T::one() / T::from_count(b - 1))
        .symmetrized()
}

/// Bootstrap covariance of `(M̂, δ̂, ψ̄)`: every resample refits all three
/// nuisance models.
pub fn target_sigma_bootstrap<T: Real>(
    data: &SiteData<T>,
    opts: &StepOptions<T>,
    replicates: usize,
    seed: u64,
) -> Result<Matrix<T>> {
    let draws = bootstrap(data, replicates, seed, |d| {
        let fits = fit_nuisances(d, opts.basis, &opts.fit)?;
        let est = target_components(&AipwRows::new(d, &fits, opts.basis, opts.truncation));
        let mut v = vec![est.m_hat, est.delta_hat];
        v.extend(est.psi_bar);
        Ok(v)
    })?;
    Ok(sample_covariance(&draws))
}

/// Target step for one site: fits the nuisance models and returns the
/// summary that leaves the site.
pub fn summarize_target<T: Real>(
    data: &SiteData<T>,
    opts: &StepOptions<T>,
) -> Result<TargetSummary<T>> {
    let fits = fit_nuisances(data, opts.basis, &opts.fit)?;
    if !fits.converged() {
        log::warn!("target {}: a nuisance fit did not converge", data.site_id());
    }
    let rows = AipwRows::new(data, &fits, opts.basis, opts.truncation);
    let est = target_components(&rows);
    let sigma = match opts.variance {
        VarianceMethod::Influence => target_sigma_influence(&rows, &fits, &est, opts)?,
        VarianceMethod::Bootstrap { replicates, seed } => {
            target_sigma_bootstrap(data, opts, replicates, seed)?
        }
    };
    TargetSummary::new(
        data.site_id(),
        data.n(),
        est.m_hat,
        est.delta_hat,
        est.psi_bar,
        sigma,
        est.n_truncated,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use crate::simulate::Setting;
    use crate::testutil::sim_site;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn opts() -> StepOptions<f64> {
        StepOptions::default()
    }

    fn scaled(d: &SiteData<f64>, c: f64, shift: f64) -> SiteData<f64> {
        let y = d.y().iter().map(|v| c * v + shift).collect();
        SiteData::new(
            d.site_id(),
            y,
            d.treated().to_vec(),
            d.x().clone(),
            Role::Target,
        )
        .unwrap()
    }

    #[test]
    fn zero_residuals_give_zero_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 80;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let treated: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let y = rows
            .iter()
            .zip(&treated)
            .map(|(x, &a)| if a { 1.0 + 2.0 * x[0] } else { -0.5 + x[0] })
            .collect();
        let d = SiteData::new(
            "t",
            y,
            treated,
            Matrix::from_rows(&rows).unwrap(),
            Role::Target,
        )
        .unwrap();
        let s = summarize_target(&d, &opts()).unwrap();
        assert!(s.delta_hat.abs() < 1e-10);
    }

    #[test]
    fn half_propensity_and_zero_outcome_model_reduce_to_contrast() {
        let d = sim_site(50, 2, Setting::I, None, 0.0, 4);
        let n = d.n();
        let rows = AipwRows {
            design: crate::data::Basis::Identity.design(d.x()),
            a: d.treated()
                .iter()
                .map(|&t| f64::from(u8::from(t)))
                .collect(),
            y: d.y().to_vec(),
            pi: vec![0.5; n],
            clipped: vec![false; n],
            m1: vec![0.0; n],
            m0: vec![0.0; n],
            r: (0..n)
                .map(|i| {
                    let a = f64::from(u8::from(d.treated()[i]));
                    a / 0.5 * d.y()[i] - (1.0 - a) / 0.5 * d.y()[i]
                })
                .collect(),
            n_truncated: 0,
        };
        let est = target_components(&rows);
        let direct: f64 = (0..n)
            .map(|i| (2.0 * f64::from(u8::from(d.treated()[i])) - 1.0) * d.y()[i])
            .sum::<f64>()
            * 2.0
            / n as f64;
        assert!((est.delta_hat - direct).abs() < 1e-12);
        assert_eq!(est.m_hat, 0.0);
    }

    #[test]
    fn randomized_site_agrees_with_difference_in_means() {
        let reps = 200;
        let mut diffs = Vec::with_capacity(reps);
        let mut aipw = Vec::with_capacity(reps);
        for r in 0..reps {
            let base = sim_site(200, 10, Setting::I, None, 0.0, 1000 + r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
            // re-randomize treatment with probability 1/2
            let treated: Vec<bool> = (0..base.n()).map(|_| rng.random::<bool>()).collect();
            let coef = crate::simulate::Coefficients::new(10);
            let y: Vec<f64> = (0..base.n())
                .map(|i| {
                    let x = base.x().row(i);
                    let lin1: f64 = x
                        .iter()
                        .zip(&coef.beta11)
                        .map(|(v, b)| (v - 0.125) * b)
                        .sum();
                    let lin0: f64 = x
                        .iter()
                        .zip(&coef.beta10)
                        .map(|(v, b)| (v - 0.125) * b)
                        .sum();
                    let e: f64 = 15.0 * rng.sample::<f64, _>(StandardNormal);
                    if treated[i] {
                        3.0 + lin1 + e
                    } else {
                        lin0 + e
                    }
                })
                .collect();
            let d = SiteData::new("t", y, treated, base.x().clone(), Role::Target).unwrap();
            let s = summarize_target(&d, &opts()).unwrap();
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..d.n() {
                if d.treated()[i] {
                    s1 += d.y()[i];
                    n1 += 1.0;
                } else {
                    s0 += d.y()[i];
                    n0 += 1.0;
                }
            }
            aipw.push(s.big_delta_hat);
            diffs.push(s1 / n1 - s0 / n0);
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = |v: &[f64]| {
            let mu = m(v);
            (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
                / (v.len() - 1) as f64
                / v.len() as f64)
                .sqrt()
        };
        let paired: Vec<f64> = aipw.iter().zip(&diffs).map(|(a, b)| a - b).collect();
        assert!((m(&aipw) - 3.0).abs() < 3.0 * se(&aipw));
        assert!((m(&diffs) - 3.0).abs() < 3.0 * se(&diffs));
        assert!(m(&paired).abs() < 3.0 * se(&paired));
    }

    #[test]
    fn sigma_is_psd_and_psi_block_is_direct_covariance() {
        let d = sim_site(300, 3, Setting::I, None, 0.0, 7);
        let s = summarize_target(&d, &opts()).unwrap();
        let (vals, _) = s.sigma_hat.symmetric_eigen();
        assert!(vals.iter().all(|&v| v > -1e-12));
        let n = d.n() as f64;
        let q = s.q();
        for a in 1..q {
            for b in 1..q {
                let ma = d.x().column(a - 1).iter().sum::<f64>() / n;
                let mb = d.x().column(b - 1).iter().sum::<f64>() / n;
                let cov: f64 = (0..d.n())
                    .map(|i| (d.x().row(i)[a - 1] - ma) * (d.x().row(i)[b - 1] - mb))
                    .sum::<f64>()
                    / n;
                assert!((s.sigma_hat[(2 + a, 2 + b)] - cov / n).abs() < 1e-14);
            }
        }
        // the intercept coordinate of ψ does not vary
        assert_eq!(s.sigma_hat[(2, 2)], 0.0);
    }

    #[test]
    fn influence_rows_are_centered() {
        let d = sim_site(250, 4, Setting::I, None, 0.0, 9);
        let fits =
            crate::nuisance::fit_nuisances(&d, crate::data::Basis::Identity, &Default::default())
                .unwrap();
        let rows = AipwRows::new(&d, &fits, crate::data::Basis::Identity, 0.01);
        let est = target_components(&rows);
        for form in [InfluenceForm::Full, InfluenceForm::PlugIn] {
            let inf = target_influence(&rows, &fits, &est, form).unwrap();
            assert!(mean(&inf.zeta).abs() < 1e-10);
            assert!(mean(&inf.xi).abs() < 1e-10);
        }
    }

    #[test]
    fn influence_matches_bootstrap_for_plug_in_variance() {
        let d = sim_site(1000, 10, Setting::I, None, 0.0, 11);
        let o = opts();
        let fits = crate::nuisance::fit_nuisances(&d, o.basis, &o.fit).unwrap();
        let rows = AipwRows::new(&d, &fits, o.basis, o.truncation);
        let est = target_components(&rows);
        let inf = target_sigma_influence(&rows, &fits, &est, &o).unwrap();
        let boot = target_sigma_bootstrap(&d, &o, 200, 5).unwrap();
        let rel = (inf[(0, 0)] - boot[(0, 0)]).abs() / boot[(0, 0)];
        assert!(
            rel < 0.25,
            "influence {} bootstrap {}",
            inf[(0, 0)],
            boot[(0, 0)]
        );
    }

    #[test]
    fn bootstrap_rejects_too_few_replicates() {
        let d = sim_site(100, 2, Setting::I, None, 0.0, 1);
        assert!(matches!(
            target_sigma_bootstrap(&d, &opts(), 49, 0),
            Err(FaceError::Validation(_))
        ));
    }

    #[test]
    fn bootstrap_is_deterministic_in_seed() {
        let d = sim_site(120, 2, Setting::I, None, 0.0, 2);
        let a = target_sigma_bootstrap(&d, &opts(), 60, 3).unwrap();
        let b = target_sigma_bootstrap(&d, &opts(), 60, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_equivariance_and_shift_invariance() {
        let d = sim_site(300, 5, Setting::I, None, 0.0, 13);
        let s = summarize_target(&d, &opts()).unwrap();
        let doubled = summarize_target(&scaled(&d, 2.0, 0.0), &opts()).unwrap();
        assert_eq!(doubled.m_hat, 2.0 * s.m_hat);
        assert_eq!(doubled.delta_hat, 2.0 * s.delta_hat);
        assert_eq!(doubled.big_delta_hat, 2.0 * s.big_delta_hat);
        let c = 3.7;
        let t = summarize_target(&scaled(&d, c, 0.0), &opts()).unwrap();
        assert!(
            (t.big_delta_hat - c * s.big_delta_hat).abs() < 1e-12 * (1.0 + s.big_delta_hat.abs())
        );
        let shifted = summarize_target(&scaled(&d, 1.0, 5.0), &opts()).unwrap();
        assert!((shifted.big_delta_hat - s.big_delta_hat).abs() < 1e-10);
    }

    #[test]
    fn binary_outcome_path_runs() {
        let d = sim_site(400, 3, Setting::I, None, 0.0, 17);
        let y: Vec<f64> = d
            .y()
            .iter()
            .map(|&v| f64::from(u8::from(v > 1.5)))
            .collect();
        let b = SiteData::new("b", y, d.treated().to_vec(), d.x().clone(), Role::Target).unwrap();
        assert_eq!(b.outcome_kind(), crate::data::OutcomeKind::Binary);
        let s = summarize_target(&b, &opts()).unwrap();
        assert!(s.big_delta_hat.abs() <= 1.0);
        assert!(s.sigma_hat[(1, 1)] > 0.0);
    }

    #[test]
    fn f32_target_summary() {
        let d = sim_site(300, 3, Setting::I, None, 0.0, 19);
        let x: Vec<Vec<f32>> = d
            .x()
            .to_rows()
            .iter()
            .map(|r| r.iter().map(|&v| v as f32).collect())
            .collect();
        let y: Vec<f32> = d.y().iter().map(|&v| v as f32).collect();
        let d32 = SiteData::new(
            "t",
            y,
            d.treated().to_vec(),
            Matrix::from_rows(&x).unwrap(),
            Role::Target,
        )
        .unwrap();
        let s32 = summarize_target(&d32, &StepOptions::<f32>::default()).unwrap();
        let s64 = summarize_target(&d, &opts()).unwrap();
        assert!((f64::from(s32.big_delta_hat) - s64.big_delta_hat).abs() < 1e-3);
    }
}
