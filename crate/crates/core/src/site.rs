//! Per-row quantities and options shared by the target and source steps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Basis, SiteData};
use crate::error::Result;
use crate::linalg::{dot, Matrix};
use crate::nuisance::{expit, m_estimator_influence, FitOptions, NuisanceFits};
use crate::scalar::Real;

/// How per-row influence values are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceForm {
    /// Adds the first-order effect of estimating the propensity, outcome and
    /// density-ratio coefficients.
    #[default]
    Full,
    /// Treats the fitted nuisance models as known.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum VarianceMethod {
    #[default]
    Influence,
    Bootstrap {
        replicates: usize,
        seed: u64,
    },
}

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;
pub const MIN_BOOTSTRAP_REPLICATES: usize = 50;

#[derive(Debug, Clone, Copy)]
pub struct StepOptions<T> {
    pub basis: Basis,
    pub fit: FitOptions<T>,
    /// Propensity scores are clipped to `[truncation, 1 − truncation]`.
    pub truncation: T,
    pub variance: VarianceMethod,
    pub influence: InfluenceForm,
    /// Inflates influence-based variances by `n / (n − c·q)` to offset the
    /// coefficients fitted on the same rows (`c = 3` at the target, `4` at a
    /// source).
    pub dof_correction: bool,
}

impl<T: Real> Default for StepOptions<T> {
    fn default() -> Self {
        Self {
            basis: Basis::Identity,
            fit: FitOptions::default(),
            truncation: T::lit(0.01),
            variance: VarianceMethod::Influence,
            influence: InfluenceForm::Full,
            dof_correction: true,
        }
    }
}

/// Deterministic 64-bit seed for the RNG stream labelled `(label, index)`
/// under `master`.
pub fn stream_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Fitted values and AIPW residual terms for every row of one site.
#[derive(Debug, Clone)]
pub struct AipwRows<T: Real> {
    pub design: Matrix<T>,
    pub a: Vec<T>,
    pub y: Vec<T>,
    /// Truncated propensity scores.
    pub pi: Vec<T>,
    pub clipped: Vec<bool>,
    pub m1: Vec<T>,
    pub m0: Vec<T>,
    /// `A/π·(Y − m̂₁) − (1−A)/(1−π)·(Y − m̂₀)`
    pub r: Vec<T>,
    pub n_truncated: usize,
}

impl<T: Real> AipwRows<T> {
    pub fn new(data: &SiteData<T>, fits: &NuisanceFits<T>, basis: Basis, truncation: T) -> Self {
        let design = basis.design(data.x());
        let n = data.n();
        let lo = truncation;
        let hi = T::one() - truncation;
        let mut rows = Self {
            a: data
                .treated()
                .iter()
                .map(|&t| if t { T::one() } else { T::zero() })
                .collect(),
            y: data.y().to_vec(),
            pi: Vec::with_capacity(n),
            clipped: Vec::with_capacity(n),
            m1: Vec::with_capacity(n),
            m0: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            n_truncated: 0,
            design,
        };
        for i in 0..n {
            let x = rows.design.row(i);
            let raw = fits.propensity.predict(x);
            let pi = raw.max(lo).min(hi);
            let clipped = pi != raw;
            let m1 = fits.outcome1.predict(x);
            let m0 = fits.outcome0.predict(x);
            let (a, y) = (rows.a[i], rows.y[i]);
            rows.r
                .push(a / pi * (y - m1) - (T::one() - a) / (T::one() - pi) * (y - m0));
            rows.pi.push(pi);
            rows.clipped.push(clipped);
            rows.m1.push(m1);
            rows.m0.push(m0);
        }
        rows.n_truncated = rows.clipped.iter().filter(|&&c| c).count();
        if rows.n_truncated > 0 {
            log::warn!(
                "site {}: {} propensity scores truncated to [{lo}, {hi}]",
                data.site_id(),
                rows.n_truncated
            );
        }
        rows
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.design.cols()
    }

    /// `m̂₁(Xᵢ) − m̂₀(Xᵢ)`
    pub fn contrast(&self, i: usize) -> T {
        self.m1[i] - self.m0[i]
    }

    /// Row-wise derivatives of `rᵢ` with respect to the propensity,
    /// treated-arm and control-arm outcome coefficients.
    pub fn residual_gradients(&self, fits: &NuisanceFits<T>) -> ResidualGradients<T> {
        let n = self.n();
        let q = self.q();
        let mut g = ResidualGradients {
            alpha: Matrix::zeros(n, q),
            beta1: Matrix::zeros(n, q),
            beta0: Matrix::zeros(n, q),
            slope1: Vec::with_capacity(n),
            slope0: Vec::with_capacity(n),
        };
        for i in 0..n {
            let x = self.design.row(i);
            let (a, y, pi) = (self.a[i], self.y[i], self.pi[i]);
            let one = T::one();
            let ca = if self.clipped[i] {
                T::zero()
            } else {
                -a * (one - pi) / pi * (y - self.m1[i])
                    - (one - a) * pi / (one - pi) * (y - self.m0[i])
            };
            let s1 = fits.outcome1.slope(x);
            let s0 = fits.outcome0.slope(x);
            let c1 = -a / pi * s1;
            let c0 = (one - a) / (one - pi) * s0;
            for j in 0..q {
                g.alpha.row_mut(i)[j] = ca * x[j];
                g.beta1.row_mut(i)[j] = c1 * x[j];
                g.beta0.row_mut(i)[j] = c0 * x[j];
            }
            g.slope1.push(s1);
            g.slope0.push(s0);
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct ResidualGradients<T: Real> {
    pub alpha: Matrix<T>,
    pub beta1: Matrix<T>,
    pub beta0: Matrix<T>,
    /// `∂m̂ₐ/∂(βₐᵀx)` per row.
    pub slope1: Vec<T>,
    pub slope0: Vec<T>,
}

/// Influence rows of the three nuisance coefficient vectors.
#[derive(Debug, Clone)]
pub struct NuisanceInfluence<T: Real> {
    pub alpha: Matrix<T>,
    pub beta1: Matrix<T>,
    pub beta0: Matrix<T>,
}

impl<T: Real> NuisanceInfluence<T> {
    pub fn new(
        rows: &AipwRows<T>,
        fits: &NuisanceFits<T>,
        grads: &ResidualGradients<T>,
    ) -> Result<Self> {
        let n = rows.n();
        let all = vec![true; n];
        let treated: Vec<bool> = rows.a.iter().map(|&a| a == T::one()).collect();
        let control: Vec<bool> = treated.iter().map(|t| !t).collect();
        let (ps_resid, ps_curv): (Vec<T>, Vec<T>) = (0..n)
            .map(|i| {
                let p = expit(fits.propensity.linear_predictor(rows.design.row(i)));
                (rows.a[i] - p, p * (T::one() - p))
            })
            .unzip();
        let r1: Vec<T> = (0..n).map(|i| rows.y[i] - rows.m1[i]).collect();
        let r0: Vec<T> = (0..n).map(|i| rows.y[i] - rows.m0[i]).collect();
        Ok(Self {
            alpha: m_estimator_influence(&rows.design, &all, &ps_resid, &ps_curv)?,
            beta1: m_estimator_influence(&rows.design, &treated, &r1, &grads.slope1)?,
            beta0: m_estimator_influence(&rows.design, &control, &r0, &grads.slope0)?,
        })
    }
}

/// Column means of `Σᵢ wᵢ Mᵢ / n`.
pub(crate) fn weighted_col_mean<T: Real>(m: &Matrix<T>, w: Option<&[T]>) -> Vec<T> {
    let n = T::from_count(m.rows());
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        let wi = w.map_or(T::one(), |w| w[i]);
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o = *o + wi * v;
        }
    }
    out.iter_mut().for_each(|o| *o = *o / n);
    out
}

/// Adds `inf · grad` to every entry of `out` (row-wise projection).
pub(crate) fn add_projection<T: Real>(out: &mut [T], inf: &Matrix<T>, grad: &[T]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = *o + dot(inf.row(i), grad);
    }
}
