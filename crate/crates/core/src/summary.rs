//! The statistics that cross site boundaries. Nothing here holds per-row data.

use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;

/// Step-1 output of one target site.
///
/// `sigma_hat` is the covariance of `(M̂, δ̂, ψ̄ᵀ)ᵀ`, a `(q+2) × (q+2)` matrix.
/// The augmentation is stored with the sign that makes
/// `big_delta_hat = m_hat + delta_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTargetSummary<T>", bound(deserialize = "T: Real"))]
pub struct TargetSummary<T: Real> {
    pub site_id: String,
    pub n_k: usize,
    pub m_hat: T,
    pub delta_hat: T,
    pub big_delta_hat: T,
    pub psi_bar: Vec<T>,
    pub sigma_hat: Matrix<T>,
    pub n_truncated: usize,
}

#[derive(Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
struct RawTargetSummary<T: Real> {
    site_id: String,
    n_k: usize,
    m_hat: T,
    delta_hat: T,
    big_delta_hat: T,
    psi_bar: Vec<T>,
    sigma_hat: Matrix<T>,
    n_truncated: usize,
}

impl<T: Real> TryFrom<RawTargetSummary<T>> for TargetSummary<T> {
    type Error = FaceError;
    fn try_from(r: RawTargetSummary<T>) -> Result<Self> {
        let s = TargetSummary {
            site_id: r.site_id,
            n_k: r.n_k,
            m_hat: r.m_hat,
            delta_hat: r.delta_hat,
            big_delta_hat: r.big_delta_hat,
            psi_bar: r.psi_bar,
            sigma_hat: r.sigma_hat,
            n_truncated: r.n_truncated,
        };
        s.validate()?;
        Ok(s)
    }
}

impl<T: Real> TargetSummary<T> {
    /// Assembles a summary, deriving `big_delta_hat` and symmetrising
    /// `sigma_hat`.
    pub fn new(
        site_id: impl Into<String>,
        n_k: usize,
        m_hat: T,
        delta_hat: T,
        psi_bar: Vec<T>,
        sigma_hat: Matrix<T>,
        n_truncated: usize,
    ) -> Result<Self> {
        let s = Self {
            site_id: site_id.into(),
            n_k,
            m_hat,
            delta_hat,
            big_delta_hat: m_hat + delta_hat,
            psi_bar,
            sigma_hat: sigma_hat.symmetrized(),
            n_truncated,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn q(&self) -> usize {
        self.psi_bar.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(FaceError::Validation(format!(
                "target {}: {m}",
                self.site_id
            )))
        };
        if self.n_k == 0 {
            return bad("n_k = 0".into());
        }
        let scalars = [self.m_hat, self.delta_hat, self.big_delta_hat];
        if !scalars.iter().all(|v| v.is_finite()) || !self.psi_bar.iter().all(|v| v.is_finite()) {
            return bad("non-finite estimate".into());
        }
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(8.0))
            * (T::one() + self.m_hat.abs() + self.delta_hat.abs());
        if (self.big_delta_hat - (self.m_hat + self.delta_hat)).abs() > tol {
            return bad("big_delta_hat != m_hat + delta_hat".into());
        }
        if self.psi_bar.first().copied() != Some(T::one()) {
            return bad("psi_bar must start with the intercept 1".into());
        }
        let q = self.q();
        if self.sigma_hat.rows() != q + 2 || self.sigma_hat.cols() != q + 2 {
            return bad(format!(
                "sigma_hat is {}x{}, expected {}x{}",
                self.sigma_hat.rows(),
                self.sigma_hat.cols(),
                q + 2,
                q + 2
            ));
        }
        if !self.sigma_hat.is_finite() {
            return bad("sigma_hat not finite".into());
        }
        let scale = (0..q + 2)
            .map(|i| self.sigma_hat[(i, i)].abs())
            .fold(T::zero(), T::max);
        if self.sigma_hat.max_asymmetry() > scale * T::lit(1e-9) {
            return bad("sigma_hat not symmetric".into());
        }
        if (0..q + 2).any(|i| self.sigma_hat[(i, i)] < T::zero()) {
            return bad("sigma_hat has a negative variance".into());
        }
        Ok(())
    }
}

/// Step-2 output of one source site.
///
/// `delta_hat` is the density-ratio weighted augmentation. When
/// `plug_in_hat` is present the site also transported its own outcome model
/// to the target covariates, and the site-specific estimate is
/// `plug_in_hat + delta_hat`; otherwise it is anchored on the target plug-in,
/// `M̂_T + delta_hat`. `sigma2_hat` and `d_hat` always describe the statistic
/// the site contributes (`plug_in_hat + delta_hat` or `delta_hat`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct SourceSummary<T: Real> {
    pub site_id: String,
    pub n_k: usize,
    pub delta_hat: T,
    pub sigma2_hat: T,
    pub d_hat: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plug_in_hat: Option<T>,
    pub n_truncated: usize,
    pub usable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl<T: Real> SourceSummary<T> {
    /// A placeholder for a site whose density ratio (or derivative system)
    /// could not be solved. It is carried through the protocol but never
    /// aggregated.
    pub fn unusable(site_id: impl Into<String>, n_k: usize, q: usize, note: String) -> Self {
        Self {
            site_id: site_id.into(),
            n_k,
            delta_hat: T::zero(),
            sigma2_hat: T::zero(),
            d_hat: vec![T::zero(); q],
            plug_in_hat: None,
            n_truncated: 0,
            usable: false,
            note: Some(note),
        }
    }

    pub fn is_transported(&self) -> bool {
        self.plug_in_hat.is_some()
    }

    /// The scalar this site contributes: `plug_in_hat + delta_hat`, or
    /// `delta_hat` alone for anchored sites.
    pub fn statistic(&self) -> T {
        self.plug_in_hat.unwrap_or(T::zero()) + self.delta_hat
    }

    /// Site-specific TATE estimate given the pooled target plug-in `m_target`.
    pub fn site_estimate(&self, m_target: T) -> T {
        match self.plug_in_hat {
            Some(m) => m + self.delta_hat,
            None => m_target + self.delta_hat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(FaceError::Validation(format!(
                "source {}: {m}",
                self.site_id
            )))
        };
        if !self.usable {
            return Ok(());
        }
        if self.n_k == 0 {
            return bad("n_k = 0");
        }
        if !(self.sigma2_hat >= T::zero()) {
            return bad("sigma2_hat must be non-negative");
        }
        if !self.delta_hat.is_finite()
            || !self.sigma2_hat.is_finite()
            || !self.d_hat.iter().all(|v| v.is_finite())
            || !self.plug_in_hat.is_none_or(|v| v.is_finite())
        {
            return bad("non-finite estimate");
        }
        Ok(())
    }
}

/// Target sites pooled with `n_k / N_T` weights.
#[derive(Debug, Clone)]
pub struct TargetPool<T: Real> {
    pub n_target: usize,
    pub m_hat: T,
    pub delta_hat: T,
    pub big_delta_hat: T,
    pub psi_bar: Vec<T>,
    /// `(n_k / N_T, Σ̂_k)` per target site.
    pub blocks: Vec<(T, Matrix<T>)>,
}

impl<T: Real> TargetPool<T> {
    pub fn combine(targets: &[TargetSummary<T>]) -> Result<Self> {
        let first = targets
            .first()
            .ok_or_else(|| FaceError::Validation("no target site".into()))?;
        let q = first.q();
        if targets.iter().any(|t| t.q() != q) {
            return Err(FaceError::Validation(
                "target sites disagree on the covariate dimension".into(),
            ));
        }
        let n_target: usize = targets.iter().map(|t| t.n_k).sum();
        let nt = T::from_count(n_target);
        let mut m = T::zero();
        let mut d = T::zero();
        let mut psi = vec![T::zero(); q];
        let mut blocks = Vec::with_capacity(targets.len());
        for t in targets {
            let w = T::from_count(t.n_k) / nt;
            m = m + w * t.m_hat;
            d = d + w * t.delta_hat;
            for (acc, &v) in psi.iter_mut().zip(&t.psi_bar) {
                *acc = *acc + w * v;
            }
            blocks.push((w, t.sigma_hat.clone()));
        }
        if targets.len() == 1 {
            // keep single-site values bit-exact
            psi.clone_from(&first.psi_bar);
            m = first.m_hat;
            d = first.delta_hat;
        }
        psi[0] = T::one();
        Ok(Self {
            n_target,
            m_hat: m,
            delta_hat: d,
            big_delta_hat: m + d,
            psi_bar: psi,
            blocks,
        })
    }

    pub fn q(&self) -> usize {
        self.psi_bar.len()
    }

    /// `Σ_k (n_k/N_T)² Σ̂_k`, the covariance of the pooled `(M̂, δ̂, ψ̄)`.
    pub fn pooled_sigma(&self) -> Matrix<T> {
        let dim = self.q() + 2;
        self.blocks
            .iter()
            .fold(Matrix::zeros(dim, dim), |acc, (w, s)| {
                acc.add(&s.scale(*w * *w))
            })
    }

    /// Variance of the target-only estimate `M̂ + δ̂`.
    pub fn target_only_variance(&self) -> T {
        let mut h = vec![T::zero(); self.q() + 2];
        h[0] = T::one();
        h[1] = T::one();
        self.pooled_sigma().quad_form(&h).max(T::zero())
    }

    pub fn dot_psi(&self, v: &[T]) -> T {
        dot(&self.psi_bar, v)
    }
}
