//! Simulation studies: skew-normal covariates with site-specific location
//! and skewness, Gaussian outcomes, logistic treatment assignment, and a
//! replication harness that compares the target-only, sample-size weighted
//! and adaptive estimators.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::data::{Role, SiteData};
use crate::error::{FaceError, Result};
use crate::linalg::Matrix;
use crate::nuisance::expit;
use crate::pipeline::{run_pipeline, LambdaChoice, PipelineConfig};
use crate::site::{stream_seed, InfluenceForm, StepOptions};
use crate::source::SourceMode;
use crate::summary::TargetPool;
use crate::target::summarize_target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    I,
    II,
    III,
    IV,
}

impl std::str::FromStr for Setting {
    type Err = FaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Setting::I),
            "II" | "2" => Ok(Setting::II),
            "III" | "3" => Ok(Setting::III),
            "IV" | "4" => Ok(Setting::IV),
            other => Err(FaceError::Validation(format!(
                "unknown setting {other:?}; valid settings are I, II, III, IV"
            ))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
            Setting::IV => "IV",
        })
    }
}

/// Direction of the skewness `ν = ±4/P` of each source site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewSign {
    #[default]
    Positive,
    Negative,
    /// `+, −, +, …` by source index.
    Alternating,
    /// Fair coin per source site and replication.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub setting: Setting,
    /// Total number of sites, the target included.
    pub k: usize,
    pub p: usize,
    pub n_target: usize,
    /// Source sizes are uniform on this inclusive range.
    pub n_source: (usize, usize),
    pub kappa: (f64, f64),
    pub skew_sign: SkewSign,
    pub seed: u64,
    pub replications: usize,
    pub lambda: LambdaChoice<f64>,
    pub alpha: f64,
    pub mode: SourceMode,
    pub influence: InfluenceForm,
    pub dof_correction: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            setting: Setting::I,
            k: 10,
            p: 10,
            n_target: 200,
            n_source: (100, 300),
            kappa: (0.10, 0.15),
            skew_sign: SkewSign::Positive,
            seed: 0,
            replications: 1000,
            lambda: LambdaChoice::cv_default_grid(),
            alpha: 0.05,
            mode: SourceMode::Transported,
            influence: InfluenceForm::Full,
            dof_correction: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FaceError::Validation(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.p < 1 {
            return bad("p must be at least 1".into());
        }
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        let (lo, hi) = self.n_source;
        if lo > hi || lo < 2 * (self.p + 1) || self.n_target < 2 * (self.p + 1) {
            return bad("site sizes too small for the covariate dimension".into());
        }
        if !(self.kappa.0 <= self.kappa.1) {
            return bad("kappa range is empty".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        Ok(())
    }

    pub fn pipeline(&self, split_seed: u64) -> PipelineConfig<f64> {
        PipelineConfig {
            step: StepOptions {
                influence: self.influence,
                dof_correction: self.dof_correction,
                ..StepOptions::default()
            },
            mode: self.mode,
            lambda: self.lambda.clone(),
            alpha: self.alpha,
            split_seed,
        }
    }
}

/// `P` evenly spaced values from `a` to `b`.
pub fn linspace(a: f64, b: f64, p: usize) -> Vec<f64> {
    if p == 1 {
        return vec![a];
    }
    (0..p)
        .map(|i| a + (b - a) * i as f64 / (p - 1) as f64)
        .collect()
}

/// Regression coefficients of the generating models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta11: Vec<f64>,
    pub beta10: Vec<f64>,
    pub beta21: Vec<f64>,
    pub beta20: Vec<f64>,
    pub alpha_target: Vec<f64>,
    pub alpha_source: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub noise_sd: f64,
    pub effect: f64,
}

impl Coefficients {
    pub fn new(p: usize) -> Self {
        let pf = p as f64;
        let base = linspace(0.4, 1.2, p);
        let beta21 = linspace(0.2, 0.4, p);
        Self {
            beta11: base.iter().map(|b| 2.0 * b / pf).collect(),
            beta10: base.iter().map(|b| b / pf).collect(),
            beta20: beta21.iter().map(|b| b / 2.0).collect(),
            beta21,
            alpha_target: linspace(0.4, -0.4, p),
            alpha_source: linspace(0.5, -0.5, p),
            alpha2: linspace(0.12, -0.12, p),
            noise_sd: 1.5 * pf,
            effect: 3.0,
        }
    }
}

/// Which parts of a site's generating model are quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteModel {
    pub quadratic_outcome: bool,
    pub quadratic_propensity: bool,
    pub is_target: bool,
}

impl SiteModel {
    /// Source index `j` counts from 1.
    pub fn for_site(setting: Setting, source_index: Option<usize>) -> Self {
        let misspecified_source = matches!(source_index, Some(j) if j % 2 == 0);
        Self {
            quadratic_outcome: setting == Setting::II
                || (setting == Setting::IV && misspecified_source),
            quadratic_propensity: setting == Setting::III
                || (setting == Setting::IV && misspecified_source),
            is_target: source_index.is_none(),
        }
    }
}

/// Skew-normal draws `κ_j + δ|U₀| + √(1−δ²) U₁` with `δ = ν/√(1+ν²)`, one
/// column per covariate.
pub fn gen_covariates<R: Rng>(n: usize, kappa: &[f64], nu: f64, rng: &mut R) -> Matrix<f64> {
    let d = nu / (1.0 + nu * nu).sqrt();
    let s = (1.0 - d * d).sqrt();
    let p = kappa.len();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        for &k in kappa {
            let u0: f64 = rng.sample(StandardNormal);
            let u1: f64 = rng.sample(StandardNormal);
            data.push(k + d * u0.abs() + s * u1);
        }
    }
    Matrix::from_row_major(n, p, data).expect("dimensions agree")
}

#[derive(Debug, Clone)]
pub struct OutcomeDraw {
    pub y: Vec<f64>,
    pub treated: Vec<bool>,
    /// Mean of `Y(1) − Y(0)` over the site's rows.
    pub site_effect: f64,
}

/// Potential outcomes share one Gaussian error; treatment follows a logistic
/// model without intercept.
pub fn gen_outcomes_and_treatment<R: Rng>(
    x: &Matrix<f64>,
    mu1: &[f64],
    model: SiteModel,
    coef: &Coefficients,
    rng: &mut R,
) -> OutcomeDraw {
    let noise = Normal::new(0.0, coef.noise_sd).expect("positive sd");
    let alpha1 = if model.is_target {
        &coef.alpha_target
    } else {
        &coef.alpha_source
    };
    let mut y = Vec::with_capacity(x.rows());
    let mut treated = Vec::with_capacity(x.rows());
    let mut effect = 0.0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut y1 = coef.effect;
        let mut y0 = 0.0;
        let mut lp = 0.0;
        for j in 0..row.len() {
            let c = row[j] - mu1[j];
            y1 += c * coef.beta11[j];
            y0 += c * coef.beta10[j];
            lp += row[j] * alpha1[j];
            let sq = row[j] * row[j];
            if model.quadratic_outcome {
                y1 += sq * coef.beta21[j];
                y0 += sq * coef.beta20[j];
            }
            if model.quadratic_propensity {
                lp += sq * coef.alpha2[j];
            }
        }
        let e = noise.sample(rng);
        let a = rng.random::<f64>() < expit(lp);
        effect += y1 - y0;
        y.push(if a { y1 + e } else { y0 + e });
        treated.push(a);
    }
    OutcomeDraw {
        y,
        treated,
        site_effect: effect / x.rows() as f64,
    }
}

/// Exact target effect when the target covariates are `N(κ_T, I)`.
pub fn true_tate(setting: Setting, kappa_target: &[f64], coef: &Coefficients) -> f64 {
    let mut t = coef.effect;
    if setting == Setting::II {
        for (j, &k) in kappa_target.iter().enumerate() {
            t += (coef.beta21[j] - coef.beta20[j]) * (k * k + 1.0);
        }
    }
    t
}

/// One generated federation.
#[derive(Debug, Clone)]
pub struct Replication {
    pub target: SiteData<f64>,
    pub sources: Vec<SiteData<f64>>,
    pub misspecified: Vec<bool>,
    pub truth: f64,
}

pub fn generate_replication(cfg: &SimConfig, rep: u64) -> Result<Replication> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "replication", rep));
    let coef = Coefficients::new(cfg.p);
    let draw_kappa = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.p)
            .map(|_| rng.random_range(cfg.kappa.0..=cfg.kappa.1))
            .collect()
    };
    let kappa_t = draw_kappa(&mut rng);
    let site = |id: String,
                n: usize,
                kappa: &[f64],
                nu: f64,
                model: SiteModel,
                rng: &mut ChaCha8Rng,
                role: Role|
     -> Result<SiteData<f64>> {
        // a draw with a single treatment arm is redrawn
        for _ in 0..100 {
            let x = gen_covariates(n, kappa, nu, rng);
            let o = gen_outcomes_and_treatment(&x, &kappa_t, model, &coef, rng);
            let n1 = o.treated.iter().filter(|&&t| t).count();
            if n1 > 0 && n1 < n {
                return SiteData::new(id, o.y, o.treated, x, role);
            }
        }
        Err(FaceError::Validation(format!(
            "site {id}: no treatment variation"
        )))
    };
    let target = site(
        "target".into(),
        cfg.n_target,
        &kappa_t,
        0.0,
        SiteModel::for_site(cfg.setting, None),
        &mut rng,
        Role::Target,
    )?;
    let mut sources = Vec::with_capacity(cfg.k - 1);
    let mut misspecified = Vec::with_capacity(cfg.k - 1);
    let magnitude = 4.0 / cfg.p as f64;
    for j in 1..cfg.k {
        let kappa = draw_kappa(&mut rng);
        let n = rng.random_range(cfg.n_source.0..=cfg.n_source.1);
        let sign = match cfg.skew_sign {
            SkewSign::Positive => 1.0,
            SkewSign::Negative => -1.0,
            SkewSign::Alternating if j % 2 == 1 => 1.0,
            SkewSign::Alternating => -1.0,
            SkewSign::Random if rng.random::<bool>() => 1.0,
            SkewSign::Random => -1.0,
        };
        let model = SiteModel::for_site(cfg.setting, Some(j));
        misspecified.push(cfg.setting == Setting::IV && model.quadratic_outcome);
        sources.push(site(
            format!("source{j:02}"),
            n,
            &kappa,
            sign * magnitude,
            model,
            &mut rng,
            Role::Source,
        )?);
    }
    Ok(Replication {
        target,
        sources,
        misspecified,
        truth: true_tate(cfg.setting, &kappa_t, &coef),
    })
}

/// Estimates of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub truth: f64,
    pub target: f64,
    pub target_var: f64,
    pub ss: f64,
    pub ss_var: f64,
    pub face: f64,
    /// `V̂ / N`
    pub face_var: f64,
    pub face_ci: (f64, f64),
    pub lambda: f64,
    pub sources_used: usize,
    pub sources_excluded: usize,
    pub selected: usize,
    pub eta_sum: f64,
    pub solver_converged: bool,
    pub kkt_residual: f64,
    /// Mean `η` over misspecified and correctly specified sources.
    pub eta_misspecified: Option<f64>,
    pub eta_correct: Option<f64>,
}

fn aipw_site(data: &SiteData<f64>, opts: &StepOptions<f64>) -> Result<(f64, f64)> {
    let s = summarize_target(data, opts)?;
    let pool = TargetPool::combine(std::slice::from_ref(&s))?;
    Ok((s.big_delta_hat, pool.target_only_variance()))
}

pub fn run_replication(cfg: &SimConfig, rep: u64) -> Result<ReplicationRecord> {
    let r = generate_replication(cfg, rep)?;
    let pcfg = cfg.pipeline(stream_seed(cfg.seed, "split", rep));
    let run = run_pipeline(std::slice::from_ref(&r.target), &r.sources, &pcfg)?;
    let res = &run.result;

    let (target, target_var) = aipw_site(&r.target, &pcfg.step)?;
    // every site's own estimate weighted by n_k/N, covariate shift ignored
    let mut ss = 0.0;
    let mut ss_var = 0.0;
    let n_all: usize = r.target.n() + r.sources.iter().map(SiteData::n).sum::<usize>();
    for d in std::iter::once(&r.target).chain(&r.sources) {
        let (e, v) = aipw_site(d, &pcfg.step)?;
        let w = d.n() as f64 / n_all as f64;
        ss += w * e;
        ss_var += w * w * v;
    }

    let mean_of = |flag: bool| {
        let v: Vec<f64> = res
            .site_ids
            .iter()
            .zip(&res.eta)
            .filter(|(id, _)| {
                r.sources
                    .iter()
                    .position(|s| s.site_id() == id.as_str())
                    .is_some_and(|i| r.misspecified[i] == flag)
            })
            .map(|(_, &e)| e)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(ReplicationRecord {
        replication: rep,
        truth: r.truth,
        target,
        target_var,
        ss,
        ss_var,
        face: res.delta_face,
        face_var: res.v_hat / res.n_total as f64,
        face_ci: res.ci,
        lambda: res.lambda_used,
        sources_used: res.site_ids.len(),
        sources_excluded: res.excluded.len(),
        selected: res.selected.len(),
        eta_sum: res.eta.iter().sum(),
        solver_converged: res.converged,
        kkt_residual: res.kkt_residual,
        eta_misspecified: if cfg.setting == Setting::IV {
            mean_of(true)
        } else {
            None
        },
        eta_correct: if cfg.setting == Setting::IV {
            mean_of(false)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub bias: f64,
    pub rmse: f64,
    /// Percent of replications whose interval covers the truth.
    pub coverage: f64,
    /// `None` with fewer than two replications.
    pub empirical_sd: Option<f64>,
    pub mean_se: f64,
}

impl EstimatorMetrics {
    fn compute(est: &[f64], truth: &[f64], var: &[f64], z: f64) -> Self {
        let n = est.len() as f64;
        let err: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e - t).collect();
        let bias = err.iter().sum::<f64>() / n;
        let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let covered = err
            .iter()
            .zip(var)
            .filter(|(e, v)| e.abs() <= z * v.max(0.0).sqrt())
            .count();
        let empirical_sd = (est.len() > 1).then(|| {
            let m = est.iter().sum::<f64>() / n;
            (est.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Self {
            bias,
            rmse,
            coverage: 100.0 * covered as f64 / n,
            empirical_sd,
            mean_se: var.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDiagnostics {
    pub replications_requested: usize,
    pub replications_used: usize,
    pub failures: Vec<String>,
    pub mean_sources_used: f64,
    pub mean_sources_excluded: f64,
    pub mean_selected: f64,
    pub mean_lambda: f64,
    pub max_kkt_residual: f64,
    pub solver_failures: usize,
    /// Mean `V̂/N` over the empirical variance of the adaptive estimate.
    pub variance_ratio: Option<f64>,
    pub eta_misspecified: Option<f64>,
    pub eta_correct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub true_tate: f64,
    pub target: EstimatorMetrics,
    pub ss: EstimatorMetrics,
    pub face: EstimatorMetrics,
    pub diagnostics: SimDiagnostics,
    pub records: Vec<ReplicationRecord>,
}

/// Runs every replication (in parallel on the current rayon pool) and
/// summarises them. Replications that fail are logged and left out; more
/// than 1% failures is an error.
pub fn run_study(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicationRecord>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push(format!("replication {r}: {e}"));
            }
        }
    }
    if records.is_empty() || failures.len() * 100 > cfg.replications {
        return Err(FaceError::NonConvergence {
            what: "simulation study",
            iterations: cfg.replications,
            residual: failures.len() as f64,
        });
    }
    Ok(summarize(cfg, records, failures))
}

pub fn summarize(
    cfg: &SimConfig,
    records: Vec<ReplicationRecord>,
    failures: Vec<String>,
) -> SimReport {
    let z = StdNormal::standard().inverse_cdf(1.0 - cfg.alpha / 2.0);
    let col = |f: fn(&ReplicationRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let truth = col(|r| r.truth);
    let n = records.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let face = EstimatorMetrics::compute(&col(|r| r.face), &truth, &col(|r| r.face_var), z);
    let variance_ratio = face
        .empirical_sd
        .map(|sd| mean(&col(|r| r.face_var)) / (sd * sd));
    let opt_mean = |f: fn(&ReplicationRecord) -> Option<f64>| {
        let v: Vec<f64> = records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    SimReport {
        true_tate: mean(&truth),
        target: EstimatorMetrics::compute(&col(|r| r.target), &truth, &col(|r| r.target_var), z),
        ss: EstimatorMetrics::compute(&col(|r| r.ss), &truth, &col(|r| r.ss_var), z),
        face,
        diagnostics: SimDiagnostics {
            replications_requested: cfg.replications,
            replications_used: records.len(),
            failures,
            mean_sources_used: col(|r| r.sources_used as f64).iter().sum::<f64>() / n,
            mean_sources_excluded: col(|r| r.sources_excluded as f64).iter().sum::<f64>() / n,
            mean_selected: col(|r| r.selected as f64).iter().sum::<f64>() / n,
            mean_lambda: mean(&col(|r| r.lambda)),
            max_kkt_residual: col(|r| r.kkt_residual).into_iter().fold(0.0, f64::max),
            solver_failures: records.iter().filter(|r| !r.solver_converged).count(),
            variance_ratio,
            eta_misspecified: opt_mean(|r| r.eta_misspecified),
            eta_correct: opt_mean(|r| r.eta_correct),
        },
        config: cfg.clone(),
        records,
    }
}

impl SimReport {
    /// Bias, RMSE and coverage per estimator as an aligned text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "Setting {}  K = {}  replications = {}  true TATE = {:.4}",
            c.setting, c.k, self.diagnostics.replications_used, self.true_tate
        );
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", "", "Bias", "RMSE", "Cov.");
        for (name, m) in [
            ("Target", &self.target),
            ("SS", &self.ss),
            ("FACE", &self.face),
        ] {
            let _ = writeln!(
                s,
                "{:<8} {:>8.2} {:>8.2} {:>8.2}",
                name, m.bias, m.rmse, m.coverage
            );
        }
        s
    }
}
