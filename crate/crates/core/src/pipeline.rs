//! The three phases of a run, as pure functions of site data and the
//! packets exchanged between sites. The file-based federation and the
//! in-process runner both go through these.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    default_lambda, select_lambda, solve_eta, AggregationProblem, AggregationResult, SummarySet,
    LAMBDA_GRID,
};
use crate::data::SiteData;
use crate::error::{FaceError, Result};
use crate::scalar::Real;
use crate::site::{stream_seed, StepOptions};
use crate::source::{summarize_source, SourceMode};
use crate::summary::{SourceSummary, TargetPool, TargetSummary};
use crate::target::summarize_target;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    rename_all = "snake_case",
    tag = "kind",
    content = "value",
    bound(deserialize = "T: Real")
)]
pub enum LambdaChoice<T: Real> {
    Fixed(T),
    /// `N^{1/3}`
    Default,
    CrossValidated(Vec<T>),
}

impl<T: Real> LambdaChoice<T> {
    pub fn cv_default_grid() -> Self {
        LambdaChoice::CrossValidated(LAMBDA_GRID.iter().map(|&v| T::lit(v)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig<T: Real> {
    pub step: StepOptions<T>,
    pub mode: SourceMode,
    pub lambda: LambdaChoice<T>,
    pub alpha: T,
    /// Seeds the 50/50 splits used to choose `λ`.
    pub split_seed: u64,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            step: StepOptions::default(),
            mode: SourceMode::default(),
            lambda: LambdaChoice::Default,
            alpha: T::lit(0.05),
            split_seed: 0,
        }
    }
}

impl<T: Real> PipelineConfig<T> {
    pub fn needs_folds(&self) -> bool {
        matches!(self.lambda, LambdaChoice::CrossValidated(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Folds<S> {
    pub train: S,
    pub validation: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct TargetPacket<T: Real> {
    pub summary: TargetSummary<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Folds<TargetSummary<T>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct SourcePacket<T: Real> {
    pub summary: SourceSummary<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Folds<SourceSummary<T>>>,
}

/// What the target sites send to every source site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct Broadcast<T: Real> {
    pub n_target: usize,
    pub psi_bar: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Folds<Vec<T>>>,
}

fn split<T: Real>(data: &SiteData<T>, seed: u64) -> Result<Folds<SiteData<T>>> {
    let (train, validation) = data.split_halves(stream_seed(seed, data.site_id(), 0))?;
    Ok(Folds { train, validation })
}

pub fn target_phase<T: Real>(
    data: &SiteData<T>,
    opts: &StepOptions<T>,
    with_folds: bool,
    split_seed: u64,
) -> Result<TargetPacket<T>> {
    let summary = summarize_target(data, opts)?;
    let folds = if with_folds {
        let f = split(data, split_seed)?;
        Some(Folds {
            train: summarize_target(&f.train, opts)?,
            validation: summarize_target(&f.validation, opts)?,
        })
    } else {
        None
    };
    Ok(TargetPacket { summary, folds })
}

pub fn make_broadcast<T: Real>(targets: &[TargetPacket<T>]) -> Result<Broadcast<T>> {
    let summaries: Vec<TargetSummary<T>> = targets.iter().map(|t| t.summary.clone()).collect();
    let pool = TargetPool::combine(&summaries)?;
    let folds = if !targets.is_empty() && targets.iter().all(|t| t.folds.is_some()) {
        let pick = |f: fn(&Folds<TargetSummary<T>>) -> &TargetSummary<T>| -> Result<Vec<T>> {
            let s: Vec<TargetSummary<T>> = targets
                .iter()
                .filter_map(|t| t.folds.as_ref().map(|x| f(x).clone()))
                .collect();
            Ok(TargetPool::combine(&s)?.psi_bar)
        };
        Some(Folds {
            train: pick(|f| &f.train)?,
            validation: pick(|f| &f.validation)?,
        })
    } else {
        None
    };
    Ok(Broadcast {
        n_target: pool.n_target,
        psi_bar: pool.psi_bar,
        folds,
    })
}

/// Source phase for one site. Split summaries are produced exactly when the
/// broadcast carries split covariate summaries.
pub fn source_phase<T: Real>(
    data: &SiteData<T>,
    broadcast: &Broadcast<T>,
    mode: SourceMode,
    opts: &StepOptions<T>,
    split_seed: u64,
) -> Result<SourcePacket<T>> {
    let summary = summarize_source(data, &broadcast.psi_bar, mode, opts)?;
    let folds = match &broadcast.folds {
        Some(psi) => {
            let f = split(data, split_seed)?;
            Some(Folds {
                train: summarize_source(&f.train, &psi.train, mode, opts)?,
                validation: summarize_source(&f.validation, &psi.validation, mode, opts)?,
            })
        }
        None => None,
    };
    Ok(SourcePacket { summary, folds })
}

pub fn leading_phase<T: Real>(
    targets: &[TargetPacket<T>],
    sources: &[SourcePacket<T>],
    lambda: &LambdaChoice<T>,
    alpha: T,
) -> Result<AggregationResult<T>> {
    let full = SummarySet {
        targets: targets.iter().map(|t| t.summary.clone()).collect(),
        sources: sources.iter().map(|s| s.summary.clone()).collect(),
    };
    let (lambda, curve) = match lambda {
        LambdaChoice::Fixed(l) => (*l, None),
        LambdaChoice::Default => {
            let n = AggregationProblem::new(&full, T::zero())?.n_total;
            (default_lambda(n), None)
        }
        LambdaChoice::CrossValidated(grid) => {
            let fold = |f: fn(&Folds<TargetSummary<T>>) -> &TargetSummary<T>,
                        g: fn(&Folds<SourceSummary<T>>) -> &SourceSummary<T>|
             -> Result<SummarySet<T>> {
                let missing = || {
                    FaceError::Validation(
                        "choosing lambda by cross-validation needs split summaries from every site"
                            .into(),
                    )
                };
                Ok(SummarySet {
                    targets: targets
                        .iter()
                        .map(|t| t.folds.as_ref().map(|x| f(x).clone()).ok_or_else(missing))
                        .collect::<Result<_>>()?,
                    sources: sources
                        .iter()
                        .map(|s| s.folds.as_ref().map(|x| g(x).clone()).ok_or_else(missing))
                        .collect::<Result<_>>()?,
                })
            };
            let train = fold(|f| &f.train, |f| &f.train)?;
            let validation = fold(|f| &f.validation, |f| &f.validation)?;
            let (l, curve) = select_lambda(&train, &validation, grid)?;
            (l, Some(curve))
        }
    };
    let problem = AggregationProblem::new(&full, lambda)?;
    let mut result = solve_eta(&problem, alpha)?;
    result.lambda_curve = curve;
    result.excluded = full
        .sources
        .iter()
        .filter(|s| !s.usable)
        .map(|s| s.site_id.clone())
        .collect();
    Ok(result)
}

/// Everything a run produced, kept for inspection.
#[derive(Debug, Clone)]
pub struct PipelineRun<T: Real> {
    pub targets: Vec<TargetPacket<T>>,
    pub broadcast: Broadcast<T>,
    pub sources: Vec<SourcePacket<T>>,
    pub result: AggregationResult<T>,
}

/// Runs all three phases in one process, sites in parallel within a phase.
pub fn run_pipeline<T: Real>(
    targets: &[SiteData<T>],
    sources: &[SiteData<T>],
    cfg: &PipelineConfig<T>,
) -> Result<PipelineRun<T>> {
    let folds = cfg.needs_folds();
    let target_packets: Vec<TargetPacket<T>> = targets
        .par_iter()
        .map(|d| target_phase(d, &cfg.step, folds, cfg.split_seed))
        .collect::<Result<_>>()?;
    let broadcast = make_broadcast(&target_packets)?;
    let source_packets: Vec<SourcePacket<T>> = sources
        .par_iter()
        .map(|d| source_phase(d, &broadcast, cfg.mode, &cfg.step, cfg.split_seed))
        .collect::<Result<_>>()?;
    let result = leading_phase(&target_packets, &source_packets, &cfg.lambda, cfg.alpha)?;
    Ok(PipelineRun {
        targets: target_packets,
        broadcast,
        sources: source_packets,
        result,
    })
}
