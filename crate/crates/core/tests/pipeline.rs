mod common;

use face_core::aggregate::LAMBDA_GRID;
use face_core::pipeline::{run_pipeline, LambdaChoice, PipelineConfig};
use face_core::source::SourceMode;

fn cfg(lambda: LambdaChoice<f64>) -> PipelineConfig<f64> {
    PipelineConfig {
        lambda,
        split_seed: 5,
        ..PipelineConfig::default()
    }
}

#[test]
fn cross_validated_lambda_comes_from_the_grid() {
    let (target, sources) = common::fixture_sites();
    let run = run_pipeline(&[target], &sources, &cfg(LambdaChoice::cv_default_grid())).unwrap();
    let r = &run.result;
    assert!(LAMBDA_GRID.contains(&r.lambda_used));
    let curve = r.lambda_curve.as_ref().unwrap();
    assert_eq!(curve.len(), LAMBDA_GRID.len());
    let best = curve.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let first_best = curve.iter().find(|p| p.loss == best).unwrap();
    assert_eq!(first_best.lambda, r.lambda_used);
    assert!(r.converged);
    assert!(r.kkt_residual <= 1e-6);
}

#[test]
fn runs_are_deterministic() {
    let (target, sources) = common::fixture_sites();
    let c = cfg(LambdaChoice::cv_default_grid());
    let a = run_pipeline(std::slice::from_ref(&target), &sources, &c).unwrap();
    let b = run_pipeline(std::slice::from_ref(&target), &sources, &c).unwrap();
    assert_eq!(a.result, b.result);
    let other = PipelineConfig { split_seed: 6, ..c };
    let d = run_pipeline(&[target], &sources, &other).unwrap();
    assert_ne!(a.sources[0].folds, d.sources[0].folds);
}

#[test]
fn fixed_and_default_lambda() {
    let (target, sources) = common::fixture_sites();
    let r0 = run_pipeline(
        std::slice::from_ref(&target),
        &sources,
        &cfg(LambdaChoice::Fixed(0.0)),
    )
    .unwrap()
    .result;
    assert_eq!(r0.lambda_used, 0.0);
    assert!(r0.lambda_curve.is_none());
    let rd = run_pipeline(
        std::slice::from_ref(&target),
        &sources,
        &cfg(LambdaChoice::Default),
    )
    .unwrap()
    .result;
    assert!((rd.lambda_used - (rd.n_total as f64).cbrt()).abs() < 1e-12);
    // A huge penalty drives every weight to zero, leaving the target estimate.
    let rb = run_pipeline(
        std::slice::from_ref(&target),
        &sources,
        &cfg(LambdaChoice::Fixed(1e12)),
    )
    .unwrap()
    .result;
    assert!(rb.eta.iter().all(|&e| e == 0.0));
    assert_eq!(rb.delta_face, rb.target_estimate);
}

#[test]
fn anchored_mode_runs_end_to_end() {
    let (target, sources) = common::fixture_sites();
    let c = PipelineConfig {
        mode: SourceMode::Anchored,
        ..cfg(LambdaChoice::cv_default_grid())
    };
    let r = run_pipeline(&[target], &sources, &c).unwrap().result;
    assert!(r.delta_face.is_finite() && r.v_hat > 0.0);
    assert!(r.ci.0 < r.delta_face && r.delta_face < r.ci.1);
}
