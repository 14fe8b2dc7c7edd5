mod common;

use ggiu_core::estimator::{CovarianceDiag, LambdaDiag};
use ggiu_core::harness::{
    ablate, lambda_sweep_csv, mean_ci95, run_eval, sweep_lambda, sweep_patches, variance_report,
};
use ggiu_core::synth::{generate_dataset, grid_search_lambda, GaussianImageModel};
use ggiu_core::{EpisodeSpec, FeatureVector, FusionConfig, GgiuError};

use common::{argmax, fixture, grid, job};

fn spec(n_way: usize, episodes_per_group: usize) -> EpisodeSpec {
    EpisodeSpec {
        n_way,
        k_shot: 1,
        q_query: 15,
        groups: 5,
        episodes_per_group,
    }
}

#[test]
fn lambda_one_is_the_baseline() {
    let data = fixture("iid_harder").dataset;
    let full = FusionConfig {
        lambda: LambdaDiag::TOTALITY,
        ..FusionConfig::default()
    };
    let a = run_eval(&data, &spec(5, 60), &full, 3).unwrap();
    let b = run_eval(&data, &spec(5, 60), &FusionConfig::baseline(), 3).unwrap();
    assert_eq!(a.per_group_accuracy, b.per_group_accuracy);
    assert_eq!(a.mean_nll.to_bits(), b.mean_nll.to_bits());
}

#[test]
fn noiseless_data_is_classified_perfectly() {
    let data = fixture("noiseless").dataset;
    let r = run_eval(&data, &spec(5, 40), &FusionConfig::default(), 1).unwrap();
    assert_eq!(r.mean_accuracy, 100.0);
    assert_eq!(r.ci95, 0.0);
}

#[test]
fn optimal_fusion_beats_baseline() {
    let data = fixture("iid_noisy").dataset;
    let s = spec(5, 100);
    let fused = FusionConfig {
        lambda: LambdaDiag::Scalar(1.0 / 6.0),
        patches_m: 5,
        ..FusionConfig::default()
    };
    let a = run_eval(&data, &s, &fused, 9).unwrap();
    let b = run_eval(&data, &s, &FusionConfig::baseline(), 9).unwrap();
    assert!(a.mean_accuracy - b.mean_accuracy > 2.0 * a.ci95.max(b.ci95));
}

#[test]
fn two_way_separated_classes_gain_from_fusion() {
    let model = GaussianImageModel {
        dim: 2,
        class_means: vec![FeatureVector::new(vec![2.0, 0.0]), FeatureVector::new(vec![-2.0, 0.0])],
        class_spread: CovarianceDiag::isotropic(2, 0.0),
        patch_cov: CovarianceDiag::isotropic(2, 9.0),
        totality_cov: None,
        seed: 6,
    };
    let data = generate_dataset(&model, 60, 5).unwrap().dataset;
    let s = spec(2, 100);
    let fused = run_eval(&data, &s, &FusionConfig::default(), 2).unwrap();
    let base = run_eval(&data, &s, &FusionConfig::baseline(), 2).unwrap();
    assert!(fused.mean_accuracy - base.mean_accuracy > 2.0 * fused.ci95.max(base.ci95));
}

#[test]
fn report_is_self_consistent() {
    let data = fixture("iid_harder").dataset;
    let r = run_eval(&data, &spec(5, 30), &FusionConfig::default(), 4).unwrap();
    let groups = &r.per_group_accuracy;
    let mean = groups.iter().sum::<f64>() / groups.len() as f64;
    let var = groups.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (groups.len() - 1) as f64;
    assert!((r.mean_accuracy - mean).abs() <= 1e-9);
    assert!((r.ci95 - 1.96 * var.sqrt() / (groups.len() as f64).sqrt()).abs() <= 1e-9);
    assert_eq!((mean, r.ci95), mean_ci95(groups));
    assert_eq!(r.episodes, 150);
    assert_eq!(r.queries, 150 * 5 * 15);

    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["seed"], 4);
    assert_eq!(json["config"]["metric"], "sqeuclid");
    assert_eq!(json["mean_accuracy"].as_f64().unwrap(), r.mean_accuracy);
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let data = fixture("iid_harder").dataset;
    let cfg = FusionConfig::default();
    let a = run_eval(&data, &spec(5, 20), &cfg, 8).unwrap().to_json();
    let b = run_eval(&data, &spec(5, 20), &cfg, 8).unwrap().to_json();
    let c = run_eval(&data, &spec(5, 20), &cfg, 9).unwrap().to_json();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn ablation_rows() {
    let data = fixture("iid_noisy").dataset;
    let s = spec(5, 60);
    let rows = ablate(&data, &s, &FusionConfig::default(), 5).unwrap();
    let flags: Vec<(bool, bool)> = rows.iter().map(|r| (r.apply_support, r.apply_query)).collect();
    assert_eq!(flags, [(false, false), (true, false), (false, true), (true, true)]);
    let base = run_eval(&data, &s, &FusionConfig::baseline(), 5).unwrap();
    assert_eq!(rows[0].report.per_group_accuracy, base.per_group_accuracy);
    assert!(rows.iter().all(|r| r.report.episode_digest == base.episode_digest));
    let acc: Vec<f64> = rows.iter().map(|r| r.report.mean_accuracy).collect();
    assert!(acc[1] >= acc[2]);
    assert_eq!(argmax(&acc), 3);
}

#[test]
fn lambda_curves_meet_at_one() {
    let data = fixture("crop_excess").dataset;
    let rows = sweep_lambda(&data, &spec(5, 20), &FusionConfig::default(), &[0.5, 1.0], &[1, 5, 10], 6)
        .unwrap();
    let ends: Vec<f64> = rows.iter().filter(|r| r.lambda == 1.0).map(|r| r.accuracy).collect();
    assert_eq!(ends.len(), 3);
    assert!(ends.iter().all(|a| *a == ends[0]));
    let csv = lambda_sweep_csv(&rows);
    assert!(csv.starts_with("lambda,m,accuracy,ci95\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn lambda_sweep_peak_agrees_with_oracle() {
    let fixture_job = job("iid_harder");
    let data = fixture_job.generate().unwrap().dataset;
    let lambdas = grid(20);
    let rows = sweep_lambda(&data, &spec(5, 100), &FusionConfig::default(), &lambdas, &[5], 12).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let peak = lambdas[argmax(&acc)];

    let model = fixture_job.recipe.build().unwrap();
    let oracle = grid_search_lambda(&model, 5, &lambdas, 10_000).unwrap().best_lambda;
    assert!((peak - oracle).abs() <= 0.05 + 1e-12, "sweep peak {peak}, oracle {oracle}");
}

#[test]
fn patch_sweep_starts_at_baseline() {
    let data = fixture("iid_noisy").dataset;
    let s = spec(5, 40);
    let rows = sweep_patches(&data, &s, &FusionConfig::default(), &[0, 1, 2], &0.5.into(), 7).unwrap();
    let base = run_eval(&data, &s, &FusionConfig::baseline(), 7).unwrap();
    assert_eq!(rows[0].accuracy, base.mean_accuracy);
    assert!(rows[1].accuracy > rows[0].accuracy);
    for w in rows.windows(2) {
        assert!(w[1].accuracy >= w[0].accuracy - 2.0 * w[0].ci95);
    }
    assert!(matches!(
        sweep_patches(&data, &s, &FusionConfig::default(), &[21], &0.5.into(), 7),
        Err(GgiuError::PatchBounds { requested: 21, available: 20 })
    ));
}

#[test]
fn variance_of_noiseless_data_is_zero() {
    let data = fixture("noiseless").dataset;
    let v = variance_report(&data, &spec(5, 5), &FusionConfig::default(), &[0.5, 1.0], 1).unwrap();
    assert_eq!(v.variance_before, 0.0);
    assert_eq!(v.variance_after, 0.0);
    assert!(v.excluded_classes.is_empty());
}

#[test]
fn best_lambda_rises_as_patch_noise_falls() {
    let lambdas = grid(10);
    let best: Vec<f64> = ["variance_trend_high", "variance_trend_mid", "variance_trend_low"]
        .iter()
        .map(|name| {
            let data = fixture(name).dataset;
            let v = variance_report(&data, &spec(5, 100), &FusionConfig::default(), &lambdas, 13).unwrap();
            assert!(v.variance_after < v.variance_before);
            v.best_lambda
        })
        .collect();
    assert!(best.windows(2).all(|w| w[1] > w[0]), "{best:?}");
}

#[test]
fn config_and_capacity_errors() {
    let data = fixture("noiseless").dataset;
    let bad_lambda = FusionConfig {
        lambda: LambdaDiag::Scalar(1.5),
        ..FusionConfig::default()
    };
    let err = run_eval(&data, &spec(5, 1), &bad_lambda, 0).unwrap_err();
    assert!(err.is_config_error());
    let too_wide = run_eval(&data, &spec(11, 1), &FusionConfig::default(), 0).unwrap_err();
    assert!(matches!(too_wide, GgiuError::Capacity(_)));
    assert!(!too_wide.is_config_error());
}
