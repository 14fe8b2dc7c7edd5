//! End-to-end episodic evaluation, ablations and sweeps.
//!
//! Every episode `(g, i)` draws its records from the `"episode"` stream and
//! its patch subsamples from the `"support-patches"` / `"query-patches"`
//! streams, all keyed by `(master_seed, g, i)`. Runs that differ only in
//! their fusion config therefore see identical episodes, and episodes can be
//! evaluated in any order.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::classifier::{
    classify, closure_prototype, fused_prototype, nll, totality_prototype, Prototype,
};
use crate::config::FusionConfig;
use crate::episode::{combine_digests, Episode, EpisodeSampler, EpisodeSpec};
use crate::error::{GgiuError, Result};
use crate::estimator::{estimate_with, LambdaDiag};
use crate::seeds;
use crate::store::{EmbeddingDataset, FeatureVector, ImageRecord};
use crate::synth::intra_class_variance;

pub const CI_DEFINITION: &str = "1.96 * sample_stddev(group_accuracy) / sqrt(groups)";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Percent correct per group.
    pub per_group_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Half-width of the 95% interval, in percentage points.
    pub ci95: f64,
    pub ci_definition: String,
    pub config: FusionConfig,
    pub spec: EpisodeSpec,
    pub seed: u64,
    pub episodes: usize,
    pub queries: usize,
    pub mean_nll: f64,
    /// Queries whose true-class probability hit the NLL floor.
    pub nll_clamped: usize,
    /// SHA-256 over the per-episode content digests, in (group, index) order.
    pub episode_digest: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        canonical_json(self)
    }
}

/// Pretty JSON with keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialise");
    serde_json::to_string_pretty(&v).expect("value serialises")
}

/// Mean and 95% half-width of group accuracies.
pub fn mean_ci95(per_group: &[f64]) -> (f64, f64) {
    let n = per_group.len() as f64;
    let mean = per_group.iter().sum::<f64>() / n;
    if per_group.len() < 2 {
        return (mean, 0.0);
    }
    let var = per_group.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

#[derive(Default)]
struct EpisodeOutcome {
    correct: usize,
    total: usize,
    nll_sum: f64,
    clamped: usize,
    digest: [u8; 32],
}

fn normalized(v: FeatureVector, on: bool) -> Result<FeatureVector> {
    if on {
        v.l2_normalized().ok_or(GgiuError::ZeroVector)
    } else {
        Ok(v)
    }
}

fn class_prototype(
    recs: &[&ImageRecord],
    lambda: &LambdaDiag,
    m: usize,
    rng: &mut seeds::StreamRng,
) -> Result<Prototype> {
    let pt = totality_prototype(recs)?;
    if lambda.is_totality() {
        return Ok(pt);
    }
    let pc = closure_prototype(recs, m, rng)?;
    fused_prototype(&pt, &pc, lambda)
}

fn evaluate_episode(
    dataset: &EmbeddingDataset,
    episode: &Episode,
    config: &FusionConfig,
    seed: u64,
    group: usize,
    index: usize,
) -> Result<EpisodeOutcome> {
    let path = [group as u64, index as u64];
    let mut support_rng = seeds::stream(seed, "support-patches", &path);
    let mut query_rng = seeds::stream(seed, "query-patches", &path);
    let m = config.patches_m;

    let prototypes = episode
        .support
        .iter()
        .map(|ids| {
            let recs: Vec<&ImageRecord> = ids.iter().map(|&r| &dataset.records[r]).collect();
            let mut p = class_prototype(&recs, config.support_lambda(), m, &mut support_rng)?;
            p.vector = normalized(p.vector, config.normalize)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = EpisodeOutcome {
        digest: episode.digest(),
        ..EpisodeOutcome::default()
    };
    for (pos, ids) in episode.query.iter().enumerate() {
        for &r in ids {
            let feature = estimate_with(&dataset.records[r], config.query_lambda(), m, &mut query_rng)?;
            let feature = normalized(feature, config.normalize)?;
            let c = classify(&feature, &prototypes, config.metric)?;
            out.total += 1;
            if c.predicted == episode.classes[pos] {
                out.correct += 1;
            }
            let loss = nll(&c.probabilities, pos)?;
            out.nll_sum += loss.value;
            out.clamped += loss.clamped as usize;
        }
    }
    Ok(out)
}

fn check_patch_capacity(dataset: &EmbeddingDataset, config: &FusionConfig) -> Result<()> {
    if !config.uses_patches() {
        return Ok(());
    }
    if let Some(r) = dataset
        .records
        .iter()
        .find(|r| r.patches.len() < config.patches_m)
    {
        return Err(GgiuError::PatchBounds {
            requested: config.patches_m,
            available: r.patches.len(),
        });
    }
    Ok(())
}

pub fn run_eval(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    config: &FusionConfig,
    master_seed: u64,
) -> Result<EvalReport> {
    config.validate(dataset.dim)?;
    let sampler = EpisodeSampler::new(dataset, *spec)?;
    check_patch_capacity(dataset, config)?;

    let mut per_group = Vec::with_capacity(spec.groups);
    let mut digests = Vec::with_capacity(spec.total_episodes());
    let (mut queries, mut nll_sum, mut clamped) = (0usize, 0.0f64, 0usize);
    for g in 0..spec.groups {
        let outcomes = (0..spec.episodes_per_group)
            .into_par_iter()
            .map(|i| {
                let ep = sampler.episode_at(master_seed, g, i);
                evaluate_episode(dataset, &ep, config, master_seed, g, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut correct, mut total) = (0usize, 0usize);
        for o in &outcomes {
            correct += o.correct;
            total += o.total;
            nll_sum += o.nll_sum;
            clamped += o.clamped;
            digests.push(o.digest);
        }
        queries += total;
        per_group.push(100.0 * correct as f64 / total as f64);
    }
    let (mean_accuracy, ci95) = mean_ci95(&per_group);
    Ok(EvalReport {
        per_group_accuracy: per_group,
        mean_accuracy,
        ci95,
        ci_definition: CI_DEFINITION.to_string(),
        config: config.clone(),
        spec: *spec,
        seed: master_seed,
        episodes: spec.total_episodes(),
        queries,
        mean_nll: nll_sum / queries as f64,
        nll_clamped: clamped,
        episode_digest: combine_digests(&digests),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub apply_support: bool,
    pub apply_query: bool,
    pub report: EvalReport,
}

/// The four support/query on-off combinations over one episode stream, in
/// the order (off,off), (on,off), (off,on), (on,on).
pub fn ablate(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    config: &FusionConfig,
    master_seed: u64,
) -> Result<Vec<AblationRow>> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(s, q)| {
            let cfg = FusionConfig {
                apply_support: s,
                apply_query: q,
                ..config.clone()
            };
            Ok(AblationRow {
                apply_support: s,
                apply_query: q,
                report: run_eval(dataset, spec, &cfg, master_seed)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub m: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

pub fn sweep_lambda(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    base: &FusionConfig,
    lambdas: &[f64],
    m_values: &[usize],
    master_seed: u64,
) -> Result<Vec<LambdaSweepRow>> {
    let mut rows = Vec::with_capacity(lambdas.len() * m_values.len());
    for &m in m_values {
        for &lambda in lambdas {
            let cfg = FusionConfig {
                lambda: LambdaDiag::Scalar(lambda),
                patches_m: m,
                ..base.clone()
            };
            let r = run_eval(dataset, spec, &cfg, master_seed)?;
            rows.push(LambdaSweepRow {
                lambda,
                m,
                accuracy: r.mean_accuracy,
                ci95: r.ci95,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchSweepRow {
    pub m: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Accuracy against patch count at a fixed weight; `m = 0` is the
/// totality-only point.
pub fn sweep_patches(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    base: &FusionConfig,
    m_values: &[usize],
    lambda: &LambdaDiag,
    master_seed: u64,
) -> Result<Vec<PatchSweepRow>> {
    let available = dataset.min_patch_count();
    m_values
        .iter()
        .map(|&m| {
            if m > available {
                return Err(GgiuError::PatchBounds {
                    requested: m,
                    available,
                });
            }
            let cfg = FusionConfig {
                lambda: if m == 0 { LambdaDiag::TOTALITY } else { lambda.clone() },
                patches_m: m,
                ..base.clone()
            };
            let r = run_eval(dataset, spec, &cfg, master_seed)?;
            Ok(PatchSweepRow {
                m,
                accuracy: r.mean_accuracy,
                ci95: r.ci95,
            })
        })
        .collect()
}

pub fn lambda_sweep_csv(rows: &[LambdaSweepRow]) -> String {
    let mut out = String::from("lambda,m,accuracy,ci95\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.lambda, r.m, r.accuracy, r.ci95).unwrap();
    }
    out
}

pub fn patch_sweep_csv(rows: &[PatchSweepRow]) -> String {
    let mut out = String::from("m,accuracy,ci95\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.m, r.accuracy, r.ci95).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub variance_before: f64,
    pub variance_after: f64,
    /// Grid value with the best held-out accuracy (first one on ties).
    pub best_lambda: f64,
    pub accuracy_curve: Vec<LambdaSweepRow>,
    pub excluded_classes: Vec<usize>,
    pub heldout_seed: u64,
}

/// Seed for the episodes used to pick a weight, independent of `master_seed`'s
/// own episode stream.
pub fn heldout_seed(master_seed: u64) -> u64 {
    let s = seeds::derive_seed(master_seed, "heldout", &[]);
    u64::from_le_bytes(s[..8].try_into().expect("32-byte seed"))
}

/// Intra-class variance of whole-image features versus fused features under
/// `config`, plus the accuracy-maximising grid weight on held-out episodes.
pub fn variance_report(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    config: &FusionConfig,
    grid: &[f64],
    master_seed: u64,
) -> Result<VarianceReport> {
    config.validate(dataset.dim)?;
    if grid.is_empty() {
        return Err(GgiuError::Empty("lambda grid"));
    }
    let fused_cfg = FusionConfig {
        apply_support: true,
        apply_query: true,
        ..config.clone()
    };
    check_patch_capacity(dataset, &fused_cfg)?;

    let by_class = dataset.records_by_class();
    let before: Vec<Vec<&FeatureVector>> = by_class
        .iter()
        .map(|ids| ids.iter().map(|&r| &dataset.records[r].totality).collect())
        .collect();
    let after: Vec<Vec<FeatureVector>> = by_class
        .iter()
        .map(|ids| {
            ids.par_iter()
                .map(|&r| {
                    let rec = &dataset.records[r];
                    let mut rng = seeds::stream(master_seed, "variance-patches", &[rec.record_id]);
                    estimate_with(rec, &config.lambda, config.patches_m, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let v_before = intra_class_variance(&before)
        .map_err(|_| GgiuError::Capacity("variance needs a class with at least two images".into()))?;
    let v_after = intra_class_variance(&after)?;

    let seed = heldout_seed(master_seed);
    let accuracy_curve = sweep_lambda(dataset, spec, config, grid, &[config.patches_m], seed)?;
    let mut best = 0;
    for (i, row) in accuracy_curve.iter().enumerate() {
        if row.accuracy > accuracy_curve[best].accuracy {
            best = i;
        }
    }
    Ok(VarianceReport {
        variance_before: v_before.value,
        variance_after: v_after.value,
        best_lambda: accuracy_curve[best].lambda,
        accuracy_curve,
        excluded_classes: v_before.excluded,
        heldout_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_from_groups() {
        let (m, ci) = mean_ci95(&[60.0, 62.0, 64.0, 66.0, 68.0]);
        assert_eq!(m, 64.0);
        // sample sd = sqrt(10)
        assert!((ci - 1.96 * 10f64.sqrt() / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci95(&[70.0]), (70.0, 0.0));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![LambdaSweepRow {
            lambda: 0.5,
            m: 5,
            accuracy: 64.25,
            ci95: 0.5,
        }];
        assert_eq!(lambda_sweep_csv(&rows), "lambda,m,accuracy,ci95\n0.5,5,64.25,0.5\n");
        let rows = vec![PatchSweepRow {
            m: 0,
            accuracy: 61.5,
            ci95: 0.25,
        }];
        assert_eq!(patch_sweep_csv(&rows), "m,accuracy,ci95\n0,61.5,0.25\n");
    }

    #[test]
    fn heldout_seed_differs() {
        assert_ne!(heldout_seed(1), 1);
        assert_eq!(heldout_seed(1), heldout_seed(1));
    }
}
