//! Synthetic embeddings with known ground truth.
//!
//! Each image has a latent mean `mu_I ~ N(class_mean, class_spread)`. Its
//! whole-image embedding is one draw from `N(mu_I, totality_cov)` and each
//! patch an independent draw from `N(mu_I, patch_cov)`. With no explicit
//! `totality_cov` the whole image is just one more patch (the iid model), and
//! the optimal fusion weight for M patches is `1 / (M + 1)`.

use std::io::{BufRead, BufWriter, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GgiuError, Result};
use crate::estimator::{closure_estimate, fuse, CovarianceDiag, LambdaDiag};
use crate::seeds;
use crate::store::{EmbeddingDataset, FeatureVector, ImageRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianImageModel {
    pub dim: usize,
    pub class_means: Vec<FeatureVector>,
    pub class_spread: CovarianceDiag,
    pub patch_cov: CovarianceDiag,
    /// Noise of the whole-image embedding; `None` means `patch_cov`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub totality_cov: Option<CovarianceDiag>,
    pub seed: u64,
}

impl GaussianImageModel {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GgiuError::Config("model dimension must be at least 1".into()));
        }
        if self.class_means.is_empty() {
            return Err(GgiuError::Config("model needs at least one class".into()));
        }
        for m in &self.class_means {
            if m.dim() != self.dim {
                return Err(GgiuError::DimensionMismatch {
                    expected: self.dim,
                    found: m.dim(),
                });
            }
            if !m.is_finite() {
                return Err(GgiuError::Config("class means must be finite".into()));
            }
        }
        for (i, a) in self.class_means.iter().enumerate() {
            if self.class_means[..i].contains(a) {
                return Err(GgiuError::Config(format!("class mean {i} duplicates another")));
            }
        }
        let covs = [Some(&self.class_spread), Some(&self.patch_cov), self.totality_cov.as_ref()];
        for c in covs.into_iter().flatten() {
            if c.dim() != self.dim {
                return Err(GgiuError::DimensionMismatch {
                    expected: self.dim,
                    found: c.dim(),
                });
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn totality_cov(&self) -> &CovarianceDiag {
        self.totality_cov.as_ref().unwrap_or(&self.patch_cov)
    }

    /// Error covariances of the totality and M-patch closure observers.
    pub fn observer_covariances(&self, m: usize) -> (CovarianceDiag, CovarianceDiag) {
        (
            self.totality_cov().clone(),
            self.patch_cov.scaled(1.0 / m as f64),
        )
    }

    fn draw_image<R: Rng + ?Sized>(&self, class: usize, m: usize, rng: &mut R) -> LatentImage {
        let mu = gaussian(&self.class_means[class], &self.class_spread, rng);
        let totality = gaussian(&mu, self.totality_cov(), rng);
        let patches = (0..m).map(|_| gaussian(&mu, &self.patch_cov, rng)).collect();
        LatentImage {
            mu,
            totality,
            patches,
        }
    }
}

struct LatentImage {
    mu: FeatureVector,
    totality: FeatureVector,
    patches: Vec<FeatureVector>,
}

fn gaussian<R: Rng + ?Sized>(mean: &[f64], cov: &CovarianceDiag, rng: &mut R) -> FeatureVector {
    mean.iter()
        .zip(&cov.0)
        .map(|(&mu, &var)| {
            let z: f64 = rng.sample(StandardNormal);
            mu + var.sqrt() * z
        })
        .collect::<Vec<_>>()
        .into()
}

/// Compact, serialisable description of an isotropic model. Class means are
/// drawn per coordinate from `N(0, mean_scale^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecipe {
    pub dim: usize,
    pub classes: usize,
    pub mean_scale: f64,
    pub class_spread: f64,
    pub patch_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub totality_var: Option<f64>,
    pub seed: u64,
}

impl SynthRecipe {
    pub fn build(&self) -> Result<GaussianImageModel> {
        let spread = CovarianceDiag::isotropic(self.dim, 1.0);
        let class_means = (0..self.classes)
            .map(|c| {
                let mut rng = seeds::stream(self.seed, "class-mean", &[c as u64]);
                let z = gaussian(&vec![0.0; self.dim], &spread, &mut rng);
                FeatureVector::new(z.iter().map(|v| v * self.mean_scale).collect()).quantized()
            })
            .collect();
        let model = GaussianImageModel {
            dim: self.dim,
            class_means,
            class_spread: CovarianceDiag::isotropic(self.dim, self.class_spread),
            patch_cov: CovarianceDiag::isotropic(self.dim, self.patch_var),
            totality_cov: self.totality_var.map(|v| CovarianceDiag::isotropic(self.dim, v)),
            seed: self.seed,
        };
        model.validate()?;
        Ok(model)
    }
}

/// A recipe plus dataset size; the unit stored in fixture files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthJob {
    pub recipe: SynthRecipe,
    pub images_per_class: usize,
    pub patches_per_image: usize,
}

impl SynthJob {
    pub fn generate(&self) -> Result<SyntheticDataset> {
        generate_dataset(&self.recipe.build()?, self.images_per_class, self.patches_per_image)
    }
}

/// Ground-truth latent mean of one generated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub record_id: u64,
    pub mu: FeatureVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: EmbeddingDataset,
    /// Aligned with `dataset.records`.
    pub truths: Vec<TruthRow>,
}

pub fn generate_dataset(
    model: &GaussianImageModel,
    images_per_class: usize,
    patches_per_image: usize,
) -> Result<SyntheticDataset> {
    model.validate()?;
    if images_per_class == 0 {
        return Err(GgiuError::Config("images_per_class must be at least 1".into()));
    }
    if patches_per_image > u16::MAX as usize {
        return Err(GgiuError::Config("too many patches per image".into()));
    }
    let classes = model.class_means.len();
    let rows: Vec<(ImageRecord, TruthRow)> = (0..classes * images_per_class)
        .into_par_iter()
        .map(|n| {
            let (c, j) = (n / images_per_class, n % images_per_class);
            let mut rng = seeds::stream(model.seed, "image", &[c as u64, j as u64]);
            let img = model.draw_image(c, patches_per_image, &mut rng);
            let record_id = n as u64;
            (
                ImageRecord {
                    record_id,
                    class_index: c as u32,
                    totality: img.totality.quantized(),
                    patches: img.patches.into_iter().map(FeatureVector::quantized).collect(),
                },
                TruthRow {
                    record_id,
                    mu: img.mu,
                },
            )
        })
        .collect();
    let (records, truths) = rows.into_iter().unzip();
    Ok(SyntheticDataset {
        dataset: EmbeddingDataset {
            dim: model.dim,
            class_names: (0..classes).map(|c| format!("class_{c:03}")).collect(),
            records,
            provenance: "synthetic".into(),
        },
        truths,
    })
}

pub fn write_truth_sidecar<W: Write>(truths: &[TruthRow], sink: W) -> Result<()> {
    let mut out = BufWriter::new(sink);
    for t in truths {
        let line = serde_json::to_string(t).map_err(|e| GgiuError::InvalidDataset(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_truth_sidecar<R: BufRead>(source: R) -> Result<Vec<TruthRow>> {
    let mut rows = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| GgiuError::JsonLine {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Per-dimension statistics of `truth - estimate`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorDiagnostics {
    pub empirical_bias: FeatureVector,
    /// Sample variance (n - 1 denominator) per dimension.
    pub empirical_cov: CovarianceDiag,
    pub trace: f64,
    /// Sum over dimensions of the mean squared error.
    pub mean_squared: f64,
}

pub fn empirical_error_diagnostics<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    estimates: &[A],
    truths: &[B],
) -> Result<ErrorDiagnostics> {
    if estimates.len() != truths.len() {
        return Err(GgiuError::LengthMismatch {
            left: estimates.len(),
            right: truths.len(),
        });
    }
    if estimates.len() < 2 {
        return Err(GgiuError::Empty("need at least two estimate/truth pairs"));
    }
    let dim = truths[0].as_ref().len();
    let n = estimates.len() as f64;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for (e, t) in estimates.iter().zip(truths) {
        let (e, t) = (e.as_ref(), t.as_ref());
        if e.len() != dim || t.len() != dim {
            return Err(GgiuError::DimensionMismatch {
                expected: dim,
                found: if e.len() != dim { e.len() } else { t.len() },
            });
        }
        for i in 0..dim {
            let err = t[i] - e[i];
            sum[i] += err;
            sq[i] += err * err;
        }
    }
    let bias: Vec<f64> = sum.iter().map(|s| s / n).collect();
    // Two-pass variance keeps the constant-offset case exactly zero.
    let mut centred = vec![0.0; dim];
    for (e, t) in estimates.iter().zip(truths) {
        let (e, t) = (e.as_ref(), t.as_ref());
        for i in 0..dim {
            let d = t[i] - e[i] - bias[i];
            centred[i] += d * d;
        }
    }
    let cov: Vec<f64> = centred.iter().map(|c| c / (n - 1.0)).collect();
    Ok(ErrorDiagnostics {
        empirical_bias: bias.into(),
        trace: cov.iter().sum(),
        empirical_cov: CovarianceDiag(cov),
        mean_squared: sq.iter().map(|s| s / n).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub trace: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSearch {
    /// Scalar grid value minimising the error trace.
    pub best_lambda: f64,
    pub curve: Vec<GridPoint>,
    /// Grid value minimising each dimension's error variance separately
    /// (the trace separates over dimensions for a diagonal weight).
    pub per_dim_best: Vec<f64>,
}

/// Brute-force counterpart of [`crate::estimator::optimal_lambda`]: simulate
/// `trials` images with `m` patches and measure the fused error at every grid
/// value, reusing the same draws for all of them.
pub fn grid_search_lambda(
    model: &GaussianImageModel,
    m: usize,
    grid: &[f64],
    trials: usize,
) -> Result<GridSearch> {
    model.validate()?;
    if m == 0 {
        return Err(GgiuError::Config("grid search needs at least one patch".into()));
    }
    if trials < 1000 {
        return Err(GgiuError::Config(format!("trials must be at least 1000, got {trials}")));
    }
    if grid.is_empty() {
        return Err(GgiuError::Empty("lambda grid"));
    }
    for (index, &value) in grid.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(GgiuError::InvalidLambda { index, value });
        }
    }
    let classes = model.class_means.len();
    let sims: Vec<(FeatureVector, FeatureVector, FeatureVector)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeds::stream(model.seed, "grid-trial", &[m as u64, t as u64]);
            let img = model.draw_image(t % classes, m, &mut rng);
            let closure = closure_estimate(&img.patches).expect("m >= 1");
            (img.mu, img.totality, closure)
        })
        .collect();
    let truths: Vec<&FeatureVector> = sims.iter().map(|s| &s.0).collect();

    let per_lambda: Vec<ErrorDiagnostics> = grid
        .par_iter()
        .map(|&l| {
            let lam = LambdaDiag::Scalar(l);
            let estimates: Vec<FeatureVector> = sims
                .iter()
                .map(|(_, t, c)| fuse(t, c, &lam))
                .collect::<Result<_>>()?;
            empirical_error_diagnostics(&estimates, &truths)
        })
        .collect::<Result<_>>()?;

    let curve: Vec<GridPoint> = grid
        .iter()
        .zip(&per_lambda)
        .map(|(&lambda, d)| GridPoint {
            lambda,
            trace: d.trace,
        })
        .collect();
    let best_lambda = grid[argmin(per_lambda.iter().map(|d| d.trace))];
    let per_dim_best = (0..model.dim)
        .map(|i| grid[argmin(per_lambda.iter().map(|d| d.empirical_cov.0[i]))])
        .collect();
    Ok(GridSearch {
        best_lambda,
        curve,
        per_dim_best,
    })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Log-likelihood of `samples` under `N(mean, diag(cov))`.
pub fn gaussian_log_likelihood<V: AsRef<[f64]>>(
    mean: &[f64],
    cov: &CovarianceDiag,
    samples: &[V],
) -> Result<f64> {
    cov.validate()?;
    if cov.dim() != mean.len() {
        return Err(GgiuError::DimensionMismatch {
            expected: mean.len(),
            found: cov.dim(),
        });
    }
    if let Some(index) = cov.0.iter().position(|&v| v == 0.0) {
        return Err(GgiuError::InvalidCovariance { index, value: 0.0 });
    }
    let d = mean.len() as f64;
    let m = samples.len() as f64;
    let log_det: f64 = cov.0.iter().map(|v| v.ln()).sum();
    let mut quad = 0.0;
    for s in samples {
        let s = s.as_ref();
        if s.len() != mean.len() {
            return Err(GgiuError::DimensionMismatch {
                expected: mean.len(),
                found: s.len(),
            });
        }
        quad += s
            .iter()
            .zip(mean)
            .zip(&cov.0)
            .map(|((x, mu), var)| (x - mu) * (x - mu) / var)
            .sum::<f64>();
    }
    Ok(-0.5 * m * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * m * log_det - 0.5 * quad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntraClassVariance {
    pub value: f64,
    /// Classes skipped for having fewer than two features.
    pub excluded: Vec<usize>,
}

/// Mean over classes of the trace of the within-class sample covariance.
pub fn intra_class_variance<V: AsRef<[f64]>>(groups: &[Vec<V>]) -> Result<IntraClassVariance> {
    let mut excluded = Vec::new();
    let mut traces = Vec::new();
    for (c, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            excluded.push(c);
            continue;
        }
        let mean = closure_estimate(group)?;
        let mut sq = 0.0;
        for v in group {
            sq += v
                .as_ref()
                .iter()
                .zip(mean.iter())
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
        traces.push(sq / (group.len() - 1) as f64);
    }
    if traces.is_empty() {
        return Err(GgiuError::Empty("no class has at least two features"));
    }
    Ok(IntraClassVariance {
        value: traces.iter().sum::<f64>() / traces.len() as f64,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iid(dim: usize, var: f64, seed: u64) -> GaussianImageModel {
        GaussianImageModel {
            dim,
            class_means: vec![FeatureVector::zeros(dim), FeatureVector::new(vec![4.0; dim])],
            class_spread: CovarianceDiag::isotropic(dim, 0.5),
            patch_cov: CovarianceDiag::isotropic(dim, var),
            totality_cov: None,
            seed,
        }
    }

    #[test]
    fn noiseless_model_reproduces_means() {
        let model = GaussianImageModel {
            dim: 3,
            class_means: vec![[1.0, 2.0, 3.0].into(), [-1.0, 0.5, 0.25].into()],
            class_spread: CovarianceDiag::isotropic(3, 0.0),
            patch_cov: CovarianceDiag::isotropic(3, 0.0),
            totality_cov: None,
            seed: 1,
        };
        let s = generate_dataset(&model, 4, 3).unwrap();
        assert_eq!(s.dataset.records.len(), 8);
        for r in &s.dataset.records {
            let mean = &model.class_means[r.class_index as usize];
            assert_eq!(&r.totality, mean);
            assert!(r.patches.iter().all(|p| p == mean));
        }
        s.dataset.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let model = iid(4, 1.0, 11);
        assert_eq!(generate_dataset(&model, 5, 2).unwrap(), generate_dataset(&model, 5, 2).unwrap());
        let other = GaussianImageModel { seed: 12, ..model.clone() };
        assert_ne!(
            generate_dataset(&model, 5, 2).unwrap().dataset,
            generate_dataset(&other, 5, 2).unwrap().dataset
        );
    }

    #[test]
    fn class_patch_mean_matches_class_mean() {
        let model = iid(3, 2.0, 5);
        let n_img = 400;
        let m = 5;
        let s = generate_dataset(&model, n_img, m).unwrap();
        let class0: Vec<&FeatureVector> = s
            .dataset
            .records
            .iter()
            .filter(|r| r.class_index == 0)
            .flat_map(|r| &r.patches)
            .collect();
        let mean = closure_estimate(&class0).unwrap();
        // var of the pooled mean: spread/n_img + patch_var/(n_img*m)
        let sd = (0.5 / n_img as f64 + 2.0 / (n_img * m) as f64).sqrt();
        for v in mean.iter() {
            assert!(v.abs() < 3.0 * sd, "{v} vs 3sd={}", 3.0 * sd);
        }
    }

    #[test]
    fn truth_sidecar_round_trip() {
        let s = generate_dataset(&iid(2, 1.0, 3), 3, 1).unwrap();
        let mut buf = Vec::new();
        write_truth_sidecar(&s.truths, &mut buf).unwrap();
        assert_eq!(read_truth_sidecar(buf.as_slice()).unwrap(), s.truths);
    }

    #[test]
    fn diagnostics_trivial_cases() {
        let truths: Vec<FeatureVector> = vec![[1.0, 2.0].into(), [3.0, -4.0].into(), [0.5, 0.0].into()];
        let d = empirical_error_diagnostics(&truths, &truths).unwrap();
        assert_eq!(d.empirical_bias.as_slice(), &[0.0, 0.0]);
        assert_eq!(d.empirical_cov.0, vec![0.0, 0.0]);
        assert_eq!(d.trace, 0.0);

        let shifted: Vec<FeatureVector> = truths
            .iter()
            .map(|t| FeatureVector::new(t.iter().map(|v| v - 0.75).collect()))
            .collect();
        let d = empirical_error_diagnostics(&shifted, &truths).unwrap();
        assert_eq!(d.empirical_bias.as_slice(), &[0.75, 0.75]);
        assert!(d.trace.abs() < 1e-24);
        assert!((d.trace - d.empirical_cov.trace()).abs() < 1e-9);

        assert!(matches!(
            empirical_error_diagnostics(&truths[..2], &truths),
            Err(GgiuError::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn intra_class_variance_cases() {
        let same = vec![vec![FeatureVector::from([1.0, 1.0]); 3], vec![FeatureVector::from([5.0, 0.0]); 2]];
        assert_eq!(intra_class_variance(&same).unwrap().value, 0.0);

        let two = vec![vec![FeatureVector::from([0.0, 0.0]), FeatureVector::from([1.0, 1.0])]];
        // each axis: sample variance of {0, 1} = 0.5
        assert!((intra_class_variance(&two).unwrap().value - 1.0).abs() < 1e-15);

        let mixed = vec![two[0].clone(), vec![FeatureVector::from([9.0, 9.0])]];
        let v = intra_class_variance(&mixed).unwrap();
        assert_eq!(v.excluded, vec![1]);
        assert!((v.value - 1.0).abs() < 1e-15);

        let lonely = vec![vec![FeatureVector::from([0.0])]];
        assert!(intra_class_variance(&lonely).is_err());
    }

    fn grid101() -> Vec<f64> {
        (0..=100).map(|i| i as f64 / 100.0).collect()
    }

    #[test]
    fn grid_search_m1_is_half() {
        let g = grid_search_lambda(&iid(8, 1.0, 21), 1, &grid101(), 10_000).unwrap();
        assert!((g.best_lambda - 0.5).abs() <= 0.01, "{}", g.best_lambda);
        assert_eq!(g.curve.len(), 101);
    }

    #[test]
    fn grid_search_m5_is_one_sixth() {
        let g = grid_search_lambda(&iid(8, 1.0, 22), 5, &grid101(), 10_000).unwrap();
        assert!((g.best_lambda - 1.0 / 6.0).abs() <= 0.02, "{}", g.best_lambda);
    }

    #[test]
    fn grid_search_trusts_totality_when_patches_are_poor() {
        let model = GaussianImageModel {
            patch_cov: CovarianceDiag::isotropic(8, 400.0),
            totality_cov: Some(CovarianceDiag::isotropic(8, 1.0)),
            ..iid(8, 1.0, 23)
        };
        let g = grid_search_lambda(&model, 1, &grid101(), 10_000).unwrap();
        assert!(g.best_lambda >= 0.98, "{}", g.best_lambda);
    }

    #[test]
    fn grid_search_rejects_bad_arguments() {
        let model = iid(2, 1.0, 1);
        assert!(grid_search_lambda(&model, 1, &grid101(), 999).is_err());
        assert!(grid_search_lambda(&model, 1, &[0.5, 1.2], 1000).is_err());
        assert!(grid_search_lambda(&model, 0, &grid101(), 1000).is_err());
    }

    #[test]
    fn model_validation() {
        let mut m = iid(2, 1.0, 1);
        m.class_means[1] = m.class_means[0].clone();
        assert!(m.validate().is_err());
        let mut m = iid(2, 1.0, 1);
        m.patch_cov = CovarianceDiag(vec![1.0, -0.1]);
        assert!(matches!(m.validate(), Err(GgiuError::InvalidCovariance { index: 1, .. })));
    }

    #[test]
    fn recipe_builds_storable_distinct_means() {
        let r = SynthRecipe {
            dim: 6,
            classes: 4,
            mean_scale: 2.0,
            class_spread: 0.1,
            patch_var: 1.0,
            totality_var: Some(0.5),
            seed: 9,
        };
        let m = r.build().unwrap();
        assert_eq!(m.class_means.len(), 4);
        assert!(m.class_means.iter().all(|v| v.clone().quantized() == *v));
        assert_eq!(m.totality_cov().0, vec![0.5; 6]);
        assert_eq!(m.observer_covariances(4).1 .0, vec![0.25; 6]);
    }
}
