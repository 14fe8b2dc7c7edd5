//! Totality and closure estimates and their Kalman-style fusion.
//!
//! A whole-image embedding `mu_t` and the mean of patch embeddings `mu_c` are
//! treated as two noisy observers of the same latent feature. The fused
//! estimate is `mu_c + lambda * (mu_t - mu_c)` with a diagonal `lambda`. For
//! diagonal observer covariances the error trace is minimised per dimension
//! at `lambda_i = var_c,i / (var_t,i + var_c,i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::FusionConfig;
use crate::error::{GgiuError, Result};
use crate::store::{subsample_patches, FeatureVector, ImageRecord};

/// Diagonal fusion weight: a scalar broadcast over all dimensions or one
/// entry per dimension. Every entry lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaDiag {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl LambdaDiag {
    pub const TOTALITY: LambdaDiag = LambdaDiag::Scalar(1.0);
    pub const CLOSURE: LambdaDiag = LambdaDiag::Scalar(0.0);

    fn entries(&self) -> &[f64] {
        match self {
            LambdaDiag::Scalar(v) => std::slice::from_ref(v),
            LambdaDiag::PerDim(v) => v,
        }
    }

    /// Checks the range and, when `dim` is given, the length.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        for (index, &value) in self.entries().iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(GgiuError::InvalidLambda { index, value });
            }
        }
        if let (LambdaDiag::PerDim(v), Some(d)) = (self, dim) {
            if v.len() != d {
                return Err(GgiuError::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn at(&self, i: usize) -> f64 {
        match self {
            LambdaDiag::Scalar(v) => *v,
            LambdaDiag::PerDim(v) => v[i],
        }
    }

    /// Every entry is exactly 1: the fused estimate is the totality estimate.
    pub fn is_totality(&self) -> bool {
        self.entries().iter().all(|&v| v == 1.0)
    }

    /// Every entry is exactly 0: the fused estimate is the closure estimate.
    pub fn is_closure(&self) -> bool {
        self.entries().iter().all(|&v| v == 0.0)
    }
}

impl From<f64> for LambdaDiag {
    fn from(v: f64) -> Self {
        LambdaDiag::Scalar(v)
    }
}

/// Diagonal of a covariance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovarianceDiag(pub Vec<f64>);

impl CovarianceDiag {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        CovarianceDiag(vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn trace(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CovarianceDiag(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (index, &value) in self.0.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GgiuError::InvalidCovariance { index, value });
            }
        }
        Ok(())
    }
}

/// The whole-image embedding, unchanged.
pub fn totality_estimate(record: &ImageRecord) -> FeatureVector {
    record.totality.clone()
}

/// Mean of the patch embeddings (the Gaussian maximum-likelihood mean).
pub fn closure_estimate<V: AsRef<[f64]>>(patches: &[V]) -> Result<FeatureVector> {
    let first = patches.first().ok_or(GgiuError::Empty("patch list"))?;
    let dim = first.as_ref().len();
    let mut sum = vec![0.0; dim];
    for p in patches {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(GgiuError::DimensionMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    let n = patches.len() as f64;
    Ok(FeatureVector::new(sum.into_iter().map(|s| s / n).collect()))
}

/// `mu_c + lambda * (mu_t - mu_c)` per dimension.
///
/// Entries with `lambda == 1` or `lambda == 0` copy the corresponding input
/// exactly, so the endpoints reproduce either estimate bit for bit.
pub fn fuse(mu_t: &[f64], mu_c: &[f64], lambda: &LambdaDiag) -> Result<FeatureVector> {
    if mu_t.len() != mu_c.len() {
        return Err(GgiuError::DimensionMismatch {
            expected: mu_t.len(),
            found: mu_c.len(),
        });
    }
    lambda.validate(Some(mu_t.len()))?;
    Ok(FeatureVector::new(
        mu_t.iter()
            .zip(mu_c)
            .enumerate()
            .map(|(i, (&t, &c))| match lambda.at(i) {
                1.0 => t,
                0.0 => c,
                l => c + l * (t - c),
            })
            .collect(),
    ))
}

/// Per-dimension minimiser of the fused error trace:
/// `lambda_i = var_c,i / (var_t,i + var_c,i)`, i.e. `(S_t S_c^-1 + I)^-1`.
pub fn optimal_lambda(sigma_t: &CovarianceDiag, sigma_c: &CovarianceDiag) -> Result<LambdaDiag> {
    if sigma_t.dim() != sigma_c.dim() {
        return Err(GgiuError::DimensionMismatch {
            expected: sigma_t.dim(),
            found: sigma_c.dim(),
        });
    }
    sigma_t.validate()?;
    sigma_c.validate()?;
    sigma_t
        .0
        .iter()
        .zip(&sigma_c.0)
        .enumerate()
        .map(|(index, (&t, &c))| {
            if t == 0.0 && c == 0.0 {
                Err(GgiuError::DegenerateObserver { index })
            } else {
                Ok(c / (t + c))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(LambdaDiag::PerDim)
}

/// Feature estimate for one image under `lambda` using `m` sampled patches.
pub fn estimate_with<R: Rng + ?Sized>(
    record: &ImageRecord,
    lambda: &LambdaDiag,
    m: usize,
    rng: &mut R,
) -> Result<FeatureVector> {
    if lambda.is_totality() {
        return Ok(totality_estimate(record));
    }
    let patches = subsample_patches(record, m, rng)?;
    let closure = closure_estimate(&patches)?;
    if lambda.is_closure() {
        lambda.validate(Some(record.totality.dim()))?;
        return Ok(closure);
    }
    fuse(&record.totality, &closure, lambda)
}

pub fn estimate_feature<R: Rng + ?Sized>(
    record: &ImageRecord,
    config: &FusionConfig,
    rng: &mut R,
) -> Result<FeatureVector> {
    estimate_with(record, &config.lambda, config.patches_m, rng)
}
