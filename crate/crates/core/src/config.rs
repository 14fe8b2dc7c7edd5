use serde::{Deserialize, Serialize};

use crate::classifier::DistanceMetric;
use crate::error::{GgiuError, Result};
use crate::estimator::LambdaDiag;

/// How features are estimated and compared in one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: LambdaDiag,
    pub patches_m: usize,
    pub apply_support: bool,
    pub apply_query: bool,
    pub metric: DistanceMetric,
    /// L2-normalise prototypes and query features before measuring distance.
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: LambdaDiag::Scalar(0.5),
            patches_m: 5,
            apply_support: true,
            apply_query: true,
            metric: DistanceMetric::SquaredEuclidean,
            normalize: false,
        }
    }
}

impl FusionConfig {
    /// Plain prototypical evaluation: whole-image embeddings only.
    pub fn baseline() -> Self {
        FusionConfig {
            lambda: LambdaDiag::TOTALITY,
            patches_m: 0,
            apply_support: false,
            apply_query: false,
            ..FusionConfig::default()
        }
    }

    /// Weight used for support prototypes (totality when fusion is off there).
    pub fn support_lambda(&self) -> &LambdaDiag {
        if self.apply_support {
            &self.lambda
        } else {
            &LambdaDiag::TOTALITY
        }
    }

    pub fn query_lambda(&self) -> &LambdaDiag {
        if self.apply_query {
            &self.lambda
        } else {
            &LambdaDiag::TOTALITY
        }
    }

    /// True when some branch actually reads patches.
    pub fn uses_patches(&self) -> bool {
        !self.support_lambda().is_totality() || !self.query_lambda().is_totality()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.lambda.validate(Some(dim)).map_err(|e| match e {
            GgiuError::DimensionMismatch { expected, found } => GgiuError::Config(format!(
                "lambda has {found} entries but features have {expected} dimensions"
            )),
            other => other,
        })?;
        if self.uses_patches() && self.patches_m == 0 {
            return Err(GgiuError::Config(
                "patches_m must be at least 1 when fusion uses lambda < 1".into(),
            ));
        }
        Ok(())
    }
}
