//! Prototype construction and nearest-prototype classification.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GgiuError, Result};
use crate::estimator::{closure_estimate, fuse, LambdaDiag};
use crate::store::{subsample_patches, FeatureVector, ImageRecord};

/// Probability floor applied before taking the log in [`nll`].
pub const NLL_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_index: u32,
    pub vector: FeatureVector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    #[default]
    #[serde(rename = "sqeuclid")]
    SquaredEuclidean,
    /// `1 - cos(a, b)`.
    #[serde(rename = "cosine")]
    Cosine,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::SquaredEuclidean => "sqeuclid",
            DistanceMetric::Cosine => "cosine",
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(GgiuError::DimensionMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        match self {
            DistanceMetric::SquaredEuclidean => {
                Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
            }
            DistanceMetric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    return Err(GgiuError::ZeroVector);
                }
                Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
            }
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = GgiuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqeuclid" => Ok(DistanceMetric::SquaredEuclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(GgiuError::Config(format!(
                "unknown metric {other:?} (expected sqeuclid or cosine)"
            ))),
        }
    }
}

fn one_class(records: &[&ImageRecord]) -> Result<u32> {
    let first = records.first().ok_or(GgiuError::Empty("support set"))?;
    for r in records {
        if r.class_index != first.class_index {
            return Err(GgiuError::ClassMismatch {
                left: first.class_index,
                right: r.class_index,
            });
        }
    }
    Ok(first.class_index)
}

/// Mean of the whole-image embeddings of one class's support images.
pub fn totality_prototype(records: &[&ImageRecord]) -> Result<Prototype> {
    let class_index = one_class(records)?;
    let totals: Vec<&FeatureVector> = records.iter().map(|r| &r.totality).collect();
    Ok(Prototype {
        class_index,
        vector: closure_estimate(&totals)?,
    })
}

/// Pooled mean over `m` sampled patches from each support image.
pub fn closure_prototype<R: Rng + ?Sized>(
    records: &[&ImageRecord],
    m: usize,
    rng: &mut R,
) -> Result<Prototype> {
    let class_index = one_class(records)?;
    let mut pooled = Vec::with_capacity(records.len() * m);
    for r in records {
        pooled.extend(subsample_patches(r, m, rng)?);
    }
    Ok(Prototype {
        class_index,
        vector: closure_estimate(&pooled)?,
    })
}

/// `lambda * pt + (I - lambda) * pc`, through the same arithmetic as [`fuse`].
pub fn fused_prototype(pt: &Prototype, pc: &Prototype, lambda: &LambdaDiag) -> Result<Prototype> {
    if pt.class_index != pc.class_index {
        return Err(GgiuError::ClassMismatch {
            left: pt.class_index,
            right: pc.class_index,
        });
    }
    Ok(Prototype {
        class_index: pt.class_index,
        vector: fuse(&pt.vector, &pc.vector, lambda)?,
    })
}

/// Outcome of classifying one query. `probabilities` and `distances` follow
/// the order of the prototypes passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub predicted: u32,
    pub predicted_position: usize,
    pub probabilities: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Softmax over negated distances, with max subtraction.
pub fn softmax_neg(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = distances.iter().map(|d| (min - d).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

pub fn classify(
    query: &[f64],
    prototypes: &[Prototype],
    metric: DistanceMetric,
) -> Result<Classification> {
    if prototypes.len() < 2 {
        return Err(GgiuError::Config(format!(
            "classification needs at least 2 prototypes, got {}",
            prototypes.len()
        )));
    }
    let distances = prototypes
        .iter()
        .map(|p| metric.distance(query, &p.vector))
        .collect::<Result<Vec<_>>>()?;
    let probabilities = softmax_neg(&distances);

    // Highest probability is smallest distance; ties go to the lowest class.
    let mut best = 0;
    for (i, p) in prototypes.iter().enumerate().skip(1) {
        let (d, bd) = (distances[i], distances[best]);
        if d < bd || (d == bd && p.class_index < prototypes[best].class_index) {
            best = i;
        }
    }
    Ok(Classification {
        predicted: prototypes[best].class_index,
        predicted_position: best,
        probabilities,
        distances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nll {
    pub value: f64,
    /// The true-class probability was below [`NLL_FLOOR`] and got clamped.
    pub clamped: bool,
}

pub fn nll(probabilities: &[f64], true_position: usize) -> Result<Nll> {
    let p = *probabilities.get(true_position).ok_or(GgiuError::LengthMismatch {
        left: probabilities.len(),
        right: true_position + 1,
    })?;
    let clamped = p.is_nan() || p < NLL_FLOOR;
    Ok(Nll {
        value: -p.max(NLL_FLOOR).ln(),
        clamped,
    })
}
