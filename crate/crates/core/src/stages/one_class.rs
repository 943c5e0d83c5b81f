//! One-class centroid scorer: a Gaussian bump around the mean of the positive
//! training vectors, with width equal to their mean distance from it.

use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use crate::error::{Error, Result};

const MIN_SIGMA: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneClassModel {
    pub centroid: Vec<f64>,
    pub sigma: f64,
}

impl OneClassModel {
    pub fn dimension(&self) -> usize {
        self.centroid.len()
    }
}

pub fn train_one_class_centroid(features: &[FeatureVector]) -> Result<OneClassModel> {
    let first = features.first().ok_or(Error::EmptyTrainingSet)?;
    let d = first.dimension();
    if let Some(bad) = features.iter().find(|f| f.dimension() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.dimension(),
        });
    }
    let n = features.len() as f64;
    let mut centroid = vec![0.0; d];
    for f in features {
        for (c, v) in centroid.iter_mut().zip(&f.0) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let sigma = features
        .iter()
        .map(|f| squared_distance(&f.0, &centroid).sqrt())
        .sum::<f64>()
        / n;
    Ok(OneClassModel {
        centroid,
        sigma: if sigma == 0.0 { MIN_SIGMA } else { sigma },
    })
}

/// `exp(-‖x − μ‖² / (2σ²))`, in (0, 1].
pub fn score_one_class(feature: &[f64], model: &OneClassModel) -> Result<f64> {
    if feature.len() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            actual: feature.len(),
        });
    }
    let d2 = squared_distance(feature, &model.centroid);
    Ok((-d2 / (2.0 * model.sigma * model.sigma)).exp())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
