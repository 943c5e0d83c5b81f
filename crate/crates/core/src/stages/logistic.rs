//! Multinomial logistic regression fit by full-batch gradient descent.

use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::Prediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2: 1e-4,
        }
    }
}

/// `weights[c]` holds `dimension` coefficients followed by the bias of class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub schema: Vec<String>,
    pub dimension: usize,
    pub weights: Vec<Vec<f64>>,
}

impl LogisticModel {
    pub fn zeros(schema: &[String], dimension: usize) -> Self {
        Self {
            schema: schema.to_vec(),
            dimension,
            weights: vec![vec![0.0; dimension + 1]; schema.len()],
        }
    }

    /// Softmax class probabilities in schema order.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: x.len(),
            });
        }
        Ok(softmax(&self.weights, x))
    }
}

fn scores(weights: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    weights
        .iter()
        .map(|w| w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d])
        .collect()
}

fn softmax(weights: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let s = scores(weights, x);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Mean cross-entropy plus `l2 / 2 * ||W||²` (bias excluded), and its gradient.
pub fn loss_and_gradient(weights: &[Vec<f64>], xs: &[&[f64]], ys: &[usize], l2: f64) -> (f64, Vec<Vec<f64>>) {
    let n = xs.len() as f64;
    let d = weights.first().map_or(0, |w| w.len() - 1);
    let mut grad = vec![vec![0.0; d + 1]; weights.len()];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let p = softmax(weights, x);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, g) in grad.iter_mut().enumerate() {
            let err = p[c] - if c == y { 1.0 } else { 0.0 };
            for (gj, xj) in g[..d].iter_mut().zip(x.iter()) {
                *gj += err * xj;
            }
            g[d] += err;
        }
    }
    loss /= n;
    for (g, w) in grad.iter_mut().zip(weights) {
        for j in 0..=d {
            g[j] /= n;
            if j < d {
                g[j] += l2 * w[j];
                loss += 0.5 * l2 * w[j] * w[j];
            }
        }
    }
    (loss, grad)
}

/// Fits a model from zero weights. Examples are put in a canonical order first so
/// the result does not depend on the order they were supplied in.
pub fn train_logistic(
    features: &[FeatureVector],
    labels: &[String],
    schema: &[String],
    params: &LogisticParams,
) -> Result<LogisticModel> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dimension = features[0].dimension();
    if let Some(bad) = features.iter().find(|f| f.dimension() != dimension) {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            actual: bad.dimension(),
        });
    }
    let ys: Vec<usize> = labels
        .iter()
        .map(|l| {
            schema
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::UnknownLabel(l.clone()))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        ys[a].cmp(&ys[b]).then_with(|| {
            features[a]
                .0
                .iter()
                .zip(&features[b].0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let xs: Vec<&[f64]> = order.iter().map(|&i| features[i].as_slice()).collect();
    let ys: Vec<usize> = order.iter().map(|&i| ys[i]).collect();

    let mut model = LogisticModel::zeros(schema, dimension);
    for _ in 0..params.epochs {
        let (_, grad) = loss_and_gradient(&model.weights, &xs, &ys, params.l2);
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            for (wj, gj) in w.iter_mut().zip(g) {
                *wj -= params.learning_rate * gj;
            }
        }
    }
    Ok(model)
}

pub fn predict_logistic(image_id: &str, feature: &[f64], model: &LogisticModel) -> Result<Prediction> {
    let p = model.probabilities(feature)?;
    Ok(Prediction::from_schema(image_id, &model.schema, &p))
}
