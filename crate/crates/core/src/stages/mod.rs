//! Builtin implementations of the four pipeline stages.

pub mod builtin;
pub mod consensus;
pub mod features;
pub mod logistic;
pub mod one_class;
pub mod sampling;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-class confidences for one image, with the argmax resolved in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub confidences: BTreeMap<String, f64>,
    pub predicted: String,
}

impl Prediction {
    /// `probabilities[i]` belongs to `schema[i]`. Ties go to the earliest class.
    pub fn from_schema(image_id: impl Into<String>, schema: &[String], probabilities: &[f64]) -> Self {
        let mut best = 0;
        for (i, p) in probabilities.iter().enumerate() {
            if *p > probabilities[best] {
                best = i;
            }
        }
        Self {
            image_id: image_id.into(),
            confidences: schema.iter().cloned().zip(probabilities.iter().copied()).collect(),
            predicted: schema.get(best).cloned().unwrap_or_default(),
        }
    }
}
