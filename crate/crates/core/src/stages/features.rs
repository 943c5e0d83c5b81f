use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// 32-bin normalized intensity histogram. Bin `i` covers `[8i, 8i + 8)`.
pub fn extract_histogram_features(image: &GrayImage) -> Result<FeatureVector> {
    let total = image.as_raw().len();
    if total == 0 {
        return Err(Error::EmptyImage);
    }
    let mut counts = [0u64; HISTOGRAM_BINS];
    for &v in image.as_raw() {
        counts[(v / 8) as usize] += 1;
    }
    Ok(FeatureVector(
        counts.iter().map(|&c| c as f64 / total as f64).collect(),
    ))
}
