use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::protocol::*;
use super::{PluginDescriptor, PluginHost};
use crate::error::{Error, Result};
use crate::model::{Label, Method};
use crate::stages::features::extract_histogram_features;
use crate::storage::{ensure_dir, put_bytes_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCheck {
    pub method: Method,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub plugin_id: String,
    pub methods: Vec<MethodCheck>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.methods.is_empty() && self.methods.iter().all(|m| m.passed)
    }

    pub fn check(&self, method: Method) -> Option<&MethodCheck> {
        self.methods.iter().find(|m| m.method == method)
    }
}

const CLASSES: [&str; 2] = ["a", "b"];

struct Fixture {
    dir: PathBuf,
    images: Vec<PathBuf>,
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

impl Fixture {
    fn create(dir: PathBuf) -> Result<Self> {
        ensure_dir(&dir)?;
        let mut images = Vec::new();
        let mut features = Vec::new();
        for (i, level) in [20u8, 230, 120].into_iter().enumerate() {
            let img = GrayImage::from_fn(8, 8, |x, y| Luma([level.saturating_add(((x + y) % 3) as u8)]));
            let path = dir.join(format!("fixture{i}.png"));
            put_bytes_atomic(&path, &crate::imaging::encode_png(&img))?;
            features.push(extract_histogram_features(&img)?.0);
            images.push(path);
        }
        Ok(Self {
            dir,
            images,
            ids: (0..3).map(|i| format!("fixture{i}")).collect(),
            features,
            labels: vec![Label::class("a"), Label::class("b"), Label::class("a")],
        })
    }
}

/// Exercises every method the plugin's stage answers on a three-image, two-class
/// fixture and checks the shape of each response. Invocation errors are recorded
/// per method instead of aborting the check.
pub fn conformance_check(
    host: &PluginHost,
    plugin: &PluginDescriptor,
    timeout: Option<Duration>,
) -> Result<ConformanceReport> {
    let fixture = Fixture::create(host.new_workdir())?;
    let mut methods = Vec::new();
    for &method in plugin.stage_kind.stage().methods() {
        let outcome = check_method(host, plugin, method, &fixture, timeout);
        methods.push(match outcome {
            Ok(()) => MethodCheck {
                method,
                passed: true,
                detail: "ok".into(),
            },
            Err(e) => MethodCheck {
                method,
                passed: false,
                detail: format!("{}: {e}", e.code()),
            },
        });
    }
    let _ = std::fs::remove_dir_all(&fixture.dir);
    Ok(ConformanceReport {
        plugin_id: plugin.plugin_id.clone(),
        methods,
    })
}

fn shape(msg: impl Into<String>) -> Error {
    Error::MalformedResponse(format!("shape: {}", msg.into()))
}

fn check_method(
    host: &PluginHost,
    plugin: &PluginDescriptor,
    method: Method,
    fx: &Fixture,
    timeout: Option<Duration>,
) -> Result<()> {
    let schema: Vec<String> = CLASSES.iter().map(|c| c.to_string()).collect();
    match method {
        Method::GetModel => {
            let out = fx.dir.join("extractor-model");
            let r: GetModelResult = host.call(plugin, method, &GetModelPayload { out_model_dir: out }, timeout)?;
            if let Some(dir) = r.model_dir {
                if !dir.exists() {
                    return Err(shape(format!("model_dir {} does not exist", dir.display())));
                }
            }
            Ok(())
        }
        Method::GetFeatureVector => {
            let payload = GetFeatureVectorPayload {
                images: fx.images.clone(),
                model_dir: None,
            };
            let vectors: GetFeatureVectorResult = host.call(plugin, method, &payload, timeout)?;
            if vectors.len() != fx.images.len() {
                return Err(shape(format!("{} vectors for {} images", vectors.len(), fx.images.len())));
            }
            let dim = vectors[0].len();
            if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
                return Err(shape("feature vectors have unequal or zero length"));
            }
            if vectors.iter().flatten().any(|x| !x.is_finite()) {
                return Err(shape("non-finite feature value"));
            }
            Ok(())
        }
        Method::DoTrain => {
            train(host, plugin, fx, &schema, timeout)?;
            Ok(())
        }
        Method::DoRun => {
            let model_dir = train(host, plugin, fx, &schema, timeout).unwrap_or_else(|_| fx.dir.join("model-run"));
            let payload = DoRunPayload {
                image: fx.images[1].clone(),
                feature_vector: fx.features[1].clone(),
                model_dir,
            };
            let r: DoRunResult = host.call(plugin, method, &payload, timeout)?;
            match &r.label {
                Label::ClassLabel { name } if schema.contains(name) => {}
                other => return Err(shape(format!("label {other:?} is not a schema class"))),
            }
            if let Some(k) = r.confidences.keys().find(|k| !schema.contains(k)) {
                return Err(shape(format!("confidence for unknown class `{k}`")));
            }
            let sum: f64 = r.confidences.values().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(shape(format!("confidences sum to {sum}")));
            }
            Ok(())
        }
        Method::GetNextSamples => {
            let payload = GetNextSamplesPayload {
                images: fx.ids.clone(),
                predictions: fx
                    .ids
                    .iter()
                    .zip([0.9, 0.55, 0.7])
                    .map(|(id, p)| ImageConfidences {
                        image_id: id.clone(),
                        confidences: [("a".to_string(), p), ("b".to_string(), 1.0 - p)].into_iter().collect(),
                    })
                    .collect(),
                batch_size: 2,
                seed: Some(7),
            };
            let r: GetNextSamplesResult = host.call(plugin, method, &payload, timeout)?;
            let distinct: BTreeSet<&String> = r.images.iter().collect();
            if r.images.len() != 2 || distinct.len() != 2 {
                return Err(shape(format!("expected 2 distinct ids, got {:?}", r.images)));
            }
            if let Some(bad) = r.images.iter().find(|i| !fx.ids.contains(i)) {
                return Err(shape(format!("id `{bad}` is not in the pool")));
            }
            Ok(())
        }
        Method::GetConsensus => {
            let votes = [["a", "a", "b"], ["b", "b", "b"], ["a", "b", "b"]];
            let crowd_labels = fx
                .ids
                .iter()
                .zip(votes)
                .flat_map(|(id, v)| {
                    v.into_iter().enumerate().map(move |(w, c)| CrowdLabel {
                        image_id: id.clone(),
                        worker_id: format!("w{w}"),
                        label: Label::class(c),
                    })
                })
                .collect();
            let payload = GetConsensusPayload {
                images: fx.ids.clone(),
                crowd_labels,
                label_schema: schema.clone(),
            };
            let r: GetConsensusResult = host.call(plugin, method, &payload, timeout)?;
            let ids: BTreeSet<&String> = r.consensus_labels.iter().map(|c| &c.image_id).collect();
            if r.consensus_labels.len() != fx.ids.len() || ids.len() != fx.ids.len() {
                return Err(shape("expected exactly one consensus label per image"));
            }
            for c in &r.consensus_labels {
                if !fx.ids.contains(&c.image_id) {
                    return Err(shape(format!("consensus for unknown image `{}`", c.image_id)));
                }
                if !(0.0..=1.0).contains(&c.confidence) {
                    return Err(shape(format!("confidence {} outside [0,1]", c.confidence)));
                }
            }
            Ok(())
        }
    }
}

fn train(
    host: &PluginHost,
    plugin: &PluginDescriptor,
    fx: &Fixture,
    schema: &[String],
    timeout: Option<Duration>,
) -> Result<PathBuf> {
    let out: &Path = &fx.dir.join("classifier-model");
    let payload = DoTrainPayload {
        images: fx.images.clone(),
        image_labels: fx.labels.clone(),
        feature_vectors: fx.features.clone(),
        out_model_dir: out.to_path_buf(),
        label_schema: schema.to_vec(),
    };
    let r: DoTrainResult = host.call(plugin, Method::DoTrain, &payload, timeout)?;
    Ok(r.model_dir)
}
