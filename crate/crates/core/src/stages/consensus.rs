//! Crowd label aggregation: majority vote and Dawid–Skene EM.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMethod {
    Majority,
    DawidSkene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub image_id: String,
    pub label: String,
    pub confidence: f64,
    pub tie: bool,
    pub method: ConsensusMethod,
}

/// Modal label per image; confidence is the modal share. Ties go to the
/// lexicographically smallest label and are flagged.
pub fn consensus_majority(crowd_labels: &[(String, Vec<String>)]) -> Result<Vec<ConsensusResult>> {
    crowd_labels
        .iter()
        .map(|(image_id, labels)| {
            if labels.is_empty() {
                return Err(Error::MissingAnnotations(image_id.clone()));
            }
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for l in labels {
                *counts.entry(l.as_str()).or_default() += 1;
            }
            // BTreeMap iterates in ascending key order, so the first maximum wins ties.
            let mut best: Option<(&str, usize)> = None;
            for (&label, &n) in &counts {
                if best.is_none_or(|(_, m)| n > m) {
                    best = Some((label, n));
                }
            }
            let (label, n) = best.expect("non-empty");
            let tie = counts.values().filter(|&&c| c == n).count() > 1;
            Ok(ConsensusResult {
                image_id: image_id.clone(),
                label: label.to_string(),
                confidence: n as f64 / labels.len() as f64,
                tie,
                method: ConsensusMethod::Majority,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: String,
    pub worker_id: String,
    pub class: String,
}

impl Observation {
    pub fn new(image_id: impl Into<String>, worker_id: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            worker_id: worker_id.into(),
            class: class.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DawidSkeneParams {
    pub max_iters: usize,
    pub tol: f64,
    /// Additive smoothing applied to priors and confusion rows.
    pub smoothing: f64,
}

impl Default for DawidSkeneParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            smoothing: 1.0,
        }
    }
}

/// `matrix[j][l]` = probability that the worker reports class `l` when the truth is `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfusion {
    pub worker_id: String,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DawidSkeneOutput {
    /// One result per image, sorted by image id.
    pub results: Vec<ConsensusResult>,
    /// Class order used by `priors`, `posteriors` and the confusion matrices.
    pub classes: Vec<String>,
    pub priors: Vec<f64>,
    pub confusions: Vec<WorkerConfusion>,
    /// `posteriors[i][j]`, aligned with `results`.
    pub posteriors: Vec<Vec<f64>>,
    /// Objective after each M-step.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

/// State handed to an observer after every M-step.
#[derive(Debug)]
pub struct EmIteration<'a> {
    pub iteration: usize,
    /// Observed-data log-likelihood plus the log-density of the smoothing prior;
    /// this is the quantity EM with additive smoothing never decreases.
    pub log_likelihood: f64,
    pub priors: &'a [f64],
    /// `confusions[w][j][l]` in worker-id order.
    pub confusions: &'a [Vec<Vec<f64>>],
}

/// Observations indexed densely: `per_image[i]` lists (worker, class) index pairs.
#[derive(Debug)]
pub struct IndexedObservations {
    pub images: Vec<String>,
    pub workers: Vec<String>,
    pub classes: Vec<String>,
    pub per_image: Vec<Vec<(usize, usize)>>,
}

impl IndexedObservations {
    pub fn build(observations: &[Observation], schema: &[String]) -> Result<Self> {
        let classes: Vec<String> = if schema.is_empty() {
            observations
                .iter()
                .map(|o| o.class.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            schema.to_vec()
        };
        let images: Vec<String> = observations
            .iter()
            .map(|o| o.image_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let workers: Vec<String> = observations
            .iter()
            .map(|o| o.worker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut per_image = vec![Vec::new(); images.len()];
        for o in observations {
            let i = images.binary_search(&o.image_id).expect("collected above");
            let w = workers.binary_search(&o.worker_id).expect("collected above");
            let l = classes
                .iter()
                .position(|c| *c == o.class)
                .ok_or_else(|| Error::UnknownClass(o.class.clone()))?;
            per_image[i].push((w, l));
        }
        Ok(Self {
            images,
            workers,
            classes,
            per_image,
        })
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-image unnormalized log joint `log p_j + Σ log π_w[j][l]`.
fn log_joint(data: &IndexedObservations, priors: &[f64], confusions: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    data.per_image
        .iter()
        .map(|obs| {
            (0..priors.len())
                .map(|j| {
                    priors[j].ln()
                        + obs
                            .iter()
                            .map(|&(w, l)| confusions[w][j][l].ln())
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Observed-data log-likelihood `Σ_i log Σ_j p_j Π π_w[j][l]`.
pub fn observed_log_likelihood(data: &IndexedObservations, priors: &[f64], confusions: &[Vec<Vec<f64>>]) -> f64 {
    log_joint(data, priors, confusions)
        .iter()
        .map(|row| log_sum_exp(row))
        .sum()
}

fn objective(data: &IndexedObservations, priors: &[f64], confusions: &[Vec<Vec<f64>>], alpha: f64) -> f64 {
    let prior_term: f64 = alpha
        * (priors.iter().map(|p| p.ln()).sum::<f64>()
            + confusions
                .iter()
                .flatten()
                .flatten()
                .map(|p| p.ln())
                .sum::<f64>());
    observed_log_likelihood(data, priors, confusions) + prior_term
}

fn m_step(data: &IndexedObservations, t: &[Vec<f64>], alpha: f64) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let c = data.classes.len();
    let n = data.images.len() as f64;
    let mut priors = vec![alpha; c];
    for row in t {
        for (p, v) in priors.iter_mut().zip(row) {
            *p += v;
        }
    }
    let denom = n + c as f64 * alpha;
    priors.iter_mut().for_each(|p| *p /= denom);

    let mut confusions = vec![vec![vec![alpha; c]; c]; data.workers.len()];
    for (i, obs) in data.per_image.iter().enumerate() {
        for &(w, l) in obs {
            for j in 0..c {
                confusions[w][j][l] += t[i][j];
            }
        }
    }
    for worker in confusions.iter_mut() {
        for row in worker.iter_mut() {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    (priors, confusions)
}

fn e_step(data: &IndexedObservations, priors: &[f64], confusions: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    log_joint(data, priors, confusions)
        .into_iter()
        .map(|row| {
            let z = log_sum_exp(&row);
            row.into_iter().map(|v| (v - z).exp()).collect()
        })
        .collect()
}

pub fn consensus_dawid_skene(
    observations: &[Observation],
    schema: &[String],
    params: &DawidSkeneParams,
) -> Result<DawidSkeneOutput> {
    consensus_dawid_skene_observed(observations, schema, params, |_| {})
}

/// Batch Dawid–Skene EM, initialized from majority-vote soft counts. `observer`
/// sees the parameters after every M-step.
pub fn consensus_dawid_skene_observed(
    observations: &[Observation],
    schema: &[String],
    params: &DawidSkeneParams,
    mut observer: impl FnMut(&EmIteration<'_>),
) -> Result<DawidSkeneOutput> {
    if params.smoothing.is_nan() || params.smoothing <= 0.0 {
        return Err(Error::InvalidArgument("smoothing must be positive".into()));
    }
    if observations.is_empty() {
        return Err(Error::MissingAnnotations("<all>".into()));
    }
    let data = IndexedObservations::build(observations, schema)?;
    let c = data.classes.len();

    let mut t: Vec<Vec<f64>> = data
        .per_image
        .iter()
        .map(|obs| {
            let mut row = vec![0.0; c];
            for &(_, l) in obs {
                row[l] += 1.0;
            }
            let n = obs.len() as f64;
            row.iter_mut().for_each(|v| *v /= n);
            row
        })
        .collect();

    let mut log_likelihoods = Vec::new();
    let mut priors = Vec::new();
    let mut confusions = Vec::new();
    let mut iterations = 0;
    for it in 1..=params.max_iters.max(1) {
        iterations = it;
        (priors, confusions) = m_step(&data, &t, params.smoothing);
        let ll = objective(&data, &priors, &confusions, params.smoothing);
        log_likelihoods.push(ll);
        observer(&EmIteration {
            iteration: it,
            log_likelihood: ll,
            priors: &priors,
            confusions: &confusions,
        });
        let next = e_step(&data, &priors, &confusions);
        let delta = next
            .iter()
            .flatten()
            .zip(t.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        t = next;
        if delta < params.tol {
            break;
        }
    }

    let results = data
        .images
        .iter()
        .zip(&t)
        .map(|(image_id, row)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..c).filter(|&j| row[j] == max).collect();
            let best = *winners
                .iter()
                .min_by(|&&a, &&b| data.classes[a].cmp(&data.classes[b]))
                .expect("at least one class");
            ConsensusResult {
                image_id: image_id.clone(),
                label: data.classes[best].clone(),
                confidence: row[best],
                tie: winners.len() > 1,
                method: ConsensusMethod::DawidSkene,
            }
        })
        .collect();

    Ok(DawidSkeneOutput {
        results,
        priors,
        confusions: data
            .workers
            .iter()
            .cloned()
            .zip(confusions)
            .map(|(worker_id, matrix)| WorkerConfusion { worker_id, matrix })
            .collect(),
        classes: data.classes,
        posteriors: t,
        log_likelihoods,
        iterations,
    })
}
