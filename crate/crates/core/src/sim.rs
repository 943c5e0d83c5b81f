//! Simulated crowd workers for driving batches without humans.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::app::{App, FinishResponse, SubmitResponse};
use crate::coordination::{SessionStart, PRIVATE_PROFILE};
use crate::error::Error;
use crate::model::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorkerProfile {
    pub worker_id: String,
    pub accuracy: f64,
    pub seed: u64,
}

/// `count` workers sharing one accuracy, seeded `seed, seed + 1, …`.
pub fn uniform_profiles(count: usize, accuracy: f64, seed: u64) -> Vec<SimWorkerProfile> {
    (0..count)
        .map(|i| SimWorkerProfile { worker_id: format!("sim-{i}"), accuracy, seed: seed.wrapping_add(i as u64) })
        .collect()
}

/// Worker-facing operations, implemented in-process by [`App`] and over HTTP by the CLI.
pub trait WorkSurface {
    type Error: fmt::Display;
    fn start(&self, token: &str, worker: &str, platform: &str) -> Result<SessionStart, Self::Error>;
    fn submit(&self, token: &str, session_id: &str, image_id: &str, label: &Label) -> Result<SubmitResponse, Self::Error>;
    fn finish(&self, token: &str, session_id: &str) -> Result<FinishResponse, Self::Error>;
    /// Machine-readable code of an error, used to tell a closed batch from a failure.
    fn error_code(error: &Self::Error) -> Option<String>;
}

impl WorkSurface for App {
    type Error = Error;

    fn start(&self, token: &str, worker: &str, platform: &str) -> Result<SessionStart, Error> {
        self.work_next(token, worker, platform)
    }

    fn submit(&self, token: &str, session_id: &str, image_id: &str, label: &Label) -> Result<SubmitResponse, Error> {
        App::submit(self, token, session_id, image_id, label.clone())
    }

    fn finish(&self, token: &str, session_id: &str) -> Result<FinishResponse, Error> {
        App::finish(self, token, session_id)
    }

    fn error_code(error: &Error) -> Option<String> {
        Some(error.code().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAnnotation {
    pub worker_id: String,
    pub image_id: String,
    pub label: String,
    pub truthful: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub annotations: Vec<SimAnnotation>,
    pub survey_codes: BTreeMap<String, String>,
    pub batch_complete: bool,
    pub model_version: Option<u32>,
}

impl SimReport {
    /// One `worker image label truthful` line per annotation, in submission order.
    pub fn log_tsv(&self) -> String {
        self.annotations
            .iter()
            .map(|a| format!("{}\t{}\t{}\t{}\n", a.worker_id, a.image_id, a.label, a.truthful))
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        if self.annotations.is_empty() {
            return 0.0;
        }
        self.annotations.iter().filter(|a| a.truthful).count() as f64 / self.annotations.len() as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError<E: fmt::Display + fmt::Debug> {
    #[error("{0}")]
    Surface(E),
    #[error("no truth for image `{0}`")]
    MissingTruth(String),
    #[error("truth class `{0}` is not in the label schema")]
    TruthOutsideSchema(String),
}

/// The true class with probability `accuracy`, otherwise a uniformly drawn wrong class.
pub fn draw_label<R: Rng>(rng: &mut R, accuracy: f64, truth: &str, schema: &[String]) -> String {
    let wrong: Vec<&String> = schema.iter().filter(|c| c.as_str() != truth).collect();
    if wrong.is_empty() || rng.random::<f64>() < accuracy {
        truth.to_string()
    } else {
        wrong[rng.random_range(0..wrong.len())].clone()
    }
}

fn closed(code: Option<String>) -> bool {
    matches!(code.as_deref(), Some("BatchClosed" | "NothingLeft"))
}

/// Runs each worker through the batch in profile order: open a session, label
/// every offered image, finish. Workers arriving after the batch completed are
/// skipped.
pub fn simulate_crowd<S>(
    surface: &S,
    token: &str,
    profiles: &[SimWorkerProfile],
    truth: &BTreeMap<String, String>,
) -> Result<SimReport, SimError<S::Error>>
where
    S: WorkSurface,
    S::Error: fmt::Debug,
{
    let mut report = SimReport::default();
    for profile in profiles {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        let start = match surface.start(token, &profile.worker_id, PRIVATE_PROFILE) {
            Ok(s) => s,
            Err(e) if closed(S::error_code(&e)) => continue,
            Err(e) => return Err(SimError::Surface(e)),
        };
        let session_id = start.session.session_id;
        let mut item = Some(start.item);
        let mut submitted = false;
        while let Some(current) = item.take() {
            let t = truth
                .get(&current.image_id)
                .ok_or_else(|| SimError::MissingTruth(current.image_id.clone()))?;
            if !current.label_schema.contains(t) {
                return Err(SimError::TruthOutsideSchema(t.clone()));
            }
            let label = draw_label(&mut rng, profile.accuracy, t, &current.label_schema);
            let response = match surface.submit(token, &session_id, &current.image_id, &Label::class(&label)) {
                Ok(r) => r,
                Err(e) if closed(S::error_code(&e)) => break,
                Err(e) => return Err(SimError::Surface(e)),
            };
            submitted = true;
            report.annotations.push(SimAnnotation {
                worker_id: profile.worker_id.clone(),
                image_id: current.image_id.clone(),
                truthful: &label == t,
                label,
            });
            report.batch_complete |= response.outcome.batch_complete;
            if response.model_version.is_some() {
                report.model_version = response.model_version;
            }
            item = response.outcome.next;
        }
        if submitted {
            let done = surface.finish(token, &session_id).map_err(SimError::Surface)?;
            report.survey_codes.insert(profile.worker_id.clone(), done.survey_code);
        }
    }
    Ok(report)
}
