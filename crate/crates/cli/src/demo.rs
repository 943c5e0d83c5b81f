//! End-to-end demos driven through the HTTP API.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ashwin_core::barcode::{background_crops, iou, localize_with, striped_crops, synthesize_barcode_image, Localization, Window};
use ashwin_core::engine::events;
use ashwin_core::imaging::{decode_gray, encode_png};
use ashwin_core::model::{AnnotationType, CrowdMode, JobSpec, JobState, Label, LoopParams, SeedLabel, StageKind};
use ashwin_core::sim::{simulate_crowd, uniform_profiles};
use ashwin_core::storage::{content_id, write_zip};

use crate::client::Client;

/// Named image files plus the true class of each.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub files: Vec<(String, Vec<u8>)>,
    pub truth: BTreeMap<String, String>,
}

impl Dataset {
    pub fn zip(&self) -> Result<Vec<u8>> {
        Ok(write_zip(&self.files)?)
    }

    /// Truth keyed by image id (content hash). Keys that are already ids are kept.
    pub fn truth_by_id(&self) -> BTreeMap<String, String> {
        let mut out = self.truth.clone();
        for (name, bytes) in &self.files {
            if let Some(c) = self.truth.get(name) {
                out.insert(content_id(bytes), c.clone());
            }
        }
        out
    }
}

/// Plain-noise and striped 32×32 images, `per_class` of each.
pub fn stripes_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut files = Vec::new();
    let mut truth = BTreeMap::new();
    for (class, crops) in [
        ("barcode", striped_crops(seed, per_class, 32, 32)),
        ("background", background_crops(seed.wrapping_add(1), per_class, 32, 32)),
    ] {
        for (i, img) in crops.iter().enumerate() {
            let name = format!("{class}{i:03}.png");
            files.push((name.clone(), encode_png(img)));
            truth.insert(name, class.to_string());
        }
    }
    Dataset { files, truth }
}

pub fn builtin_mapping(classifier: &str, sampler: &str, consensus: &str) -> BTreeMap<StageKind, String> {
    [
        (StageKind::FeatureExtraction, "builtin-histogram"),
        (StageKind::Classifier, classifier),
        (StageKind::TaskSampler, sampler),
        (StageKind::Consensus, consensus),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

/// Spec over [`stripes_dataset`] with `seeds_per_class` seed labels per class.
pub fn stripes_spec(seeds_per_class: usize, classifier: &str, sampler: &str, params: LoopParams) -> JobSpec {
    let seed_labels = (0..seeds_per_class)
        .flat_map(|i| {
            ["barcode", "background"]
                .map(|c| SeedLabel { image_id: format!("{c}{i:03}.png"), label: Label::class(c) })
        })
        .collect();
    JobSpec {
        job_id: String::new(),
        dataset_ref: String::new(),
        annotation_type: AnnotationType::Classification,
        label_schema: vec!["barcode".into(), "background".into()],
        stage_mapping: builtin_mapping(classifier, sampler, "builtin-majority"),
        crowd_mode: CrowdMode::Private,
        seed_labels,
        loop_params: params,
    }
}

/// One-class barcode job over [`stripes_dataset`]: `positives` striped seed crops
/// plus five background seeds, every seed used for training.
pub fn barcode_spec(positives: usize) -> JobSpec {
    let mut spec = stripes_spec(0, "builtin-one-class", "builtin-random", LoopParams { holdout_fraction: 0.0, ..LoopParams::default() });
    spec.seed_labels = (0..positives)
        .map(|i| ("barcode", i))
        .chain((0..5).map(|i| ("background", i)))
        .map(|(c, i)| SeedLabel { image_id: format!("{c}{i:03}.png"), label: Label::class(c) })
        .collect();
    spec
}

#[derive(Debug, Clone)]
pub struct CrowdConfig {
    pub workers: usize,
    pub accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: usize,
    pub model_version: u32,
    pub labeled: usize,
    pub holdout_accuracy: Option<f64>,
    pub state: String,
}

#[derive(Debug, Clone)]
pub struct LoopSummary {
    pub job_id: String,
    pub rows: Vec<IterationRow>,
    pub cycles: usize,
}

impl LoopSummary {
    pub fn tsv(&self) -> String {
        let mut out = String::from("iteration\tmodel_version\tlabeled\tholdout_accuracy\tstate\n");
        for r in &self.rows {
            let acc = r.holdout_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.iteration, r.model_version, r.labeled, acc, r.state);
        }
        for i in 1..=self.cycles {
            let _ = writeln!(out, "cycle\t{i}\t{}", events::CYCLE.join(">"));
        }
        let _ = writeln!(out, "job\t{}", self.job_id);
        out
    }
}

fn event_tail(client: &Client, job: &str) -> String {
    match client.events(job) {
        Ok(ev) => ev
            .iter()
            .rev()
            .take(5)
            .rev()
            .map(|e| format!("  {} {} {}", e.ts.to_rfc3339(), e.event, e.detail))
            .collect::<Vec<_>>()
            .join("\n"),
        Err(e) => format!("  (event log unavailable: {e})"),
    }
}

fn row(client: &Client, job: &str, iteration: usize) -> Result<IterationRow> {
    let s = client.job_status(job)?;
    if let JobState::Failed { cause } = &s.state {
        bail!("job {job} failed: {cause}\nlast events:\n{}", event_tail(client, job));
    }
    let last = s.versions.last().context("job has no model version")?;
    Ok(IterationRow {
        iteration,
        model_version: last.version,
        labeled: s.training_set_size,
        holdout_accuracy: last.holdout_accuracy,
        state: s.state.to_string(),
    })
}

/// Creates the job, then runs `iterations` rounds of batch → simulated crowd →
/// retrain, and checks the event log holds one full cycle per round.
pub fn run_loop(
    client: &Client,
    spec: &JobSpec,
    dataset: &Dataset,
    iterations: usize,
    crowd: &CrowdConfig,
) -> Result<LoopSummary> {
    let created = client.create_job(spec, dataset.zip()?, None).context("creating job")?;
    let job = created.job_id.clone();
    let truth = dataset.truth_by_id();
    let mut rows = vec![row(client, &job, 0)?];
    for it in 1..=iterations {
        let batch = client.request_batch(&job).with_context(|| format!("iteration {it}: opening batch"))?;
        let profiles = uniform_profiles(crowd.workers, crowd.accuracy, crowd.seed.wrapping_add(1_000 * it as u64));
        let report = simulate_crowd(client, &batch.token, &profiles, &truth)
            .map_err(|e| anyhow::anyhow!("iteration {it}: {e}\nlast events:\n{}", event_tail(client, &job)))?;
        if !report.batch_complete {
            bail!(
                "iteration {it}: batch {} did not complete with {} workers (k = {})",
                batch.batch_id,
                crowd.workers,
                batch.redundancy_k
            );
        }
        rows.push(row(client, &job, it)?);
    }
    let names: Vec<String> = client
        .events(&job)?
        .into_iter()
        .map(|e| e.event)
        .filter(|e| events::CYCLE.contains(&e.as_str()))
        .collect();
    let expected: Vec<&str> = (0..iterations).flat_map(|_| events::CYCLE).collect();
    if names != expected {
        bail!("event log cycle order mismatch: {names:?}\nlast events:\n{}", event_tail(client, &job));
    }
    Ok(LoopSummary { job_id: job, rows, cycles: iterations })
}

/// Scores every window of `image` through the classify endpoint, using the
/// confidence of `positive` as the window score.
pub fn locate_via_api(
    client: &Client,
    job: &str,
    version: u32,
    image: &image::GrayImage,
    window: u32,
    stride: u32,
    positive: &str,
) -> Result<Localization> {
    let mut failure = None;
    let loc = localize_with(image, window, window, stride, |crop| {
        match client.classify_image(job, version, &encode_png(crop)) {
            Ok(r) => Ok(r.confidences.get(positive).copied().unwrap_or(0.0)),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(ashwin_core::Error::PluginError(msg))
            }
        }
    });
    match (loc, failure) {
        (_, Some(e)) => Err(e.into()),
        (r, None) => Ok(r?),
    }
}

pub fn load_image(path: &Path) -> Result<image::GrayImage> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_gray(&bytes)?.1)
}

#[derive(Debug, Clone)]
pub struct BarcodeRow {
    pub seed: u64,
    pub best: Window,
    pub truth: Window,
    pub iou: f64,
}

/// Localizes the synthetic fixtures `0..images` with a served model.
pub fn barcode_fixture_run(
    client: &Client,
    job: &str,
    version: u32,
    images: u64,
    window: u32,
    stride: u32,
) -> Result<Vec<BarcodeRow>> {
    (0..images)
        .map(|seed| {
            let s = synthesize_barcode_image(seed, 128, 128, 32, 32)?;
            let loc = locate_via_api(client, job, version, &s.image, window, stride, "barcode")?;
            Ok(BarcodeRow { seed, best: loc.best, truth: s.truth, iou: iou(&loc.best, &s.truth) })
        })
        .collect()
}
