//! The echo plugin, the `ashwin` binary and its commands against a live server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use ashwin_cli::demo;
use ashwin_core::app::{App, AppConfig};
use ashwin_core::model::{JobState, LoopParams, Method, StageKind};
use ashwin_core::plugin::protocol::{CrowdLabel, GetConsensusPayload, StageRequest};
use ashwin_core::plugin::{Reviewer, Verdict};
use ashwin_core::sim::{simulate_crowd, uniform_profiles};
use ashwin_core::model::Label;
use ashwin_core::stages::builtin::{run_from_files, BuiltinStage};
use ashwin_core::storage::{put_document_atomic, write_zip};

const ASHWIN: &str = env!("CARGO_BIN_EXE_ashwin");
const ECHO: &str = env!("CARGO_BIN_EXE_ashwin-echo-plugin");

fn echo_archive(stage: StageKind) -> Vec<u8> {
    let manifest = serde_json::json!({
        "name": format!("echo-{}", serde_json::to_value(stage).unwrap().as_str().unwrap()),
        "version": "0.1.0",
        "stage_kind": stage,
        "entry_command": [ECHO],
    });
    write_zip(&[("manifest.json".into(), serde_json::to_vec(&manifest).unwrap())]).unwrap()
}

const STAGES: [StageKind; 4] =
    [StageKind::FeatureExtraction, StageKind::Classifier, StageKind::TaskSampler, StageKind::Consensus];

fn admin() -> Reviewer {
    Reviewer { id: "root".into(), is_admin: true }
}

#[test]
fn echo_plugin_passes_conformance_for_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let app = App::open(AppConfig::new(tmp.path())).unwrap();
    for stage in STAGES {
        let p = app.add_plugin(&echo_archive(stage), "alice", true).unwrap();
        let report = app.check_plugin(&p.plugin_id, None).unwrap();
        assert!(report.all_passed(), "{stage:?}: {report:?}");
        assert_eq!(report.methods.len(), stage.methods().len());
    }
}

#[test]
fn echo_plugins_drive_a_whole_job() {
    let tmp = tempfile::tempdir().unwrap();
    let app = App::open(AppConfig::new(tmp.path().join("data"))).unwrap();
    let mut spec = demo::stripes_spec(3, "x", "x", LoopParams { batch_size: 4, redundancy_k: 2, ..LoopParams::default() });
    for stage in STAGES {
        let p = app.add_plugin(&echo_archive(stage), "alice", true).unwrap();
        app.approve_plugin(&p.plugin_id, &admin(), Verdict::Approved).unwrap();
        spec.stage_mapping.insert(stage, p.plugin_id);
    }
    let data = demo::stripes_dataset(8, 3);
    let source = tmp.path().join("set.zip");
    std::fs::write(&source, data.zip().unwrap()).unwrap();
    let job = app.create_job(spec, &source, None).unwrap();
    assert_eq!(job.state, JobState::SeedTrained, "{:?}", app.job_events(&job.job_id));

    let batch = app.request_batch(&job.job_id).unwrap();
    assert_eq!(batch.image_ids.len(), 4);
    let report = simulate_crowd(&app, &batch.token, &uniform_profiles(2, 1.0, 5), &data.truth_by_id()).unwrap();
    assert!(report.batch_complete);
    assert_eq!(report.model_version, Some(2));
    assert_eq!(app.job_status(&job.job_id).unwrap().state, JobState::Retrained);
}

#[test]
fn stage_exec_matches_in_process_builtin_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let vote = |img: &str, w: &str, c: &str| CrowdLabel { image_id: img.into(), worker_id: w.into(), label: Label::class(c) };
    let payload = GetConsensusPayload {
        images: vec!["i1".into(), "i2".into()],
        crowd_labels: vec![
            vote("i1", "w1", "cat"),
            vote("i1", "w2", "cat"),
            vote("i1", "w3", "dog"),
            vote("i2", "w1", "dog"),
            vote("i2", "w2", "cat"),
            vote("i2", "w3", "dog"),
        ],
        label_schema: vec!["cat".into(), "dog".into()],
    };
    let request = StageRequest::new(Method::GetConsensus, &payload, tmp.path().join("w")).unwrap();
    let req_path = tmp.path().join("request.json");
    put_document_atomic(&req_path, &request).unwrap();

    for stage in [BuiltinStage::Majority, BuiltinStage::DawidSkene] {
        let inproc = tmp.path().join(format!("{}-in.json", stage.id()));
        let subproc = tmp.path().join(format!("{}-out.json", stage.id()));
        run_from_files(stage, &req_path, &inproc).unwrap();
        let status = Command::new(ASHWIN).args(["stage-exec", stage.id()]).arg(&req_path).arg(&subproc).status().unwrap();
        assert!(status.success());
        assert_eq!(std::fs::read(&inproc).unwrap(), std::fs::read(&subproc).unwrap(), "{}", stage.id());
    }

    // a method from another stage is answered with an error document, not a crash
    let bad = StageRequest::new(Method::GetModel, &serde_json::json!({"out_model_dir": "/tmp/x"}), tmp.path().join("w")).unwrap();
    put_document_atomic(&req_path, &bad).unwrap();
    let out = tmp.path().join("bad.json");
    assert!(Command::new(ASHWIN).args(["stage-exec", "builtin-majority"]).arg(&req_path).arg(&out).status().unwrap().success());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["status"], "error");
    assert!(doc["error_message"].as_str().unwrap().starts_with("MethodStageMismatch"));

    let unknown = Command::new(ASHWIN).args(["stage-exec", "builtin-nope", "a", "b"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

/// A `ashwin serve` child killed on drop.
struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(data: &Path, extra: &[&str]) -> Server {
    let mut child = Command::new(ASHWIN)
        .args(["serve", "--port", "0", "--data-dir"])
        .arg(data)
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    Server { child, url }
}

fn ashwin(server: &Server, args: &[&str]) -> (bool, String, String) {
    let out = Command::new(ASHWIN)
        .arg("--server")
        .arg(&server.url)
        .args(args)
        .env_remove("ASHWIN_ADMIN_TOKEN")
        .output()
        .unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn tsv(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once('\t')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn operator_commands_against_a_served_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let server = serve(&tmp.path().join("data"), &[]);

    // plugin lifecycle
    let plugin_dir = tmp.path().join("echo");
    std::fs::create_dir(&plugin_dir).unwrap();
    std::fs::write(plugin_dir.join("manifest.json"), {
        let m = serde_json::json!({"name": "echo", "version": "1", "stage_kind": "task_sampler", "entry_command": [ECHO]});
        m.to_string()
    })
    .unwrap();
    let (ok, out, err) = ashwin(&server, &["plugin", "add", plugin_dir.to_str().unwrap(), "--owner", "bob"]);
    assert!(ok, "{err}");
    let id = out.split('\t').next().unwrap().to_string();
    assert!(out.contains("private:bob") && out.contains("uploaded"), "{out}");
    let (_, listed, _) = ashwin(&server, &["plugin", "list", "--viewer", "carol"]);
    assert!(!listed.contains(&id));
    let (ok, out, _) = ashwin(&server, &["plugin", "check", &id]);
    assert!(ok && out.contains("getNextSamples\tpass"), "{out}");
    let (ok, out, _) = ashwin(&server, &["plugin", "approve", &id]);
    assert!(ok && out.contains("approved:"), "{out}");
    let (ok, _, err) = ashwin(&server, &["plugin", "approve", "no-such-plugin"]);
    assert!(!ok && err.contains("NotFound (404)"), "{err}");

    // job, batch and simulated crowd by hand
    let data = demo::stripes_dataset(6, 11);
    let dataset = tmp.path().join("dataset");
    std::fs::create_dir(&dataset).unwrap();
    for (name, bytes) in &data.files {
        std::fs::write(dataset.join(name), bytes).unwrap();
    }
    let truth = tmp.path().join("truth.tsv");
    let lines: String = data.truth.iter().map(|(n, c)| format!("{n}\t{c}\n")).collect();
    std::fs::write(&truth, format!("# name\tclass\n{lines}")).unwrap();
    let spec = demo::stripes_spec(2, "builtin-logistic", "builtin-margin", LoopParams { batch_size: 3, ..LoopParams::default() });
    let spec_path = tmp.path().join("job.json");
    std::fs::write(&spec_path, serde_json::to_vec(&spec).unwrap()).unwrap();

    let (ok, out, err) = ashwin(&server, &["job", "create", "--spec", spec_path.to_str().unwrap(), "--dataset", dataset.to_str().unwrap()]);
    assert!(ok, "{err}");
    let status = tsv(&out);
    assert_eq!(status["state"], "SeedTrained");
    let job = status["job_id"].clone();

    let (ok, out, err) = ashwin(&server, &["batch", "open", &job]);
    assert!(ok, "{err}");
    let batch = tsv(&out);
    assert_eq!(batch["images"], "3");
    assert!(batch["url"].starts_with(&server.url));

    let (ok, out, err) = ashwin(
        &server,
        &["crowd", "simulate", "--batch-token", &batch["token"], "--truth", truth.to_str().unwrap(), "--dataset", dataset.to_str().unwrap(), "--accuracy", "1.0", "--workers", "3"],
    );
    assert!(ok, "{err}");
    let report = tsv(&out);
    assert_eq!(report["batch_complete"], "true");
    assert_eq!(report["model_version"], "2");
    assert_eq!(report["accuracy"], "1.0000");

    let (ok, out, _) = ashwin(&server, &["job", "status", &job]);
    assert!(ok);
    assert_eq!(tsv(&out)["state"], "Retrained");
    assert_eq!(out.lines().filter(|l| l.starts_with("version\t")).count(), 2);

    let (ok, _, err) = ashwin(&server, &["job", "status", "j-missing"]);
    assert!(!ok && err.contains("NotFound (404)"), "{err}");
}

#[test]
fn admin_token_guards_job_creation() {
    let tmp = tempfile::tempdir().unwrap();
    let server = serve(&tmp.path().join("data"), &["--admin-token", "s3cret"]);
    let (ok, _, err) = ashwin(&server, &["demo", "loop", "--iterations", "1"]);
    assert!(!ok && err.contains("Forbidden"), "{err}");
    let (ok, out, err) = ashwin(&server, &["--token", "s3cret", "demo", "loop", "--iterations", "1", "--per-class", "12"]);
    assert!(ok, "{err}");
    assert!(out.contains("cycle\t1\tSampleSelected>AnnotationsCollected>ConsensusFormed>Retrained"), "{out}");
}

#[test]
fn missing_server_is_a_clean_error() {
    let out = Command::new(ASHWIN).args(["job", "status", "x"]).env_remove("ASHWIN_SERVER").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--server"));
}
