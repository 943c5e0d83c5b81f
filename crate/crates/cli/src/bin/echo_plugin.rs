//! Reference external plugin. Answers every protocol method with the simplest
//! valid result, so it can be registered under any of the four stages.
//!
//! Usage: `ashwin-echo-plugin <request.json> <response.json>`

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use serde_json::{json, Value};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 3 {
        eprintln!("usage: ashwin-echo-plugin <request.json> <response.json>");
        return ExitCode::from(2);
    }
    let response = match std::fs::read(&args[1])
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice::<Value>(&b).map_err(|e| e.to_string()))
        .and_then(|req| answer(&req))
    {
        Ok(result) => json!({ "status": "ok", "result": result }),
        Err(message) => json!({ "status": "error", "result": null, "error_message": message }),
    };
    if let Err(e) = std::fs::write(&args[2], response.to_string()) {
        eprintln!("cannot write response: {e}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    v[key].as_str().ok_or_else(|| format!("missing string field `{key}`"))
}

fn class_name(label: &Value) -> String {
    label["name"].as_str().map(str::to_string).unwrap_or_else(|| label.to_string())
}

fn answer(req: &Value) -> Result<Value, String> {
    let p = &req["payload"];
    match str_field(req, "method")? {
        "getModel" => {
            let dir = str_field(p, "out_model_dir")?;
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            Ok(json!({ "model_dir": dir }))
        }
        "getFeatureVector" => {
            let images = p["images"].as_array().ok_or("missing `images`")?;
            images
                .iter()
                .map(|i| {
                    let path = i.as_str().ok_or("image path is not a string")?;
                    let len = std::fs::metadata(path).map_err(|e| e.to_string())?.len();
                    Ok(json!([len as f64, 1.0]))
                })
                .collect::<Result<Vec<_>, String>>()
                .map(Value::from)
        }
        "doTrain" => {
            let dir = str_field(p, "out_model_dir")?;
            let labels = p["image_labels"].as_array().ok_or("missing `image_labels`")?;
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for l in labels {
                *counts.entry(class_name(l)).or_default() += 1;
            }
            let mut schema: Vec<String> = p["label_schema"]
                .as_array()
                .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
                .unwrap_or_default();
            if schema.is_empty() {
                schema = counts.keys().cloned().collect();
            }
            let majority = schema
                .iter()
                .max_by_key(|c| (counts.get(*c).copied().unwrap_or(0), std::cmp::Reverse(c.as_str())))
                .ok_or("no labels")?;
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            let model = json!({ "label": majority, "schema": schema });
            std::fs::write(Path::new(dir).join("echo-model.json"), model.to_string()).map_err(|e| e.to_string())?;
            Ok(json!({ "model_dir": dir }))
        }
        "doRun" => {
            let dir = str_field(p, "model_dir")?;
            let text = std::fs::read_to_string(Path::new(dir).join("echo-model.json")).map_err(|e| e.to_string())?;
            let model: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let label = str_field(&model, "label")?;
            let confidences: BTreeMap<String, f64> = model["schema"]
                .as_array()
                .ok_or("model has no schema")?
                .iter()
                .filter_map(Value::as_str)
                .map(|c| (c.to_string(), if c == label { 1.0 } else { 0.0 }))
                .collect();
            Ok(json!({ "label": { "type": "class", "name": label }, "confidences": confidences }))
        }
        "getNextSamples" => {
            let n = p["batch_size"].as_u64().ok_or("missing `batch_size`")? as usize;
            let images = p["images"].as_array().ok_or("missing `images`")?;
            Ok(json!({ "images": images.iter().take(n).collect::<Vec<_>>() }))
        }
        "getConsensus" => {
            let images = p["images"].as_array().ok_or("missing `images`")?;
            let labels = p["crowd_labels"].as_array().ok_or("missing `crowd_labels`")?;
            let mut out = Vec::new();
            for img in images {
                let id = img.as_str().ok_or("image id is not a string")?;
                let votes: Vec<&Value> = labels.iter().filter(|l| l["image_id"] == id).map(|l| &l["label"]).collect();
                let first = votes.first().ok_or_else(|| format!("no labels for `{id}`"))?;
                let agree = votes.iter().filter(|v| **v == *first).count();
                out.push(json!({
                    "image_id": id,
                    "label": first,
                    "confidence": agree as f64 / votes.len() as f64,
                }));
            }
            Ok(json!({ "consensus_labels": out }))
        }
        other => Err(format!("unknown method `{other}`")),
    }
}
