use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use errslice_engine::planted;
use errslice_service::{schema, Service, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn schemas() -> BTreeMap<&'static str, Value> {
    schema::all().into_iter().collect()
}

fn check(name: &str, doc: &Value) {
    let schema = &schemas()[name];
    let validator = jsonschema::validator_for(schema).unwrap_or_else(|e| panic!("{name}: {e}"));
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}\n{doc}");
}

/// `ERRSLICE_BLESS=1` rewrites the checked-in files.
#[test]
fn checked_in_schemas_match_the_types() {
    let dir = root().join("schemas");
    let bless = std::env::var_os("ERRSLICE_BLESS").is_some();
    let mut stale = Vec::new();
    for (name, schema) in schemas() {
        let text = errslice_engine::store::to_json_pretty(&schema);
        let path = dir.join(name);
        if bless {
            std::fs::write(&path, &text).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            stale.push(name);
        }
    }
    assert!(stale.is_empty(), "stale schemas {stale:?}; rerun with ERRSLICE_BLESS=1");
    let mut on_disk: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    on_disk.sort();
    let expected: Vec<String> = schemas().keys().map(|k| k.to_string()).collect();
    assert_eq!(on_disk, expected);
}

#[test]
fn planted_manifest_matches_its_schema() {
    let text = std::fs::read_to_string(root().join("fixtures/planted/manifest.json")).unwrap();
    check("manifest.schema.json", &serde_json::from_str(&text).unwrap());
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&Value>) -> Value {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.body(Body::from(serde_json::to_vec(b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
}

async fn finished(app: &Router, id: &str) -> Value {
    for _ in 0..2000 {
        let t = call(app, "GET", &format!("/tasks/{id}"), None).await;
        if matches!(t["status"].as_str(), Some("complete" | "partial" | "failed")) {
            return t;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("task {id} did not finish");
}

async fn submit(app: &Router, body: Value) -> String {
    check("task-submit.schema.json", &body);
    let task = call(app, "POST", "/tasks", Some(&body)).await;
    check("task.schema.json", &task);
    task["task_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn service_documents_match_their_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = root().join("fixtures/planted");
    let config = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        store: dir.path().to_path_buf(),
        workers: 1,
        pipeline: fixtures.join("pipeline.toml"),
        mock: true,
        datasets: [("planted".to_string(), fixtures.join("manifest.json"))].into(),
    };
    let app = Service::open(&config).unwrap().router();

    let chat = json!({"schema_version": 1, "messages": [{"role": "user", "content": "Detect bicycles."}]});
    check("chat-request.schema.json", &chat);
    check("chat-reply.schema.json", &call(&app, "POST", "/chat", Some(&chat)).await);

    let gen = submit(&app, json!({"schema_version": 1, "kind": "hypothesis_generation", "payload": {"dataset_id": "planted"}})).await;
    finished(&app, &gen).await;
    let doc = call(&app, "GET", &format!("/tasks/{gen}/results"), None).await;
    check("hypotheses.schema.json", &doc);
    let ids: Vec<Value> = doc["hypotheses"].as_array().unwrap().iter().map(|h| h["hypothesis_id"].clone()).collect();

    let run = submit(
        &app,
        json!({"schema_version": 1, "kind": "verification", "idempotency_key": "v1",
            "payload": {"dataset_id": "planted", "hypothesis_ids": ids, "k": 10, "method": "slope_trend"}}),
    )
    .await;
    check("task.schema.json", &finished(&app, &run).await);
    let run_doc = call(&app, "GET", &format!("/tasks/{run}/results"), None).await;
    check("run.schema.json", &run_doc);
    let run_doc: errslice_core::documents::RunDocument = serde_json::from_value(run_doc).unwrap();
    for result in &run_doc.results {
        for metric in [errslice_core::trend::TrendMetric::ErrorRate, errslice_core::trend::TrendMetric::Accuracy] {
            let series = errslice_core::trend::trend_series(&result.report, metric);
            check("trend-series.schema.json", &serde_json::to_value(series).unwrap());
        }
    }
    let h = errslice_engine::generation::hypothesis_id(planted::PLANTED_QUERY);
    for metric in ["error_rate", "accuracy"] {
        let trend = call(&app, "GET", &format!("/tasks/{run}/trend?hypothesis={h}&metric={metric}"), None).await;
        check("trend.schema.json", &trend);
    }

    let eval = submit(&app, json!({"schema_version": 1, "kind": "evaluation", "payload": {"run_task_id": run, "judge": true}})).await;
    finished(&app, &eval).await;
    let evaluation = call(&app, "GET", &format!("/tasks/{eval}/results"), None).await;
    check("evaluation.schema.json", &evaluation);
    let report: errslice_core::EvaluationReport = serde_json::from_value(evaluation["report"].clone()).unwrap();
    check(
        "category-chart.schema.json",
        &serde_json::to_value(errslice_engine::evaluate::category_chart(&report)).unwrap(),
    );

    check("task-list.schema.json", &call(&app, "GET", "/tasks", None).await);
    check("gallery.schema.json", &call(&app, "GET", "/datasets/planted/gallery?page=3", None).await);
    check("error.schema.json", &call(&app, "GET", "/tasks/t-999999", None).await);
    check(
        "error.schema.json",
        &call(&app, "POST", "/tasks", Some(&json!({"schema_version": 1, "kind": "verification", "payload": {}}))).await,
    );
    for entry in std::fs::read_dir(dir.path().join("payloads")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        check("task-payload.schema.json", &serde_json::from_str(&text).unwrap());
    }
}

#[test]
fn schemas_reject_malformed_documents() {
    let bad = json!({"schema_version": 1, "kind": "verification", "payload": {"dataset_id": "planted"}});
    let validator = jsonschema::validator_for(&schemas()["task-submit.schema.json"]).unwrap();
    assert!(!validator.is_valid(&bad));
    let validator = jsonschema::validator_for(&schemas()["manifest.schema.json"]).unwrap();
    assert!(!validator.is_valid(&json!({"regions": [{"region_id": 3}]})));
}
