#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use foke_core::store::{load_forest, parse_profiles, parse_templates};
use foke_core::{EngineState, TrainConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> Vec<u8> {
    let path = fixture_path(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn train_config() -> TrainConfig {
    serde_json::from_slice(&fixture("train.json")).unwrap()
}

/// Fixture forest, profiles and templates, untrained.
pub fn fixture_state() -> EngineState {
    let (forest, triples) = load_forest(&fixture("forest.json")).unwrap();
    let mut state = EngineState::new(forest, triples);
    state.profiles = parse_profiles(&fixture("profiles.json"))
        .unwrap()
        .profiles
        .into_iter()
        .map(|p| (p.user_id.clone(), p))
        .collect();
    state.templates = parse_templates(&fixture("templates.json")).unwrap().templates;
    state
}

/// Fixture state after the pinned training run.
pub fn trained_state() -> EngineState {
    let mut state = fixture_state();
    let config = train_config();
    let outcome = state.train(&config, |_| {}).unwrap();
    state.apply_training(config, outcome);
    state
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(serde_json::to_vec(&v).unwrap()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes)))
    };
    (status, value)
}

/// Response body without its `revision` field.
pub fn payload(mut v: Value) -> (Value, u64) {
    let rev = v
        .as_object_mut()
        .and_then(|m| m.remove("revision"))
        .and_then(|r| r.as_u64())
        .expect("every response carries a revision");
    (v, rev)
}

pub fn json<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap()
}

/// Polls a training job until it leaves the running state.
pub async fn wait_for_job(app: &Router, job: u64) -> Value {
    for _ in 0..6000 {
        let (status, body) = call(app, "GET", &format!("/train/{job}"), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        if body["status"] != "running" {
            return body;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    panic!("training job {job} did not finish");
}
