#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use facekit::cascade::CascadeModel;
use facekit::facestore::{FaceStore, KeySource, SharedStore, StoreConfig};
use facekit::imaging::{GrayImage, Rect};
use facekit::pipeline::PipelineConfig;
use facekit::synth::{plant_textured_pattern, planted_pattern_cascade};
use facekit_server::AppState;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const SECRET: &str = "server-tests";

pub fn face_frame(person: u64) -> GrayImage {
    let mut img = GrayImage::filled(160, 120, 120).unwrap();
    let s = 40 + (person % 3) as u32 * 8;
    plant_textured_pattern(&mut img, &Rect::new(30 + person as u32 % 50, 20, s, s), 25, person);
    img
}

pub fn open_store(root: &Path, capacity: usize) -> SharedStore {
    let store = FaceStore::open(StoreConfig::new(root.join("store"), capacity, KeySource::Secret(SECRET.into()))).unwrap();
    Arc::new(Mutex::new(store))
}

pub fn pipeline_config(root: &Path) -> PipelineConfig {
    PipelineConfig {
        temp_dir: root.join("captures"),
        ..PipelineConfig::default()
    }
}

pub fn state_with(root: &Path, capacity: usize, cascade: Option<CascadeModel>) -> AppState {
    AppState::new(open_store(root, capacity), cascade.map(Arc::new), pipeline_config(root), None)
}

pub fn console_state(root: &Path) -> AppState {
    state_with(root, 10, Some(planted_pattern_cascade(24, 1.2)))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body.map(|v| v.to_string().into_bytes())).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}
