mod common;

use std::time::Duration;

use axum::http::{Method, StatusCode};
use base64::Engine;
use common::*;
use facekit::imaging::{save_pgm, GrayImage};
use facekit::pipeline::{EventKind, Mode, PipelineEvent, Via};
use facekit::synth::{contrast_cascade, synthetic_face};
use facekit_server::api::{ApiImage, SyncResponse};
use facekit_server::router;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

fn image_json(img: &GrayImage) -> Value {
    serde_json::to_value(ApiImage::from_image(img)).unwrap()
}

fn enroll_body(name: &str, img: &GrayImage) -> Value {
    json!({"displayName": name, "notes": format!("notes for {name}"), "image": image_json(img)})
}

fn events_of(v: Value) -> Vec<PipelineEvent> {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_answers_ok() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(dir.path(), 10, None));
    let (status, body) = call_raw(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn identify_against_empty_store_is_null() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(dir.path(), 10, None));
    let (status, body) = call(&app, Method::POST, "/api/v1/identify", Some(json!({"image": image_json(&synthetic_face(1, 100))}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"match": null, "distance": null}));
}

#[tokio::test]
async fn enrolled_images_identify_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(dir.path(), 10, None));
    let mut rng = StdRng::seed_from_u64(3);
    let mut ids = Vec::new();
    for p in 0..5u64 {
        // Arbitrary valid images, not only face-like ones.
        let img = if p % 2 == 0 {
            synthetic_face(p, 100)
        } else {
            let (w, h) = (rng.random_range(20..140), rng.random_range(20..140));
            GrayImage::from_fn(w, h, |_, _| rng.random()).unwrap()
        };
        let (status, body) = call(&app, Method::POST, "/api/v1/enroll", Some(enroll_body(&format!("P{p}"), &img))).await;
        assert_eq!(status, StatusCode::CREATED);
        ids.push((body["personId"].as_str().unwrap().to_string(), img));
    }
    for (id, img) in &ids {
        let (status, body) = call(&app, Method::POST, "/api/v1/identify", Some(json!({"image": image_json(img)}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["match"]["personId"], json!(id));
        assert_eq!(body["match"]["distance"], json!(0.0));
        assert_eq!(body["distance"], json!(0.0));
    }
    let (_, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
    let sync: SyncResponse = serde_json::from_value(body).unwrap();
    assert_eq!(sync.persons.len(), 5);
    assert!(sync.persons.iter().all(|p| p.usage_count == 1));
    for (id, img) in &ids {
        let person = sync.persons.iter().find(|p| &p.person_id == id).unwrap();
        assert_eq!(person.faces.len(), 1);
        assert_eq!(&person.faces[0].decode().unwrap(), img);
        assert_eq!(person.notes, format!("notes for {}", person.display_name));
    }
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(console_state(dir.path()));
    let face = synthetic_face(0, 100);
    let b64 = |bytes: &[u8]| base64::engine::general_purpose::STANDARD.encode(bytes);
    let bad_bodies = [
        json!({"image": {"encoding": "pgm+base64", "data": "***not base64***"}}),
        json!({"image": {"encoding": "png", "data": b64(&save_pgm(&face))}}),
        json!({"image": {"encoding": "pgm+base64", "data": b64(b"P6\n2 2\n255\nabcdefghijkl")}}),
        json!({"image": {"encoding": "pgm+base64", "data": b64(b"P5\n4 4\n255\nshort")}}),
        json!({"image": "nope"}),
        json!({}),
    ];
    for path in ["/api/v1/identify", "/api/v1/detect", "/api/v1/frame"] {
        for body in &bad_bodies {
            let (status, resp) = call(&app, Method::POST, path, Some(body.clone())).await;
            assert_eq!(status, StatusCode::BAD_REQUEST, "{path} {body}");
            assert!(resp["error"].is_string());
        }
        let (status, _) = call_raw(&app, Method::POST, path, Some(b"{not json".to_vec())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let zero = json!({"image": {"encoding": "pgm+base64", "data": b64(b"P5\n0 3\n255\n")}});
        let (status, _) = call(&app, Method::POST, path, Some(zero)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{path}");
    }

    for name in ["", "   "] {
        let (status, _) = call(&app, Method::POST, "/api/v1/enroll", Some(enroll_body(name, &face))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
    let (status, _) = call(&app, Method::POST, "/api/v1/enroll", Some(json!({"displayName": "X", "image": bad_bodies[0]["image"]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Sleeping"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::POST, "/api/v1/enrolment/complete", Some(json!({"displayName": "X"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // Nothing was stored along the way.
    let (_, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
    assert_eq!(body, json!({"persons": []}));
}

#[tokio::test]
async fn sync_limits_and_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(dir.path(), 10, None));
    let (status, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"persons": []}));
    for bad in ["0", "-3", "ten", ""] {
        let (status, _) = call(&app, Method::GET, &format!("/api/v1/sync?limit={bad}"), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "limit={bad}");
    }

    for p in 0..10u64 {
        let (status, _) = call(&app, Method::POST, "/api/v1/enroll", Some(enroll_body(&format!("P{p}"), &synthetic_face(p, 100)))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    // Make person 7 the most retained.
    call(&app, Method::POST, "/api/v1/identify", Some(json!({"image": image_json(&synthetic_face(7, 100))}))).await;

    let (_, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
    let sync: SyncResponse = serde_json::from_value(body).unwrap();
    assert_eq!(sync.persons.len(), 10);
    for person in &sync.persons {
        assert_eq!(person.faces.len(), 1);
        let encoded = serde_json::to_vec(&person.faces[0]).unwrap().len();
        assert!(encoded <= 32 * 1024, "{encoded} bytes");
    }
    assert_eq!(sync.persons[0].display_name, "P7");

    let (_, body) = call(&app, Method::GET, "/api/v1/sync?limit=1", None).await;
    let top: SyncResponse = serde_json::from_value(body).unwrap();
    assert_eq!(top.persons, sync.persons[..1].to_vec());
    let (_, body) = call(&app, Method::GET, "/api/v1/sync?limit=4", None).await;
    let four: SyncResponse = serde_json::from_value(body).unwrap();
    assert_eq!(four.persons, sync.persons[..4].to_vec());
}

/// Independent model of the retained set: a record is (usage, last use tick,
/// creation tick, id); the smallest is evicted, never the newcomer.
#[derive(Clone)]
struct OracleRecord {
    id: String,
    name: String,
    usage: u64,
    last_used: u64,
    created: u64,
}

fn oracle_ranked(records: &[OracleRecord]) -> Vec<String> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        (b.usage, b.last_used, b.created, &b.id).cmp(&(a.usage, a.last_used, a.created, &a.id))
    });
    sorted.into_iter().map(|r| r.name).collect()
}

#[tokio::test]
async fn sync_follows_eviction_replay() {
    let dir = tempfile::tempdir().unwrap();
    let capacity = 4;
    let app = router(state_with(dir.path(), capacity, None));
    let mut rng = StdRng::seed_from_u64(17);
    let mut oracle: Vec<OracleRecord> = Vec::new();
    let mut tick = 0u64;
    let mut next_person = 0u64;
    for _ in 0..30 {
        tick += 1;
        if oracle.is_empty() || rng.random_bool(0.45) {
            let p = next_person;
            next_person += 1;
            let name = format!("P{p}");
            let (status, body) = call(&app, Method::POST, "/api/v1/enroll", Some(enroll_body(&name, &synthetic_face(p, 100)))).await;
            assert_eq!(status, StatusCode::CREATED);
            if oracle.len() == capacity {
                let victim = (0..oracle.len())
                    .min_by(|&i, &j| {
                        let (a, b) = (&oracle[i], &oracle[j]);
                        (a.usage, a.last_used, a.created, &a.id).cmp(&(b.usage, b.last_used, b.created, &b.id))
                    })
                    .unwrap();
                oracle.remove(victim);
            }
            oracle.push(OracleRecord {
                id: body["personId"].as_str().unwrap().to_string(),
                name,
                usage: 0,
                last_used: tick,
                created: tick,
            });
        } else {
            let k = rng.random_range(0..oracle.len());
            let p: u64 = oracle[k].name[1..].parse().unwrap();
            let (_, body) = call(&app, Method::POST, "/api/v1/identify", Some(json!({"image": image_json(&synthetic_face(p, 100))}))).await;
            assert_eq!(body["match"]["personId"], json!(oracle[k].id));
            oracle[k].usage += 1;
            oracle[k].last_used = tick;
        }
        let (_, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
        let sync: SyncResponse = serde_json::from_value(body).unwrap();
        let names: Vec<String> = sync.persons.iter().map(|p| p.display_name.clone()).collect();
        assert_eq!(names, oracle_ranked(&oracle));
        // Keep server timestamps strictly ordered like the oracle's ticks.
        tokio::time::sleep(Duration::from_millis(3)).await;
    }
}

#[tokio::test]
async fn detect_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let blank = json!({"image": image_json(&GrayImage::filled(64, 48, 128).unwrap())});

    let app = router(state_with(dir.path(), 10, None));
    let (status, _) = call(&app, Method::POST, "/api/v1/detect", Some(blank.clone())).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let dir = tempfile::tempdir().unwrap();
    let reject_all = contrast_cascade(24, 24, 0.0, 2.0);
    let app = router(state_with(dir.path(), 10, Some(reject_all)));
    let (status, body) = call(&app, Method::POST, "/api/v1/detect", Some(blank)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"boxes": []}));
    let (status, _) = call(&app, Method::POST, "/api/v1/detect", Some(json!({"image": image_json(&GrayImage::filled(10, 10, 0).unwrap())}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let dir = tempfile::tempdir().unwrap();
    let app = router(console_state(dir.path()));
    let (status, body) = call(&app, Method::POST, "/api/v1/detect", Some(json!({"image": image_json(&face_frame(2))}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["boxes"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let state = console_state(dir.path());
    let mut feed = state.subscribe();
    let app = router(state);
    let (status, body) = call(&app, Method::GET, "/api/v1/state", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"mode": "Offline", "lastDetectionAt": null, "pendingCapture": null}));
    let (status, body) = call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Online"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["mode"], "Online");
    let (_, body) = call(&app, Method::GET, "/api/v1/state", None).await;
    assert_eq!(body["mode"], "Online");
    let event = feed.try_recv().unwrap();
    assert_eq!(event.kind, EventKind::StateChanged { from: Mode::Offline, to: Mode::Online });

    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(dir.path(), 10, None));
    let (status, _) = call(&app, Method::GET, "/api/v1/state", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn console_enrolment_then_identification() {
    let dir = tempfile::tempdir().unwrap();
    let state = console_state(dir.path());
    let mut feed = state.subscribe();
    let app = router(state);

    let frame = |img: &GrayImage, now: i64| json!({"image": image_json(img), "now": now});
    let (_, body) = call(&app, Method::POST, "/api/v1/frame", Some(frame(&GrayImage::filled(160, 120, 90).unwrap(), 0))).await;
    assert_eq!(body, json!([]));

    call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Enrolment"}))).await;
    let (status, body) = call(&app, Method::POST, "/api/v1/frame", Some(frame(&face_frame(4), 1000))).await;
    assert_eq!(status, StatusCode::OK);
    let events = events_of(body);
    let temp_ref = match &events[..] {
        [PipelineEvent { kind: EventKind::FaceDetected { .. }, .. }, PipelineEvent { kind: EventKind::EnrolmentCaptured { temp_image_ref }, .. }] => {
            temp_image_ref.clone()
        }
        other => panic!("unexpected {other:?}"),
    };
    let (_, body) = call(&app, Method::GET, "/api/v1/state", None).await;
    assert_eq!(body["pendingCapture"], json!(temp_ref));
    assert_eq!(body["lastDetectionAt"], json!(1000));

    // An unknown reference conflicts and is reported on the feed.
    let (status, _) = call(
        &app,
        Method::POST,
        "/api/v1/enrolment/complete",
        Some(json!({"tempRef": "capture-elsewhere.pgm", "displayName": "Ana", "now": 1100})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::POST, "/api/v1/enrolment/complete", Some(json!({"tempRef": temp_ref, "displayName": " "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(
        &app,
        Method::POST,
        "/api/v1/enrolment/complete",
        Some(json!({"tempRef": temp_ref, "displayName": "Ana", "notes": "front door", "now": 1200})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let enrolled: PipelineEvent = serde_json::from_value(body).unwrap();
    let person_id = match enrolled.kind {
        EventKind::PersonEnrolled { person_id, display_name, via } => {
            assert_eq!(display_name, "Ana");
            assert_eq!(via, Via::Local);
            person_id
        }
        other => panic!("unexpected {other:?}"),
    };
    assert!(!dir.path().join("captures").join(&temp_ref).exists());

    call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Offline"}))).await;
    let (_, body) = call(&app, Method::POST, "/api/v1/frame", Some(frame(&face_frame(4), 4000))).await;
    let events = events_of(body);
    assert!(matches!(
        &events[1].kind,
        EventKind::PersonIdentified { person_id: id, via: Via::Local, distance, .. } if *id == person_id && *distance == 0.0
    ));

    // Leaving enrolment made completion a conflict.
    let (status, _) = call(&app, Method::POST, "/api/v1/enrolment/complete", Some(json!({"tempRef": temp_ref, "displayName": "Ana"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let mut kinds = Vec::new();
    while let Ok(e) = feed.try_recv() {
        kinds.push(e.kind);
    }
    assert_eq!(kinds.iter().filter(|k| matches!(k, EventKind::Error { .. })).count(), 3);
    assert!(kinds.iter().any(|k| matches!(k, EventKind::PersonEnrolled { .. })));
    assert!(kinds.iter().any(|k| matches!(k, EventKind::PersonIdentified { .. })));
}

#[tokio::test]
async fn online_pipeline_uses_server_store() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(console_state(dir.path()));
    call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Online"}))).await;
    call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Enrolment"}))).await;
    let (_, body) = call(&app, Method::POST, "/api/v1/frame", Some(json!({"image": image_json(&face_frame(1)), "now": 10}))).await;
    let temp_ref = match &events_of(body)[1].kind {
        EventKind::EnrolmentCaptured { temp_image_ref } => temp_image_ref.clone(),
        other => panic!("unexpected {other:?}"),
    };
    let (_, body) = call(&app, Method::POST, "/api/v1/enrolment/complete", Some(json!({"tempRef": temp_ref, "displayName": "Bo"}))).await;
    assert_eq!(body["via"], "server");
    call(&app, Method::POST, "/api/v1/state", Some(json!({"mode": "Online"}))).await;
    let (_, body) = call(&app, Method::POST, "/api/v1/frame", Some(json!({"image": image_json(&face_frame(1)), "now": 5000}))).await;
    let events = events_of(body);
    assert!(matches!(&events[1].kind, EventKind::PersonIdentified { via: Via::Server, display_name, .. } if display_name == "Bo"));
    let (_, body) = call(&app, Method::GET, "/api/v1/sync", None).await;
    assert_eq!(body["persons"][0]["usageCount"], 1);
}

#[tokio::test]
async fn restart_preserves_identify_and_sync() {
    let dir = tempfile::tempdir().unwrap();
    let faces: Vec<GrayImage> = (0..6).map(|p| synthetic_face(p, 100)).collect();
    let probe = json!({"image": image_json(&faces[4])}).to_string().into_bytes();
    let (identify_before, sync_before) = {
        let app = router(state_with(dir.path(), 4, None));
        for (p, face) in faces.iter().enumerate() {
            call(&app, Method::POST, "/api/v1/enroll", Some(enroll_body(&format!("P{p}"), face))).await;
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        let (_, ident) = call_raw(&app, Method::POST, "/api/v1/identify", Some(probe.clone())).await;
        let (_, sync) = call_raw(&app, Method::GET, "/api/v1/sync", None).await;
        (ident, sync)
    };
    let app = router(state_with(dir.path(), 4, None));
    let (_, sync_after) = call_raw(&app, Method::GET, "/api/v1/sync", None).await;
    assert_eq!(sync_after, sync_before);
    let (_, identify_after) = call_raw(&app, Method::POST, "/api/v1/identify", Some(probe)).await;
    assert_eq!(identify_after, identify_before);
    let sync: SyncResponse = serde_json::from_slice(&sync_before).unwrap();
    assert_eq!(sync.persons.len(), 4);
    assert_eq!(sync.persons[0].display_name, "P4");
}
