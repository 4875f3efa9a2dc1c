use std::io::Cursor;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use m2n2::mask::{BinaryMask, RunLengthMask};
use m2n2::tensor_io::{write_attention_to, AttentionBlock, AttentionStack, SyntheticSpec};
use m2n2::world::SyntheticWorld;
use m2n2_server::{
    router, AppState, SegmentResponse, ServiceConfig, SessionCreated, SessionSnapshot,
};

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

fn app() -> Router {
    router(AppState::new(ServiceConfig::default()))
}

/// 32×32 grid, columns 0..12 are region 0 and the rest region 1.
fn strip_spec() -> SyntheticSpec {
    SyntheticSpec {
        h: 32,
        w: 32,
        partition: (0..32 * 32).map(|i| u32::from(i % 32 >= 12)).collect(),
        in_region_mass: 0.8,
        noise_seed: 3,
        noise_amplitude: 0.0,
    }
}

fn png_base64(world: &SyntheticWorld) -> String {
    let mut bytes = Vec::new();
    world
        .guide
        .to_rgb_image()
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    BASE64.encode(bytes)
}

fn synthetic_body(spec: &SyntheticSpec) -> Value {
    let world = SyntheticWorld::from_spec(spec.clone(), 8).unwrap();
    json!({
        "image": png_base64(&world),
        "attention": {"kind": "synthetic", "spec": spec},
    })
}

async fn create(app: &Router, body: Value) -> SessionCreated {
    let (status, bytes) = send(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(
        status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&bytes)
    );
    serde_json::from_slice(&bytes).unwrap()
}

async fn click(app: &Router, id: &str, x: usize, y: usize, label: &str) -> (StatusCode, Vec<u8>) {
    send(
        app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        Some(json!({"x": x, "y": y, "label": label})),
    )
    .await
}

async fn click_ok(app: &Router, id: &str, x: usize, y: usize, label: &str) -> SegmentResponse {
    let (status, bytes) = click(app, id, x, y, label).await;
    assert_eq!(
        status,
        StatusCode::OK,
        "{}",
        String::from_utf8_lossy(&bytes)
    );
    serde_json::from_slice(&bytes).unwrap()
}

async fn state(app: &Router, id: &str) -> SessionSnapshot {
    let (status, bytes) = send(app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn healthz_answers() {
    let (status, body) = send(&app(), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn synthetic_session_is_created() {
    let app = app();
    let created = create(&app, synthetic_body(&strip_spec())).await;
    assert_eq!((created.width, created.height), (256, 256));
    assert_eq!((created.grid_h, created.grid_w), (32, 32));
    assert_eq!(created.method, "m2n2");
}

#[tokio::test]
async fn atn1_upload_is_accepted() {
    let world = SyntheticWorld::from_spec(SyntheticSpec::halves(8, 8, 0.8), 4).unwrap();
    let mut atn = Vec::new();
    write_attention_to(&mut atn, &world.stack).unwrap();
    let body = json!({
        "image": png_base64(&world),
        "attention": {"kind": "atn1", "data": BASE64.encode(&atn)},
    });
    let created = create(&app(), body).await;
    assert_eq!((created.width, created.grid_w), (32, 8));
}

#[tokio::test]
async fn declared_shape_mismatch_is_422() {
    let world = SyntheticWorld::from_spec(SyntheticSpec::halves(3, 3, 0.8), 4).unwrap();
    let mut stack = world.stack.clone();
    stack.h = 4;
    stack.w = 4;
    let mut atn = Vec::new();
    write_attention_to(&mut atn, &stack).unwrap();
    let body = json!({
        "image": png_base64(&world),
        "attention": {"kind": "atn1", "data": BASE64.encode(&atn)},
    });
    let (status, bytes) = send(&app(), "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(err["error"].as_str().unwrap().len() > 0);
}

#[tokio::test]
async fn rows_that_do_not_sum_to_one_are_422() {
    let world = SyntheticWorld::from_spec(SyntheticSpec::halves(2, 2, 0.8), 4).unwrap();
    let stack = AttentionStack {
        h: 2,
        w: 2,
        blocks: vec![AttentionBlock {
            id: "up0".into(),
            tensor: vec![0.5; 16],
            default_weight: 1.0,
        }],
        source_image_ref: None,
        source_meta: Default::default(),
    };
    let mut atn = Vec::new();
    write_attention_to(&mut atn, &stack).unwrap();
    let body = json!({
        "image": png_base64(&world),
        "attention": {"kind": "atn1", "data": BASE64.encode(&atn)},
    });
    let (status, _) = send(&app(), "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn oversized_payload_is_413() {
    let app = router(AppState::new(ServiceConfig {
        max_body_bytes: 1024,
        ..ServiceConfig::default()
    }));
    let (status, _) = send(
        &app,
        "POST",
        "/sessions",
        Some(synthetic_body(&strip_spec())),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    assert_eq!(
        send(&app, "GET", "/sessions/nope", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        click(&app, "nope", 0, 0, "fg").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, "POST", "/sessions/nope/undo", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, "DELETE", "/sessions/nope", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn fresh_session_is_empty() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    let s = state(&app, &id).await;
    assert!(s.points.is_empty());
    assert_eq!(s.cache_entries, 0);
    assert_eq!(s.mask.counts, vec![256 * 256]);
    assert_eq!(BinaryMask::from_rle(&s.mask).unwrap().count(), 0);
}

#[tokio::test]
async fn first_click_selects_the_clicked_region() {
    let app = app();
    let spec = strip_spec();
    let world = SyntheticWorld::from_spec(spec.clone(), 8).unwrap();
    let id = create(&app, synthetic_body(&spec)).await.id;
    let resp = click_ok(&app, &id, 48, 128, "fg").await;
    let mask = BinaryMask::from_rle(&resp.mask).unwrap();
    assert_eq!(mask, world.regions[0]);
    assert_eq!(resp.points.len(), 1);
    assert!(resp.lambdas.contains_key("0"));
    assert!(resp.timing.total_ms >= resp.timing.map_ms);
}

#[tokio::test]
async fn out_of_bounds_click_leaves_state_unchanged() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    click_ok(&app, &id, 40, 40, "fg").await;
    let before = state(&app, &id).await;
    assert_eq!(
        click(&app, &id, 256, 10, "fg").await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        click(&app, &id, 10, 300, "bg").await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(state(&app, &id).await, before);
}

#[tokio::test]
async fn undo_on_empty_is_409() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    let (status, _) = send(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn click_undo_click_is_deterministic() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    let first = click_ok(&app, &id, 200, 30, "fg").await;
    let (status, _) = send(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    let second = click_ok(&app, &id, 200, 30, "fg").await;
    assert_eq!(first.mask, second.mask);
    assert_eq!(first.lambdas, second.lambdas);
}

#[tokio::test]
async fn undo_restores_the_previous_state() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    click_ok(&app, &id, 40, 100, "fg").await;
    let after_a = state(&app, &id).await;
    click_ok(&app, &id, 150, 100, "bg").await;
    let (status, bytes) = send(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    let undone: SegmentResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(undone.points, after_a.points);
    assert_eq!(undone.mask, after_a.mask);
    assert_eq!(state(&app, &id).await, after_a);
}

#[tokio::test]
async fn twenty_adds_then_twenty_undos_empty_the_cache() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    for k in 0..20 {
        let label = if k % 3 == 2 { "bg" } else { "fg" };
        let r = click_ok(&app, &id, (k * 37) % 256, (k * 61) % 256, label).await;
        assert_eq!(r.cache_entries, k + 1);
    }
    for k in (0..20).rev() {
        let (status, bytes) = send(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
        assert_eq!(status, StatusCode::OK);
        let r: SegmentResponse = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(r.cache_entries, k);
    }
    let s = state(&app, &id).await;
    assert!(s.points.is_empty());
    assert_eq!(s.cache_entries, 0);
    assert_eq!(
        s.mask,
        RunLengthMask {
            width: 256,
            height: 256,
            counts: vec![256 * 256]
        }
    );
}

#[tokio::test]
async fn identical_inputs_give_distinct_ids_and_identical_masks() {
    let app = app();
    let body = synthetic_body(&strip_spec());
    let a = create(&app, body.clone()).await.id;
    let b = create(&app, body).await.id;
    assert_ne!(a, b);
    for (x, y, l) in [(40, 40, "fg"), (220, 200, "bg"), (90, 10, "fg")] {
        let ra = click_ok(&app, &a, x, y, l).await;
        let rb = click_ok(&app, &b, x, y, l).await;
        assert_eq!(ra.mask, rb.mask);
    }
    let pa = send(&app, "GET", &format!("/sessions/{a}/mask.png"), None).await;
    let pb = send(&app, "GET", &format!("/sessions/{b}/mask.png"), None).await;
    assert_eq!(pa.0, StatusCode::OK);
    assert_eq!(pa.1, pb.1);
    assert_eq!(&pa.1[1..4], b"PNG");
}

#[tokio::test]
async fn concurrent_clicks_are_serialized() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    let clicks: Vec<_> = (0..6)
        .map(|k| {
            let (app, id) = (app.clone(), id.clone());
            tokio::spawn(async move { click(&app, &id, 20 + 30 * k, 40 + 25 * k, "fg").await })
        })
        .collect();
    let mut counts = Vec::new();
    for c in clicks {
        let (status, bytes) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let r: SegmentResponse = serde_json::from_slice(&bytes).unwrap();
        counts.push(r.points.len());
    }
    counts.sort_unstable();
    assert_eq!(counts, vec![1, 2, 3, 4, 5, 6]);
    let s = state(&app, &id).await;
    let ids: Vec<u32> = s.points.iter().map(|p| p.id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
}

#[tokio::test]
async fn diagnostics_report_one_curve_per_point() {
    let app = app();
    let id = create(&app, synthetic_body(&strip_spec())).await.id;
    click_ok(&app, &id, 40, 40, "fg").await;
    click_ok(&app, &id, 200, 40, "bg").await;
    let (status, bytes) = send(&app, "GET", &format!("/sessions/{id}/diagnostics"), None).await;
    assert_eq!(status, StatusCode::OK);
    let d: Value = serde_json::from_slice(&bytes).unwrap();
    let curves = d["curves"].as_array().unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0]["scores"].as_array().unwrap().len(), 256);
}

#[tokio::test]
async fn delete_and_reap() {
    let state = AppState::new(ServiceConfig {
        session_ttl: Duration::from_millis(50),
        ..ServiceConfig::default()
    });
    let app = router(state.clone());
    let a = create(&app, synthetic_body(&strip_spec())).await.id;
    create(&app, synthetic_body(&strip_spec())).await;
    assert_eq!(
        send(&app, "DELETE", &format!("/sessions/{a}"), None)
            .await
            .0,
        StatusCode::NO_CONTENT
    );
    assert_eq!(state.session_count().await, 1);
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(state.reap_expired().await, 1);
    assert_eq!(state.session_count().await, 0);
}

#[tokio::test]
async fn baseline_method_is_selectable() {
    let app = app();
    let mut body = synthetic_body(&strip_spec());
    body["config"] = json!({"method": "kl-nn"});
    let created = create(&app, body).await;
    assert_eq!(created.method, "kl-nn");
    let r = click_ok(&app, &created.id, 48, 128, "fg").await;
    assert!(BinaryMask::from_rle(&r.mask).unwrap().count() > 0);
}
