mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use navparse_cli::parse_document;
use navparse_cli::server::{router, AppState};
use tower::ServiceExt;

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post(body: &str) -> Request<Body> {
    Request::post("/v1/parse")
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap()
}

fn health() -> Request<Body> {
    Request::get("/v1/health").body(Body::empty()).unwrap()
}

#[tokio::test]
async fn endpoint_lifecycle_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, bundle) = common::tiny_bundle(dir.path());
    let state = AppState::new(schema.clone());
    let app = router(state.clone());

    let (status, _) = call(app.clone(), health()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let req = r#"{"command":"sign in","page_id":"home"}"#;
    let (status, _) = call(app.clone(), post(req)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    state.set_bundle(bundle.clone());
    let (status, body) = call(app.clone(), health()).await;
    assert_eq!((status, body), (StatusCode::OK, serde_json::json!({"status": "ok"})));

    let (status, mut body) = call(app.clone(), post(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["latency_ms"].as_f64().unwrap() >= 0.0);
    body.as_object_mut().unwrap().remove("latency_ms");
    let cli = serde_json::to_value(parse_document(&bundle, &schema, "home", "sign in").unwrap()).unwrap();
    assert_eq!(body, cli);
    assert_eq!(body["version"], 1);

    for bad in ["{", r#"{"command":"x"}"#, r#"{"command":"","page_id":"home"}"#, r#"{"command":"x","page_id":"home","extra":1}"#] {
        let (status, body) = call(app.clone(), post(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(body["error"].is_string());
    }
    let (status, _) = call(app.clone(), post(r#"{"command":"sign in","page_id":"cart"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (schema, bundle) = common::tiny_bundle(dir.path());
    let state = AppState::new(schema);
    state.set_bundle(bundle);
    let app = router(Arc::clone(&state));
    let req = r#"{"command":"book a table for two people at 7 pm at sushi","page_id":"home"}"#;
    let handles: Vec<_> = (0..50)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move {
                let (status, mut body) = call(app, post(req)).await;
                assert_eq!(status, StatusCode::OK);
                body.as_object_mut().unwrap().remove("latency_ms");
                body
            })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
