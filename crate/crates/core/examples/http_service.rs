//! Builds the HTTP router around a freshly trained model and issues
//! requests in-process.
//!
//! `cargo run --release --example http_service`

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use hyconex::dataio::{generate_synthetic, SyntheticKind};
use hyconex::service::{router, AppState};
use hyconex::training::{train, TrainConfig};
use tower::ServiceExt;

async fn call(app: axum::Router, method: &str, uri: &str, body: &str) -> String {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    format!("{status} {}", String::from_utf8_lossy(&bytes))
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> hyconex::Result<()> {
    let raw = generate_synthetic(SyntheticKind::Moons, 400, 0.1, 2)?;
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 20;
    cfg.flow.epochs = 20;
    cfg.joint.epochs = 20;
    cfg.joint.ramp_epochs = 4;
    let app = router(AppState::with_model(train(&cfg, &raw)?.model));
    println!("{}", call(app.clone(), "GET", "/healthz", "").await);
    println!("{}", call(app.clone(), "GET", "/schema", "").await);
    let point = r#"{"features": {"x1": 0.0, "x2": 0.9}}"#;
    println!("{}", call(app.clone(), "POST", "/predict", point).await);
    let what_if = r#"{"features": {"x1": 0.0, "x2": 0.9}, "target": "1"}"#;
    println!("{}", call(app.clone(), "POST", "/counterfactual", what_if).await);
    println!("{}", call(app, "POST", "/predict", r#"{"features": {"x1": 0.0}}"#).await);
    Ok(())
}
