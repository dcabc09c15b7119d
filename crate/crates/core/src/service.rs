//! HTTP inference service.
//!
//! `GET /healthz`, `GET /schema`, `POST /predict` and `POST /counterfactual`.
//! Bodies are JSON; errors are `{code, message, field?}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::cors::CorsLayer;

use crate::counterfact::{raw_diffs, CounterfactualEntry};
use crate::dataio::{Column, ColumnKind, RawValue, Schema};
use crate::error::Error;
use crate::model::Model;
use crate::persist::hash_model;

/// Shared, read-only service state.
#[derive(Clone, Debug, Default)]
pub struct AppState {
    pub model: Option<Arc<Model>>,
    pub hash: Option<String>,
}

impl AppState {
    pub fn with_model(model: Model) -> Self {
        let hash = hash_model(&model);
        Self {
            model: Some(Arc::new(model)),
            hash: Some(hash),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }
}

/// Error body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            field: field.map(str::to_string),
        }
    }

    fn bad_request(code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message, field)
    }

    fn no_model() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no model is loaded", None)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::UnseenCategory { column, .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unseen_category", msg, Some(&column))
            }
            Error::InvalidValue { column, .. } => Self::bad_request("invalid_value", msg, Some(&column)),
            Error::MissingColumn(column) => Self::bad_request("missing_field", msg, Some(&column)),
            Error::Schema(_) | Error::InvalidArgument(_) => Self::bad_request("invalid_request", msg, None),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg, None),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaDoc {
    pub columns: Vec<Column>,
    pub target: String,
    pub classes: Vec<String>,
    pub model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub features: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub bias: f64,
    /// One entry per encoded feature, in encoded order.
    pub features: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted: String,
    pub predicted_index: usize,
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
    pub importance: Importance,
    pub counterfactuals: Vec<CounterfactualEntry>,
    pub density_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRequest {
    pub features: BTreeMap<String, Value>,
    pub target: Value,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/schema", get(schema))
        .route("/predict", post(predict))
        .route("/counterfactual", post(counterfactual))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn loaded(state: &AppState) -> Result<&Arc<Model>, ApiError> {
    state.model.as_ref().ok_or_else(ApiError::no_model)
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: if state.model.is_some() { "ok" } else { "no_model" }.into(),
        model_hash: state.hash.clone(),
    })
}

async fn schema(State(state): State<AppState>) -> ApiResult<SchemaDoc> {
    let model = loaded(&state)?;
    Ok(Json(SchemaDoc {
        columns: model.schema.columns.clone(),
        target: model.schema.target.clone(),
        classes: model.schema.classes.clone(),
        model_hash: state.hash.clone().unwrap_or_default(),
    }))
}

/// Converts a feature map into a raw row in schema order.
pub fn parse_features(schema: &Schema, features: &BTreeMap<String, Value>) -> Result<Vec<RawValue>, ApiError> {
    if let Some(extra) = features.keys().find(|k| schema.column_index(k).is_none()) {
        return Err(ApiError::bad_request(
            "unknown_field",
            format!("`{extra}` is not a feature column"),
            Some(extra),
        ));
    }
    schema
        .columns
        .iter()
        .map(|col| {
            let v = features.get(&col.name).ok_or_else(|| {
                ApiError::bad_request("missing_field", format!("missing column `{}`", col.name), Some(&col.name))
            })?;
            match (&col.kind, v) {
                (ColumnKind::Numeric, Value::Number(n)) => Ok(RawValue::Num(n.as_f64().unwrap_or(f64::NAN))),
                (ColumnKind::Categorical { .. }, Value::String(s)) => Ok(RawValue::Cat(s.clone())),
                (ColumnKind::Numeric, _) => Err(ApiError::bad_request(
                    "invalid_value",
                    format!("column `{}` expects a number", col.name),
                    Some(&col.name),
                )),
                (ColumnKind::Categorical { .. }, _) => Err(ApiError::bad_request(
                    "invalid_value",
                    format!("column `{}` expects a string category", col.name),
                    Some(&col.name),
                )),
            }
        })
        .collect()
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(t)| t)
        .map_err(|e| ApiError::bad_request("invalid_request", e.body_text(), None))
}

async fn predict(
    State(state): State<AppState>,
    payload: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<PredictResponse> {
    let model = loaded(&state)?;
    let req = body(payload)?;
    let row = parse_features(&model.schema, &req.features)?;
    let ex = model.explain(&row)?;
    let set = ex.counterfactuals;
    Ok(Json(PredictResponse {
        predicted: set.predicted_label,
        predicted_index: set.predicted,
        classes: model.schema.classes.clone(),
        probabilities: set.probabilities,
        importance: Importance {
            bias: ex.importance.bias,
            features: model.schema.encoded_names(),
            weights: ex.importance.weights,
        },
        counterfactuals: set.entries,
        density_threshold: model.thresholds.global,
    }))
}

fn parse_target(schema: &Schema, v: &Value) -> Result<usize, ApiError> {
    let unknown = || {
        ApiError::bad_request(
            "unknown_target",
            format!("target must be one of {:?}", schema.classes),
            Some("target"),
        )
    };
    match v {
        Value::String(s) => schema.class_index(s).ok_or_else(unknown),
        _ => Err(unknown()),
    }
}

async fn counterfactual(
    State(state): State<AppState>,
    payload: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> ApiResult<CounterfactualEntry> {
    let model = loaded(&state)?;
    let req = body(payload)?;
    let row = parse_features(&model.schema, &req.features)?;
    let target = parse_target(&model.schema, &req.target)?;
    let ex = model.explain(&row)?;
    let set = ex.counterfactuals;
    if target == set.predicted {
        let log_density = model.flow.log_prob(
            &crate::gradcore::Tensor::row_vector(&set.encoded),
            &[target],
        )?[0];
        return Ok(Json(CounterfactualEntry {
            target,
            target_label: model.schema.classes[target].clone(),
            diffs: raw_diffs(&model.preprocessor, &set.raw, &set.raw),
            encoded: set.encoded,
            raw: set.raw,
            predicted: set.predicted,
            valid: true,
            log_density,
            plausible: log_density > model.thresholds.global,
        }));
    }
    let entry = set
        .entries
        .into_iter()
        .find(|e| e.target == target)
        .ok_or_else(|| ApiError::from(Error::InvalidArgument("target has no counterfactual".into())))?;
    Ok(Json(entry))
}
