//! Shared HTTP plumbing: error responses and a blocking JSON client.

use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pullsched_core::agent::ApiError;
use pullsched_core::service::ServiceError;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// An error body `{"error": ...}` with a status code.
#[derive(Debug)]
pub struct HttpError(pub StatusCode, pub String);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServiceError> for HttpError {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::Validation(_) | ServiceError::BadFilter(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::AlreadyTerminal(_) => StatusCode::CONFLICT,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        HttpError(code, e.to_string())
    }
}

impl HttpError {
    pub fn internal(msg: impl std::fmt::Display) -> Self {
        HttpError(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

/// Blocking JSON client rooted at a base URL. Must not be used from inside
/// an async runtime.
#[derive(Debug, Clone)]
pub struct JsonClient {
    base: String,
    http: reqwest::blocking::Client,
}

impl JsonClient {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, ApiError> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(api_error)?;
        Ok(JsonClient { base: base.trim_end_matches('/').to_string(), http })
    }

    /// Shares an existing connection pool.
    pub fn with_client(base: &str, http: reqwest::blocking::Client) -> Self {
        JsonClient { base: base.trim_end_matches('/').to_string(), http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        decode(self.http.get(format!("{}{path}", self.base)).send())
    }

    pub fn get_query<Q: Serialize, T: DeserializeOwned>(&self, path: &str, query: &Q) -> Result<T, ApiError> {
        decode(self.http.get(format!("{}{path}", self.base)).query(query).send())
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ApiError> {
        decode(self.http.post(format!("{}{path}", self.base)).json(body).send())
    }

    pub fn delete<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        decode(self.http.delete(format!("{}{path}", self.base)).send())
    }
}

fn api_error(e: reqwest::Error) -> ApiError {
    ApiError(e.to_string())
}

fn decode<T: DeserializeOwned>(res: reqwest::Result<reqwest::blocking::Response>) -> Result<T, ApiError> {
    let res = res.map_err(api_error)?;
    let status = res.status();
    if !status.is_success() {
        let body: serde_json::Value = res.json().unwrap_or_default();
        let msg = body.get("error").and_then(|m| m.as_str()).unwrap_or("no error body").to_string();
        return Err(ApiError(format!("{status}: {msg}")));
    }
    res.json().map_err(api_error)
}
