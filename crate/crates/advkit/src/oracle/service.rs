//! Mock "cloud service": a local HTTP server exposing one trained model
//! behind the wire protocol `POST /classify` with body
//! `{"image_b64": <base64 PNG>}` and response `{"label": ..., "scores"?}`.
//! Malformed input gets `400 {"error": ...}`. Images cross the wire as
//! 8-bit PNG only.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{LocalOracle, OracleError};
use crate::metrics::Image;
use crate::models::ConvNet;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ClassifyRequest {
    pub image_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ClassifyResponse {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ErrorResponse {
    pub error: String,
}

struct ServiceState {
    oracle: LocalOracle,
}

/// A running mock service. Dropping the handle shuts the server down and
/// joins its thread.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL of the service, e.g. `http://127.0.0.1:49152`.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts the mock service on `bind` (e.g. `127.0.0.1:0` for an ephemeral
/// port). The socket is bound synchronously so a port conflict surfaces
/// here, not inside the server thread.
pub fn serve_mock_service(
    model: ConvNet,
    class_names: Vec<String>,
    bind: &str,
    scores_enabled: bool,
) -> Result<ServiceHandle, OracleError> {
    let oracle = LocalOracle::new(model, class_names)?.with_scores(scores_enabled);
    let listener = std::net::TcpListener::bind(bind).map_err(|source| OracleError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| OracleError::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| OracleError::Bind {
        addr: bind.to_string(),
        source,
    })?;

    let state = Arc::new(ServiceState { oracle });
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let app = Router::new()
                .route("/classify", post(classify_route))
                .with_state(state);
            let listener =
                tokio::net::TcpListener::from_std(listener).expect("listener registration");
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("mock service");
        });
    });

    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

fn bad_request(msg: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(ErrorResponse { error: msg.into() }),
    )
        .into_response()
}

/// The body is taken as a raw string so every malformed payload, JSON or
/// otherwise, funnels into the same 400-with-error-body shape.
async fn classify_route(State(state): State<Arc<ServiceState>>, body: String) -> Response {
    let req: ClassifyRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("invalid request json: {e}")),
    };
    let png = match BASE64.decode(req.image_b64.as_bytes()) {
        Ok(b) => b,
        Err(e) => return bad_request(format!("invalid base64: {e}")),
    };
    let img = match Image::from_png_bytes(&png) {
        Ok(i) => i,
        Err(e) => return bad_request(format!("invalid png: {e}")),
    };
    match state.oracle.verdict_for(&img) {
        Ok(v) => (
            StatusCode::OK,
            Json(ClassifyResponse {
                label: v.label,
                scores: v.scores,
            }),
        )
            .into_response(),
        Err(e) => bad_request(e.to_string()),
    }
}
