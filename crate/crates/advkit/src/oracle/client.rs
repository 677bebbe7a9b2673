//! Blocking HTTP client for the mock service's wire protocol. The ledger is
//! charged for every transmitted request, including ones that fail in
//! transit: a request that reached the network may have reached the server.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::service::{ClassifyRequest, ClassifyResponse, ErrorResponse};
use super::{Oracle, OracleError, OracleVerdict, QueryLedger};
use crate::metrics::Image;

pub struct HttpOracle {
    endpoint: String,
    client: reqwest::blocking::Client,
    ledger: QueryLedger,
}

impl HttpOracle {
    /// `base_url` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| OracleError::Protocol(format!("client construction: {e}")))?;
        Ok(Self {
            endpoint: format!("{}/classify", base_url.trim_end_matches('/')),
            client,
            ledger: QueryLedger::new(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Oracle for HttpOracle {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        if !img.is_integral() {
            return Err(OracleError::NonIntegralImage);
        }
        let png = img.to_png_bytes()?;
        let request = ClassifyRequest {
            image_b64: BASE64.encode(png),
        };
        self.ledger.record(image_id);
        let response = self
            .client
            .post(&self.endpoint)
            .json(&request)
            .send()
            .map_err(|e| OracleError::Transport {
                message: e.to_string(),
                retryable: true,
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| OracleError::Transport {
            message: format!("reading response body: {e}"),
            retryable: true,
        })?;
        if status.is_success() {
            let parsed: ClassifyResponse = serde_json::from_str(&text)
                .map_err(|e| OracleError::Protocol(format!("bad response json: {e}")))?;
            return Ok(OracleVerdict {
                label: parsed.label,
                scores: parsed.scores,
            });
        }
        if status.is_server_error() {
            return Err(OracleError::Transport {
                message: format!("server error {status}"),
                retryable: true,
            });
        }
        let detail = serde_json::from_str::<ErrorResponse>(&text)
            .map(|e| e.error)
            .unwrap_or(text);
        Err(OracleError::BadRequest(format!("{status}: {detail}")))
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }
}
