//! Cloud-vendor adapter: maps vendor classification replies onto
//! [`OracleVerdict`] behind the same [`Oracle`] trait. Only the interface
//! and a stub-backed test harness live here; live vendor calls are out of
//! scope. Credentials come exclusively from environment variables.

use std::collections::HashMap;
use std::time::Duration;

use super::{Oracle, OracleError, OracleVerdict, QueryLedger};
use crate::metrics::Image;
use crate::models::argmax;

/// API credential, sourced from the environment and never from files or
/// command lines.
#[derive(Debug, Clone)]
pub struct Credentials {
    api_key: String,
}

impl Credentials {
    /// Reads the credential from `var`; absence is a configuration error.
    pub fn from_env(var: &str) -> Result<Self, OracleError> {
        match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(Self { api_key: v }),
            _ => Err(OracleError::MissingCredentials(var.to_string())),
        }
    }

    pub fn api_key(&self) -> &str {
        &self.api_key
    }
}

/// Conventional environment variable for a vendor's key, e.g.
/// `ACME_VISION_API_KEY` for vendor id `acme-vision`.
pub fn default_env_var(vendor_id: &str) -> String {
    let upper: String = vendor_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{upper}_API_KEY")
}

/// One classification request as a vendor sees it.
pub struct VendorRequest<'a> {
    pub image_png: &'a [u8],
    pub image_id: &'a str,
}

/// What a vendor endpoint can answer.
#[derive(Debug, Clone)]
pub enum VendorReply {
    /// (label, confidence) pairs; the adapter picks the highest confidence.
    Labels(Vec<(String, f64)>),
    /// Throttled; the adapter backs off and retries.
    RateLimited,
    /// Vendor-side failure, surfaced verbatim.
    Error(String),
}

/// Transport for one vendor's API. Implementations own serialization and
/// authentication details; the adapter owns retries and label mapping.
pub trait VendorTransport: Send + Sync {
    fn vendor_id(&self) -> &str;
    fn send(&self, request: &VendorRequest, creds: &Credentials)
        -> Result<VendorReply, OracleError>;
}

/// Oracle handle over a vendor transport. Label-only: vendor confidences
/// pick the top label but are not exposed as scores by default, matching
/// the strictest black-box setting.
pub struct CloudOracle<T: VendorTransport> {
    transport: T,
    creds: Credentials,
    /// Raw vendor label → canonical label. Unmapped labels pass through.
    synonyms: HashMap<String, String>,
    max_attempts: u32,
    backoff: Duration,
    scores_enabled: bool,
    ledger: QueryLedger,
}

impl<T: VendorTransport> CloudOracle<T> {
    pub fn new(transport: T, creds: Credentials) -> Self {
        Self {
            transport,
            creds,
            synonyms: HashMap::new(),
            max_attempts: 3,
            backoff: Duration::from_millis(200),
            scores_enabled: false,
            ledger: QueryLedger::new(),
        }
    }

    /// Reads the credential from the vendor's conventional environment
    /// variable (see [`default_env_var`]).
    pub fn from_env(transport: T) -> Result<Self, OracleError> {
        let creds = Credentials::from_env(&default_env_var(transport.vendor_id()))?;
        Ok(Self::new(transport, creds))
    }

    /// Declares groups of interchangeable labels; every member maps to the
    /// group's first entry.
    pub fn with_synonym_groups(mut self, groups: &[&[&str]]) -> Self {
        for group in groups {
            if let Some((canonical, rest)) = group.split_first() {
                for raw in rest {
                    self.synonyms
                        .insert((*raw).to_string(), (*canonical).to_string());
                }
                self.synonyms
                    .insert((*canonical).to_string(), (*canonical).to_string());
            }
        }
        self
    }

    pub fn with_retry(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_scores(mut self, enabled: bool) -> Self {
        self.scores_enabled = enabled;
        self
    }

    pub fn vendor_id(&self) -> &str {
        self.transport.vendor_id()
    }

    fn canonical(&self, raw: &str) -> String {
        self.synonyms
            .get(raw)
            .cloned()
            .unwrap_or_else(|| raw.to_string())
    }
}

impl<T: VendorTransport> Oracle for CloudOracle<T> {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        if !img.is_integral() {
            return Err(OracleError::NonIntegralImage);
        }
        let png = img.to_png_bytes()?;
        let request = VendorRequest {
            image_png: &png,
            image_id,
        };
        for attempt in 0..self.max_attempts {
            // Every attempt is a transmitted request.
            self.ledger.record(image_id);
            match self.transport.send(&request, &self.creds)? {
                VendorReply::Labels(pairs) => {
                    if pairs.is_empty() {
                        return Err(OracleError::Protocol(
                            "vendor returned an empty label list".into(),
                        ));
                    }
                    let confidences: Vec<f64> = pairs.iter().map(|(_, c)| *c).collect();
                    let best = argmax(&confidences);
                    let label = self.canonical(&pairs[best].0);
                    let scores = self.scores_enabled.then_some(confidences);
                    return Ok(OracleVerdict { label, scores });
                }
                VendorReply::RateLimited => {
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    }
                }
                VendorReply::Error(msg) => return Err(OracleError::Vendor(msg)),
            }
        }
        Err(OracleError::RateLimited {
            attempts: self.max_attempts,
        })
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }
}
