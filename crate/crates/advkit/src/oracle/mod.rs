//! The black-box boundary. Attack code sees target models only through the
//! [`Oracle`] trait: an image goes in, a label (and optionally scores) comes
//! out, and a [`QueryLedger`] counts every transmitted request per image id.
//!
//! Three oracle flavors live here: [`LocalOracle`] wraps an in-process
//! model, [`client::HttpOracle`] talks to the mock HTTP service in
//! [`service`], and [`cloud::CloudOracle`] adapts cloud-vendor transports
//! (interface and stub tests only; live calls are out of scope).

pub mod client;
pub mod cloud;
pub mod service;

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Image, MetricError};
use crate::models::{argmax, softmax, ConvNet, ModelError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("the wire carries 8-bit images; quantize before classify")]
    NonIntegralImage,
    #[error("oracle expects input {want:?}, got {got:?}")]
    ShapeUnsupported {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("{names} class names for a {classes}-class model")]
    ClassNameCount { names: usize, classes: usize },
    #[error("transport failure (retryable: {retryable}): {message}")]
    Transport { message: String, retryable: bool },
    #[error("service rejected request: {0}")]
    BadRequest(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("missing credentials: set the {0} environment variable")]
    MissingCredentials(String),
    #[error("vendor error: {0}")]
    Vendor(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl OracleError {
    /// Whether a retry with the same request could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            OracleError::Transport {
                retryable: true,
                ..
            }
        )
    }
}

/// What an oracle says about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub label: String,
    /// Per-class confidences; present only when the oracle exposes them.
    /// When present, `label` is the class with the highest score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Atomic per-image-id query accounting. Counts only go up; the total is
/// always the sum of the per-image counts.
#[derive(Debug, Default)]
pub struct QueryLedger {
    inner: Mutex<LedgerInner>,
}

#[derive(Debug, Default)]
struct LedgerInner {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one transmitted request for `image_id`.
    pub fn record(&self, image_id: &str) {
        let mut inner = self.inner.lock().expect("ledger lock");
        *inner.counts.entry(image_id.to_string()).or_insert(0) += 1;
        inner.total += 1;
    }

    pub fn count(&self, image_id: &str) -> u64 {
        let inner = self.inner.lock().expect("ledger lock");
        inner.counts.get(image_id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.inner.lock().expect("ledger lock").total
    }

    /// Per-image counts, ordered by image id.
    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.inner.lock().expect("ledger lock").counts.clone()
    }
}

/// The only channel through which attack code may observe a target model.
pub trait Oracle: Send + Sync {
    /// Labels one 8-bit image, charging one query to `image_id`.
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError>;

    /// Query accounting for this handle.
    fn ledger(&self) -> &QueryLedger;
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        (**self).classify(img, image_id)
    }

    fn ledger(&self) -> &QueryLedger {
        (**self).ledger()
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        (**self).classify(img, image_id)
    }

    fn ledger(&self) -> &QueryLedger {
        (**self).ledger()
    }
}

/// In-process oracle wrapping a trained model. Label-only by default.
pub struct LocalOracle {
    model: ConvNet,
    class_names: Vec<String>,
    scores_enabled: bool,
    ledger: QueryLedger,
}

impl LocalOracle {
    pub fn new(model: ConvNet, class_names: Vec<String>) -> Result<Self, OracleError> {
        if class_names.len() != model.num_classes() {
            return Err(OracleError::ClassNameCount {
                names: class_names.len(),
                classes: model.num_classes(),
            });
        }
        Ok(Self {
            model,
            class_names,
            scores_enabled: false,
            ledger: QueryLedger::new(),
        })
    }

    /// Opt in to returning per-class confidences alongside the label.
    pub fn with_scores(mut self, enabled: bool) -> Self {
        self.scores_enabled = enabled;
        self
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    pub(crate) fn verdict_for(&self, img: &Image) -> Result<OracleVerdict, OracleError> {
        if !img.is_integral() {
            return Err(OracleError::NonIntegralImage);
        }
        let got = (img.height(), img.width(), img.channels());
        let want = self.model.input_shape();
        if got != want {
            return Err(OracleError::ShapeUnsupported { got, want });
        }
        let logits = self.model.logits(img)?;
        let idx = argmax(logits.as_slice().expect("contiguous logits"));
        let scores = if self.scores_enabled {
            Some(softmax(&logits).to_vec())
        } else {
            None
        };
        Ok(OracleVerdict {
            label: self.class_names[idx].clone(),
            scores,
        })
    }
}

impl Oracle for LocalOracle {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        let verdict = self.verdict_for(img)?;
        self.ledger.record(image_id);
        Ok(verdict)
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchId;
    use crate::testutil::rand_image_u8;

    fn oracle_with_model(seed: u64) -> LocalOracle {
        let model = ConvNet::new(ArchId::CnnA, (8, 8), 3, 3, seed).unwrap();
        LocalOracle::new(model, vec!["ant".into(), "bee".into(), "cat".into()]).unwrap()
    }

    #[test]
    fn local_label_is_the_argmax_class_name() {
        let oracle = oracle_with_model(1);
        let img = rand_image_u8(5, 8, 8, 3);
        let verdict = oracle.classify(&img, "img-0").unwrap();
        let logits = oracle.model.logits(&img).unwrap();
        let idx = argmax(logits.as_slice().unwrap());
        assert_eq!(verdict.label, oracle.class_names[idx]);
        assert!(verdict.scores.is_none());
    }

    #[test]
    fn scores_are_opt_in_and_consistent_with_label() {
        let oracle = oracle_with_model(2).with_scores(true);
        let img = rand_image_u8(6, 8, 8, 3);
        let verdict = oracle.classify(&img, "img-0").unwrap();
        let scores = verdict.scores.unwrap();
        assert_eq!(scores.len(), 3);
        let idx = argmax(&scores);
        assert_eq!(verdict.label, oracle.class_names[idx]);
        let sum: f64 = scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_queries_on_one_image_id_show_count_two() {
        let oracle = oracle_with_model(3);
        let img = rand_image_u8(7, 8, 8, 3);
        oracle.classify(&img, "x").unwrap();
        oracle.classify(&img, "x").unwrap();
        assert_eq!(oracle.ledger().count("x"), 2);
        assert_eq!(oracle.ledger().total(), 2);
    }

    #[test]
    fn ledger_total_equals_sum_of_counts() {
        let ledger = QueryLedger::new();
        for i in 0..50u32 {
            let id = format!("img-{}", i % 7);
            ledger.record(&id);
        }
        let snap = ledger.snapshot();
        let sum: u64 = snap.values().sum();
        assert_eq!(ledger.total(), sum);
        assert_eq!(ledger.total(), 50);
        assert_eq!(ledger.count("img-0"), 8);
        assert_eq!(ledger.count("never-seen"), 0);
    }

    #[test]
    fn ledger_is_atomic_under_concurrent_recording() {
        let ledger = std::sync::Arc::new(QueryLedger::new());
        let mut handles = Vec::new();
        for t in 0..8 {
            let l = ledger.clone();
            handles.push(std::thread::spawn(move || {
                for i in 0..200 {
                    l.record(&format!("img-{}", (t + i) % 5));
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(ledger.total(), 1600);
        assert_eq!(ledger.snapshot().values().sum::<u64>(), 1600);
    }

    #[test]
    fn classify_rejects_wrong_shapes_and_fractional_pixels() {
        let oracle = oracle_with_model(4);
        let wrong = rand_image_u8(8, 16, 16, 3);
        assert!(matches!(
            oracle.classify(&wrong, "a"),
            Err(OracleError::ShapeUnsupported { .. })
        ));
        let fractional = crate::testutil::rand_image(9, 8, 8, 3);
        assert!(matches!(
            oracle.classify(&fractional, "a"),
            Err(OracleError::NonIntegralImage)
        ));
        // Failed classifications transmit nothing, so the ledger stays empty.
        assert_eq!(oracle.ledger().total(), 0);
    }

    #[test]
    fn class_name_count_must_match_model() {
        let model = ConvNet::new(ArchId::CnnA, (8, 8), 3, 3, 0).unwrap();
        assert!(matches!(
            LocalOracle::new(model, vec!["one".into()]),
            Err(OracleError::ClassNameCount { .. })
        ));
    }

    #[test]
    fn attack_side_sees_only_an_opaque_handle() {
        // The signature itself is the guarantee: this helper can label and
        // verify through `dyn Oracle` but has no route to logits/gradients.
        fn run_protocol(oracle: &dyn Oracle, img: &Image, id: &str) -> (String, String) {
            let first = oracle.classify(img, id).unwrap().label;
            let second = oracle.classify(img, id).unwrap().label;
            (first, second)
        }
        let oracle = oracle_with_model(5);
        let img = rand_image_u8(10, 8, 8, 3);
        let (a, b) = run_protocol(&oracle, &img, "img-7");
        assert_eq!(a, b);
        assert_eq!(oracle.ledger().count("img-7"), 2);
    }
}
