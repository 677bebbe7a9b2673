//! End-to-end experiment runner: dataset preparation, the two-query oracle
//! protocol (one labeling query per image, one verification query per
//! crafted adversarial), substitute training, attack sweeps over ε, metric
//! aggregation, and report emission.
//!
//! The entry points are [`run_attack_experiment`] (oracle built from the
//! config) and [`run_with_oracle`] (caller supplies the oracle handle, which
//! is how cloud transports plug in). Both return an [`ExperimentReport`]
//! whose rows and aggregates are deterministic for local oracles under a
//! fixed config.

pub mod dataset;
pub mod plot;
pub mod report;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{craft, AttackConfig, AttackError, AttackKind, ClassLossMode};
use crate::defenses::{DefenseChain, DefenseError, DefendedOracle};
use crate::metrics::{escape_rate, Image, MetricError};
use crate::models::{
    load, train, ArchId, ConvNet, ModelError, TrainHyper,
};
use crate::oracle::{Oracle, OracleError, QueryLedger};
use crate::substitute::{
    agreement, label_with_oracle, train_substitute, SubstituteError, SubstituteSpec,
};

pub use dataset::{
    export_dataset, generate_synthetic_dataset, ingest_image_directory, DatasetManifest,
    IngestRecord, IngestedDataset, ManifestItem,
};
pub use report::{emit_report, EmittedFiles};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("manifest {0} lists no images")]
    EmptyManifest(PathBuf),
    #[error("manifest file {file} has label {label:?} not in the class list")]
    UnknownLabel { file: String, label: String },
    #[error("manifest lists {0} more than once")]
    DuplicateFile(String),
    #[error("cannot read image {path}: {message}")]
    UnreadableImage { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("oracle unreachable, aborting with partial report: {reason}")]
    OracleUnreachable {
        reason: String,
        partial: Box<ExperimentReport>,
    },
    #[error("query budget violation for image {image_id}: expected {expected} queries, ledger has {got}")]
    BudgetViolation {
        image_id: String,
        expected: u64,
        got: u64,
    },
    #[error("no transport is wired for cloud vendor {0:?}; implement VendorTransport and use run_with_oracle")]
    VendorUnavailable(String),
    #[error("report is internally inconsistent: {0}")]
    Inconsistent(String),
    #[error("plot rendering failed: {0}")]
    Plot(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Substitute(#[from] SubstituteError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
}

/// Where the experiment's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", rename_all_fields = "kebab-case")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    Directory {
        path: PathBuf,
        manifest: PathBuf,
        size: usize,
    },
}

/// How to reach the target classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", rename_all_fields = "kebab-case")]
pub enum OracleSpec {
    /// A saved model checkpoint plus a JSON array of class names.
    LocalModel { model: PathBuf, labels: PathBuf },
    /// The mock classification service's base URL.
    Http { endpoint: String },
    /// A cloud vendor id. The harness has no live transports; runs with this
    /// spec fail with instructions to wire one through [`run_with_oracle`].
    CloudVendor { vendor: String },
}

/// Substitute-side training plan: backbone architecture, its synthetic
/// pretraining corpus (disjoint from the attack images by construction), and
/// the head-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SubstituteConfig {
    pub backbone: ArchId,
    pub pretrain_classes: usize,
    pub pretrain_per_class: usize,
    pub pretrain_seed: u64,
    pub pretrain_hyper: TrainHyper,
    pub head_hyper: TrainHyper,
}

impl Default for SubstituteConfig {
    fn default() -> Self {
        Self {
            backbone: ArchId::CnnA,
            pretrain_classes: 3,
            pretrain_per_class: 24,
            pretrain_seed: 101,
            pretrain_hyper: TrainHyper {
                epochs: 6,
                batch_size: 16,
                lr: 3e-3,
                ..TrainHyper::default()
            },
            head_hyper: TrainHyper {
                epochs: 25,
                batch_size: 16,
                lr: 5e-2,
                ..TrainHyper::default()
            },
        }
    }
}

/// One attack to sweep. ε comes from the experiment's ε list; unset fields
/// fall back to the attack family's defaults (for step size that is
/// max(1, ε/4), recomputed at every ε).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttackTemplate {
    pub kind: AttackKind,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub class_loss_mode: ClassLossMode,
    #[serde(default)]
    pub seed: u64,
}

impl AttackTemplate {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            steps: None,
            alpha: None,
            beta: None,
            kappa: None,
            class_loss_mode: ClassLossMode::default(),
            seed: 0,
        }
    }

    /// Builds the concrete validated config for one ε.
    pub fn materialize(&self, epsilon: f64) -> Result<AttackConfig, AttackError> {
        let mut config = match self.kind {
            AttackKind::Fgsm => AttackConfig::fgsm(epsilon),
            AttackKind::Pgd => AttackConfig::pgd(epsilon),
            AttackKind::FflPgd => AttackConfig::ffl_pgd(epsilon),
            AttackKind::Ensemble => AttackConfig::ensemble(epsilon),
        };
        if let Some(steps) = self.steps {
            config = config.with_steps(steps);
        }
        if let Some(alpha) = self.alpha {
            config = config.with_alpha(alpha);
        }
        if let Some(beta) = self.beta {
            config = config.with_beta(beta);
        }
        if let Some(kappa) = self.kappa {
            config = config.with_kappa(kappa);
        }
        config = config
            .with_class_loss_mode(self.class_loss_mode)
            .with_seed(self.seed);
        config.validate()?;
        Ok(config)
    }
}

/// Full experiment description; serializable as the CLI's JSON config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub substitute: SubstituteConfig,
    pub attacks: Vec<AttackTemplate>,
    #[serde(default)]
    pub defense: Option<DefenseChain>,
    pub epsilons: Vec<f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker bound for labeling, crafting, and verification. 0 means one
    /// worker per available core.
    #[serde(default)]
    pub parallelism: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.attacks.is_empty() {
            return Err(HarnessError::Config(
                "at least one attack is required".to_string(),
            ));
        }
        if self.epsilons.is_empty() {
            return Err(HarnessError::Config(
                "the epsilon list must not be empty".to_string(),
            ));
        }
        for eps in &self.epsilons {
            if !eps.is_finite() || *eps < 0.0 {
                return Err(HarnessError::Config(format!(
                    "epsilon {eps} is not a finite nonnegative number"
                )));
            }
        }
        for pair in self.epsilons.windows(2) {
            if pair[1] <= pair[0] {
                return Err(HarnessError::Config(format!(
                    "epsilons must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let DatasetSpec::Synthetic {
            classes, per_class, ..
        } = &self.dataset
        {
            if *classes < 2 || *per_class == 0 {
                return Err(HarnessError::Config(format!(
                    "synthetic dataset needs >= 2 classes and >= 1 per class, got {classes} x {per_class}"
                )));
            }
        }
        // Every (attack, ε) pair must produce a valid concrete config.
        for template in &self.attacks {
            for &eps in &self.epsilons {
                template.materialize(eps)?;
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let raw = std::fs::read(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

/// One (image, attack, ε) outcome. Under the standard single-attack,
/// single-ε protocol each row costs exactly two oracle queries; in sweeps
/// the shared labeling query is carried by the image's first row and later
/// rows cost one verification query each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub image_id: String,
    pub attack: AttackKind,
    pub epsilon: f64,
    pub success: bool,
    pub psnr_db: f64,
    pub ssim: Option<f64>,
    pub linf: f64,
    pub queries: u32,
    pub oracle_label: String,
    pub adversarial_label: String,
}

/// Per-(attack, ε) summary, in first-appearance order of the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub rows: usize,
    pub escape_rate: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: Option<f64>,
}

/// A query that failed and what it was for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub image_id: String,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub message: String,
}

/// Everything a run produced, including the config echo for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub crate_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Distinct labels the oracle produced during the labeling pass, sorted.
    pub class_names: Vec<String>,
    /// Substitute agreement with the oracle labels on the attack set; absent
    /// when the run aborted before substitute training.
    pub substitute_agreement: Option<f64>,
    pub images_total: usize,
    pub images_labeled: usize,
    /// Ledger total across every oracle query the run issued.
    pub total_queries: u64,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentReport {
    /// Recomputes the aggregates from the rows, in the same grouping order.
    pub fn recomputed_aggregates(&self) -> Result<Vec<AggregateRow>, HarnessError> {
        aggregate_rows(&self.rows)
    }

    /// Checks that stored aggregates match the rows exactly and that per-row
    /// query accounting follows the two-query protocol.
    pub fn verify_consistency(&self) -> Result<(), HarnessError> {
        let recomputed = self.recomputed_aggregates()?;
        if recomputed != self.aggregates {
            return Err(HarnessError::Inconsistent(
                "stored aggregates do not match the rows".to_string(),
            ));
        }
        let mut seen = HashSet::new();
        for row in &self.rows {
            let expected = if seen.insert(row.image_id.as_str()) {
                2
            } else {
                1
            };
            if row.queries != expected {
                return Err(HarnessError::Inconsistent(format!(
                    "row ({}, {}, {}) records {} queries, protocol says {expected}",
                    row.image_id, row.attack, row.epsilon, row.queries
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64. Stage seeds derive from the experiment seed so that two
/// configs differing only in `seed` rerun every stochastic stage
/// differently, while the image set (keyed by its own seed) stays fixed.
fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct PreparedImages {
    ids: Vec<String>,
    images: Vec<Image>,
    set_id: String,
}

fn prepare_images(spec: &DatasetSpec) -> Result<PreparedImages, HarnessError> {
    match spec {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            size,
            seed,
        } => {
            let data = generate_synthetic_dataset(*classes, *per_class, *size, *seed)?;
            let ids = (0..data.len()).map(|i| format!("img-{i:04}")).collect();
            Ok(PreparedImages {
                ids,
                images: data.images().to_vec(),
                set_id: format!("synthetic-c{classes}-n{per_class}-s{size}-seed{seed}"),
            })
        }
        DatasetSpec::Directory {
            path,
            manifest,
            size,
        } => {
            let ingested = ingest_image_directory(path, manifest, *size)?;
            let ids = ingested
                .provenance
                .iter()
                .map(|p| p.file.clone())
                .collect();
            let set_id = format!(
                "directory-{}-n{}-s{size}",
                manifest
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "manifest".to_string()),
                ingested.dataset.len()
            );
            Ok(PreparedImages {
                ids,
                images: ingested.dataset.images().to_vec(),
                set_id,
            })
        }
    }
}

fn build_oracle(spec: &OracleSpec) -> Result<Box<dyn Oracle>, HarnessError> {
    match spec {
        OracleSpec::LocalModel { model, labels } => {
            let net = load(model)?;
            let raw = std::fs::read(labels).map_err(|source| HarnessError::Io {
                path: labels.clone(),
                source,
            })?;
            let names: Vec<String> = serde_json::from_slice(&raw)?;
            Ok(Box::new(crate::oracle::LocalOracle::new(net, names)?))
        }
        OracleSpec::Http { endpoint } => {
            Ok(Box::new(crate::oracle::client::HttpOracle::new(endpoint)?))
        }
        OracleSpec::CloudVendor { vendor } => Err(HarnessError::VendorUnavailable(vendor.clone())),
    }
}

/// Runs the experiment described by `config`, building the oracle from
/// `config.oracle`.
pub fn run_attack_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let oracle = build_oracle(&config.oracle)?;
    run_with_oracle(config, oracle.as_ref())
}

/// Runs the experiment against a caller-supplied oracle handle. The config's
/// defense chain, if any, is applied in front of `oracle`; `config.oracle` is
/// kept only as provenance in the report.
pub fn run_with_oracle(
    config: &ExperimentConfig,
    oracle: &dyn Oracle,
) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let prepared = prepare_images(&config.dataset)?;
    match &config.defense {
        Some(chain) => run_inner(config, DefendedOracle::new(oracle, chain.clone()), prepared),
        None => run_inner(config, oracle, prepared),
    }
}

fn run_inner<O: Oracle>(
    config: &ExperimentConfig,
    oracle: O,
    prepared: PreparedImages,
) -> Result<ExperimentReport, HarnessError> {
    let derive = |stream: u64, s: u64| mix_seed(mix_seed(config.seed, stream), s);
    let workers = if config.parallelism == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        config.parallelism
    };
    let images_total = prepared.ids.len();

    // Query #1 per image: the labeling pass.
    let pairs: Vec<(String, Image)> = prepared
        .ids
        .iter()
        .cloned()
        .zip(prepared.images.iter().cloned())
        .collect();
    let outcome = match label_with_oracle(&oracle, &pairs, workers) {
        Ok(outcome) => outcome,
        Err(SubstituteError::AllQueriesFailed(reason)) => {
            let failures = vec![RunFailure {
                image_id: "*".to_string(),
                stage: "labeling".to_string(),
                attack: None,
                epsilon: None,
                message: reason.clone(),
            }];
            let partial = assemble_report(
                config,
                Vec::new(),
                None,
                images_total,
                0,
                oracle.ledger().total(),
                Vec::new(),
                failures,
            )?;
            return Err(HarnessError::OracleUnreachable {
                reason,
                partial: Box::new(partial),
            });
        }
        Err(other) => return Err(other.into()),
    };
    let mut failures: Vec<RunFailure> = outcome
        .failures
        .iter()
        .map(|f| RunFailure {
            image_id: f.image_id.clone(),
            stage: "labeling".to_string(),
            attack: None,
            epsilon: None,
            message: f.error.clone(),
        })
        .collect();

    // Substitute training on the oracle-labeled attack set. A one-label
    // oracle cannot be attacked, so fail before spending on pretraining.
    if outcome.dataset.num_classes() < 2 {
        return Err(SubstituteError::DegenerateLabelSet(outcome.dataset.num_classes()).into());
    }
    let (h, w, _) = outcome.dataset.image_shape();
    if h != w {
        return Err(HarnessError::Config(format!(
            "experiment images must be square, got {h}x{w}"
        )));
    }
    let sub_cfg = &config.substitute;
    let pretrain_data = generate_synthetic_dataset(
        sub_cfg.pretrain_classes,
        sub_cfg.pretrain_per_class,
        h,
        derive(1, sub_cfg.pretrain_seed),
    )?;
    let mut backbone = ConvNet::new(
        sub_cfg.backbone,
        (h, w),
        3,
        sub_cfg.pretrain_classes,
        derive(2, 0),
    )?;
    let pretrain_hyper = TrainHyper {
        seed: derive(3, sub_cfg.pretrain_hyper.seed),
        ..sub_cfg.pretrain_hyper.clone()
    };
    train(&mut backbone, &pretrain_data, &pretrain_hyper, None)?;
    let head_hyper = TrainHyper {
        seed: derive(4, sub_cfg.head_hyper.seed),
        ..sub_cfg.head_hyper.clone()
    };
    let spec = SubstituteSpec {
        backbone: sub_cfg.backbone,
        head_classes: outcome.dataset.num_classes(),
        hyper: head_hyper,
        image_set_id: prepared.set_id.clone(),
    };
    let substitute = train_substitute(&backbone, &spec, &outcome.dataset)?;
    let substitute_agreement = agreement(&substitute, &outcome.dataset)?;

    // Attack sweep: craft on the substitute, verify via the oracle
    // (query #2 per crafted example).
    let items: Vec<(String, Image, String)> = outcome
        .ids
        .iter()
        .zip(outcome.dataset.images())
        .zip(outcome.dataset.labels())
        .map(|((id, img), &label)| {
            (
                id.clone(),
                img.clone(),
                outcome.dataset.class_names()[label].clone(),
            )
        })
        .collect();
    let pool = if workers > 1 && items.len() > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers.min(items.len()))
                .build()
                .expect("attack thread pool"),
        )
    } else {
        None
    };

    let mut rows: Vec<RunRow> = Vec::new();
    let mut emitted: HashSet<String> = HashSet::new();
    for template in &config.attacks {
        for &epsilon in &config.epsilons {
            let attack_config = template
                .materialize(epsilon)?
                .with_seed(derive(5, template.seed));
            let craft_one = |(id, img, _): &(String, Image, String)| -> Result<
                Result<(crate::attacks::AttackResult, String), String>,
                HarnessError,
            > {
                let target = substitute.model.predict(img)?;
                let result = craft(&[&substitute.model], img, target, &attack_config)?;
                match oracle.classify(&result.adversarial, id) {
                    Ok(verdict) => Ok(Ok((result, verdict.label))),
                    Err(e) => Ok(Err(e.to_string())),
                }
            };
            let block: Vec<Result<(crate::attacks::AttackResult, String), String>> =
                match &pool {
                    Some(pool) => pool.install(|| {
                        use rayon::prelude::*;
                        items.par_iter().map(craft_one).collect::<Result<_, _>>()
                    })?,
                    None => items
                        .iter()
                        .map(craft_one)
                        .collect::<Result<_, _>>()?,
                };

            let mut block_rows = 0usize;
            let mut first_error = None;
            for ((id, _, oracle_label), crafted) in items.iter().zip(block) {
                match crafted {
                    Ok((result, adv_label)) => {
                        let queries = if emitted.insert(id.clone()) { 2 } else { 1 };
                        rows.push(RunRow {
                            image_id: id.clone(),
                            attack: template.kind,
                            epsilon,
                            success: adv_label != *oracle_label,
                            psnr_db: result.metrics.psnr_db,
                            ssim: result.metrics.ssim,
                            linf: result.metrics.linf,
                            queries,
                            oracle_label: oracle_label.clone(),
                            adversarial_label: adv_label,
                        });
                        block_rows += 1;
                    }
                    Err(message) => {
                        if first_error.is_none() {
                            first_error = Some(message.clone());
                        }
                        failures.push(RunFailure {
                            image_id: id.clone(),
                            stage: "verification".to_string(),
                            attack: Some(template.kind),
                            epsilon: Some(epsilon),
                            message,
                        });
                    }
                }
            }
            if block_rows == 0 && !items.is_empty() {
                let reason = first_error.unwrap_or_else(|| "no verification succeeded".to_string());
                let partial = assemble_report(
                    config,
                    outcome.dataset.class_names().to_vec(),
                    Some(substitute_agreement),
                    images_total,
                    items.len(),
                    oracle.ledger().total(),
                    rows.clone(),
                    failures.clone(),
                )?;
                return Err(HarnessError::OracleUnreachable {
                    reason,
                    partial: Box::new(partial),
                });
            }
        }
    }

    audit_budget(oracle.ledger(), &outcome.ids, &rows, &failures)?;
    assemble_report(
        config,
        outcome.dataset.class_names().to_vec(),
        Some(substitute_agreement),
        images_total,
        items.len(),
        oracle.ledger().total(),
        rows,
        failures,
    )
}

/// Per-image query audit: an image with no failures must have been charged
/// exactly one labeling query plus one verification per row.
pub(crate) fn audit_budget(
    ledger: &QueryLedger,
    labeled_ids: &[String],
    rows: &[RunRow],
    failures: &[RunFailure],
) -> Result<(), HarnessError> {
    let failed: HashSet<&str> = failures.iter().map(|f| f.image_id.as_str()).collect();
    for id in labeled_ids {
        if failed.contains(id.as_str()) {
            continue;
        }
        let row_count = rows.iter().filter(|r| &r.image_id == id).count() as u64;
        let expected = 1 + row_count;
        let got = ledger.count(id);
        if got != expected {
            return Err(HarnessError::BudgetViolation {
                image_id: id.clone(),
                expected,
                got,
            });
        }
    }
    Ok(())
}

fn aggregate_rows(rows: &[RunRow]) -> Result<Vec<AggregateRow>, HarnessError> {
    let mut order: Vec<(AttackKind, f64)> = Vec::new();
    for row in rows {
        if !order
            .iter()
            .any(|&(a, e)| a == row.attack && e == row.epsilon)
        {
            order.push((row.attack, row.epsilon));
        }
    }
    let mut aggregates = Vec::with_capacity(order.len());
    for (attack, epsilon) in order {
        let group: Vec<&RunRow> = rows
            .iter()
            .filter(|r| r.attack == attack && r.epsilon == epsilon)
            .collect();
        let verdict_pairs: Vec<(&str, &str)> = group
            .iter()
            .map(|r| (r.oracle_label.as_str(), r.adversarial_label.as_str()))
            .collect();
        let escape = escape_rate(&verdict_pairs)?;
        let mean_psnr_db =
            group.iter().map(|r| r.psnr_db).sum::<f64>() / group.len() as f64;
        let ssims: Vec<f64> = group.iter().filter_map(|r| r.ssim).collect();
        let mean_ssim = if ssims.is_empty() {
            None
        } else {
            Some(ssims.iter().sum::<f64>() / ssims.len() as f64)
        };
        aggregates.push(AggregateRow {
            attack,
            epsilon,
            rows: group.len(),
            escape_rate: escape,
            mean_psnr_db,
            mean_ssim,
        });
    }
    Ok(aggregates)
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    config: &ExperimentConfig,
    class_names: Vec<String>,
    substitute_agreement: Option<f64>,
    images_total: usize,
    images_labeled: usize,
    total_queries: u64,
    rows: Vec<RunRow>,
    failures: Vec<RunFailure>,
) -> Result<ExperimentReport, HarnessError> {
    let aggregates = aggregate_rows(&rows)?;
    Ok(ExperimentReport {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        class_names,
        substitute_agreement,
        images_total,
        images_labeled,
        total_queries,
        rows,
        aggregates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::DefenseStage;
    use crate::models::{accuracy, save};
    use crate::oracle::{LocalOracle, OracleVerdict};

    fn quick_substitute_config() -> SubstituteConfig {
        SubstituteConfig {
            pretrain_classes: 2,
            pretrain_per_class: 8,
            pretrain_hyper: TrainHyper {
                epochs: 2,
                batch_size: 8,
                lr: 3e-3,
                ..TrainHyper::default()
            },
            head_hyper: TrainHyper {
                epochs: 8,
                batch_size: 8,
                lr: 5e-2,
                ..TrainHyper::default()
            },
            ..SubstituteConfig::default()
        }
    }

    /// Trains a small oracle on the same synthetic distribution.
    fn trained_oracle_parts(classes: usize, size: usize) -> (ConvNet, Vec<String>) {
        let data = generate_synthetic_dataset(classes, 12, size, 77).unwrap();
        let mut net = ConvNet::new(ArchId::CnnB, (size, size), 3, classes, 55).unwrap();
        let hyper = TrainHyper {
            epochs: 4,
            batch_size: 12,
            lr: 3e-3,
            seed: 5,
            ..TrainHyper::default()
        };
        train(&mut net, &data, &hyper, None).unwrap();
        assert!(accuracy(&net, &data).unwrap() > 0.9);
        (net, data.class_names().to_vec())
    }

    /// Saves a trained oracle plus its labels file, returning the spec.
    fn saved_oracle(dir: &Path, classes: usize, size: usize) -> OracleSpec {
        let (net, names) = trained_oracle_parts(classes, size);
        let model = dir.join("oracle.akm");
        save(&net, &model).unwrap();
        let labels = dir.join("oracle.labels.json");
        std::fs::write(&labels, serde_json::to_vec(&names).unwrap()).unwrap();
        OracleSpec::LocalModel { model, labels }
    }

    fn base_config(dir: &Path, oracle: OracleSpec) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 2,
                per_class: 3,
                size: 16,
                seed: 3,
            },
            oracle,
            substitute: quick_substitute_config(),
            attacks: vec![AttackTemplate::new(AttackKind::Pgd)],
            defense: None,
            epsilons: vec![4.0],
            output_dir: dir.join("out"),
            seed: 9,
            parallelism: 2,
        }
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = OracleSpec::Http {
            endpoint: "http://127.0.0.1:1".to_string(),
        };
        let mut config = base_config(dir.path(), oracle);

        config.attacks.clear();
        assert!(matches!(config.validate(), Err(HarnessError::Config(_))));

        config.attacks = vec![AttackTemplate::new(AttackKind::Pgd)];
        config.epsilons = vec![2.0, 2.0];
        assert!(matches!(config.validate(), Err(HarnessError::Config(_))));

        config.epsilons = vec![4.0, 2.0];
        assert!(matches!(config.validate(), Err(HarnessError::Config(_))));

        config.epsilons = vec![2.0];
        config.attacks[0].kind = AttackKind::Fgsm;
        config.attacks[0].steps = Some(5);
        assert!(matches!(config.validate(), Err(HarnessError::Attack(_))));
    }

    #[test]
    fn config_json_round_trips_with_kebab_keys() {
        let raw = r#"{
            "dataset": {"source": "synthetic", "classes": 2, "per-class": 4, "size": 16, "seed": 3},
            "oracle": {"kind": "local-model", "model": "oracle.akm", "labels": "labels.json"},
            "attacks": [{"kind": "ffl-pgd", "steps": 10}],
            "epsilons": [2.0, 4.0],
            "output-dir": "out",
            "seed": 7
        }"#;
        let config: ExperimentConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(config.attacks[0].kind, AttackKind::FflPgd);
        assert_eq!(config.attacks[0].steps, Some(10));
        assert_eq!(config.substitute, SubstituteConfig::default());
        assert_eq!(config.parallelism, 0);
        let echoed = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn cloud_vendor_spec_is_rejected_with_guidance() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config(
            dir.path(),
            OracleSpec::CloudVendor {
                vendor: "acme-vision".to_string(),
            },
        );
        assert!(matches!(
            run_attack_experiment(&config),
            Err(HarnessError::VendorUnavailable(v)) if v == "acme-vision"
        ));
    }

    #[test]
    fn zero_epsilon_never_escapes_a_deterministic_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.epsilons = vec![0.0];
        let report = run_attack_experiment(&config).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| !r.success));
        assert!(report.rows.iter().all(|r| r.queries == 2));
        assert_eq!(report.aggregates[0].escape_rate, 0.0);
        assert_eq!(report.total_queries, 12);
        assert!(report.failures.is_empty());
        report.verify_consistency().unwrap();
    }

    #[test]
    fn zero_epsilon_survives_a_defense_chain() {
        // Defense transforms are salted by image id, so the verification
        // query sees the same transform as the labeling query and an
        // untouched image keeps its label.
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.epsilons = vec![0.0];
        config.defense = Some(DefenseChain::new(
            vec![
                DefenseStage::Jpeg { quality: 75 },
                DefenseStage::Randomization {
                    resize_min: 12,
                    resize_max: 16,
                },
            ],
            19,
        ));
        let report = run_attack_experiment(&config).unwrap();
        assert!(report.rows.iter().all(|r| !r.success));
        assert_eq!(report.aggregates[0].escape_rate, 0.0);
        report.verify_consistency().unwrap();
    }

    #[test]
    fn sweep_ledger_arithmetic_holds() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.attacks = vec![
            AttackTemplate {
                steps: Some(2),
                ..AttackTemplate::new(AttackKind::Pgd)
            },
            AttackTemplate::new(AttackKind::Fgsm),
        ];
        config.epsilons = vec![1.0, 2.0];
        let report = run_attack_experiment(&config).unwrap();
        // 6 images, 1 labeling query each, 2 attacks x 2 epsilons verifications.
        assert_eq!(report.rows.len(), 24);
        assert_eq!(report.total_queries, 6 * (1 + 4));
        let query_sum: u64 = report.rows.iter().map(|r| u64::from(r.queries)).sum();
        assert_eq!(query_sum, report.total_queries);
        assert_eq!(report.aggregates.len(), 4);
        assert!(report
            .aggregates
            .iter()
            .all(|a| a.rows == 6 && a.mean_ssim.is_some()));
        report.verify_consistency().unwrap();
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.attacks[0].steps = Some(2);
        let a = run_attack_experiment(&config).unwrap();
        let b = run_attack_experiment(&config).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn experiment_seed_changes_the_substitute_but_not_the_images() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.attacks[0].steps = Some(2);
        let a = run_attack_experiment(&config).unwrap();
        config.seed = 10;
        let b = run_attack_experiment(&config).unwrap();
        // Same oracle labels for the same images.
        assert_eq!(
            a.rows.iter().map(|r| &r.oracle_label).collect::<Vec<_>>(),
            b.rows.iter().map(|r| &r.oracle_label).collect::<Vec<_>>()
        );
        assert_eq!(a.total_queries, b.total_queries);
    }

    #[test]
    fn unreachable_oracle_aborts_with_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config(
            dir.path(),
            OracleSpec::Http {
                endpoint: "http://127.0.0.1:1".to_string(),
            },
        );
        match run_attack_experiment(&config) {
            Err(HarnessError::OracleUnreachable { partial, .. }) => {
                assert!(partial.rows.is_empty());
                assert!(!partial.failures.is_empty());
                assert_eq!(partial.failures[0].stage, "labeling");
                assert_eq!(partial.images_labeled, 0);
            }
            other => panic!("expected OracleUnreachable, got {other:?}"),
        }
    }

    struct CountingOracle {
        inner: LocalOracle,
        extra_charge_on: String,
    }

    impl Oracle for CountingOracle {
        fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
            if image_id == self.extra_charge_on {
                self.inner.ledger().record(image_id);
            }
            self.inner.classify(img, image_id)
        }

        fn ledger(&self) -> &QueryLedger {
            self.inner.ledger()
        }
    }

    #[test]
    fn budget_violations_are_hard_failures() {
        let (net, names) = trained_oracle_parts(2, 16);
        let oracle = CountingOracle {
            inner: LocalOracle::new(net, names).unwrap(),
            extra_charge_on: "img-0002".to_string(),
        };
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(
            dir.path(),
            OracleSpec::Http {
                endpoint: "http://unused.invalid".to_string(),
            },
        );
        config.attacks[0].steps = Some(1);
        match run_with_oracle(&config, &oracle) {
            Err(HarnessError::BudgetViolation {
                image_id,
                expected,
                got,
            }) => {
                assert_eq!(image_id, "img-0002");
                assert_eq!(got, expected + 2);
            }
            other => panic!("expected BudgetViolation, got {other:?}"),
        }
    }

    #[test]
    fn audit_accepts_exact_accounting() {
        let ledger = QueryLedger::new();
        ledger.record("a");
        ledger.record("a");
        ledger.record("b");
        let rows = vec![RunRow {
            image_id: "a".to_string(),
            attack: AttackKind::Pgd,
            epsilon: 2.0,
            success: false,
            psnr_db: 40.0,
            ssim: Some(0.99),
            linf: 2.0,
            queries: 2,
            oracle_label: "x".to_string(),
            adversarial_label: "x".to_string(),
        }];
        let ids = vec!["a".to_string(), "b".to_string()];
        // Image b was labeled but produced no rows and no failures: its
        // single labeling query is the whole expectation.
        audit_budget(&ledger, &ids, &rows, &[]).unwrap();
        ledger.record("b");
        assert!(matches!(
            audit_budget(&ledger, &ids, &rows, &[]),
            Err(HarnessError::BudgetViolation { .. })
        ));
    }

    #[test]
    fn consistency_check_spots_tampered_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = saved_oracle(dir.path(), 2, 16);
        let mut config = base_config(dir.path(), oracle);
        config.attacks[0].steps = Some(1);
        let mut report = run_attack_experiment(&config).unwrap();
        report.verify_consistency().unwrap();
        report.aggregates[0].escape_rate += 0.25;
        assert!(matches!(
            report.verify_consistency(),
            Err(HarnessError::Inconsistent(_))
        ));
    }

    struct ConstOracle {
        ledger: QueryLedger,
    }

    impl Oracle for ConstOracle {
        fn classify(&self, _img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
            self.ledger.record(image_id);
            Ok(OracleVerdict {
                label: "everything-is-a-cat".to_string(),
                scores: None,
            })
        }

        fn ledger(&self) -> &QueryLedger {
            &self.ledger
        }
    }

    #[test]
    fn constant_oracle_surfaces_degenerate_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config(
            dir.path(),
            OracleSpec::Http {
                endpoint: "http://unused.invalid".to_string(),
            },
        );
        let oracle = ConstOracle {
            ledger: QueryLedger::new(),
        };
        assert!(matches!(
            run_with_oracle(&config, &oracle),
            Err(HarnessError::Substitute(
                SubstituteError::DegenerateLabelSet(1)
            ))
        ));
    }
}
