//! Black-box transfer attacks on image classifiers, desk scale.
//!
//! The toolkit trains a local substitute for a black-box classifier from
//! label-only queries, crafts adversarial examples against the substitute
//! (FGSM, PGD, FFL-PGD with a featuremap loss, ensemble PGD), verifies them
//! with a second query per image, and grades the results with PSNR/SSIM/L∞
//! and escape-rate metrics. Preprocessing and training-time defenses are
//! included, along with an experiment harness and the `attackctl` CLI.

pub mod attacks;
pub mod defenses;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod substitute;

#[cfg(test)]
pub(crate) mod testutil;

pub use attacks::{AttackConfig, AttackKind, AttackResult, ClassLossMode};
pub use defenses::{DefenseChain, DefenseStage};
pub use harness::{
    run_attack_experiment, run_with_oracle, AttackTemplate, DatasetSpec, ExperimentConfig,
    ExperimentReport, OracleSpec, SubstituteConfig,
};
pub use metrics::{Image, MetricReport};
pub use models::{ArchId, ConvNet, LabeledDataset, TrainHyper};
pub use oracle::{LocalOracle, Oracle, OracleVerdict, QueryLedger};
pub use substitute::{Substitute, SubstituteSpec};
