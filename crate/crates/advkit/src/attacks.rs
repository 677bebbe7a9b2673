//! White-box crafting algorithms run against local substitute models.
//!
//! Four attacks share one projected-ascent engine: single-step FGSM,
//! iterated sign-gradient PGD on cross-entropy, FFL-PGD (PGD on a composite
//! margin-plus-featuremap loss), and an ensemble variant ascending the mean
//! cross-entropy of several models. Budgets are enforced in 0-255 intensity
//! units: every result is quantized to the 8-bit grid and clipped so its
//! ℓ∞ distance from the original stays within ε even for fractional ε.
//!
//! Nothing in this module talks to an oracle; crafting sees only the local
//! models. Every attack is fully deterministic in (model, image, config).

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Image, MetricError, MetricReport};
use crate::models::{softmax, ConvNet, ModelError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient encountered")]
    NonFiniteGradient,
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble models disagree: {0}")]
    EnsembleMismatch(String),
    #[error("original image must sit on the 8-bit grid; quantize it first")]
    NonIntegralOriginal,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Which crafting algorithm a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    FflPgd,
    Ensemble,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::FflPgd => "ffl-pgd",
            AttackKind::Ensemble => "ensemble",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, AttackError> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "ffl-pgd" => Ok(AttackKind::FflPgd),
            "ensemble" => Ok(AttackKind::Ensemble),
            other => Err(AttackError::BadConfig(format!(
                "unknown attack kind '{other}'"
            ))),
        }
    }
}

/// How the margin loss clamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLossMode {
    /// `max(margin, -κ)`: the loss is bounded below, ascent never stops.
    #[default]
    Literal,
    /// `min(margin, κ)`: ascent saturates once the margin reaches κ.
    SaturatingMargin,
}

/// Knobs for one attack run. Intensity quantities (`epsilon`, `alpha`) are
/// on the 0-255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ budget in intensity units. Zero is allowed as a degenerate no-op
    /// (the projection collapses the result onto the original).
    pub epsilon: f64,
    /// Iteration count; FGSM fixes this to 1.
    pub steps: usize,
    /// Per-step size in intensity units; FGSM fixes this to ε.
    pub alpha: f64,
    /// Featuremap-loss weight (FFL-PGD only).
    pub beta: f64,
    /// Margin clamp (FFL-PGD only), in logit units.
    pub kappa: f64,
    #[serde(default)]
    pub class_loss_mode: ClassLossMode,
    /// Carried for provenance in reports; the algorithms themselves are
    /// deterministic and draw nothing from it.
    #[serde(default)]
    pub seed: u64,
}

/// Default featuremap-loss weight.
pub const DEFAULT_BETA: f64 = 0.1;
/// Default margin clamp.
pub const DEFAULT_KAPPA: f64 = 200.0;
/// Default iteration count for the iterated attacks.
pub const DEFAULT_STEPS: usize = 20;

/// Default step size for a given budget: ε/4, floored at 1 intensity level.
pub fn default_alpha(epsilon: f64) -> f64 {
    (epsilon / 4.0).max(1.0)
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            alpha: epsilon,
            beta: 0.0,
            kappa: 0.0,
            class_loss_mode: ClassLossMode::Literal,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps: DEFAULT_STEPS,
            alpha: default_alpha(epsilon),
            beta: 0.0,
            kappa: 0.0,
            class_loss_mode: ClassLossMode::Literal,
            seed: 0,
        }
    }

    pub fn ffl_pgd(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::FflPgd,
            epsilon,
            steps: DEFAULT_STEPS,
            alpha: default_alpha(epsilon),
            beta: DEFAULT_BETA,
            kappa: DEFAULT_KAPPA,
            class_loss_mode: ClassLossMode::Literal,
            seed: 0,
        }
    }

    pub fn ensemble(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Ensemble,
            epsilon,
            steps: DEFAULT_STEPS,
            alpha: default_alpha(epsilon),
            beta: 0.0,
            kappa: 0.0,
            class_loss_mode: ClassLossMode::Literal,
            seed: 0,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_class_loss_mode(mut self, mode: ClassLossMode) -> Self {
        self.class_loss_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let fin = |name: &str, v: f64| -> Result<(), AttackError> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(AttackError::BadConfig(format!("{name} is not finite")))
            }
        };
        fin("epsilon", self.epsilon)?;
        fin("alpha", self.alpha)?;
        fin("beta", self.beta)?;
        fin("kappa", self.kappa)?;
        if self.epsilon < 0.0 {
            return Err(AttackError::BadConfig("epsilon must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(AttackError::BadConfig("steps must be >= 1".into()));
        }
        if self.alpha < 0.0 || (self.epsilon > 0.0 && self.alpha == 0.0) {
            return Err(AttackError::BadConfig(
                "alpha must be positive (zero only allowed when epsilon is zero)".into(),
            ));
        }
        if self.beta < 0.0 {
            return Err(AttackError::BadConfig("beta must be >= 0".into()));
        }
        if self.kappa < 0.0 {
            return Err(AttackError::BadConfig("kappa must be >= 0".into()));
        }
        if self.kind == AttackKind::Fgsm && (self.steps != 1 || self.alpha != self.epsilon) {
            return Err(AttackError::BadConfig(
                "fgsm requires steps = 1 and alpha = epsilon".into(),
            ));
        }
        Ok(())
    }
}

/// ℓ∞ ball around an original image, intersected with the valid pixel range.
#[derive(Debug, Clone)]
pub struct LinfBall {
    center: Image,
    radius: f64,
}

impl LinfBall {
    pub fn new(center: Image, radius: f64) -> Result<Self, AttackError> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(AttackError::BadConfig(format!(
                "ball radius {radius} must be finite and >= 0"
            )));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &Image {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Per-pixel clip of `x` into `[center-ε, center+ε] ∩ [0, 255]`.
    pub fn project(&self, x: &Array3<f64>) -> Result<Image, AttackError> {
        if x.dim() != self.center.shape() {
            return Err(AttackError::Metric(MetricError::ShapeMismatch {
                a: x.dim(),
                b: self.center.shape(),
            }));
        }
        let c = self.center.pixels();
        let r = self.radius;
        let data = Array3::from_shape_fn(x.dim(), |idx| {
            let lo = (c[idx] - r).max(0.0);
            let hi = (c[idx] + r).min(255.0);
            x[idx].clamp(lo, hi)
        });
        Ok(Image::new(data).expect("projection output is in range"))
    }

    /// Rounds `x` to the 8-bit grid, then clips to the integer points that
    /// satisfy the budget: `[⌈center-ε⌉, ⌊center+ε⌋] ∩ [0, 255]`. Plain
    /// rounding alone can step outside a fractional-ε ball. Requires an
    /// integral center (8-bit originals).
    pub fn quantize_feasible(&self, x: &Array3<f64>) -> Result<Image, AttackError> {
        if !self.center.is_integral() {
            return Err(AttackError::NonIntegralOriginal);
        }
        if x.dim() != self.center.shape() {
            return Err(AttackError::Metric(MetricError::ShapeMismatch {
                a: x.dim(),
                b: self.center.shape(),
            }));
        }
        let c = self.center.pixels();
        let r = self.radius;
        let data = Array3::from_shape_fn(x.dim(), |idx| {
            let lo = (c[idx] - r).ceil().max(0.0);
            let hi = (c[idx] + r).floor().min(255.0);
            x[idx].round().clamp(lo, hi)
        });
        Ok(Image::new(data).expect("feasible grid points are in range"))
    }
}

/// Per-pixel clip of `x` into the ball (free-function spelling).
pub fn project_linf(x: &Array3<f64>, ball: &LinfBall) -> Result<Image, AttackError> {
    ball.project(x)
}

/// Outcome of one crafting run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// The quantized adversarial image (what would cross the wire).
    pub adversarial: Image,
    /// Whether the local model(s) misclassify `adversarial` relative to the
    /// crafting label. Oracle-side verification is a separate, later query.
    pub success: bool,
    /// Oracle queries consumed while crafting: always 0 here. The harness
    /// accounts for labeling and verification queries.
    pub queries_used: u32,
    /// Quality of `adversarial` against the original.
    pub metrics: MetricReport,
    /// Echo of the config that produced this result.
    pub config: AttackConfig,
}

/// sgn with sgn(0) = 0. `f64::signum` maps +0.0 to 1.0, which would turn a
/// zero gradient into a full step.
fn sgn0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Margin loss over logits: `max(max{Z_i : i≠t} - Z_t, -κ)` in literal mode,
/// `min(margin, κ)` in saturating mode. Ties in the inner max take the first
/// index; at the clamp boundary the margin branch wins.
pub fn class_loss(
    z: &Array1<f64>,
    t: usize,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<f64, AttackError> {
    let (margin, _) = margin_and_runner_up(z, t)?;
    Ok(match mode {
        ClassLossMode::Literal => {
            if margin >= -kappa {
                margin
            } else {
                -kappa
            }
        }
        ClassLossMode::SaturatingMargin => {
            if margin <= kappa {
                margin
            } else {
                kappa
            }
        }
    })
}

/// (max{Z_i : i≠t} - Z_t, argmax index), first-max tie convention.
fn margin_and_runner_up(z: &Array1<f64>, t: usize) -> Result<(f64, usize), AttackError> {
    if t >= z.len() {
        return Err(AttackError::LabelOutOfRange {
            label: t,
            classes: z.len(),
        });
    }
    if z.len() < 2 {
        return Err(AttackError::BadConfig(
            "margin loss needs at least 2 classes".into(),
        ));
    }
    let mut best: Option<usize> = None;
    for i in 0..z.len() {
        if i == t {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                if z[i] > z[b] {
                    best = Some(i)
                }
            }
        }
    }
    let b = best.expect("len >= 2 guarantees a runner-up");
    Ok((z[b] - z[t], b))
}

/// Gradient of [`class_loss`] with respect to the logits. Zero where the
/// clamp is active; at the exact boundary the margin branch wins (first
/// argument of the max/min).
fn class_loss_logit_seed(
    z: &Array1<f64>,
    t: usize,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<Array1<f64>, AttackError> {
    let (margin, runner_up) = margin_and_runner_up(z, t)?;
    let active = match mode {
        ClassLossMode::Literal => margin >= -kappa,
        ClassLossMode::SaturatingMargin => margin <= kappa,
    };
    let mut seed = Array1::zeros(z.len());
    if active {
        seed[runner_up] = 1.0;
        seed[t] = -1.0;
    }
    Ok(seed)
}

/// Euclidean distance between the feature taps of two images.
pub fn featuremap_loss(model: &ConvNet, adv: &Image, orig: &Image) -> Result<f64, AttackError> {
    let fa = model.activations(adv)?.featuremap;
    let fo = model.activations(orig)?.featuremap;
    let sq: f64 = fa
        .iter()
        .zip(fo.iter())
        .map(|(a, o)| (a - o) * (a - o))
        .sum();
    Ok(sq.sqrt())
}

/// Margin loss on the adversarial logits plus β times the featuremap
/// distance to the original.
pub fn composite_loss(
    model: &ConvNet,
    adv: &Image,
    orig: &Image,
    t: usize,
    beta: f64,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<f64, AttackError> {
    let acts = model.activations(adv)?;
    let cls = class_loss(&acts.logits, t, kappa, mode)?;
    Ok(cls + beta * featuremap_loss(model, adv, orig)?)
}

/// Pixel-unit input gradient of the composite loss at `adv`. The featuremap
/// term's gradient is taken as zero when the two taps coincide (the norm is
/// not differentiable there).
pub(crate) fn composite_input_gradient(
    model: &ConvNet,
    adv: &Image,
    orig_featuremap: &Array3<f64>,
    t: usize,
    beta: f64,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<Array3<f64>, AttackError> {
    let acts = model.activations(adv)?;
    let logit_seed = class_loss_logit_seed(&acts.logits, t, kappa, mode)?;
    let diff = &acts.featuremap - orig_featuremap;
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let feature_seed = if beta != 0.0 && norm > 0.0 {
        Some(diff.mapv(|v| beta * v / norm))
    } else {
        None
    };
    Ok(model.input_gradient(&acts, &logit_seed, feature_seed.as_ref())?)
}

/// Pixel-unit input gradient of `composite_loss` at `adv`.
pub fn composite_loss_input_gradient(
    model: &ConvNet,
    adv: &Image,
    orig: &Image,
    t: usize,
    beta: f64,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<Array3<f64>, AttackError> {
    let orig_featuremap = model.activations(orig)?.featuremap;
    composite_input_gradient(model, adv, &orig_featuremap, t, beta, kappa, mode)
}

/// Pixel-unit input gradient of the margin loss `class_loss` evaluated on
/// the model's logits at `x`. Zero where the clamp is active.
pub fn class_loss_input_gradient(
    model: &ConvNet,
    x: &Image,
    t: usize,
    kappa: f64,
    mode: ClassLossMode,
) -> Result<Array3<f64>, AttackError> {
    let acts = model.activations(x)?;
    let seed = class_loss_logit_seed(&acts.logits, t, kappa, mode)?;
    Ok(model.input_gradient(&acts, &seed, None)?)
}

/// Pixel-unit input gradient of `featuremap_loss` with respect to `adv`,
/// taken as zero where the two featuremaps coincide (the norm is not
/// differentiable there).
pub fn featuremap_loss_input_gradient(
    model: &ConvNet,
    adv: &Image,
    orig: &Image,
) -> Result<Array3<f64>, AttackError> {
    let acts = model.activations(adv)?;
    let diff = &acts.featuremap - &model.activations(orig)?.featuremap;
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let (h, w, c) = adv.shape();
        return Ok(Array3::zeros((h, w, c)));
    }
    let seed = diff.mapv(|v| v / norm);
    let zeros = Array1::zeros(acts.logits.len());
    Ok(model.input_gradient(&acts, &zeros, Some(&seed))?)
}

/// Pixel-unit input gradient of cross-entropy against class `t` at `x`.
pub fn cross_entropy_input_gradient(
    model: &ConvNet,
    x: &Image,
    t: usize,
) -> Result<Array3<f64>, AttackError> {
    let acts = model.activations(x)?;
    let mut seed = softmax(&acts.logits);
    seed[t] -= 1.0;
    Ok(model.input_gradient(&acts, &seed, None)?)
}

fn ensure_finite(g: &Array3<f64>) -> Result<(), AttackError> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AttackError::NonFiniteGradient)
    }
}

/// Shared engine: `steps` iterations of `x ← Π(x + α·sgn(∇))`, starting at
/// the original (no random start), then quantization onto the feasible grid.
fn ascend(
    grad_fn: &dyn Fn(&Image) -> Result<Array3<f64>, AttackError>,
    orig: &Image,
    config: &AttackConfig,
) -> Result<Image, AttackError> {
    let ball = LinfBall::new(orig.clone(), config.epsilon)?;
    let mut x = orig.clone();
    for _ in 0..config.steps {
        let g = grad_fn(&x)?;
        ensure_finite(&g)?;
        let stepped = x.pixels() + &g.mapv(|v| config.alpha * sgn0(v));
        x = ball.project(&stepped)?;
    }
    ball.quantize_feasible(x.pixels())
}

fn finalize(
    escaped: &dyn Fn(&Image) -> Result<bool, AttackError>,
    orig: &Image,
    adv: Image,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    let metrics = MetricReport::between(orig, &adv)?;
    let success = escaped(&adv)?;
    Ok(AttackResult {
        adversarial: adv,
        success,
        queries_used: 0,
        metrics,
        config: config.clone(),
    })
}

fn check_label(model: &ConvNet, t: usize) -> Result<(), AttackError> {
    if t >= model.num_classes() {
        return Err(AttackError::LabelOutOfRange {
            label: t,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

fn check_original(orig: &Image) -> Result<(), AttackError> {
    if !orig.is_integral() {
        return Err(AttackError::NonIntegralOriginal);
    }
    Ok(())
}

/// Single sign-gradient step of size ε on cross-entropy.
pub fn fgsm(model: &ConvNet, orig: &Image, t: usize, epsilon: f64) -> Result<AttackResult, AttackError> {
    let config = AttackConfig::fgsm(epsilon);
    run_single(model, orig, t, &config)
}

/// Iterated projected sign-gradient ascent on cross-entropy.
pub fn pgd(
    model: &ConvNet,
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    if config.kind != AttackKind::Pgd {
        return Err(AttackError::BadConfig(format!(
            "pgd called with kind {}",
            config.kind
        )));
    }
    run_single(model, orig, t, config)
}

/// PGD ascending the clamped margin loss instead of cross-entropy. This is
/// exactly the featuremap attack with β = 0, exposed on its own so the two
/// can be compared.
pub fn pgd_with_class_loss(
    model: &ConvNet,
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    check_label(model, t)?;
    check_original(orig)?;
    let grad = |x: &Image| {
        let acts = model.activations(x)?;
        let seed = class_loss_logit_seed(&acts.logits, t, config.kappa, config.class_loss_mode)?;
        Ok(model.input_gradient(&acts, &seed, None)?)
    };
    let adv = ascend(&grad, orig, config)?;
    let escaped = |img: &Image| Ok(model.predict(img)? != t);
    finalize(&escaped, orig, adv, config)
}

/// PGD on the composite loss: clamped margin plus β times the featuremap
/// distance to the original.
pub fn ffl_pgd(
    model: &ConvNet,
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    if config.kind != AttackKind::FflPgd {
        return Err(AttackError::BadConfig(format!(
            "ffl_pgd called with kind {}",
            config.kind
        )));
    }
    config.validate()?;
    check_label(model, t)?;
    check_original(orig)?;
    let orig_featuremap = model.activations(orig)?.featuremap;
    let grad = |x: &Image| {
        composite_input_gradient(
            model,
            x,
            &orig_featuremap,
            t,
            config.beta,
            config.kappa,
            config.class_loss_mode,
        )
    };
    let adv = ascend(&grad, orig, config)?;
    let escaped = |img: &Image| Ok(model.predict(img)? != t);
    finalize(&escaped, orig, adv, config)
}

fn run_single(
    model: &ConvNet,
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    check_label(model, t)?;
    check_original(orig)?;
    let grad = |x: &Image| cross_entropy_input_gradient(model, x, t);
    let adv = ascend(&grad, orig, config)?;
    let escaped = |img: &Image| Ok(model.predict(img)? != t);
    finalize(&escaped, orig, adv, config)
}

/// PGD ascending the mean cross-entropy of several models. A single-model
/// list degenerates to plain PGD; an empty list is an error. Success means
/// every model in the list misclassifies the result.
pub fn ensemble_attack(
    models: &[&ConvNet],
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    if config.kind != AttackKind::Ensemble {
        return Err(AttackError::BadConfig(format!(
            "ensemble_attack called with kind {}",
            config.kind
        )));
    }
    config.validate()?;
    if models.is_empty() {
        return Err(AttackError::EmptyEnsemble);
    }
    let shape = models[0].input_shape();
    let classes = models[0].num_classes();
    for (i, m) in models.iter().enumerate() {
        if m.input_shape() != shape {
            return Err(AttackError::EnsembleMismatch(format!(
                "model {i} expects input {:?}, model 0 expects {:?}",
                m.input_shape(),
                shape
            )));
        }
        if m.num_classes() != classes {
            return Err(AttackError::EnsembleMismatch(format!(
                "model {i} has {} classes, model 0 has {}",
                m.num_classes(),
                classes
            )));
        }
    }
    check_label(models[0], t)?;
    check_original(orig)?;
    let k = models.len() as f64;
    let grad = |x: &Image| -> Result<Array3<f64>, AttackError> {
        let mut acc: Option<Array3<f64>> = None;
        for m in models {
            let g = cross_entropy_input_gradient(m, x, t)?;
            acc = Some(match acc {
                None => g,
                Some(a) => a + g,
            });
        }
        Ok(acc.expect("non-empty ensemble").mapv(|v| v / k))
    };
    let adv = ascend(&grad, orig, config)?;
    let escaped = |img: &Image| {
        for m in models {
            if m.predict(img)? == t {
                return Ok(false);
            }
        }
        Ok(true)
    };
    finalize(&escaped, orig, adv, config)
}

/// Dispatch on `config.kind`. Non-ensemble kinds require exactly one model.
pub fn craft(
    models: &[&ConvNet],
    orig: &Image,
    t: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    match config.kind {
        AttackKind::Ensemble => ensemble_attack(models, orig, t, config),
        kind => {
            if models.len() != 1 {
                return Err(AttackError::BadConfig(format!(
                    "{kind} expects exactly one model, got {}",
                    models.len()
                )));
            }
            match kind {
                AttackKind::Fgsm | AttackKind::Pgd => run_single(models[0], orig, t, config),
                AttackKind::FflPgd => ffl_pgd(models[0], orig, t, config),
                AttackKind::Ensemble => unreachable!(),
            }
        }
    }
}
