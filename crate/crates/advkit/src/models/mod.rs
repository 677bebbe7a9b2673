//! Desk-scale convolutional classifiers with exact, hand-rolled gradients.
//!
//! Three small architectures share one runtime: plain conv stacks `cnn-a`
//! and `cnn-b`, and a residual `mini-resnet`. All of them expose, besides
//! logits, a featuremap tap: the activation map feeding global average
//! pooling. Attack code differentiates losses built on both outputs through
//! [`ConvNet::input_gradient`], which reports gradients in pixel units
//! (intensities 0..=255).

mod checkpoint;
mod layers;
mod train;

pub use checkpoint::{load, save};
pub use train::{
    accuracy, cross_entropy, softmax, train, AugmentCtx, AugmentFn, OptimizerKind, TrainHyper,
    TrainReport,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Image, MetricError};
use layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, gap_backward, gap_forward,
    maxpool2_backward, maxpool2_forward, relu_forward, res_backward, res_forward, Cache,
    ConvParams, Layer, ResBlock,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match the network's {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("unsupported input size {h}x{w}: sides must be even and at least 8")]
    BadInputSize { h: usize, w: usize },
    #[error("{count} classes is too few (need at least 2)")]
    TooFewClasses { count: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset image {index} has shape {got:?}, expected {expected:?}")]
    MixedShapes {
        index: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("images have {images} entries but labels have {labels}")]
    LengthMismatch { images: usize, labels: usize },
    #[error("gradient seed has {got} logits, network has {expected}")]
    SeedLength { expected: usize, got: usize },
    #[error("featuremap seed shape {got:?} does not match tap shape {expected:?}")]
    FeatureSeedShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("head shape {got:?} does not match (classes, {feat}) plus bias")]
    HeadShape { feat: usize, got: (usize, usize) },
    #[error("unknown architecture '{0}' (expected cnn-a, cnn-b, or mini-resnet)")]
    UnknownArch(String),
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("augment hook: {0}")]
    Augment(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    CnnA,
    CnnB,
    MiniResnet,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::CnnA, ArchId::CnnB, ArchId::MiniResnet];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::CnnA => "cnn-a",
            ArchId::CnnB => "cnn-b",
            ArchId::MiniResnet => "mini-resnet",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "cnn-a" => Ok(ArchId::CnnA),
            "cnn-b" => Ok(ArchId::CnnB),
            "mini-resnet" => Ok(ArchId::MiniResnet),
            other => Err(ModelError::UnknownArch(other.to_string())),
        }
    }
}

/// Images plus integer labels plus class names. Shapes are uniform and every
/// label indexes into `class_names`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        if images.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if images.len() != labels.len() {
            return Err(ModelError::LengthMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        // One class is legal for a dataset (an oracle can answer with a
        // constant label); training is where fewer than two gets rejected.
        if class_names.is_empty() {
            return Err(ModelError::TooFewClasses { count: 0 });
        }
        let expected = images[0].shape();
        for (index, img) in images.iter().enumerate() {
            if img.shape() != expected {
                return Err(ModelError::MixedShapes {
                    index,
                    expected,
                    got: img.shape(),
                });
            }
        }
        for &label in &labels {
            if label >= class_names.len() {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    classes: class_names.len(),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    /// New dataset holding the given rows (indices may repeat).
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ModelError> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
        }
        Self::new(images, labels, self.class_names.clone())
    }
}

/// Forward-pass products of one image: logits, the featuremap at the tap,
/// and the cached state the backward pass needs.
pub struct Activations {
    pub logits: Array1<f64>,
    /// `(C, H, W)` activation map feeding global average pooling.
    pub featuremap: Array3<f64>,
    caches: Vec<Cache>,
}

/// A small convolutional classifier with a featuremap tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    arch: ArchId,
    input_hw: (usize, usize),
    in_channels: usize,
    num_classes: usize,
    feature_dim: usize,
    layers: Vec<Layer>,
}

impl ConvNet {
    /// Builds a fresh network with He-initialized weights drawn from a
    /// ChaCha8 stream seeded by `seed`. Identical arguments produce
    /// bit-identical networks.
    pub fn new(
        arch: ArchId,
        input_hw: (usize, usize),
        in_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let (h, w) = input_hw;
        if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::BadInputSize { h, w });
        }
        if in_channels != 1 && in_channels != 3 {
            return Err(ModelError::InputShape {
                expected: (h, w, 3),
                got: (h, w, in_channels),
            });
        }
        if num_classes < 2 {
            return Err(ModelError::TooFewClasses { count: num_classes });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = in_channels;
        let (layers, feature_dim) = match arch {
            ArchId::CnnA => (
                vec![
                    Layer::Conv(ConvParams::init(c, 8, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv(ConvParams::init(8, 16, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv(ConvParams::init(16, 32, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::FeatureTap,
                    Layer::GlobalAvgPool,
                    Layer::Dense {
                        w: dense_init(num_classes, 32, &mut rng),
                        b: Array1::zeros(num_classes),
                    },
                ],
                32,
            ),
            ArchId::CnnB => (
                vec![
                    Layer::Conv(ConvParams::init(c, 12, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv(ConvParams::init(12, 12, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::Conv(ConvParams::init(12, 24, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv(ConvParams::init(24, 24, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::FeatureTap,
                    Layer::GlobalAvgPool,
                    Layer::Dense {
                        w: dense_init(num_classes, 24, &mut rng),
                        b: Array1::zeros(num_classes),
                    },
                ],
                24,
            ),
            ArchId::MiniResnet => (
                vec![
                    Layer::Conv(ConvParams::init(c, 8, 3, 1, &mut rng)),
                    Layer::Relu,
                    Layer::Res(ResBlock::init(8, 8, 1, &mut rng)),
                    Layer::Res(ResBlock::init(8, 16, 2, &mut rng)),
                    Layer::Res(ResBlock::init(16, 32, 2, &mut rng)),
                    Layer::FeatureTap,
                    Layer::GlobalAvgPool,
                    Layer::Dense {
                        w: dense_init(num_classes, 32, &mut rng),
                        b: Array1::zeros(num_classes),
                    },
                ],
                32,
            ),
        };
        Ok(Self {
            arch,
            input_hw,
            in_channels,
            num_classes,
            feature_dim,
            layers,
        })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Channel count of the featuremap tap (the pooled feature length).
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(p) => p.param_count(),
                Layer::Res(rb) => rb.param_count(),
                Layer::Dense { w, b } => w.len() + b.len(),
                _ => 0,
            })
            .sum()
    }

    /// Expected image shape `(H, W, C)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_hw.0, self.input_hw.1, self.in_channels)
    }

    fn check_input(&self, img: &Image) -> Result<(), ModelError> {
        if img.shape() != self.input_shape() {
            return Err(ModelError::InputShape {
                expected: self.input_shape(),
                got: img.shape(),
            });
        }
        Ok(())
    }

    /// Full forward pass. Pixels are scaled by 1/255 on the way in.
    pub fn activations(&self, img: &Image) -> Result<Activations, ModelError> {
        self.check_input(img)?;
        let mut map = image_to_map(img);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut featuremap: Option<Array3<f64>> = None;
        let mut vec_val: Option<Array1<f64>> = None;
        for layer in &self.layers {
            match layer {
                Layer::Conv(p) => {
                    let x = map;
                    let y = conv_forward(p, &x);
                    caches.push(Cache::Conv { x });
                    map = y;
                }
                Layer::Relu => {
                    let (y, mask) = relu_forward(&map);
                    caches.push(Cache::Relu { mask });
                    map = y;
                }
                Layer::MaxPool2 => {
                    let in_dim = map.dim();
                    let (y, arg) = maxpool2_forward(&map);
                    caches.push(Cache::MaxPool { in_dim, arg });
                    map = y;
                }
                Layer::Res(rb) => {
                    let (y, cache) = res_forward(rb, &map);
                    caches.push(Cache::Res(Box::new(cache)));
                    map = y;
                }
                Layer::FeatureTap => {
                    featuremap = Some(map.clone());
                    caches.push(Cache::Tap);
                }
                Layer::GlobalAvgPool => {
                    let in_dim = map.dim();
                    vec_val = Some(gap_forward(&map));
                    caches.push(Cache::Gap { in_dim });
                }
                Layer::Dense { w, b } => {
                    let x = vec_val.take().expect("dense follows pooling");
                    let y = dense_forward(w, b, &x);
                    caches.push(Cache::Dense { x });
                    vec_val = Some(y);
                }
            }
        }
        Ok(Activations {
            logits: vec_val.expect("network ends in a dense head"),
            featuremap: featuremap.expect("network includes a feature tap"),
            caches,
        })
    }

    pub fn logits(&self, img: &Image) -> Result<Array1<f64>, ModelError> {
        Ok(self.activations(img)?.logits)
    }

    /// Argmax class; ties resolve to the smallest index.
    pub fn predict(&self, img: &Image) -> Result<usize, ModelError> {
        let logits = self.logits(img)?;
        Ok(argmax(logits.as_slice().expect("logits are contiguous")))
    }

    /// Featuremap averaged over space: the feature vector the head consumes.
    pub fn pooled_features(&self, img: &Image) -> Result<Array1<f64>, ModelError> {
        Ok(gap_forward(&self.activations(img)?.featuremap))
    }

    /// Backpropagates seeds planted at the logits and (optionally) at the
    /// featuremap tap down to the input image. The result is in pixel units:
    /// entry `(i, j, c)` is the derivative of the seeded scalar with respect
    /// to the 0..=255 intensity of that pixel.
    pub fn input_gradient(
        &self,
        acts: &Activations,
        d_logits: &Array1<f64>,
        d_featuremap: Option<&Array3<f64>>,
    ) -> Result<Array3<f64>, ModelError> {
        let (d_map, _) = self.backward(acts, d_logits, d_featuremap, false)?;
        let (c, h, w) = d_map.dim();
        Ok(Array3::from_shape_fn((h, w, c), |(i, j, ci)| {
            d_map[(ci, i, j)] / 255.0
        }))
    }

    /// Parameter gradients for the scalar seeded at the logits, flattened
    /// per tensor in checkpoint order.
    pub fn param_gradient(
        &self,
        acts: &Activations,
        d_logits: &Array1<f64>,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let (_, grads) = self.backward(acts, d_logits, None, true)?;
        Ok(grads)
    }

    fn backward(
        &self,
        acts: &Activations,
        d_logits: &Array1<f64>,
        d_featuremap: Option<&Array3<f64>>,
        want_params: bool,
    ) -> Result<(Array3<f64>, Vec<Vec<f64>>), ModelError> {
        if d_logits.len() != self.num_classes {
            return Err(ModelError::SeedLength {
                expected: self.num_classes,
                got: d_logits.len(),
            });
        }
        if let Some(df) = d_featuremap {
            if df.dim() != acts.featuremap.dim() {
                return Err(ModelError::FeatureSeedShape {
                    expected: acts.featuremap.dim(),
                    got: df.dim(),
                });
            }
        }
        let mut d_vec: Array1<f64> = d_logits.clone();
        let mut d_map: Array3<f64> = Array3::zeros((0, 0, 0));
        // Tensor gradients per layer, collected walking backward; reversed at
        // the end to match checkpoint order.
        let mut grads_rev: Vec<Vec<Vec<f64>>> = Vec::new();
        for (layer, cache) in self.layers.iter().zip(acts.caches.iter()).rev() {
            match (layer, cache) {
                (Layer::Dense { w, .. }, Cache::Dense { x }) => {
                    let (dx, g) = dense_backward(w, x, &d_vec);
                    if want_params {
                        grads_rev.push(vec![flatten2(g.dw), g.db.to_vec()]);
                    }
                    d_vec = dx;
                }
                (Layer::GlobalAvgPool, Cache::Gap { in_dim }) => {
                    d_map = gap_backward(&d_vec, *in_dim);
                }
                (Layer::FeatureTap, Cache::Tap) => {
                    if let Some(df) = d_featuremap {
                        d_map += df;
                    }
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    d_map *= mask;
                }
                (Layer::MaxPool2, Cache::MaxPool { in_dim, arg }) => {
                    d_map = maxpool2_backward(&d_map, arg, *in_dim);
                }
                (Layer::Conv(p), Cache::Conv { x }) => {
                    let (dx, g) = conv_backward(p, x, &d_map);
                    if want_params {
                        grads_rev.push(vec![flatten2(g.dw), g.db.to_vec()]);
                    }
                    d_map = dx;
                }
                (Layer::Res(rb), Cache::Res(rc)) => {
                    let (dx, g) = res_backward(rb, rc, &d_map);
                    if want_params {
                        let mut tensors = vec![
                            flatten2(g.conv1.dw),
                            g.conv1.db.to_vec(),
                            flatten2(g.conv2.dw),
                            g.conv2.db.to_vec(),
                        ];
                        if let Some(gp) = g.proj {
                            tensors.push(flatten2(gp.dw));
                            tensors.push(gp.db.to_vec());
                        }
                        grads_rev.push(tensors);
                    }
                    d_map = dx;
                }
                _ => unreachable!("cache kind always matches its layer"),
            }
        }
        let mut grads = Vec::new();
        for tensors in grads_rev.into_iter().rev() {
            grads.extend(tensors);
        }
        Ok((d_map, grads))
    }

    /// The classifier head `(weights, biases)`: `(classes, feature_dim)`.
    pub fn head(&self) -> (&Array2<f64>, &Array1<f64>) {
        match self.layers.last() {
            Some(Layer::Dense { w, b }) => (w, b),
            _ => unreachable!("network ends in a dense head"),
        }
    }

    /// Replaces the classifier head, adjusting the class count. The weight
    /// matrix must have `feature_dim` columns.
    pub fn set_head(&mut self, w: Array2<f64>, b: Array1<f64>) -> Result<(), ModelError> {
        let (rows, cols) = w.dim();
        if cols != self.feature_dim || rows != b.len() || rows < 2 {
            return Err(ModelError::HeadShape {
                feat: self.feature_dim,
                got: (rows, cols),
            });
        }
        self.num_classes = rows;
        *self.layers.last_mut().expect("non-empty layer list") = Layer::Dense { w, b };
        Ok(())
    }

    /// Mutable views of every parameter tensor, in checkpoint order.
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(p) => {
                    out.push(p.w.as_slice_mut().expect("standard layout"));
                    out.push(p.b.as_slice_mut().expect("standard layout"));
                }
                Layer::Res(rb) => {
                    out.push(rb.conv1.w.as_slice_mut().expect("standard layout"));
                    out.push(rb.conv1.b.as_slice_mut().expect("standard layout"));
                    out.push(rb.conv2.w.as_slice_mut().expect("standard layout"));
                    out.push(rb.conv2.b.as_slice_mut().expect("standard layout"));
                    if let Some(p) = rb.proj.as_mut() {
                        out.push(p.w.as_slice_mut().expect("standard layout"));
                        out.push(p.b.as_slice_mut().expect("standard layout"));
                    }
                }
                Layer::Dense { w, b } => {
                    out.push(w.as_slice_mut().expect("standard layout"));
                    out.push(b.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Shared views of every parameter tensor, in checkpoint order.
    pub(crate) fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(p) => {
                    out.push(p.w.as_slice().expect("standard layout"));
                    out.push(p.b.as_slice().expect("standard layout"));
                }
                Layer::Res(rb) => {
                    out.push(rb.conv1.w.as_slice().expect("standard layout"));
                    out.push(rb.conv1.b.as_slice().expect("standard layout"));
                    out.push(rb.conv2.w.as_slice().expect("standard layout"));
                    out.push(rb.conv2.b.as_slice().expect("standard layout"));
                    if let Some(p) = rb.proj.as_ref() {
                        out.push(p.w.as_slice().expect("standard layout"));
                        out.push(p.b.as_slice().expect("standard layout"));
                    }
                }
                Layer::Dense { w, b } => {
                    out.push(w.as_slice().expect("standard layout"));
                    out.push(b.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }
}

/// Copies `backbone` and swaps in a freshly initialized head with
/// `num_classes` outputs. Head-only training of the result leaves every
/// backbone parameter bitwise unchanged.
pub fn build_substitute_arch(
    backbone: &ConvNet,
    num_classes: usize,
    seed: u64,
) -> Result<ConvNet, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::TooFewClasses { count: num_classes });
    }
    let mut model = backbone.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = dense_init(num_classes, backbone.feature_dim(), &mut rng);
    let b = Array1::zeros(num_classes);
    model.set_head(w, b)?;
    Ok(model)
}

fn dense_init<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let std = (2.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        z * std
    })
}

fn flatten2(a: Array2<f64>) -> Vec<f64> {
    a.into_raw_vec_and_offset().0
}

/// `(H, W, C)` pixels in 0..=255 to a `(C, H, W)` map in 0..=1.
fn image_to_map(img: &Image) -> Array3<f64> {
    let (h, w, c) = img.shape();
    let px = img.pixels();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| px[(i, j, ci)] / 255.0)
}

/// Index of the largest value; ties resolve to the first occurrence.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_verify, rand_image, rand_probes};

    #[test]
    fn arch_id_round_trips_through_strings() {
        for arch in ArchId::ALL {
            assert_eq!(arch.as_str().parse::<ArchId>().unwrap(), arch);
        }
        assert!("resnet50".parse::<ArchId>().is_err());
    }

    #[test]
    fn param_counts_match_hand_derivation() {
        // conv params: out_c * in_c * k * k + out_c; dense: rows * cols + rows.
        let a = ConvNet::new(ArchId::CnnA, (32, 32), 3, 10, 0).unwrap();
        assert_eq!(a.param_count(), 224 + 1168 + 4640 + 330);
        let b = ConvNet::new(ArchId::CnnB, (32, 32), 3, 10, 0).unwrap();
        assert_eq!(b.param_count(), 336 + 1308 + 2616 + 5208 + 250);
        let r = ConvNet::new(ArchId::MiniResnet, (32, 32), 3, 10, 0).unwrap();
        assert_eq!(
            r.param_count(),
            224 + (584 + 584) + (1168 + 2320 + 144) + (4640 + 9248 + 544) + 330
        );
    }

    #[test]
    fn forward_shapes_at_desk_and_probe_sizes() {
        for (arch, feat) in [
            (ArchId::CnnA, 32),
            (ArchId::CnnB, 24),
            (ArchId::MiniResnet, 32),
        ] {
            let net = ConvNet::new(arch, (32, 32), 3, 7, 1).unwrap();
            let img = rand_image(42, 32, 32, 3);
            let acts = net.activations(&img).unwrap();
            assert_eq!(acts.logits.len(), 7);
            assert_eq!(acts.featuremap.dim(), (feat, 8, 8));
            assert_eq!(net.feature_dim(), feat);
            assert_eq!(net.pooled_features(&img).unwrap().len(), feat);

            let small = ConvNet::new(arch, (8, 8), 3, 7, 1).unwrap();
            let probe = rand_image(43, 8, 8, 3);
            let acts = small.activations(&probe).unwrap();
            assert_eq!(acts.featuremap.dim(), (feat, 2, 2));
        }
    }

    #[test]
    fn construction_validates_arguments() {
        assert!(ConvNet::new(ArchId::CnnA, (7, 8), 3, 4, 0).is_err());
        assert!(ConvNet::new(ArchId::CnnA, (10, 9), 3, 4, 0).is_err());
        assert!(ConvNet::new(ArchId::CnnA, (8, 8), 2, 4, 0).is_err());
        assert!(ConvNet::new(ArchId::CnnA, (8, 8), 3, 1, 0).is_err());
        assert!(ConvNet::new(ArchId::CnnA, (8, 8), 1, 4, 0).is_ok());
        assert!(ConvNet::new(ArchId::CnnA, (10, 10), 3, 4, 0).is_ok());
    }

    #[test]
    fn same_seed_same_net_different_seed_different_net() {
        let a = ConvNet::new(ArchId::CnnB, (16, 16), 3, 5, 9).unwrap();
        let b = ConvNet::new(ArchId::CnnB, (16, 16), 3, 5, 9).unwrap();
        let c = ConvNet::new(ArchId::CnnB, (16, 16), 3, 5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = ConvNet::new(ArchId::CnnA, (16, 16), 3, 4, 0).unwrap();
        let img = rand_image(1, 8, 8, 3);
        assert!(matches!(
            net.activations(&img),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences_of_cross_entropy() {
        for arch in ArchId::ALL {
            let net = ConvNet::new(arch, (8, 8), 3, 5, 3).unwrap();
            let img = rand_image(7, 8, 8, 3);
            let label = 2usize;
            let acts = net.activations(&img).unwrap();
            let mut seed = softmax(&acts.logits);
            seed[label] -= 1.0;
            let grad = net.input_gradient(&acts, &seed, None).unwrap();
            let loss = |im: &Image| cross_entropy(&net.logits(im).unwrap(), label).unwrap();
            let probes = rand_probes(99, 10, (8, 8, 3));
            let (verified, skipped) = fd_verify(&loss, &img, &grad, &probes, arch.as_str());
            assert!(
                verified >= 7,
                "{arch}: only {verified} clean probes ({skipped} kink-straddling)"
            );
        }
    }

    #[test]
    fn featuremap_seed_gradient_matches_finite_differences() {
        // Scalar under test: 0.5 * ||F(x)||^2, seeded by planting F(x) at
        // the tap with zero logit seed.
        let net = ConvNet::new(ArchId::CnnA, (8, 8), 3, 4, 5).unwrap();
        let img = rand_image(17, 8, 8, 3);
        let acts = net.activations(&img).unwrap();
        let zeros = Array1::zeros(4);
        let grad = net
            .input_gradient(&acts, &zeros, Some(&acts.featuremap))
            .unwrap();
        let loss = |im: &Image| -> f64 {
            let f = net.activations(im).unwrap().featuremap;
            0.5 * f.iter().map(|v| v * v).sum::<f64>()
        };
        let probes = rand_probes(123, 16, (8, 8, 3));
        let (verified, skipped) = fd_verify(&loss, &img, &grad, &probes, "featuremap");
        assert!(
            verified >= 6,
            "only {verified} clean probes ({skipped} kink-straddling)"
        );
    }

    #[test]
    fn set_head_swaps_class_count() {
        let mut net = ConvNet::new(ArchId::CnnA, (8, 8), 3, 4, 0).unwrap();
        let w = Array2::zeros((6, 32));
        let b = Array1::zeros(6);
        net.set_head(w, b).unwrap();
        assert_eq!(net.num_classes(), 6);
        let img = rand_image(3, 8, 8, 3);
        assert_eq!(net.logits(&img).unwrap().len(), 6);
        assert!(net.set_head(Array2::zeros((6, 31)), Array1::zeros(6)).is_err());
        assert!(net.set_head(Array2::zeros((5, 32)), Array1::zeros(6)).is_err());
    }

    #[test]
    fn dataset_validation_catches_mismatches() {
        let img = rand_image(1, 8, 8, 3);
        let other = rand_image(2, 16, 16, 3);
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(LabeledDataset::new(vec![], vec![], names.clone()).is_err());
        assert!(
            LabeledDataset::new(vec![img.clone()], vec![0, 1], names.clone()).is_err()
        );
        assert!(LabeledDataset::new(
            vec![img.clone(), other],
            vec![0, 1],
            names.clone()
        )
        .is_err());
        assert!(LabeledDataset::new(vec![img.clone()], vec![2], names.clone()).is_err());
        assert!(LabeledDataset::new(vec![img.clone()], vec![0], vec![]).is_err());
        // A single-class dataset is valid; only training rejects it.
        let single =
            LabeledDataset::new(vec![img.clone()], vec![0], vec!["only".to_string()]).unwrap();
        assert_eq!(single.num_classes(), 1);
        let ds = LabeledDataset::new(vec![img.clone(), img], vec![0, 1], names).unwrap();
        assert_eq!(ds.len(), 2);
        let sub = ds.subset(&[1, 1, 0]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.labels(), &[1, 1, 0]);
    }
}
