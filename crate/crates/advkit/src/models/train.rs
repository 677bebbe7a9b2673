//! Mini-batch training with softmax cross-entropy.
//!
//! The loop is deterministic for a fixed seed: shuffling comes from one
//! ChaCha8 stream, per-sample gradients are computed in parallel but reduced
//! in index order, and the optimizers touch parameters in checkpoint order.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ConvNet, LabeledDataset, ModelError};
use crate::metrics::Image;

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|z| (z - m).exp());
    let s = exps.sum();
    exps / s
}

/// Softmax cross-entropy of one logit vector against an integer label.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.mapv(|z| (z - m).exp()).sum().ln();
    Ok(lse - logits[label])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters. The defaults suit the desk-scale datasets in
/// the test suite and the harness.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Position of a sample during training, handed to the augment hook so it
/// can derive per-call determinism.
#[derive(Debug, Clone, Copy)]
pub struct AugmentCtx {
    pub epoch: usize,
    pub sample_index: usize,
}

/// Produces a companion image for a training sample (for instance an
/// adversarially perturbed copy). The pair's gradients are averaged, so a
/// hook that returns the input unchanged reproduces plain training exactly.
pub type AugmentFn = dyn Fn(&ConvNet, &Image, usize, AugmentCtx) -> Result<Image, String> + Sync;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Accuracy over the training set after the final step.
    pub train_accuracy: f64,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

fn sample_gradient(
    net: &ConvNet,
    data: &LabeledDataset,
    index: usize,
    epoch: usize,
    augment: Option<&AugmentFn>,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let img = &data.images()[index];
    let label = data.labels()[index];
    let single = |im: &Image| -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let acts = net.activations(im)?;
        let loss = cross_entropy(&acts.logits, label)?;
        let mut seed = softmax(&acts.logits);
        seed[label] -= 1.0;
        let grads = net.param_gradient(&acts, &seed)?;
        Ok((loss, grads))
    };
    let (loss_clean, grads_clean) = single(img)?;
    match augment {
        None => Ok((loss_clean, grads_clean)),
        Some(f) => {
            let ctx = AugmentCtx {
                epoch,
                sample_index: index,
            };
            let companion = f(net, img, label, ctx).map_err(ModelError::Augment)?;
            let (loss_aug, grads_aug) = single(&companion)?;
            let loss = (loss_clean + loss_aug) / 2.0;
            let grads = grads_clean
                .into_iter()
                .zip(grads_aug)
                .map(|(gc, ga)| {
                    gc.into_iter()
                        .zip(ga)
                        .map(|(a, b)| (a + b) / 2.0)
                        .collect()
                })
                .collect();
            Ok((loss, grads))
        }
    }
}

/// Trains `net` in place. With an augment hook, each sample contributes the
/// mean of its clean and companion gradients.
pub fn train(
    net: &mut ConvNet,
    data: &LabeledDataset,
    hyper: &TrainHyper,
    augment: Option<&AugmentFn>,
) -> Result<TrainReport, ModelError> {
    if data.image_shape() != net.input_shape() {
        return Err(ModelError::InputShape {
            expected: net.input_shape(),
            got: data.image_shape(),
        });
    }
    if data.num_classes() != net.num_classes() {
        return Err(ModelError::BadHyper(format!(
            "dataset has {} classes, network has {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    if hyper.batch_size == 0 {
        return Err(ModelError::BadHyper("batch_size must be positive".into()));
    }
    // Zero is legal: a lr-0 run is the documented way to get an untouched,
    // reproducibly initialized model out of the training path.
    if !(hyper.lr.is_finite() && hyper.lr >= 0.0) {
        return Err(ModelError::BadHyper(format!("lr {} is negative", hyper.lr)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = AdamState {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    let n = data.len();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let results: Result<Vec<(f64, Vec<Vec<f64>>)>, ModelError> = {
                let frozen: &ConvNet = net;
                chunk
                    .par_iter()
                    .map(|&i| sample_gradient(frozen, data, i, epoch, augment))
                    .collect()
            };
            let results = results?;
            let scale = 1.0 / chunk.len() as f64;
            let mut mean_grads: Vec<Vec<f64>> = results[0].1.clone();
            loss_sum += results[0].0;
            for (loss, grads) in &results[1..] {
                loss_sum += loss;
                for (acc, g) in mean_grads.iter_mut().zip(grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            for tensor in &mut mean_grads {
                for g in tensor.iter_mut() {
                    *g *= scale;
                }
            }
            apply_step(net, &mean_grads, hyper, &mut adam);
        }
        let epoch_loss = loss_sum / n as f64;
        if !epoch_loss.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        epoch_losses.push(epoch_loss);
    }

    let train_accuracy = accuracy(net, data)?;
    Ok(TrainReport {
        epoch_losses,
        train_accuracy,
    })
}

fn apply_step(net: &mut ConvNet, grads: &[Vec<f64>], hyper: &TrainHyper, adam: &mut AdamState) {
    let mut params = net.param_slices_mut();
    debug_assert_eq!(params.len(), grads.len());
    match hyper.optimizer {
        OptimizerKind::Sgd => {
            for (tensor, g) in params.iter_mut().zip(grads) {
                for (p, gi) in tensor.iter_mut().zip(g) {
                    *p -= hyper.lr * gi;
                }
            }
        }
        OptimizerKind::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            if adam.m.is_empty() {
                adam.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                adam.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            adam.t += 1;
            let bc1 = 1.0 - B1.powi(adam.t as i32);
            let bc2 = 1.0 - B2.powi(adam.t as i32);
            for ((tensor, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
            {
                for i in 0..g.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    tensor[i] -= hyper.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Fraction of the dataset the network labels correctly.
pub fn accuracy(net: &ConvNet, data: &LabeledDataset) -> Result<f64, ModelError> {
    let preds: Result<Vec<usize>, ModelError> = data
        .images()
        .par_iter()
        .map(|img| net.predict(img))
        .collect();
    let preds = preds?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
