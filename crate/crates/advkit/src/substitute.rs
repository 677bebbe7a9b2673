//! Substitute training: label a local image set through the oracle (one
//! query per image), then fit a fresh classifier head on top of a frozen
//! backbone so the substitute tracks the oracle's decision boundary.
//!
//! The protocol is a single labeling pass. There is no query-funded dataset
//! augmentation and no train/validation split: the same images train the
//! substitute and later seed the attacks, so each costs exactly one label
//! query here and one verification query later.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Image;
use crate::models::{
    build_substitute_arch, softmax, ArchId, ConvNet, LabeledDataset, ModelError, TrainHyper,
};
use crate::oracle::Oracle;

#[derive(Debug, Error)]
pub enum SubstituteError {
    #[error("no images to label")]
    NoImages,
    #[error("duplicate image id '{0}'")]
    DuplicateImageId(String),
    #[error("every labeling query failed; first failure: {0}")]
    AllQueriesFailed(String),
    #[error("degenerate label set: oracle produced {0} distinct label(s), need at least 2")]
    DegenerateLabelSet(usize),
    #[error("head training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Recipe for one substitute: which backbone, what head size, and how the
/// head is trained. `head_classes` mirrors the distinct oracle labels
/// observed during [`label_with_oracle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteSpec {
    pub backbone: ArchId,
    pub head_classes: usize,
    pub hyper: TrainHyper,
    pub image_set_id: String,
}

/// One image the oracle could not label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelFailure {
    pub image_id: String,
    pub error: String,
}

/// Result of the labeling pass: the successfully labeled images (input
/// order preserved) plus an explicit list of failures.
#[derive(Debug)]
pub struct LabelingOutcome {
    pub ids: Vec<String>,
    pub dataset: LabeledDataset,
    pub failures: Vec<LabelFailure>,
}

/// Labels `images` through the oracle, one classify call each. Failures do
/// not abort the pass; they are collected and the dataset is built from the
/// successes. Class names are the distinct observed labels in sorted order.
/// `parallelism` bounds concurrent classify calls (1 = sequential).
pub fn label_with_oracle(
    oracle: &dyn Oracle,
    images: &[(String, Image)],
    parallelism: usize,
) -> Result<LabelingOutcome, SubstituteError> {
    if images.is_empty() {
        return Err(SubstituteError::NoImages);
    }
    let mut seen = std::collections::HashSet::new();
    for (id, _) in images {
        if !seen.insert(id.as_str()) {
            return Err(SubstituteError::DuplicateImageId(id.clone()));
        }
    }

    let classify = |(id, img): &(String, Image)| -> Result<String, String> {
        oracle
            .classify(img, id)
            .map(|v| v.label)
            .map_err(|e| e.to_string())
    };
    let verdicts: Vec<Result<String, String>> = if parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.min(images.len()))
            .build()
            .expect("labeling thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            images.par_iter().map(classify).collect()
        })
    } else {
        images.iter().map(classify).collect()
    };

    let mut failures = Vec::new();
    let mut labeled: Vec<(&str, &Image, String)> = Vec::new();
    for ((id, img), verdict) in images.iter().zip(verdicts) {
        match verdict {
            Ok(label) => labeled.push((id, img, label)),
            Err(error) => failures.push(LabelFailure {
                image_id: id.clone(),
                error,
            }),
        }
    }
    if labeled.is_empty() {
        return Err(SubstituteError::AllQueriesFailed(
            failures
                .first()
                .map(|f| f.error.clone())
                .unwrap_or_default(),
        ));
    }

    let classes: Vec<String> = {
        let set: std::collections::BTreeSet<&str> =
            labeled.iter().map(|(_, _, l)| l.as_str()).collect();
        set.into_iter().map(String::from).collect()
    };
    let index_of = |label: &str| classes.iter().position(|c| c == label).expect("member");
    let ids = labeled.iter().map(|(id, _, _)| id.to_string()).collect();
    let imgs: Vec<Image> = labeled.iter().map(|(_, img, _)| (*img).clone()).collect();
    let label_ids: Vec<usize> = labeled.iter().map(|(_, _, l)| index_of(l)).collect();
    let dataset = LabeledDataset::new(imgs, label_ids, classes)?;
    Ok(LabelingOutcome {
        ids,
        dataset,
        failures,
    })
}

/// A trained substitute: the model plus its class-index-to-label mapping.
#[derive(Debug, Clone)]
pub struct Substitute {
    pub model: ConvNet,
    pub classes: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

impl Substitute {
    /// The substitute's label string for an image.
    pub fn predict_label(&self, img: &Image) -> Result<&str, ModelError> {
        Ok(&self.classes[self.model.predict(img)?])
    }
}

/// Fits a fresh head over `backbone`'s pooled features on the labeled set.
/// Backbone parameters are never touched: features are computed once per
/// image and the optimization sees only the head. Deterministic in
/// `spec.hyper.seed`.
pub fn train_substitute(
    backbone: &ConvNet,
    spec: &SubstituteSpec,
    labeled: &LabeledDataset,
) -> Result<Substitute, SubstituteError> {
    let k = labeled.num_classes();
    if k < 2 {
        return Err(SubstituteError::DegenerateLabelSet(k));
    }
    if spec.head_classes != k {
        return Err(SubstituteError::Model(ModelError::BadHyper(format!(
            "spec.head_classes {} but dataset has {} classes",
            spec.head_classes, k
        ))));
    }
    let mut model = build_substitute_arch(backbone, k, spec.hyper.seed)?;
    let d = model.feature_dim();

    let features: Vec<Array1<f64>> = labeled
        .images()
        .iter()
        .map(|img| model.pooled_features(img))
        .collect::<Result<_, _>>()?;
    let labels = labeled.labels();

    let (w0, b0) = model.head();
    let mut w = w0.clone();
    let mut b = b0.clone();
    let hyper = &spec.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = HeadAdam::new(k, d);
    let n = features.len();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let mut dw = Array2::<f64>::zeros((k, d));
            let mut db = Array1::<f64>::zeros(k);
            for &i in chunk {
                let f = &features[i];
                let z = w.dot(f) + &b;
                let p = softmax(&z);
                loss_sum += -p[labels[i]].max(f64::MIN_POSITIVE).ln();
                let mut dz = p;
                dz[labels[i]] -= 1.0;
                for r in 0..k {
                    db[r] += dz[r];
                    for c in 0..d {
                        dw[(r, c)] += dz[r] * f[c];
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            dw.mapv_inplace(|v| v * scale);
            db.mapv_inplace(|v| v * scale);
            adam.step(&mut w, &mut b, &dw, &db, hyper);
        }
        let epoch_loss = loss_sum / n as f64;
        if !epoch_loss.is_finite() {
            return Err(SubstituteError::Divergence { epoch });
        }
        epoch_losses.push(epoch_loss);
    }

    model.set_head(w, b)?;
    Ok(Substitute {
        model,
        classes: labeled.class_names().to_vec(),
        epoch_losses,
    })
}

/// Fraction of images where the substitute's label equals the dataset's
/// (oracle-assigned) label.
pub fn agreement(sub: &Substitute, labeled: &LabeledDataset) -> Result<f64, ModelError> {
    let mut hits = 0usize;
    for (img, &label) in labeled.images().iter().zip(labeled.labels()) {
        if sub.model.predict(img)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}

/// Adam on the two head tensors only.
struct HeadAdam {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
    t: i32,
}

impl HeadAdam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(k: usize, d: usize) -> Self {
        Self {
            mw: Array2::zeros((k, d)),
            vw: Array2::zeros((k, d)),
            mb: Array1::zeros(k),
            vb: Array1::zeros(k),
            t: 0,
        }
    }

    fn step(
        &mut self,
        w: &mut Array2<f64>,
        b: &mut Array1<f64>,
        dw: &Array2<f64>,
        db: &Array1<f64>,
        hyper: &TrainHyper,
    ) {
        match hyper.optimizer {
            crate::models::OptimizerKind::Sgd => {
                w.zip_mut_with(dw, |p, &g| *p -= hyper.lr * g);
                b.zip_mut_with(db, |p, &g| *p -= hyper.lr * g);
            }
            crate::models::OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - Self::B1.powi(self.t);
                let bc2 = 1.0 - Self::B2.powi(self.t);
                let update =
                    |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
                        *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                        *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + Self::EPS);
                    };
                for r in 0..w.nrows() {
                    for c in 0..w.ncols() {
                        update(
                            &mut w[(r, c)],
                            dw[(r, c)],
                            &mut self.mw[(r, c)],
                            &mut self.vw[(r, c)],
                            hyper.lr,
                        );
                    }
                    update(&mut b[r], db[r], &mut self.mb[r], &mut self.vb[r], hyper.lr);
                }
            }
        }
    }
}
