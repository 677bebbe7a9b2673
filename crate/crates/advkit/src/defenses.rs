//! Defense stages that sit in front of (or inside the training of) the
//! oracle. Preprocessing stages map images to images of the same shape and
//! compose into a [`DefenseChain`]; [`DefendedOracle`] applies a chain
//! before delegating to any inner oracle, so attackers keep seeing only the
//! classify boundary. Adversarial training hardens the model itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{craft, AttackConfig, AttackError, AttackKind};
use crate::metrics::{Image, MetricError};
use crate::models::{train, ArchId, ConvNet, LabeledDataset, ModelError, TrainHyper, TrainReport};
use crate::oracle::{Oracle, OracleError, OracleVerdict, QueryLedger};

use ndarray::Array3;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("jpeg quality {0} out of range 1..=100")]
    InvalidQuality(u8),
    #[error("jpeg defense needs a 3-channel image, got {0} channel(s)")]
    NeedsThreeChannels(usize),
    #[error("resize range ({min}, {max}) invalid: need 1 <= min <= max")]
    BadResizeRange { min: usize, max: usize },
    #[error("resize range reaches {max}, larger than the {h}x{w} input")]
    RangeExceedsInput { max: usize, h: usize, w: usize },
    #[error("jpeg codec: {0}")]
    Jpeg(String),
    #[error("adversarial training requires a single-model attack, got {0}")]
    EnsembleAttack(AttackKind),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One preprocessing transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum DefenseStage {
    Jpeg { quality: u8 },
    Randomization { resize_min: usize, resize_max: usize },
}

/// Ordered preprocessing stages plus the seed that drives the randomized
/// ones. Applying a chain to the same image with the same salt is
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseChain {
    pub stages: Vec<DefenseStage>,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseChain {
    pub fn new(stages: Vec<DefenseStage>, seed: u64) -> Self {
        Self { stages, seed }
    }

    /// Runs every stage in order. `salt` separates the randomness of
    /// different images under one chain seed; pass the same salt to repeat
    /// the exact transform.
    pub fn apply(&self, img: &Image, salt: u64) -> Result<Image, DefenseError> {
        let mut out = img.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            out = match stage {
                DefenseStage::Jpeg { quality } => jpeg_defense(&out, *quality)?,
                DefenseStage::Randomization {
                    resize_min,
                    resize_max,
                } => {
                    let stage_seed = mix_seed(self.seed, salt.wrapping_add(i as u64));
                    randomization_defense(&out, (*resize_min, *resize_max), stage_seed)?
                }
            };
        }
        Ok(out)
    }
}

/// SplitMix64 round, used to spread (seed, salt) pairs over seed space.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over an image id, for salting per-image randomness.
pub fn salt_from_id(id: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Encode to JPEG at `quality`, decode back. Operates on the 8-bit grid:
/// fractional inputs are rounded first. Output shape equals input shape.
pub fn jpeg_defense(img: &Image, quality: u8) -> Result<Image, DefenseError> {
    if !(1..=100).contains(&quality) {
        return Err(DefenseError::InvalidQuality(quality));
    }
    if img.channels() != 3 {
        return Err(DefenseError::NeedsThreeChannels(img.channels()));
    }
    let (h, w, _) = img.shape();
    let grid = img.quantized();
    let samples = grid.to_u8_samples().expect("quantized image is integral");
    let rgb: ::image::RgbImage =
        ::image::ImageBuffer::from_raw(w as u32, h as u32, samples)
            .expect("buffer length matches dimensions");

    let mut encoded = Vec::new();
    let encoder =
        ::image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    rgb.write_with_encoder(encoder)
        .map_err(|e| DefenseError::Jpeg(e.to_string()))?;
    let decoded = ::image::load_from_memory_with_format(&encoded, ::image::ImageFormat::Jpeg)
        .map_err(|e| DefenseError::Jpeg(e.to_string()))?
        .to_rgb8();
    if decoded.width() != w as u32 || decoded.height() != h as u32 {
        return Err(DefenseError::Jpeg(format!(
            "decoder returned {}x{}, expected {w}x{h}",
            decoded.width(),
            decoded.height()
        )));
    }
    let data = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        f64::from(decoded.get_pixel(j as u32, i as u32)[c])
    });
    Ok(Image::new(data).expect("u8 samples are valid pixels"))
}

/// Random nearest-neighbor downscale into `[min, max]` per side, then random
/// zero-padding back to the input size. Deterministic in `seed`; draw order
/// is height, width, top offset, left offset.
pub fn randomization_defense(
    img: &Image,
    (min, max): (usize, usize),
    seed: u64,
) -> Result<Image, DefenseError> {
    if min < 1 || min > max {
        return Err(DefenseError::BadResizeRange { min, max });
    }
    let (h, w, c) = img.shape();
    if max > h || max > w {
        return Err(DefenseError::RangeExceedsInput { max, h, w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_h = rng.random_range(min..=max);
    let s_w = rng.random_range(min..=max);
    let top = rng.random_range(0..=(h - s_h));
    let left = rng.random_range(0..=(w - s_w));

    let px = img.pixels();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..s_h {
        let src_i = i * h / s_h;
        for j in 0..s_w {
            let src_j = j * w / s_w;
            for ch in 0..c {
                out[(top + i, left + j, ch)] = px[(src_i, src_j, ch)];
            }
        }
    }
    Ok(Image::new(out).expect("copied pixels stay in range"))
}

/// Any oracle with a defense chain applied in front of classification. The
/// inner ledger keeps the accounting; callers still see only verdicts.
pub struct DefendedOracle<O: Oracle> {
    inner: O,
    chain: DefenseChain,
}

impl<O: Oracle> DefendedOracle<O> {
    pub fn new(inner: O, chain: DefenseChain) -> Self {
        Self { inner, chain }
    }
}

impl<O: Oracle> Oracle for DefendedOracle<O> {
    fn classify(&self, img: &Image, image_id: &str) -> Result<OracleVerdict, OracleError> {
        let defended = self
            .chain
            .apply(img, salt_from_id(image_id))
            .map_err(|e| OracleError::Protocol(format!("defense chain: {e}")))?;
        // Preprocessing outputs already sit on the 8-bit grid, but quantize
        // defensively so the inner wire contract can never be violated.
        self.inner.classify(&defended.quantized(), image_id)
    }

    fn ledger(&self) -> &QueryLedger {
        self.inner.ledger()
    }
}

/// Trains `arch` on `data` where every step crafts adversarial versions of
/// the current batch against the current parameters and descends on the
/// 50/50 clean/adversarial mixture. With ε = 0 this is bitwise identical to
/// plain training.
pub fn adversarial_training(
    arch: ArchId,
    data: &LabeledDataset,
    attack: &AttackConfig,
    hyper: &TrainHyper,
) -> Result<(ConvNet, TrainReport), DefenseError> {
    if attack.kind == AttackKind::Ensemble {
        return Err(DefenseError::EnsembleAttack(attack.kind));
    }
    attack.validate()?;
    let (h, w, c) = data.image_shape();
    let mut net = ConvNet::new(arch, (h, w), c, data.num_classes(), hyper.seed)?;
    let attack = attack.clone();
    let hook = move |net: &ConvNet, img: &Image, label: usize, _ctx| {
        craft(&[net], img, label, &attack)
            .map(|r| r.adversarial)
            .map_err(|e| e.to_string())
    };
    let report = train(&mut net, data, hyper, Some(&hook))?;
    Ok((net, report))
}

/// Offline variant: crafts one adversarial image per dataset entry against
/// a fixed model and appends them with their clean labels, doubling the set.
pub fn expand_with_adversarial(
    data: &LabeledDataset,
    model: &ConvNet,
    attack: &AttackConfig,
) -> Result<LabeledDataset, DefenseError> {
    let mut images: Vec<Image> = data.images().to_vec();
    let mut labels: Vec<usize> = data.labels().to_vec();
    for (img, &label) in data.images().iter().zip(data.labels()) {
        let result = craft(&[model], img, label, attack)?;
        images.push(result.adversarial);
        labels.push(label);
    }
    Ok(LabeledDataset::new(
        images,
        labels,
        data.class_names().to_vec(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricReport;
    use crate::oracle::LocalOracle;
    use crate::testutil::{rand_image_u8, two_blob_dataset};

    #[test]
    fn jpeg_quality_100_is_near_lossless_on_constant_images() {
        let img = Image::new(Array3::from_elem((16, 16, 3), 128.0)).unwrap();
        let out = jpeg_defense(&img, 100).unwrap();
        let report = MetricReport::between(&img, &out).unwrap();
        assert!(report.psnr_db > 40.0, "psnr {}", report.psnr_db);
        assert_eq!(out.shape(), img.shape());
    }

    #[test]
    fn jpeg_preserves_shape_on_random_images() {
        for (h, w) in [(8, 8), (16, 12), (31, 17)] {
            let img = rand_image_u8(h as u64 * 100 + w as u64, h, w, 3);
            let out = jpeg_defense(&img, 75).unwrap();
            assert_eq!(out.shape(), (h, w, 3));
            assert!(out.is_integral());
        }
    }

    #[test]
    fn jpeg_rejects_bad_quality_and_gray_images() {
        let img = rand_image_u8(1, 8, 8, 3);
        assert!(matches!(
            jpeg_defense(&img, 0),
            Err(DefenseError::InvalidQuality(0))
        ));
        assert!(matches!(
            jpeg_defense(&img, 101),
            Err(DefenseError::InvalidQuality(101))
        ));
        let gray = rand_image_u8(2, 8, 8, 1);
        assert!(matches!(
            jpeg_defense(&gray, 75),
            Err(DefenseError::NeedsThreeChannels(1))
        ));
    }

    #[test]
    fn repeated_jpeg_at_quality_100_changes_psnr_by_under_one_db() {
        // The pure-Rust encoder quantizes YCbCr samples and DCT coefficients to
        // integers even at quality 100, and that rounding compounds per pass on
        // high-frequency content. The idempotence check therefore runs on smooth
        // images, where a second encode settles near the first one's fixed point.
        let constant = Image::new(Array3::from_elem((16, 16, 3), 128.0)).unwrap();
        let gradient = Image::new(Array3::from_shape_fn((16, 16, 3), |(i, j, c)| {
            ((i * 8 + j * 4 + c * 16) % 256) as f64
        }))
        .unwrap();
        let wave = Image::new(Array3::from_shape_fn((32, 32, 3), |(i, j, c)| {
            (127.5 + 100.0 * (i as f64 / 15.0).sin() * (j as f64 / 21.0).cos() + c as f64 * 5.0)
                .clamp(0.0, 255.0)
                .round()
        }))
        .unwrap();
        for (name, img) in [("constant", constant), ("gradient", gradient), ("wave", wave)] {
            let once = jpeg_defense(&img, 100).unwrap();
            let twice = jpeg_defense(&once, 100).unwrap();
            let p1 = MetricReport::between(&img, &once).unwrap().psnr_db;
            let p2 = MetricReport::between(&img, &twice).unwrap().psnr_db;
            assert!(
                (p1 - p2).abs() < 1.0,
                "{name}: once {p1} dB, twice {p2} dB"
            );
        }
    }

    #[test]
    fn degenerate_resize_range_is_identity() {
        let img = rand_image_u8(4, 12, 12, 3);
        let out = randomization_defense(&img, (12, 12), 9).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn randomization_is_deterministic_per_seed_and_varies_across_seeds() {
        let img = rand_image_u8(5, 16, 16, 3);
        let a = randomization_defense(&img, (12, 16), 42).unwrap();
        let b = randomization_defense(&img, (12, 16), 42).unwrap();
        assert_eq!(a, b);

        let mut distinct = 0;
        for s in 0..100u64 {
            let x = randomization_defense(&img, (12, 16), s).unwrap();
            let y = randomization_defense(&img, (12, 16), s + 1000).unwrap();
            if x != y {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 seed pairs differed");
    }

    #[test]
    fn randomization_validates_ranges() {
        let img = rand_image_u8(6, 8, 8, 3);
        assert!(matches!(
            randomization_defense(&img, (0, 4), 0),
            Err(DefenseError::BadResizeRange { .. })
        ));
        assert!(matches!(
            randomization_defense(&img, (5, 4), 0),
            Err(DefenseError::BadResizeRange { .. })
        ));
        assert!(matches!(
            randomization_defense(&img, (4, 9), 0),
            Err(DefenseError::RangeExceedsInput { .. })
        ));
    }

    #[test]
    fn stages_preserve_validity_and_shape() {
        let chain = DefenseChain::new(
            vec![
                DefenseStage::Jpeg { quality: 75 },
                DefenseStage::Randomization {
                    resize_min: 6,
                    resize_max: 8,
                },
            ],
            7,
        );
        for seed in 0..5u64 {
            let img = rand_image_u8(40 + seed, 8, 8, 3);
            let out = chain.apply(&img, seed).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.pixels().iter().all(|&v| (0.0..=255.0).contains(&v)));
            assert!(out.is_integral());
            // Same salt, same output.
            assert_eq!(chain.apply(&img, seed).unwrap(), out);
        }
    }

    #[test]
    fn defended_oracle_composes_chain_with_inner_classify() {
        let model = ConvNet::new(ArchId::CnnA, (8, 8), 3, 2, 3).unwrap();
        let names = vec!["red".to_string(), "green".to_string()];
        let chain = DefenseChain::new(vec![DefenseStage::Jpeg { quality: 75 }], 0);
        let plain = LocalOracle::new(model.clone(), names.clone()).unwrap();
        let defended = DefendedOracle::new(
            LocalOracle::new(model, names).unwrap(),
            chain.clone(),
        );
        let img = rand_image_u8(7, 8, 8, 3);
        let direct = plain
            .classify(&chain.apply(&img, salt_from_id("x")).unwrap(), "x")
            .unwrap();
        let composed = defended.classify(&img, "x").unwrap();
        assert_eq!(direct.label, composed.label);
        assert_eq!(defended.ledger().count("x"), 1);
    }

    #[test]
    fn adversarial_training_with_zero_epsilon_matches_plain_training() {
        let data = two_blob_dataset(11, 4, 8);
        let hyper = TrainHyper {
            epochs: 2,
            batch_size: 4,
            lr: 2e-3,
            seed: 5,
            ..TrainHyper::default()
        };
        let mut plain = ConvNet::new(ArchId::CnnA, (8, 8), 3, 2, hyper.seed).unwrap();
        let plain_report = train(&mut plain, &data, &hyper, None).unwrap();
        let zero_eps = AttackConfig::pgd(0.0).with_alpha(0.0).with_steps(1);
        let (hardened, adv_report) =
            adversarial_training(ArchId::CnnA, &data, &zero_eps, &hyper).unwrap();
        assert_eq!(hardened, plain);
        assert_eq!(adv_report.epoch_losses, plain_report.epoch_losses);
    }

    #[test]
    fn adversarial_training_rejects_ensemble_configs() {
        let data = two_blob_dataset(12, 3, 8);
        let cfg = AttackConfig::ensemble(4.0);
        assert!(matches!(
            adversarial_training(ArchId::CnnA, &data, &cfg, &TrainHyper::default()),
            Err(DefenseError::EnsembleAttack(AttackKind::Ensemble))
        ));
    }

    #[test]
    fn adversarial_training_produces_a_working_model() {
        let data = two_blob_dataset(13, 10, 8);
        let hyper = TrainHyper {
            epochs: 5,
            batch_size: 5,
            lr: 4e-3,
            seed: 6,
            ..TrainHyper::default()
        };
        let attack = AttackConfig::pgd(4.0).with_steps(3).with_alpha(2.0);
        let (net, report) = adversarial_training(ArchId::CnnA, &data, &attack, &hyper).unwrap();
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(
            report.train_accuracy >= 0.8,
            "clean accuracy {}",
            report.train_accuracy
        );
        assert_eq!(net.num_classes(), 2);
    }

    #[test]
    fn offline_expansion_doubles_the_dataset_within_budget() {
        let data = two_blob_dataset(14, 4, 8);
        let model = {
            let mut m = ConvNet::new(ArchId::CnnA, (8, 8), 3, 2, 7).unwrap();
            train(
                &mut m,
                &data,
                &TrainHyper {
                    epochs: 2,
                    ..TrainHyper::default()
                },
                None,
            )
            .unwrap();
            m
        };
        let cfg = AttackConfig::pgd(4.0).with_steps(2);
        let expanded = expand_with_adversarial(&data, &model, &cfg).unwrap();
        assert_eq!(expanded.len(), 2 * data.len());
        assert_eq!(&expanded.labels()[..data.len()], data.labels());
        assert_eq!(&expanded.labels()[data.len()..], data.labels());
        for (orig, adv) in data.images().iter().zip(&expanded.images()[data.len()..]) {
            let linf = crate::metrics::linf_distance(orig, adv).unwrap();
            assert!(linf <= 4.0, "linf {linf}");
        }
    }
}
