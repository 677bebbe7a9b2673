//! Shared helpers for in-crate unit tests.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::Image;
use crate::models::LabeledDataset;

/// Random image with intensities inside [32, 224] so finite-difference
/// probes of ±0.255 never leave the valid range.
pub(crate) fn rand_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_fn((h, w, c), |_| rng.random_range(32.0..224.0));
    Image::new(data).unwrap()
}

/// Random 8-bit image (integral intensities), full range.
pub(crate) fn rand_image_u8(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<u8> = (0..h * w * c).map(|_| rng.random_range(0..=255)).collect();
    Image::from_u8(h, w, c, &samples).unwrap()
}

/// Two tight clusters of colored noise, linearly separable on mean color.
/// Pixels are integral so the images can cross the oracle wire as-is.
pub(crate) fn two_blob_dataset(seed: u64, n_per_class: usize, hw: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2usize {
        let base = if class == 0 { 80.0 } else { 170.0 };
        for _ in 0..n_per_class {
            let data = Array3::from_shape_fn((hw, hw, 3), |(_, _, c)| {
                let jitter: f64 = rng.random_range(-25.0..25.0);
                let chan = if c == class { 40.0 } else { 0.0 };
                (base + chan + jitter).clamp(0.0, 255.0).round()
            });
            images.push(Image::new(data).unwrap());
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, vec!["red".into(), "green".into()]).unwrap()
}

/// Central finite differences at two step sizes. Where the two estimates
/// disagree, a ReLU/maxpool kink sits inside the probe interval and the
/// analytic subgradient is not comparable; such probes are skipped.
/// Returns (verified, skipped) and panics on any true mismatch.
pub(crate) fn fd_verify(
    loss: &dyn Fn(&Image) -> f64,
    img: &Image,
    grad: &Array3<f64>,
    probes: &[(usize, usize, usize)],
    label: &str,
) -> (usize, usize) {
    // 0.255 pixel units = 1e-3 in the model's 0..=1 input scale.
    let h = 0.255;
    let central = |coord: (usize, usize, usize), step: f64| -> f64 {
        let mut up = img.pixels().clone();
        up[coord] += step;
        let mut dn = img.pixels().clone();
        dn[coord] -= step;
        (loss(&Image::new(up).unwrap()) - loss(&Image::new(dn).unwrap())) / (2.0 * step)
    };
    let mut verified = 0;
    let mut skipped = 0;
    for &coord in probes {
        let fd_h = central(coord, h);
        let fd_h2 = central(coord, h / 2.0);
        let an = grad[coord];
        let scale = fd_h.abs().max(fd_h2.abs()).max(an.abs()).max(1e-8);
        if (fd_h - fd_h2).abs() > 1e-4 * scale {
            skipped += 1;
            continue;
        }
        let rel = (fd_h2 - an).abs() / fd_h2.abs().max(an.abs()).max(1e-8);
        assert!(rel < 1e-3, "{label} {coord:?}: fd {fd_h2} vs analytic {an}");
        verified += 1;
    }
    (verified, skipped)
}

/// Random probe coordinates for an image of the given shape.
pub(crate) fn rand_probes(
    seed: u64,
    n: usize,
    (h, w, c): (usize, usize, usize),
) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.random_range(0..h),
                rng.random_range(0..w),
                rng.random_range(0..c),
            )
        })
        .collect()
}
