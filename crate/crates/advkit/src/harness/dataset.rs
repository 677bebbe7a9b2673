//! Dataset plumbing for experiments: a deterministic synthetic generator
//! (colored shapes and textures, one look per class), directory ingestion
//! driven by a JSON manifest, and the matching exporter.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::Image;
use crate::models::LabeledDataset;

use super::HarnessError;

/// Manifest format for [`ingest_image_directory`]: the class list plus one
/// entry per image file. File paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

/// One manifest entry: an image file and its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub label: String,
}

/// Preprocessing provenance for one ingested image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub file: String,
    pub original_hw: (usize, usize),
    pub stored_hw: (usize, usize),
    pub resized: bool,
}

/// An ingested dataset plus the per-image preprocessing records.
#[derive(Debug, Clone)]
pub struct IngestedDataset {
    pub dataset: LabeledDataset,
    pub provenance: Vec<IngestRecord>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

/// Builds a deterministic labeled dataset of `classes` * `per_class` square
/// RGB images. Each class pairs a distinct hue with a distinct shape family
/// (disc, square, or diagonal stripes), with per-sample jitter in geometry,
/// color, and background noise. Pixels are integral, so the images can cross
/// the oracle wire unmodified. `size` must be even and at least 8 so the
/// images fit every model architecture.
pub fn generate_synthetic_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset, HarnessError> {
    if classes < 2 {
        return Err(HarnessError::Config(format!(
            "synthetic dataset needs at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(HarnessError::Config(
            "synthetic dataset needs at least 1 image per class".to_string(),
        ));
    }
    if size < 8 || size % 2 != 0 {
        return Err(HarnessError::Config(format!(
            "synthetic image size must be even and >= 8, got {size}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let hue = class as f64 / classes as f64;
        let fore = hsv_to_rgb(hue, 0.85, 0.9);
        let back = hsv_to_rgb(hue + 0.5, 0.4, 0.28);
        for _ in 0..per_class {
            images.push(synth_image(&mut rng, size, class, fore, back));
            labels.push(class);
        }
    }
    let class_names = (0..classes).map(|c| format!("class-{c:02}")).collect();
    Ok(LabeledDataset::new(images, labels, class_names)?)
}

fn synth_image(
    rng: &mut ChaCha8Rng,
    size: usize,
    class: usize,
    fore: [f64; 3],
    back: [f64; 3],
) -> Image {
    let s = size as f64;
    let jitter: [f64; 3] = [
        rng.random_range(-14.0..14.0),
        rng.random_range(-14.0..14.0),
        rng.random_range(-14.0..14.0),
    ];
    let cx = s / 2.0 + rng.random_range(-s / 6.0..s / 6.0);
    let cy = s / 2.0 + rng.random_range(-s / 6.0..s / 6.0);
    let extent = s * rng.random_range(0.24..0.34);
    let period = (size / 5).max(2) as i64 + rng.random_range(-1..=1);
    let phase = rng.random_range(0..period.max(1)) as i64;

    let mut data = Array3::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let inside = match class % 3 {
                0 => {
                    let di = i as f64 - cy;
                    let dj = j as f64 - cx;
                    (di * di + dj * dj).sqrt() <= extent
                }
                1 => (i as f64 - cy).abs() <= extent && (j as f64 - cx).abs() <= extent,
                _ => {
                    let diag = if class % 2 == 0 {
                        i as i64 + j as i64
                    } else {
                        i as i64 - j as i64
                    };
                    (diag + phase).rem_euclid(2 * period.max(1)) < period.max(1)
                }
            };
            let base = if inside { fore } else { back };
            for c in 0..3 {
                let noise: f64 = rng.random_range(-10.0..10.0);
                let v: f64 = base[c] + if inside { jitter[c] } else { 0.0 } + noise;
                data[(i, j, c)] = v.clamp(0.0, 255.0).round();
            }
        }
    }
    Image::new(data).expect("synthetic pixels are in range")
}

fn nearest_resize(img: &Image, dst_h: usize, dst_w: usize) -> Image {
    let (h, w, c) = img.shape();
    if (h, w) == (dst_h, dst_w) {
        return img.clone();
    }
    let src = img.pixels();
    let mut out = Array3::zeros((dst_h, dst_w, c));
    for i in 0..dst_h {
        let si = i * h / dst_h;
        for j in 0..dst_w {
            let sj = j * w / dst_w;
            for k in 0..c {
                out[(i, j, k)] = src[(si, sj, k)];
            }
        }
    }
    Image::new(out).expect("resize preserves pixel range")
}

/// Loads the dataset described by `manifest` from `dir`. Relative manifest
/// paths resolve against `dir`. Every image is decoded to RGB and brought to
/// `size` x `size` with nearest-neighbor resampling; the returned provenance
/// records the original dimensions and whether a resize happened.
pub fn ingest_image_directory(
    dir: &Path,
    manifest: &Path,
    size: usize,
) -> Result<IngestedDataset, HarnessError> {
    let manifest_path = if manifest.is_relative() {
        dir.join(manifest)
    } else {
        manifest.to_path_buf()
    };
    let raw = std::fs::read(&manifest_path).map_err(|source| HarnessError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
    if manifest.items.is_empty() {
        return Err(HarnessError::EmptyManifest(manifest_path));
    }

    let mut seen = std::collections::HashSet::new();
    let mut images = Vec::with_capacity(manifest.items.len());
    let mut labels = Vec::with_capacity(manifest.items.len());
    let mut provenance = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        if !seen.insert(item.file.as_str()) {
            return Err(HarnessError::DuplicateFile(item.file.clone()));
        }
        let label = manifest
            .classes
            .iter()
            .position(|c| c == &item.label)
            .ok_or_else(|| HarnessError::UnknownLabel {
                file: item.file.clone(),
                label: item.label.clone(),
            })?;
        let path = dir.join(&item.file);
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::UnreadableImage {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let decoded = image::load_from_memory(&bytes)
            .map_err(|e| HarnessError::UnreadableImage {
                path: path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let img = Image::from_u8(h, w, 3, decoded.as_raw())?;
        let stored = nearest_resize(&img, size, size);
        provenance.push(IngestRecord {
            file: item.file.clone(),
            original_hw: (h, w),
            stored_hw: (size, size),
            resized: (h, w) != (size, size),
        });
        images.push(stored);
        labels.push(label);
    }
    let dataset = LabeledDataset::new(images, labels, manifest.classes.clone())?;
    Ok(IngestedDataset {
        dataset,
        provenance,
    })
}

/// Writes `data` to `dir` as numbered PNG files plus a `manifest.json`, and
/// returns the manifest path. [`ingest_image_directory`] on the result at the
/// same size reproduces the dataset pixel for pixel.
pub fn export_dataset(data: &LabeledDataset, dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut items = Vec::with_capacity(data.len());
    for (idx, (img, &label)) in data.images().iter().zip(data.labels()).enumerate() {
        let file = format!("img-{idx:04}.png");
        let path = dir.join(&file);
        let png = img.to_png_bytes()?;
        std::fs::write(&path, png).map_err(|source| HarnessError::Io { path, source })?;
        items.push(ManifestItem {
            file,
            label: data.class_names()[label].clone(),
        });
    }
    let manifest = DatasetManifest {
        classes: data.class_names().to_vec(),
        items,
    };
    let manifest_path = dir.join("manifest.json");
    let mut body = serde_json::to_vec_pretty(&manifest)?;
    body.push(b'\n');
    std::fs::write(&manifest_path, body).map_err(|source| HarnessError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}
