//! Long-tailed dataset synthesis, imbalance weights, and frequency groups.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_map::Image;
use crate::rng::{derive_seed_indexed, normal, seeded_rng};
use crate::scalar::Scalar;

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Count decay profile of the synthetic long tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceKind {
    /// n_k = round(n_max · ratio^(−k/(K−1)))
    Exponential,
    /// First half of the classes at n_max, second half at round(n_max/ratio).
    Step,
}

/// Frequency group of a class, by its training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Spatial shape of synthesized images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageShape {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
        }
    }
}

/// A labeled image collection for one split.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    split: Split,
    num_classes: usize,
    class_names: Vec<String>,
    images: Vec<Image<F>>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    shape: ImageShape,
    seed: u64,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(
        split: Split,
        num_classes: usize,
        images: Vec<Image<F>>,
        labels: Vec<usize>,
        shape: ImageShape,
        seed: u64,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &label in &labels {
            if label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "label {label} outside [0,{num_classes})"
                )));
            }
            class_counts[label] += 1;
        }
        if split == Split::Train && class_counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(
                "train split requires every class count ≥ 1".into(),
            ));
        }
        let class_names = (0..num_classes).map(|k| format!("class_{k:03}")).collect();
        Ok(Self {
            split,
            num_classes,
            class_names,
            images,
            labels,
            class_counts,
            shape,
            seed,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Image<F> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Blob bytes: sample-major, row-major, channels-last, little-endian f32.
    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            self.images.len() * self.shape.height * self.shape.width * self.shape.channels * 4,
        );
        for img in &self.images {
            for v in img.data() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.blob_bytes())
    }

    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        let blob = self.blob_bytes();
        let manifest = DatasetManifest {
            format: DATASET_MAGIC.into(),
            version: 1,
            split: self.split,
            seed: self.seed,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            class_counts: self.class_counts.clone(),
            height: self.shape.height,
            width: self.shape.width,
            channels: self.shape.channels,
            labels: self.labels.clone(),
            checksum: sha256_hex(&blob),
        };
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        if manifest.format != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset manifest format tag {:?}",
                manifest.format
            )));
        }
        let blob = fs::read(blob_path)?;
        if sha256_hex(&blob) != manifest.checksum {
            return Err(Error::Format("dataset blob checksum mismatch".into()));
        }
        let pixels = manifest.height * manifest.width * manifest.channels;
        if blob.len() != manifest.labels.len() * pixels * 4 {
            return Err(Error::Format(format!(
                "dataset blob length {} != {} samples × {} floats",
                blob.len(),
                manifest.labels.len(),
                pixels
            )));
        }
        let mut images = Vec::with_capacity(manifest.labels.len());
        for i in 0..manifest.labels.len() {
            let mut data = Vec::with_capacity(pixels);
            for p in 0..pixels {
                let at = (i * pixels + p) * 4;
                let bytes: [u8; 4] = blob[at..at + 4].try_into().unwrap();
                data.push(F::from_f64_lossy(f64::from(f32::from_le_bytes(bytes))));
            }
            images.push(Image::from_vec(
                manifest.height,
                manifest.width,
                manifest.channels,
                data,
            )?);
        }
        Self::new(
            manifest.split,
            manifest.num_classes,
            images,
            manifest.labels,
            ImageShape {
                height: manifest.height,
                width: manifest.width,
                channels: manifest.channels,
            },
            manifest.seed,
        )
    }
}

const DATASET_MAGIC: &str = "ltds";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    split: Split,
    seed: u64,
    num_classes: usize,
    class_names: Vec<String>,
    class_counts: Vec<usize>,
    height: usize,
    width: usize,
    channels: usize,
    labels: Vec<usize>,
    checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Per-class counts for the requested decay profile.
pub fn longtailed_counts(
    num_classes: usize,
    n_max: usize,
    imbalance_ratio: f64,
    profile: ImbalanceKind,
) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::InvalidProfile(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if !(imbalance_ratio > 1.0) {
        return Err(Error::InvalidProfile(format!(
            "imbalance_ratio must be > 1, got {imbalance_ratio}"
        )));
    }
    if (n_max as f64) / imbalance_ratio < 1.0 {
        return Err(Error::InvalidProfile(format!(
            "n_max {n_max} / ratio {imbalance_ratio} < 1"
        )));
    }
    let counts = match profile {
        ImbalanceKind::Exponential => (0..num_classes)
            .map(|k| {
                let exponent = -(k as f64) / (num_classes as f64 - 1.0);
                (n_max as f64 * imbalance_ratio.powf(exponent)).round() as usize
            })
            .collect(),
        ImbalanceKind::Step => {
            let head = num_classes.div_ceil(2);
            let tail_count = ((n_max as f64) / imbalance_ratio).round().max(1.0) as usize;
            (0..num_classes)
                .map(|k| if k < head { n_max } else { tail_count })
                .collect()
        }
    };
    Ok(counts)
}

// Pixel noise added on top of each class template. The trend experiments
// rely on this making tail classes genuinely hard to fit from few samples.
const IMAGE_NOISE_STD: f64 = 5.0;

/// Class template value at one pixel: a seeded mixture of sinusoids plus a
/// localized blob. Depends only on (seed, class), so every split shares it.
fn template_value(seed: u64, class: usize, shape: ImageShape, y: usize, x: usize, c: usize) -> f64 {
    let mut rng = seeded_rng(derive_seed_indexed(
        seed,
        "template",
        (class * shape.channels + c) as u64,
    ));
    let fy = (y as f64 + 0.5) / shape.height as f64;
    let fx = (x as f64 + 0.5) / shape.width as f64;
    let mut v = 0.0;
    for _ in 0..3 {
        let wave_x: f64 = rng.gen_range(0..4) as f64;
        let wave_y: f64 = rng.gen_range(0..4) as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.5..1.2);
        v += amp * (std::f64::consts::TAU * (wave_x * fx + wave_y * fy) + phase).sin();
    }
    let cx: f64 = rng.gen_range(0.2..0.8);
    let cy: f64 = rng.gen_range(0.2..0.8);
    let sigma: f64 = rng.gen_range(0.12..0.25);
    let blob_amp: f64 = rng.gen_range(1.0..2.0);
    let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
    v + blob_amp * (-d2 / (2.0 * sigma * sigma)).exp()
}

fn synth_image<F: Scalar>(
    seed: u64,
    split: Split,
    class: usize,
    index_in_class: usize,
    shape: ImageShape,
) -> Image<F> {
    let tag = format!("image-{}-{class}", split.as_str());
    let mut rng = seeded_rng(derive_seed_indexed(seed, &tag, index_in_class as u64));
    let mut data = Vec::with_capacity(shape.height * shape.width * shape.channels);
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                let t = template_value(seed, class, shape, y, x, c);
                let n: f64 = normal::<f64, _>(&mut rng);
                data.push(F::from_f64_lossy(t + IMAGE_NOISE_STD * n));
            }
        }
    }
    Image::from_vec(shape.height, shape.width, shape.channels, data).expect("consistent dims")
}

/// Synthesize a long-tailed training split. Identical seeds give
/// bit-identical datasets.
pub fn synth_longtailed<F: Scalar>(
    num_classes: usize,
    n_max: usize,
    imbalance_ratio: f64,
    profile: ImbalanceKind,
    shape: ImageShape,
    seed: u64,
) -> Result<Dataset<F>> {
    let counts = longtailed_counts(num_classes, n_max, imbalance_ratio, profile)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, &count) in counts.iter().enumerate() {
        for i in 0..count {
            images.push(synth_image(seed, Split::Train, class, i, shape));
            labels.push(class);
        }
    }
    Dataset::new(Split::Train, num_classes, images, labels, shape, seed)
}

/// Synthesize a balanced evaluation split drawn from the same class
/// templates as the training split with the same seed.
pub fn synth_balanced<F: Scalar>(
    num_classes: usize,
    per_class: usize,
    split: Split,
    shape: ImageShape,
    seed: u64,
) -> Result<Dataset<F>> {
    if num_classes < 2 {
        return Err(Error::InvalidProfile(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..num_classes {
        for i in 0..per_class {
            images.push(synth_image(seed, split, class, i, shape));
            labels.push(class);
        }
    }
    Dataset::new(split, num_classes, images, labels, shape, seed)
}

/// Imbalance weight per class: w_k = 1 − n_k / max_j n_j.
/// Monotone non-increasing in the count; the largest class gets exactly 0.
pub fn compute_weights<F: Scalar>(counts: &[usize]) -> Result<Vec<F>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("empty class counts".into()));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidInput("all class counts must be ≥ 1".into()));
    }
    let n_max = *counts.iter().max().unwrap() as f64;
    Ok(counts
        .iter()
        .map(|&c| F::from_f64_lossy(1.0 - c as f64 / n_max))
        .collect())
}

/// Frequency thresholds separating many/medium/few classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        // The ImageNet-LT convention: >100 / [20,100] / <20 samples.
        Self {
            many_min: 100,
            few_max: 20,
        }
    }
}

/// Group per class: count > many_min → many, count < few_max → few,
/// everything in between (inclusive) → medium.
pub fn assign_groups(counts: &[usize], thresholds: GroupThresholds) -> Result<Vec<Group>> {
    if thresholds.many_min <= thresholds.few_max {
        return Err(Error::InvalidConfig(format!(
            "many_min {} must exceed few_max {}",
            thresholds.many_min, thresholds.few_max
        )));
    }
    Ok(counts
        .iter()
        .map(|&c| {
            if c > thresholds.many_min {
                Group::Many
            } else if c < thresholds.few_max {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect())
}

/// Per-class counts, derived weights, and frequency groups for one dataset.
#[derive(Debug, Clone)]
pub struct ImbalanceProfile<F> {
    pub counts: Vec<usize>,
    pub weights: Vec<F>,
    pub groups: Vec<Group>,
    pub thresholds: GroupThresholds,
}

impl<F: Scalar> ImbalanceProfile<F> {
    pub fn from_counts(counts: &[usize], thresholds: GroupThresholds) -> Result<Self> {
        Ok(Self {
            counts: counts.to_vec(),
            weights: compute_weights(counts)?,
            groups: assign_groups(counts, thresholds)?,
            thresholds,
        })
    }

    /// Training-count priors, for logit adjustment.
    pub fn priors(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }
}
