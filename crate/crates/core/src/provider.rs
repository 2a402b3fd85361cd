//! Stand-in for the frozen foundation model: stores C×H×W feature maps and
//! post-processes them into the single-channel mask and pooled latent vector
//! that the fusion network consumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Dataset};
use crate::error::{Error, Result};
use crate::feature_map::{FeatureMap, LatentVector};
use crate::rng::{derive_seed_indexed, normal, seeded_rng};
use crate::scalar::Scalar;

/// Result of reducing a feature map to its first principal component scores.
#[derive(Debug, Clone)]
pub struct PcaReduction<F> {
    /// 1×H×W map of scores along the first principal direction.
    pub map: FeatureMap<F>,
    /// Set when the input had (numerically) zero variance over positions;
    /// the map is then all zeros instead of an error so a blank image never
    /// aborts a run.
    pub degenerate: bool,
}

/// Channel reduction to a single-channel map: treat each of the H·W spatial
/// positions as a C-dimensional sample, center over positions, and project
/// onto the first principal direction (power iteration on the covariance).
///
/// Sign convention: the principal direction is flipped so its largest-
/// magnitude loading is positive, making outputs deterministic.
pub fn pca_reduce<F: Scalar>(map: &FeatureMap<F>) -> Result<PcaReduction<F>> {
    let (channels, height, width) = map.shape();
    let positions = height * width;
    if positions < 2 {
        return Err(Error::InsufficientSamples(format!(
            "pca needs ≥ 2 spatial positions, got {height}x{width}"
        )));
    }

    // Per-channel mean over positions.
    let mut mean = vec![F::zero(); channels];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut acc = F::zero();
        for v in map.channel(c) {
            acc += *v;
        }
        *m = acc / F::from_f64_lossy(positions as f64);
    }

    // Covariance over positions (divide by n; the scale does not affect the
    // principal direction).
    let mut cov = vec![F::zero(); channels * channels];
    for p in 0..positions {
        for a in 0..channels {
            let da = map.data()[a * positions + p] - mean[a];
            for b in a..channels {
                let db = map.data()[b * positions + p] - mean[b];
                cov[a * channels + b] += da * db;
            }
        }
    }
    let n = F::from_f64_lossy(positions as f64);
    for a in 0..channels {
        for b in a..channels {
            let v = cov[a * channels + b] / n;
            cov[a * channels + b] = v;
            cov[b * channels + a] = v;
        }
    }

    // Degeneracy: total variance at the level of accumulated rounding noise.
    let trace: F = (0..channels).map(|c| cov[c * channels + c]).sum();
    let scale: F = map.data().iter().map(|v| *v * *v).sum::<F>() / n;
    let tiny = F::epsilon() * F::from_f64_lossy(100.0) * scale.max(F::one());
    if trace <= tiny {
        return Ok(PcaReduction {
            map: FeatureMap::zeros(1, height, width),
            degenerate: true,
        });
    }

    // Power iteration for the dominant eigenvector. The covariance is PSD,
    // so the dominant eigenvalue is the largest one.
    let mut dir = vec![F::from_f64_lossy(1.0 / (channels as f64).sqrt()); channels];
    let mut next = vec![F::zero(); channels];
    let tol = F::epsilon() * F::from_f64_lossy(16.0);
    for _ in 0..50_000 {
        for (a, slot) in next.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (b, d) in dir.iter().enumerate() {
                acc += cov[a * channels + b] * *d;
            }
            *slot = acc;
        }
        let norm = next.iter().map(|v| *v * *v).sum::<F>().sqrt();
        if norm == F::zero() {
            // Start vector happened to be orthogonal to the range; nudge it.
            dir[0] += F::from_f64_lossy(0.5);
            let renorm = dir.iter().map(|v| *v * *v).sum::<F>().sqrt();
            dir.iter_mut().for_each(|v| *v /= renorm);
            continue;
        }
        next.iter_mut().for_each(|v| *v /= norm);
        let delta = dir
            .iter()
            .zip(&next)
            .map(|(a, b)| (*a - *b).abs().min((*a + *b).abs()))
            .fold(F::zero(), F::max);
        dir.copy_from_slice(&next);
        if delta < tol {
            break;
        }
    }

    // Sign convention on the loading with the largest magnitude.
    let mut lead = 0;
    for (c, v) in dir.iter().enumerate() {
        if v.abs() > dir[lead].abs() {
            lead = c;
        }
    }
    if dir[lead] < F::zero() {
        dir.iter_mut().for_each(|v| *v = -*v);
    }

    let mut scores = FeatureMap::zeros(1, height, width);
    for p in 0..positions {
        let mut s = F::zero();
        for c in 0..channels {
            s += dir[c] * (map.data()[c * positions + p] - mean[c]);
        }
        scores.data_mut()[p] = s;
    }
    Ok(PcaReduction {
        map: scores,
        degenerate: false,
    })
}

/// Min-max normalize a single-channel map to [0,1], then bilinear-resize to
/// the target shape. Degenerate (constant) maps become all zeros. Resampling
/// uses the half-pixel (align-corners-false) convention: output pixel j
/// samples the source at (j + 0.5)·src/dst − 0.5.
pub fn normalize_resize<F: Scalar>(
    map: &FeatureMap<F>,
    target_height: usize,
    target_width: usize,
) -> Result<FeatureMap<F>> {
    let (channels, height, width) = map.shape();
    if channels != 1 {
        return Err(Error::InvalidShape(format!(
            "normalize_resize expects a single-channel map, got {channels}"
        )));
    }
    if target_height < 1 || target_width < 1 {
        return Err(Error::InvalidShape(format!(
            "target dims must be ≥ 1, got {target_height}x{target_width}"
        )));
    }

    let mut lo = F::infinity();
    let mut hi = F::neg_infinity();
    for v in map.data() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    let mut normalized = vec![F::zero(); height * width];
    if span > F::zero() {
        for (slot, v) in normalized.iter_mut().zip(map.data()) {
            *slot = (*v - lo) / span;
        }
    }

    let mut out = FeatureMap::zeros(1, target_height, target_width);
    let sy = height as f64 / target_height as f64;
    let sx = width as f64 / target_width as f64;
    for ty in 0..target_height {
        let src_y = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = F::from_f64_lossy(src_y - y0 as f64);
        for tx in 0..target_width {
            let src_x = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = F::from_f64_lossy(src_x - x0 as f64);
            let one = F::one();
            let v = normalized[y0 * width + x0] * (one - wy) * (one - wx)
                + normalized[y0 * width + x1] * (one - wy) * wx
                + normalized[y1 * width + x0] * wy * (one - wx)
                + normalized[y1 * width + x1] * wy * wx;
            out.data_mut()[ty * target_width + tx] = v;
        }
    }
    Ok(out)
}

/// Average-pool a C×H×W map into a length-C latent vector.
pub fn pool_latent<F: Scalar>(map: &FeatureMap<F>) -> LatentVector<F> {
    let (channels, height, width) = map.shape();
    let n = F::from_f64_lossy((height * width) as f64);
    (0..channels)
        .map(|c| {
            let mut acc = F::zero();
            for v in map.channel(c) {
                acc += *v;
            }
            acc / n
        })
        .collect()
}

// ---------------------------------------------------------------------------
// LTFF v1 store
// ---------------------------------------------------------------------------

const LTFF_MAGIC: &[u8; 4] = b"LTFF";
const LTFF_VERSION: u32 = 1;
const LTFF_HEADER_LEN: usize = 12;
const LTFF_RECORD_HEADER_LEN: usize = 10;

/// In-memory feature store keyed by sample id, persisted as an LTFF v1 blob
/// with a JSON sidecar manifest.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore<F> {
    records: BTreeMap<u32, FeatureMap<F>>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    version: u32,
    count: usize,
    records: BTreeMap<u32, RecordEntry>,
    checksum: String,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
struct RecordEntry {
    offset: u64,
    c: u16,
    h: u16,
    w: u16,
}

impl<F: Scalar> FeatureStore<F> {
    pub fn new() -> Self {
        Self {
            records: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.records.keys().copied()
    }

    pub fn insert(&mut self, id: u32, map: FeatureMap<F>) -> Result<()> {
        if self.records.contains_key(&id) {
            return Err(Error::Conflict(format!("duplicate feature id {id}")));
        }
        self.records.insert(id, map);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Result<&FeatureMap<F>> {
        self.records
            .get(&id)
            .ok_or_else(|| Error::MissingFeature(format!("no feature record for id {id}")))
    }

    pub fn contains(&self, id: u32) -> bool {
        self.records.contains_key(&id)
    }

    /// Serialize to LTFF v1 bytes (records in ascending id order).
    pub fn to_ltff_bytes(&self) -> (Vec<u8>, StoreManifestData) {
        let mut blob = Vec::new();
        blob.extend_from_slice(LTFF_MAGIC);
        blob.extend_from_slice(&LTFF_VERSION.to_le_bytes());
        blob.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut entries = BTreeMap::new();
        for (&id, map) in &self.records {
            let (c, h, w) = map.shape();
            let offset = blob.len() as u64;
            blob.extend_from_slice(&id.to_le_bytes());
            blob.extend_from_slice(&(c as u16).to_le_bytes());
            blob.extend_from_slice(&(h as u16).to_le_bytes());
            blob.extend_from_slice(&(w as u16).to_le_bytes());
            for v in map.data() {
                blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            entries.insert(
                id,
                RecordEntry {
                    offset,
                    c: c as u16,
                    h: h as u16,
                    w: w as u16,
                },
            );
        }
        let checksum = sha256_hex(&blob);
        (
            blob,
            StoreManifestData {
                entries,
                checksum,
            },
        )
    }

    pub fn save(&self, blob_path: &Path, manifest_path: &Path) -> Result<()> {
        let (blob, data) = self.to_ltff_bytes();
        let manifest = StoreManifest {
            version: LTFF_VERSION,
            count: data.entries.len(),
            records: data.entries,
            checksum: data.checksum,
        };
        fs::write(blob_path, blob)?;
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Open and fully validate a store: magic, version, unique ids, record
    /// decodability, non-overlapping offsets, and the whole-file checksum.
    pub fn load(blob_path: &Path, manifest_path: &Path) -> Result<Self> {
        let blob = fs::read(blob_path)?;
        let manifest: StoreManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        if blob.len() < LTFF_HEADER_LEN {
            return Err(Error::Format("truncated LTFF header".into()));
        }
        if &blob[0..4] != LTFF_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
        if version != LTFF_VERSION {
            return Err(Error::Format(format!("unsupported LTFF version {version}")));
        }
        let count = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
        if count != manifest.records.len() || count != manifest.count {
            return Err(Error::Format(format!(
                "record count mismatch: blob {count}, manifest {}",
                manifest.records.len()
            )));
        }
        if sha256_hex(&blob) != manifest.checksum {
            return Err(Error::Format("LTFF checksum mismatch".into()));
        }

        // Offsets must be non-overlapping (and in-bounds).
        let mut spans: Vec<(u64, u64, u32)> = Vec::with_capacity(count);
        for (&id, entry) in &manifest.records {
            let payload = 4 * u64::from(entry.c) * u64::from(entry.h) * u64::from(entry.w);
            let end = entry.offset + LTFF_RECORD_HEADER_LEN as u64 + payload;
            if entry.offset < LTFF_HEADER_LEN as u64 || end > blob.len() as u64 {
                return Err(Error::Format(format!("record {id} out of bounds")));
            }
            spans.push((entry.offset, end, id));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!(
                    "overlapping records {} and {}",
                    pair[0].2, pair[1].2
                )));
            }
        }

        let mut store = Self::new();
        for (&id, entry) in &manifest.records {
            let at = entry.offset as usize;
            let rec_id = u32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
            if rec_id != id {
                return Err(Error::Format(format!(
                    "manifest id {id} points at record id {rec_id}"
                )));
            }
            let c = u16::from_le_bytes(blob[at + 4..at + 6].try_into().unwrap()) as usize;
            let h = u16::from_le_bytes(blob[at + 6..at + 8].try_into().unwrap()) as usize;
            let w = u16::from_le_bytes(blob[at + 8..at + 10].try_into().unwrap()) as usize;
            if (c, h, w) != (entry.c as usize, entry.h as usize, entry.w as usize) {
                return Err(Error::Format(format!("record {id} shape mismatch")));
            }
            let mut data = Vec::with_capacity(c * h * w);
            let base = at + LTFF_RECORD_HEADER_LEN;
            for i in 0..c * h * w {
                let bytes: [u8; 4] = blob[base + 4 * i..base + 4 * i + 4].try_into().unwrap();
                data.push(F::from_f64_lossy(f64::from(f32::from_le_bytes(bytes))));
            }
            store.insert(id, FeatureMap::from_vec(c, h, w, data)?)?;
        }
        Ok(store)
    }

    pub fn checksum(&self) -> String {
        self.to_ltff_bytes().1.checksum
    }
}

/// Manifest payload produced alongside the blob bytes.
pub struct StoreManifestData {
    entries: BTreeMap<u32, RecordEntry>,
    pub checksum: String,
}

// ---------------------------------------------------------------------------
// Synthetic provider
// ---------------------------------------------------------------------------

/// Shape and strength of synthesized provider features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Feature channels (the provider latent dimension after pooling).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// 0 yields class-uninformative features; ≥ 1 makes a linear probe on
    /// pooled features nearly perfect.
    pub signal_strength: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 8,
            width: 8,
            signal_strength: 0.5,
        }
    }
}

// Noise model of the synthetic provider. The per-sample offset survives
// average pooling, so pooled features stay noisy at moderate signal strength
// instead of collapsing onto clean class means.
const PROVIDER_ELEMENT_NOISE: f64 = 1.0;
const PROVIDER_SAMPLE_OFFSET_STD: f64 = 0.7;

/// Deterministic class signature: per-channel mean plus a spatial variation.
fn class_pattern(seed: u64, class: usize, cfg: &ProviderConfig) -> FeatureMap<f64> {
    let mut map = FeatureMap::zeros(cfg.channels, cfg.height, cfg.width);
    for c in 0..cfg.channels {
        let mut rng = seeded_rng(derive_seed_indexed(
            seed,
            "provider-pattern",
            (class * cfg.channels + c) as u64,
        ));
        let channel_mean: f64 = normal::<f64, _>(&mut rng);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let variation: f64 = normal::<f64, _>(&mut rng);
                map.set(c, y, x, channel_mean + 0.5 * variation);
            }
        }
    }
    map
}

/// Synthesize a feature store for a dataset split: per-sample map =
/// signal_strength · class pattern + noise. Sample ids equal dataset indices.
pub fn synth_provider<F: Scalar>(
    dataset: &Dataset<F>,
    cfg: &ProviderConfig,
    seed: u64,
) -> Result<FeatureStore<F>> {
    if cfg.signal_strength < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "signal_strength must be ≥ 0, got {}",
            cfg.signal_strength
        )));
    }
    let patterns: Vec<FeatureMap<f64>> = (0..dataset.num_classes())
        .map(|k| class_pattern(seed, k, cfg))
        .collect();
    let mut store = FeatureStore::new();
    for i in 0..dataset.len() {
        let class = dataset.label(i);
        let tag = format!("provider-noise-{}", dataset.split().as_str());
        let mut rng = seeded_rng(derive_seed_indexed(seed, &tag, i as u64));
        let pattern = &patterns[class];
        let mut map = FeatureMap::zeros(cfg.channels, cfg.height, cfg.width);
        for c in 0..cfg.channels {
            // Spatially constant per-sample offset; survives pooling.
            let offset: f64 = normal::<f64, _>(&mut rng);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let element: f64 = normal::<f64, _>(&mut rng);
                    let v = cfg.signal_strength * pattern.at(c, y, x)
                        + PROVIDER_SAMPLE_OFFSET_STD * offset
                        + PROVIDER_ELEMENT_NOISE * element;
                    map.set(c, y, x, F::from_f64_lossy(v));
                }
            }
        }
        store.insert(i as u32, map)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_longtailed, ImageShape, ImbalanceKind};

    fn map2(values: &[f64], channels: usize, height: usize, width: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(channels, height, width, values.to_vec()).unwrap()
    }

    #[test]
    fn pca_two_point_example() {
        // Positions (1,2) and (3,6): centered (−1,−2), (1,2); principal
        // direction ∝ (1,2)/√5, scores ∓√5.
        let map = map2(&[1.0, 3.0, 2.0, 6.0], 2, 1, 2);
        let r = pca_reduce(&map).unwrap();
        assert!(!r.degenerate);
        let s5 = 5.0f64.sqrt();
        assert!((r.map.data()[0] - (-s5)).abs() < 1e-10, "{:?}", r.map.data());
        assert!((r.map.data()[1] - s5).abs() < 1e-10);
    }

    #[test]
    fn pca_constant_map_is_degenerate() {
        let map = map2(&[5.0; 12], 3, 2, 2);
        let r = pca_reduce(&map).unwrap();
        assert!(r.degenerate);
        assert!(r.map.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pca_single_channel_is_centering() {
        let map = map2(&[1.0, 2.0, 4.0, 7.0], 1, 2, 2);
        let r = pca_reduce(&map).unwrap();
        let mean = 3.5;
        for (s, v) in r.map.data().iter().zip([1.0, 2.0, 4.0, 7.0]) {
            assert!((s - (v - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_rejects_single_position() {
        let map = map2(&[1.0, 2.0], 2, 1, 1);
        assert!(matches!(
            pca_reduce(&map),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn normalize_minmax_example() {
        let map = map2(&[2.0, 4.0], 1, 1, 2);
        let out = normalize_resize(&map, 1, 2).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_constant_map_is_zeros() {
        let map = map2(&[3.0; 4], 1, 2, 2);
        let out = normalize_resize(&map, 2, 2).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_center_sample() {
        // [[0,1],[2,3]] normalized to [[0,1/3],[2/3,1]]; the single output
        // pixel samples the exact center with equal weights: mean = 0.5.
        let map = map2(&[0.0, 1.0, 2.0, 3.0], 1, 2, 2);
        let out = normalize_resize(&map, 1, 1).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resize_same_shape_is_identity_after_normalization() {
        let map = map2(&[0.3, 0.9, 0.1, 0.4, 0.8, 0.2], 1, 2, 3);
        let normalized = normalize_resize(&map, 2, 3).unwrap();
        let again = normalize_resize(&normalized, 2, 3).unwrap();
        for (a, b) in normalized.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_output_stays_in_unit_range() {
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(2..6);
            let data: Vec<f64> = (0..h * w).map(|_| normal::<f64, _>(&mut rng)).collect();
            let map = FeatureMap::from_vec(1, h, w, data).unwrap();
            let out = normalize_resize(&map, rng.gen_range(1..8), rng.gen_range(1..8)).unwrap();
            for v in out.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn pool_latent_examples() {
        let ones = map2(&[1.0; 12], 3, 2, 2);
        assert_eq!(pool_latent(&ones), vec![1.0, 1.0, 1.0]);
        let one_channel = map2(&[0.0, 1.0, 2.0, 3.0], 1, 2, 2);
        assert_eq!(pool_latent(&one_channel), vec![1.5]);
        let singleton = map2(&[7.5], 1, 1, 1);
        assert_eq!(pool_latent(&singleton), vec![7.5]);
    }

    #[test]
    fn pool_latent_commutes_with_channel_permutation() {
        let mut rng = seeded_rng(11);
        let data: Vec<f64> = (0..3 * 2 * 2).map(|_| normal::<f64, _>(&mut rng)).collect();
        let map = FeatureMap::from_vec(3, 2, 2, data.clone()).unwrap();
        let mut permuted = Vec::new();
        for c in [2usize, 0, 1] {
            permuted.extend_from_slice(&data[c * 4..(c + 1) * 4]);
        }
        let pmap = FeatureMap::from_vec(3, 2, 2, permuted).unwrap();
        let a = pool_latent(&map);
        let b = pool_latent(&pmap);
        assert_eq!(vec![a[2], a[0], a[1]], b);
    }

    use rand::Rng;

    #[test]
    fn store_roundtrip_in_memory() {
        let mut store = FeatureStore::<f32>::new();
        let mut rng = seeded_rng(5);
        let data: Vec<f32> = (0..4 * 3 * 3).map(|_| normal::<f32, _>(&mut rng)).collect();
        let map = FeatureMap::from_vec(4, 3, 3, data).unwrap();
        store.insert(7, map.clone()).unwrap();
        assert_eq!(store.get(7).unwrap(), &map);
        assert!(matches!(store.get(8), Err(Error::MissingFeature(_))));
        assert!(matches!(
            store.insert(7, map),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn store_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::<f32>::new();
        let mut rng = seeded_rng(6);
        for id in 0..5u32 {
            let data: Vec<f32> = (0..2 * 4 * 4).map(|_| normal::<f32, _>(&mut rng)).collect();
            store
                .insert(id, FeatureMap::from_vec(2, 4, 4, data).unwrap())
                .unwrap();
        }
        let blob = dir.path().join("f.ltff");
        let man = dir.path().join("f.json");
        store.save(&blob, &man).unwrap();
        let loaded = FeatureStore::<f32>::load(&blob, &man).unwrap();
        assert_eq!(store.checksum(), loaded.checksum());
        for id in 0..5u32 {
            assert_eq!(store.get(id).unwrap(), loaded.get(id).unwrap());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::<f32>::new();
        store.insert(0, FeatureMap::zeros(1, 2, 2)).unwrap();
        let blob = dir.path().join("f.ltff");
        let man = dir.path().join("f.json");
        store.save(&blob, &man).unwrap();
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] = b'X';
        fs::write(&blob, bytes).unwrap();
        match FeatureStore::<f32>::load(&blob, &man) {
            Err(Error::Format(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_offsets_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::<f32>::new();
        store.insert(0, FeatureMap::zeros(1, 2, 2)).unwrap();
        store.insert(1, FeatureMap::zeros(1, 2, 2)).unwrap();
        let blob = dir.path().join("f.ltff");
        let man = dir.path().join("f.json");
        store.save(&blob, &man).unwrap();
        // Rewrite the manifest so record 1 overlaps record 0, keeping the
        // blob (and its checksum) intact.
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(&man).unwrap()).unwrap();
        let off0 = manifest["records"]["0"]["offset"].as_u64().unwrap();
        manifest["records"]["1"]["offset"] = serde_json::json!(off0 + 4);
        fs::write(&man, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match FeatureStore::<f32>::load(&blob, &man) {
            Err(Error::Format(msg)) => assert!(msg.contains("overlap"), "{msg}"),
            other => panic!("expected overlap failure, got {other:?}"),
        }
    }

    #[test]
    fn synth_provider_is_deterministic() {
        let ds: Dataset<f32> = synth_longtailed(
            3,
            12,
            4.0,
            ImbalanceKind::Exponential,
            ImageShape::default(),
            21,
        )
        .unwrap();
        let cfg = ProviderConfig {
            channels: 4,
            height: 4,
            width: 4,
            signal_strength: 0.7,
        };
        let a = synth_provider(&ds, &cfg, 9).unwrap();
        let b = synth_provider(&ds, &cfg, 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.len(), ds.len());
    }
}
