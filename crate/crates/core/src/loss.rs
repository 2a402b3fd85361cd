//! Memory-bank prototypes and the prototype-based loss family with its
//! head/tail asymmetry.
//!
//! Per-class FIFO banks hold detached embedding snapshots. Their mean is the
//! class prototype; their per-dimension standard deviation drives a
//! stochastic perturbation of tail-class centers. Head classes (low
//! imbalance weight) are pulled toward their prototype; tail classes are
//! simultaneously pulled toward a perturbed prototype and pushed away from
//! the exact one through a negative log-distance term.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Thresholds and coefficients of the prototype losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Samples with imbalance weight strictly below this enter the head loss.
    pub tau_head: f64,
    /// Samples with weight strictly above this enter the tail-std loss.
    pub tau_tail_std: f64,
    /// Samples with weight strictly above this enter the tail-dist loss.
    pub tau_tail_dist: f64,
    /// Coefficient of the prototype loss in the training objective.
    pub beta: f64,
    /// Memory bank capacity per class.
    pub capacity: usize,
    /// Floor inside the tail-dist logarithm, guarding z = c.
    pub distance_floor: f64,
    /// Banks with fewer entries than this are skipped by every loss term.
    pub min_bank: usize,
    /// Draw an independent perturbation sign per dimension instead of one
    /// sign for the whole σ vector.
    pub per_dim_signs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_head: 0.5,
            tau_tail_std: 0.5,
            tau_tail_dist: 0.5,
            beta: 1e-4,
            capacity: 64,
            distance_floor: 1e-12,
            min_bank: 1,
            per_dim_signs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_head", self.tau_head),
            ("tau_tail_std", self.tau_tail_std),
            ("tau_tail_dist", self.tau_tail_dist),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0,1], got {v}"
                )));
            }
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be ≥ 0, got {}",
                self.beta
            )));
        }
        if self.distance_floor <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "distance_floor must be > 0, got {}",
                self.distance_floor
            )));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("capacity must be ≥ 1".into()));
        }
        if self.min_bank == 0 {
            return Err(Error::InvalidConfig("min_bank must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// FIFO buffer of recent embeddings for one class.
#[derive(Debug, Clone)]
pub struct ClassMemoryBank<F> {
    class_id: usize,
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<F>>,
}

/// Prototype and spread derived from one bank.
#[derive(Debug, Clone)]
pub struct BankStats<F> {
    pub prototype: Vec<F>,
    pub sigma: Vec<F>,
    pub valid: bool,
}

impl<F: Scalar> ClassMemoryBank<F> {
    pub fn new(class_id: usize, capacity: usize, dim: usize) -> Self {
        Self {
            class_id,
            capacity,
            dim,
            entries: VecDeque::new(),
        }
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Vec<F>> {
        self.entries.iter()
    }

    /// Append a detached snapshot; the earliest entry is discarded once the
    /// bank exceeds its capacity.
    pub fn push(&mut self, vector: Vec<F>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "bank {} holds dim {}, got {}",
                self.class_id,
                self.dim,
                vector.len()
            )));
        }
        self.entries.push_back(vector);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Per-dimension mean and population standard deviation (divide by n).
    /// A singleton bank has σ = 0; an empty bank is invalid.
    pub fn stats(&self, min_bank: usize) -> BankStats<F> {
        let n = self.entries.len();
        let mut prototype = vec![F::zero(); self.dim];
        let mut sigma = vec![F::zero(); self.dim];
        if n == 0 {
            return BankStats {
                prototype,
                sigma,
                valid: false,
            };
        }
        let nf = F::from_f64_lossy(n as f64);
        for entry in &self.entries {
            for (p, v) in prototype.iter_mut().zip(entry) {
                *p += *v;
            }
        }
        for p in prototype.iter_mut() {
            *p /= nf;
        }
        if n >= 2 {
            for entry in &self.entries {
                for ((s, v), p) in sigma.iter_mut().zip(entry).zip(&prototype) {
                    let d = *v - *p;
                    *s += d * d;
                }
            }
            for s in sigma.iter_mut() {
                *s = (*s / nf).sqrt();
            }
        }
        BankStats {
            prototype,
            sigma,
            valid: n >= min_bank,
        }
    }
}

/// One bank per class.
#[derive(Debug, Clone)]
pub struct MemoryBanks<F> {
    banks: Vec<ClassMemoryBank<F>>,
    dim: usize,
    capacity: usize,
}

impl<F: Scalar> MemoryBanks<F> {
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Self {
        Self {
            banks: (0..num_classes)
                .map(|k| ClassMemoryBank::new(k, capacity, dim))
                .collect(),
            dim,
            capacity,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.banks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bank(&self, class: usize) -> &ClassMemoryBank<F> {
        &self.banks[class]
    }

    pub fn bank_mut(&mut self, class: usize) -> &mut ClassMemoryBank<F> {
        &mut self.banks[class]
    }

    pub fn stats(&self, min_bank: usize) -> Vec<BankStats<F>> {
        self.banks.iter().map(|b| b.stats(min_bank)).collect()
    }

    pub fn push_batch(&mut self, embeddings: &[Vec<F>], labels: &[usize]) -> Result<()> {
        for (z, &y) in embeddings.iter().zip(labels) {
            if y >= self.banks.len() {
                return Err(Error::InvalidInput(format!(
                    "label {y} outside [0,{})",
                    self.banks.len()
                )));
            }
            self.banks[y].push(z.clone())?;
        }
        Ok(())
    }

    /// Dump: JSON metadata plus an LTFF-style binary of entries (one record
    /// per non-empty class: id = class, C = dim, H = entry count, W = 1,
    /// entries oldest-first).
    pub fn save(&self, bin_path: &Path, meta_path: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::new();
        blob.extend_from_slice(b"LTFF");
        blob.extend_from_slice(&1u32.to_le_bytes());
        let non_empty = self.banks.iter().filter(|b| !b.is_empty()).count() as u32;
        blob.extend_from_slice(&non_empty.to_le_bytes());
        for bank in &self.banks {
            if bank.is_empty() {
                continue;
            }
            blob.extend_from_slice(&(bank.class_id as u32).to_le_bytes());
            blob.extend_from_slice(&(self.dim as u16).to_le_bytes());
            blob.extend_from_slice(&(bank.len() as u16).to_le_bytes());
            blob.extend_from_slice(&1u16.to_le_bytes());
            for entry in bank.entries() {
                for v in entry {
                    blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
        let meta = BankMeta {
            version: 1,
            num_classes: self.banks.len(),
            dim: self.dim,
            capacity: self.capacity,
            counts: self.banks.iter().map(|b| b.len()).collect(),
            checksum: sha256_hex(&blob),
        };
        fs::write(bin_path, blob)?;
        fs::write(meta_path, serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta: BankMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
        let blob = fs::read(bin_path)?;
        if blob.len() < 12 || &blob[0..4] != b"LTFF" {
            return Err(Error::Format("bad magic".into()));
        }
        if sha256_hex(&blob) != meta.checksum {
            return Err(Error::Format("bank dump checksum mismatch".into()));
        }
        let records = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
        let mut banks = Self::new(meta.num_classes, meta.capacity, meta.dim);
        let mut at = 12usize;
        for _ in 0..records {
            if at + 10 > blob.len() {
                return Err(Error::Format("truncated bank record".into()));
            }
            let class = u32::from_le_bytes(blob[at..at + 4].try_into().unwrap()) as usize;
            let dim = u16::from_le_bytes(blob[at + 4..at + 6].try_into().unwrap()) as usize;
            let count = u16::from_le_bytes(blob[at + 6..at + 8].try_into().unwrap()) as usize;
            at += 10;
            if dim != meta.dim || class >= meta.num_classes {
                return Err(Error::Format(format!("bad bank record for class {class}")));
            }
            for _ in 0..count {
                let mut entry = Vec::with_capacity(dim);
                for _ in 0..dim {
                    if at + 4 > blob.len() {
                        return Err(Error::Format("truncated bank payload".into()));
                    }
                    let bytes: [u8; 4] = blob[at..at + 4].try_into().unwrap();
                    entry.push(F::from_f64_lossy(f64::from(f32::from_le_bytes(bytes))));
                    at += 4;
                }
                banks.banks[class].push(entry)?;
            }
        }
        Ok(banks)
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    version: u32,
    num_classes: usize,
    dim: usize,
    capacity: usize,
    counts: Vec<usize>,
    checksum: String,
}

/// Value, per-sample inclusion, and analytic ∂/∂Z of one loss term.
#[derive(Debug, Clone)]
pub struct LossTerm<F> {
    pub value: F,
    pub grad: Vec<Vec<F>>,
    pub included: Vec<bool>,
}

fn squared_distance<F: Scalar>(z: &[F], c: &[F]) -> F {
    z.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = *a - *b;
            d * d
        })
        .sum()
}

/// Mean squared distance to the class prototype (diagnostic; Eq. of the
/// classic center loss). Samples whose bank is invalid contribute zero.
pub fn center_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
) -> LossTerm<F> {
    weighted_pull(embeddings, labels, stats, |_| Some(F::one()))
}

/// Head pull: (1/B)·Σ (1−w)·d(z,c)·𝕀(w < τ_head). The indicator is strict.
pub fn head_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
    weights: &[F],
    tau_head: f64,
) -> LossTerm<F> {
    let tau = F::from_f64_lossy(tau_head);
    weighted_pull(embeddings, labels, stats, |y| {
        (weights[y] < tau).then(|| F::one() - weights[y])
    })
}

/// Common shape of center/head: a weighted squared-distance pull.
fn weighted_pull<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
    coefficient: impl Fn(usize) -> Option<F>,
) -> LossTerm<F> {
    let batch = embeddings.len();
    let inv_b = F::from_f64_lossy(1.0 / batch.max(1) as f64);
    let mut value = F::zero();
    let mut grad = vec![Vec::new(); batch];
    let mut included = vec![false; batch];
    for (i, (z, &y)) in embeddings.iter().zip(labels).enumerate() {
        grad[i] = vec![F::zero(); z.len()];
        let st = &stats[y];
        if !st.valid {
            continue;
        }
        let Some(coeff) = coefficient(y) else {
            continue;
        };
        included[i] = true;
        value += coeff * squared_distance(z, &st.prototype) * inv_b;
        let scale = F::from_f64_lossy(2.0) * coeff * inv_b;
        for ((g, a), b) in grad[i].iter_mut().zip(z).zip(&st.prototype) {
            *g = scale * (*a - *b);
        }
    }
    LossTerm {
        value,
        grad,
        included,
    }
}

/// Per-class perturbation signs for the tail-std loss: one draw per included
/// class per call, in ascending class order. Whole-vector sign by default; an
/// independent sign per dimension when `per_dim` is set.
pub fn draw_signs<F: Scalar>(
    labels: &[usize],
    weights: &[F],
    tau_tail_std: f64,
    dim: usize,
    per_dim: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Vec<F>>> {
    let tau = F::from_f64_lossy(tau_tail_std);
    let mut signs: Vec<Option<Vec<F>>> = vec![None; weights.len()];
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    for y in present {
        if weights[y] > tau {
            let draw = |rng: &mut ChaCha8Rng| {
                if rng.gen_range(0.0..1.0) < 0.5 {
                    F::one()
                } else {
                    -F::one()
                }
            };
            let vec = if per_dim {
                (0..dim).map(|_| draw(rng)).collect()
            } else {
                let s = draw(rng);
                vec![s; dim]
            };
            signs[y] = Some(vec);
        }
    }
    signs
}

/// Tail pull toward a σ-perturbed prototype:
/// (1/B)·Σ w·d(z, c + s⊙σ)·𝕀(w > τ_tail_std), with `signs` as drawn by
/// [`draw_signs`] (kept explicit so gradients can be checked with the sign
/// fixed).
pub fn tail_std_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
    weights: &[F],
    tau_tail_std: f64,
    signs: &[Option<Vec<F>>],
) -> LossTerm<F> {
    let tau = F::from_f64_lossy(tau_tail_std);
    let batch = embeddings.len();
    let inv_b = F::from_f64_lossy(1.0 / batch.max(1) as f64);
    let mut value = F::zero();
    let mut grad = vec![Vec::new(); batch];
    let mut included = vec![false; batch];
    for (i, (z, &y)) in embeddings.iter().zip(labels).enumerate() {
        grad[i] = vec![F::zero(); z.len()];
        let st = &stats[y];
        if !st.valid || !(weights[y] > tau) {
            continue;
        }
        let Some(sign) = &signs[y] else { continue };
        included[i] = true;
        let perturbed: Vec<F> = st
            .prototype
            .iter()
            .zip(&st.sigma)
            .zip(sign)
            .map(|((c, s), sg)| *c + *sg * *s)
            .collect();
        value += weights[y] * squared_distance(z, &perturbed) * inv_b;
        let scale = F::from_f64_lossy(2.0) * weights[y] * inv_b;
        for ((g, a), b) in grad[i].iter_mut().zip(z).zip(&perturbed) {
            *g = scale * (*a - *b);
        }
    }
    LossTerm {
        value,
        grad,
        included,
    }
}

/// Tail repulsion: −(1/B)·Σ w·log(max(d(z,c), floor))·𝕀(w > τ_tail_dist).
/// Below the floor the gradient is zero (the max is flat in d there).
pub fn tail_dist_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
    weights: &[F],
    tau_tail_dist: f64,
    distance_floor: f64,
) -> LossTerm<F> {
    let tau = F::from_f64_lossy(tau_tail_dist);
    let floor = F::from_f64_lossy(distance_floor);
    let batch = embeddings.len();
    let inv_b = F::from_f64_lossy(1.0 / batch.max(1) as f64);
    let mut value = F::zero();
    let mut grad = vec![Vec::new(); batch];
    let mut included = vec![false; batch];
    for (i, (z, &y)) in embeddings.iter().zip(labels).enumerate() {
        grad[i] = vec![F::zero(); z.len()];
        let st = &stats[y];
        if !st.valid || !(weights[y] > tau) {
            continue;
        }
        included[i] = true;
        let d = squared_distance(z, &st.prototype);
        value -= weights[y] * d.max(floor).ln() * inv_b;
        if d > floor {
            let scale = -F::from_f64_lossy(2.0) * weights[y] * inv_b / d;
            for ((g, a), b) in grad[i].iter_mut().zip(z).zip(&st.prototype) {
                *g = scale * (*a - *b);
            }
        }
    }
    LossTerm {
        value,
        grad,
        included,
    }
}

/// Per-sample loss participation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleContribution {
    pub head: bool,
    pub tail_std: bool,
    pub tail_dist: bool,
    /// True when the sample's class bank was below `min_bank`.
    pub skipped: bool,
}

/// Full prototype-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown<F> {
    pub center: F,
    pub head: F,
    pub tail_std: F,
    pub tail_dist: F,
    /// head + tail_std + tail_dist.
    pub proto_total: F,
    pub baseline: F,
    /// baseline + β·proto_total.
    pub total: F,
    pub contributions: Vec<SampleContribution>,
    /// ∂proto_total/∂Z, unscaled by β.
    pub embedding_grad: Vec<Vec<F>>,
}

/// Evaluate all prototype terms against the current bank contents, then
/// append the batch embeddings to the banks as detached snapshots (the
/// post-iteration update; this call's loss never sees its own batch).
pub fn proto_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    banks: &mut MemoryBanks<F>,
    weights: &[F],
    config: &LossConfig,
    baseline: F,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown<F>> {
    let stats = banks.stats(config.min_bank);
    let signs = draw_signs(
        labels,
        weights,
        config.tau_tail_std,
        banks.dim(),
        config.per_dim_signs,
        rng,
    );
    let breakdown = proto_loss_with_signs(
        embeddings, labels, &stats, weights, config, baseline, &signs,
    )?;
    banks.push_batch(embeddings, labels)?;
    Ok(breakdown)
}

/// Deterministic core of [`proto_loss`]: explicit signs, no bank update.
pub fn proto_loss_with_signs<F: Scalar>(
    embeddings: &[Vec<F>],
    labels: &[usize],
    stats: &[BankStats<F>],
    weights: &[F],
    config: &LossConfig,
    baseline: F,
    signs: &[Option<Vec<F>>],
) -> Result<LossBreakdown<F>> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let center = center_loss(embeddings, labels, stats);
    let head = head_loss(embeddings, labels, stats, weights, config.tau_head);
    let tail_std = tail_std_loss(
        embeddings,
        labels,
        stats,
        weights,
        config.tau_tail_std,
        signs,
    );
    let tail_dist = tail_dist_loss(
        embeddings,
        labels,
        stats,
        weights,
        config.tau_tail_dist,
        config.distance_floor,
    );

    let proto_total = head.value + tail_std.value + tail_dist.value;
    let beta = F::from_f64_lossy(config.beta);
    let mut embedding_grad = vec![Vec::new(); embeddings.len()];
    let mut contributions = Vec::with_capacity(embeddings.len());
    for i in 0..embeddings.len() {
        let mut g = head.grad[i].clone();
        for ((slot, a), b) in g.iter_mut().zip(&tail_std.grad[i]).zip(&tail_dist.grad[i]) {
            *slot += *a + *b;
        }
        embedding_grad[i] = g;
        contributions.push(SampleContribution {
            head: head.included[i],
            tail_std: tail_std.included[i],
            tail_dist: tail_dist.included[i],
            skipped: !stats[labels[i]].valid,
        });
    }
    Ok(LossBreakdown {
        center: center.value,
        head: head.value,
        tail_std: tail_std.value,
        tail_dist: tail_dist.value,
        proto_total,
        baseline,
        total: baseline + beta * proto_total,
        contributions,
        embedding_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded_rng};

    fn stats_from(prototype: Vec<f64>, sigma: Vec<f64>) -> BankStats<f64> {
        BankStats {
            prototype,
            sigma,
            valid: true,
        }
    }

    #[test]
    fn fifo_discards_earliest() {
        let mut bank = ClassMemoryBank::<f64>::new(0, 2, 1);
        bank.push(vec![1.0]).unwrap();
        bank.push(vec![2.0]).unwrap();
        bank.push(vec![3.0]).unwrap();
        let held: Vec<f64> = bank.entries().map(|e| e[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
    }

    #[test]
    fn fifo_holds_last_m_in_order() {
        let m = 5;
        let mut bank = ClassMemoryBank::<f64>::new(0, m, 1);
        for i in 0..17 {
            bank.push(vec![i as f64]).unwrap();
        }
        let held: Vec<f64> = bank.entries().map(|e| e[0]).collect();
        assert_eq!(held, vec![12.0, 13.0, 14.0, 15.0, 16.0]);
    }

    #[test]
    fn push_under_capacity_and_dim_check() {
        let mut bank = ClassMemoryBank::<f64>::new(1, 3, 2);
        bank.push(vec![1.0, 2.0]).unwrap();
        assert_eq!(bank.len(), 1);
        assert!(matches!(bank.push(vec![1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stats_mean_and_population_std() {
        let mut bank = ClassMemoryBank::<f64>::new(0, 8, 2);
        bank.push(vec![0.0, 0.0]).unwrap();
        bank.push(vec![2.0, 2.0]).unwrap();
        let s = bank.stats(1);
        assert!(s.valid);
        assert_eq!(s.prototype, vec![1.0, 1.0]);
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn stats_singleton_and_empty() {
        let mut bank = ClassMemoryBank::<f64>::new(0, 8, 1);
        assert!(!bank.stats(1).valid);
        bank.push(vec![5.0]).unwrap();
        let s = bank.stats(1);
        assert!(s.valid);
        assert_eq!(s.prototype, vec![5.0]);
        assert_eq!(s.sigma, vec![0.0]);
        // min_bank above the fill level invalidates.
        assert!(!bank.stats(2).valid);
    }

    #[test]
    fn center_loss_examples() {
        let stats = vec![stats_from(vec![0.0, 0.0], vec![0.0, 0.0])];
        // z = c → 0.
        let t = center_loss(&[vec![0.0, 0.0]], &[0], &stats);
        assert_eq!(t.value, 0.0);
        // ‖(1,0)‖² = 1.
        let t = center_loss(&[vec![1.0, 0.0]], &[0], &stats);
        assert_eq!(t.value, 1.0);
        // Distances 1 and 4 average to 2.5.
        let stats2 = vec![
            stats_from(vec![0.0, 0.0], vec![0.0, 0.0]),
            stats_from(vec![1.0, 1.0], vec![0.0, 0.0]),
        ];
        let t = center_loss(&[vec![1.0, 0.0], vec![3.0, 1.0]], &[0, 1], &stats2);
        assert_eq!(t.value, 2.5);
    }

    #[test]
    fn head_loss_examples() {
        let d10 = 10.0f64.sqrt();
        let stats = vec![stats_from(vec![0.0], vec![0.0]); 2];
        let t = head_loss(&[vec![d10]], &[0], &stats, &[0.2, 0.8], 0.5);
        assert!((t.value - 8.0).abs() < 1e-12);
        let t = head_loss(&[vec![d10]], &[1], &stats, &[0.2, 0.6], 0.5);
        assert_eq!(t.value, 0.0);
        assert!(!t.included[0]);
        let t = head_loss(
            &[vec![d10], vec![d10]],
            &[0, 1],
            &stats,
            &[0.2, 0.8],
            0.5,
        );
        assert!((t.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tail_std_examples() {
        // σ = 0: perturbation vanishes; w·d = 0.9.
        let stats = vec![stats_from(vec![0.0, 0.0], vec![0.0, 0.0])];
        let signs = vec![Some(vec![1.0, 1.0])];
        let t = tail_std_loss(&[vec![1.0, 0.0]], &[0], &stats, &[0.9], 0.5, &signs);
        assert!((t.value - 0.9).abs() < 1e-12);
        // c̃ = c + σ = (1,1) equals z → 0.
        let stats = vec![stats_from(vec![0.0, 0.0], vec![1.0, 1.0])];
        let t = tail_std_loss(&[vec![1.0, 1.0]], &[0], &stats, &[0.9], 0.5, &signs);
        assert_eq!(t.value, 0.0);
        // Weight at or below τ excluded.
        let t = tail_std_loss(&[vec![1.0, 1.0]], &[0], &stats, &[0.3], 0.5, &signs);
        assert_eq!(t.value, 0.0);
        assert!(!t.included[0]);
    }

    #[test]
    fn tail_dist_examples() {
        let stats = vec![stats_from(vec![0.0], vec![0.0])];
        // d = 1 → log 1 = 0.
        let t = tail_dist_loss(&[vec![1.0]], &[0], &stats, &[1.0], 0.5, 1e-12);
        assert_eq!(t.value, 0.0);
        // d = e → −0.5.
        let t = tail_dist_loss(
            &[vec![std::f64::consts::E.sqrt()]],
            &[0],
            &stats,
            &[0.5],
            0.4,
            1e-12,
        );
        assert!((t.value + 0.5).abs() < 1e-12);
        // z = c: floored, finite.
        let t = tail_dist_loss(&[vec![0.0]], &[0], &stats, &[1.0], 0.5, 1e-12);
        assert!((t.value - (-1.0 * (1e-12f64).ln())).abs() < 1e-9);
        assert!(t.value.is_finite());
        assert!(t.grad[0][0] == 0.0, "floored distance has zero gradient");
    }

    #[test]
    fn tail_dist_gradient_points_away_from_prototype() {
        let stats = vec![stats_from(vec![1.0, 2.0], vec![0.0, 0.0])];
        let z = vec![1.3, 1.6]; // 0 < d < 1
        let t = tail_dist_loss(&[z.clone()], &[0], &stats, &[0.9], 0.5, 1e-12);
        let toward: Vec<f64> = stats[0].prototype.iter().zip(&z).map(|(c, a)| c - a).collect();
        let descent_dot: f64 = t.grad[0]
            .iter()
            .zip(&toward)
            .map(|(g, d)| -g * d)
            .sum();
        assert!(descent_dot < 0.0, "descent direction must oppose (c − z)");
    }

    #[test]
    fn proto_components_sum() {
        // Frozen component values 8.0, 0.9, −0.5 sum to 8.4 regardless of
        // which synthetic samples produce them.
        let d10 = 10.0f64.sqrt();
        let stats = vec![
            stats_from(vec![0.0, 0.0], vec![0.0, 0.0]),
            stats_from(vec![0.0, 0.0], vec![0.0, 0.0]),
        ];
        // Head class (w=0.2) at d=10 gives 8.0; the tail terms reuse the
        // single-sample examples above.
        let signs = vec![None, Some(vec![1.0, 1.0])];
        let head = head_loss(&[vec![d10, 0.0]], &[0], &stats, &[0.2, 0.9], 0.5);
        let tstd = tail_std_loss(
            &[vec![1.0, 0.0]],
            &[1],
            &stats,
            &[0.2, 0.9],
            0.5,
            &signs,
        );
        let tdist = tail_dist_loss(
            &[vec![std::f64::consts::E.sqrt(), 0.0]],
            &[1],
            &stats,
            &[0.2, 0.5],
            0.4,
            1e-12,
        );
        assert!((head.value - 8.0).abs() < 1e-12);
        assert!((tstd.value - 0.9).abs() < 1e-12);
        assert!((tdist.value + 0.5).abs() < 1e-12);
        let sum = head.value + tstd.value + tdist.value;
        assert!((sum - 8.4).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_total_is_baseline() {
        let mut banks = MemoryBanks::<f64>::new(2, 4, 2);
        banks.bank_mut(0).push(vec![0.0, 0.0]).unwrap();
        banks.bank_mut(1).push(vec![1.0, 1.0]).unwrap();
        let cfg = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        let mut rng = seeded_rng(3);
        let b = proto_loss(
            &[vec![0.5, 0.0]],
            &[1],
            &mut banks,
            &[0.0, 0.9],
            &cfg,
            1.25,
            &mut rng,
        )
        .unwrap();
        assert_eq!(b.total, 1.25);
        assert!(b.proto_total != 0.0);
    }

    #[test]
    fn strict_indicators_exclude_boundary_weights() {
        let stats = vec![stats_from(vec![0.0], vec![0.0]); 1];
        let w = [0.5f64];
        let z = [vec![2.0]];
        let signs = vec![Some(vec![1.0])];
        assert_eq!(head_loss(&z, &[0], &stats, &w, 0.5).value, 0.0);
        assert_eq!(tail_std_loss(&z, &[0], &stats, &w, 0.5, &signs).value, 0.0);
        assert_eq!(tail_dist_loss(&z, &[0], &stats, &w, 0.5, 1e-12).value, 0.0);
    }

    #[test]
    fn partition_head_xor_tails() {
        // Equal thresholds, no weight on the boundary: each sample feeds
        // exactly one of {head} or {tail_std ∧ tail_dist}.
        let counts = [600usize, 350, 180, 90, 40, 6];
        let weights: Vec<f64> = crate::data::compute_weights(&counts).unwrap();
        let tau = 0.5;
        let stats: Vec<BankStats<f64>> = (0..6)
            .map(|_| stats_from(vec![0.0, 0.0], vec![0.1, 0.1]))
            .collect();
        let mut rng = seeded_rng(44);
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let embeddings: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| vec![normal::<f64, _>(&mut rng), normal::<f64, _>(&mut rng)])
            .collect();
        let signs = draw_signs(&labels, &weights, tau, 2, false, &mut rng);
        let cfg = LossConfig {
            tau_head: tau,
            tau_tail_std: tau,
            tau_tail_dist: tau,
            ..LossConfig::default()
        };
        let b = proto_loss_with_signs(&embeddings, &labels, &stats, &weights, &cfg, 0.0, &signs)
            .unwrap();
        for (i, c) in b.contributions.iter().enumerate() {
            assert!(weights[labels[i]] != tau, "test setup must avoid boundary");
            assert!(
                c.head ^ (c.tail_std && c.tail_dist),
                "sample {i}: {c:?}"
            );
            assert_eq!(c.tail_std, c.tail_dist);
        }
    }

    #[test]
    fn invalid_banks_are_skipped_and_flagged() {
        let mut banks = MemoryBanks::<f64>::new(2, 4, 1);
        banks.bank_mut(0).push(vec![0.0]).unwrap();
        let cfg = LossConfig::default();
        let mut rng = seeded_rng(0);
        let b = proto_loss(
            &[vec![1.0], vec![1.0]],
            &[0, 1],
            &mut banks,
            &[0.1, 0.9],
            &cfg,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert!(!b.contributions[0].skipped);
        assert!(b.contributions[1].skipped);
        assert!(!b.contributions[1].head && !b.contributions[1].tail_std);
        // The push after evaluation filled bank 1.
        assert_eq!(banks.bank(1).len(), 1);
    }

    #[test]
    fn loss_sees_banks_before_push() {
        // proto_loss must evaluate against pre-push stats.
        let mut banks = MemoryBanks::<f64>::new(1, 4, 1);
        banks.bank_mut(0).push(vec![0.0]).unwrap();
        let cfg = LossConfig {
            tau_head: 1.0, // every weight < 1 → head applies
            ..LossConfig::default()
        };
        let mut rng = seeded_rng(0);
        let b = proto_loss(
            &[vec![2.0]],
            &[0],
            &mut banks,
            &[0.0],
            &cfg,
            0.0,
            &mut rng,
        )
        .unwrap();
        // Prototype was 0 (not the batch's own 2.0): head = (1−0)·4.
        assert_eq!(b.head, 4.0);
        assert_eq!(banks.bank(0).len(), 2);
    }

    #[test]
    fn bank_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut banks = MemoryBanks::<f32>::new(3, 4, 2);
        let mut rng = seeded_rng(8);
        for class in 0..2usize {
            for _ in 0..3 {
                banks
                    .bank_mut(class)
                    .push(vec![normal(&mut rng), normal(&mut rng)])
                    .unwrap();
            }
        }
        let bin = dir.path().join("banks.bin");
        let meta = dir.path().join("banks.json");
        banks.save(&bin, &meta).unwrap();
        let loaded = MemoryBanks::<f32>::load(&bin, &meta).unwrap();
        assert_eq!(loaded.num_classes(), 3);
        assert_eq!(loaded.bank(0).len(), 3);
        assert_eq!(loaded.bank(2).len(), 0);
        for class in 0..3usize {
            let a: Vec<Vec<f32>> = banks.bank(class).entries().cloned().collect();
            let b: Vec<Vec<f32>> = loaded.bank(class).entries().cloned().collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau_head: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            distance_floor: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
