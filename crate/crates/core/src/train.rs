//! Training loop (minibatch SGD with momentum on baseline + β·proto loss),
//! grouped evaluation, the logit-adjustment baseline, the ablation runner,
//! and a linear probe over raw provider features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Dataset, Group, ImbalanceProfile};
use crate::error::{Error, Result};
use crate::loss::{proto_loss, LossConfig, MemoryBanks};
use crate::net::{
    forward_with_views, prepare_provider_views, FusionConfig, FusionGrads, FusionParams, Mode,
    ProviderViews,
};
use crate::provider::{pool_latent, FeatureStore};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_rng};
use crate::scalar::Scalar;

/// Baseline classification loss / prediction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ce,
    /// Post-hoc label-shift correction: train with plain CE, predict with
    /// log-prior-adjusted logits.
    LogitAdjust,
}

/// Learning-rate schedule. Constant is the default; cosine decays to zero
/// over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub baseline: BaselineKind,
    pub logit_adjust_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 0.1,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            seed: 0,
            baseline: BaselineKind::Ce,
            logit_adjust_tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
    let exps: Vec<F> = logits.iter().map(|z| (*z - m).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// −log softmax(z)[label].
pub fn cross_entropy<F: Scalar>(logits: &[F], label: usize) -> F {
    let m = logits.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
    let log_sum = logits
        .iter()
        .map(|z| (*z - m).exp())
        .sum::<F>()
        .ln()
        + m;
    log_sum - logits[label]
}

/// ∂CE/∂z = softmax(z) − onehot(label).
pub fn cross_entropy_grad<F: Scalar>(logits: &[F], label: usize) -> Vec<F> {
    let mut g = softmax(logits);
    g[label] -= F::one();
    g
}

/// Label-shift correction: z′_k = z_k − τ·log π_k.
pub fn adjust_logits<F: Scalar>(logits: &[F], priors: &[f64], tau: f64) -> Result<Vec<F>> {
    if priors.len() != logits.len() {
        return Err(Error::InvalidShape(format!(
            "{} priors for {} logits",
            priors.len(),
            logits.len()
        )));
    }
    if priors.iter().any(|p| *p <= 0.0) {
        return Err(Error::InvalidPrior("priors must be strictly positive".into()));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidPrior(format!(
            "priors must sum to 1, got {total}"
        )));
    }
    Ok(logits
        .iter()
        .zip(priors)
        .map(|(z, p)| *z - F::from_f64_lossy(tau * p.ln()))
        .collect())
}

/// Accuracy report in percent, overall and per frequency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn group(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Stable hash over the effective run configuration.
pub fn config_hash(
    fusion: &FusionConfig,
    loss: &LossConfig,
    train: &TrainConfig,
) -> String {
    let blob = serde_json::to_vec(&(fusion, loss, train)).expect("configs serialize");
    sha256_hex(&blob)[..16].to_string()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub baseline_loss: f64,
    pub proto_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug)]
pub struct TrainOutcome<F> {
    pub params: FusionParams<F>,
    pub banks: MemoryBanks<F>,
    pub history: Vec<EpochRecord>,
}

fn missing_ids<F: Scalar>(dataset: &Dataset<F>, store: &FeatureStore<F>) -> Vec<u32> {
    (0..dataset.len() as u32)
        .filter(|id| !store.contains(*id))
        .collect()
}

fn cached_views<F: Scalar>(
    dataset: &Dataset<F>,
    store: Option<&FeatureStore<F>>,
    config: &FusionConfig,
) -> Result<Vec<Option<ProviderViews<F>>>> {
    if !config.fusion_enabled() {
        return Ok(vec![None; dataset.len()]);
    }
    let store = store.ok_or_else(|| {
        Error::MissingFeature("fusion enabled but no feature store supplied".into())
    })?;
    let missing = missing_ids(dataset, store);
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(8).map(|i| i.to_string()).collect();
        return Err(Error::MissingFeature(format!(
            "{} samples lack features (ids {}{})",
            missing.len(),
            shown.join(","),
            if missing.len() > 8 { ",..." } else { "" }
        )));
    }
    (0..dataset.len())
        .map(|i| {
            prepare_provider_views(store.get(i as u32)?, config).map(Some)
        })
        .collect()
}

/// Minibatch SGD with momentum on total = baseline + β·proto. Fixed seeds
/// give bit-reproducible runs on a single worker.
pub fn train<F: Scalar>(
    train_set: &Dataset<F>,
    train_store: Option<&FeatureStore<F>>,
    val: Option<(&Dataset<F>, Option<&FeatureStore<F>>)>,
    profile: &ImbalanceProfile<F>,
    fusion: &FusionConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    fusion.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.num_classes() != fusion.num_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, config {}",
            train_set.num_classes(),
            fusion.num_classes
        )));
    }

    let views = cached_views(train_set, train_store, fusion)?;
    let val_views = match val {
        Some((vset, vstore)) => Some((vset, cached_views(vset, vstore, fusion)?)),
        None => None,
    };

    let seed = train_cfg.seed;
    let hash = config_hash(fusion, loss_cfg, train_cfg);
    let mut params = FusionParams::<F>::init(fusion, seed);
    let mut velocity = FusionParams::<F>::zeros(fusion);
    let mut banks = MemoryBanks::<F>::new(
        fusion.num_classes,
        loss_cfg.capacity,
        fusion.fused_embedding_dim(),
    );
    let mut dropout_rng = seeded_rng(derive_seed(seed, "dropout"));
    let mut sign_rng = seeded_rng(derive_seed(seed, "proto-sign"));
    let weights = &profile.weights;
    let priors = profile.priors();
    // The proto loss lives on the post-attention embedding, so it is active
    // only when the latent path exists.
    let proto_active = fusion.latent_fusion && loss_cfg.beta > 0.0;

    let momentum = F::from_f64_lossy(train_cfg.momentum);
    let beta = F::from_f64_lossy(loss_cfg.beta);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut last_finite = (0usize, 0usize, f64::NAN);

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let lr_factor = match train_cfg.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / train_cfg.epochs as f64).cos())
            }
        };
        let lr = F::from_f64_lossy(train_cfg.lr * lr_factor);
        let mut shuffle_rng = seeded_rng(derive_seed_indexed(seed, "shuffle", epoch as u64));
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_baseline = 0.0f64;
        let mut epoch_proto = 0.0f64;
        let mut epoch_total = 0.0f64;
        let mut batches = 0usize;

        for (step, batch) in indices.chunks(train_cfg.batch_size).enumerate() {
            let mut traces = Vec::with_capacity(batch.len());
            for &i in batch {
                let trace = forward_with_views(
                    train_set.image(i),
                    views[i].as_ref(),
                    fusion,
                    &params,
                    Mode::Train,
                    Some(&mut dropout_rng),
                )?;
                traces.push(trace);
            }

            let inv_b = F::from_f64_lossy(1.0 / batch.len() as f64);
            let mut baseline_loss = F::zero();
            let mut logit_grads = Vec::with_capacity(batch.len());
            for (&i, trace) in batch.iter().zip(&traces) {
                let label = train_set.label(i);
                baseline_loss += cross_entropy(&trace.logits, label) * inv_b;
                let mut g = cross_entropy_grad(&trace.logits, label);
                for v in g.iter_mut() {
                    *v *= inv_b;
                }
                logit_grads.push(g);
            }

            let (proto_value, embedding_grads) = if proto_active {
                let embeddings: Vec<Vec<F>> = traces
                    .iter()
                    .map(|t| t.embedding.clone().expect("latent fusion active"))
                    .collect();
                let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
                let breakdown = proto_loss(
                    &embeddings,
                    &labels,
                    &mut banks,
                    weights,
                    loss_cfg,
                    baseline_loss,
                    &mut sign_rng,
                )?;
                let grads: Vec<Vec<F>> = breakdown
                    .embedding_grad
                    .iter()
                    .map(|g| g.iter().map(|v| beta * *v).collect())
                    .collect();
                (breakdown.proto_total, grads)
            } else {
                (F::zero(), Vec::new())
            };

            let total = baseline_loss + beta * proto_value;
            let total_f64 = total.to_f64_lossy();
            if !total_f64.is_finite() {
                return Err(Error::AbortedRun {
                    epoch,
                    step,
                    message: format!(
                        "non-finite loss; last finite was {:.6} at epoch {}, step {}",
                        last_finite.2, last_finite.0, last_finite.1
                    ),
                });
            }
            last_finite = (epoch, step, total_f64);

            let mut grads = FusionGrads::<F>::zeros(fusion);
            for (bi, trace) in traces.iter().enumerate() {
                let emb_grad = if proto_active {
                    Some(embedding_grads[bi].as_slice())
                } else {
                    None
                };
                crate::net::backward(fusion, &params, trace, &logit_grads[bi], emb_grad, &mut grads)?;
            }

            // v ← momentum·v + g;  p ← p − lr·v.
            for ((_, p), ((_, v), (_, g))) in params
                .arrays_mut()
                .into_iter()
                .zip(velocity.arrays_mut().into_iter().zip(grads.arrays_mut()))
            {
                for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *vv = momentum * *vv + *gv;
                    *pv -= lr * *vv;
                }
            }

            epoch_baseline += baseline_loss.to_f64_lossy();
            epoch_proto += proto_value.to_f64_lossy();
            epoch_total += total_f64;
            batches += 1;
        }

        let val_report = match &val_views {
            Some((vset, vviews)) => Some(evaluate_with_views(
                &params,
                fusion,
                vset,
                vviews,
                profile,
                prediction_rule(train_cfg, &priors),
                &hash,
                seed,
                epoch,
            )?),
            None => None,
        };

        history.push(EpochRecord {
            epoch,
            total_loss: epoch_total / batches as f64,
            baseline_loss: epoch_baseline / batches as f64,
            proto_loss: epoch_proto / batches as f64,
            val: val_report,
        });
    }

    Ok(TrainOutcome {
        params,
        banks,
        history,
    })
}

/// How predictions are made at evaluation time.
#[derive(Debug, Clone)]
pub struct PredictionRule {
    pub adjust: Option<(Vec<f64>, f64)>,
}

fn prediction_rule(train_cfg: &TrainConfig, priors: &[f64]) -> PredictionRule {
    match train_cfg.baseline {
        BaselineKind::Ce => PredictionRule { adjust: None },
        BaselineKind::LogitAdjust => PredictionRule {
            adjust: Some((priors.to_vec(), train_cfg.logit_adjust_tau)),
        },
    }
}

/// Construct the prediction rule for a baseline kind and training priors.
pub fn prediction_for(baseline: BaselineKind, priors: &[f64], tau: f64) -> PredictionRule {
    match baseline {
        BaselineKind::Ce => PredictionRule { adjust: None },
        BaselineKind::LogitAdjust => PredictionRule {
            adjust: Some((priors.to_vec(), tau)),
        },
    }
}

fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy overall, per class, and per frequency group. Deterministic;
/// a pure function of its inputs. Groups with no test samples are absent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Scalar>(
    params: &FusionParams<F>,
    fusion: &FusionConfig,
    dataset: &Dataset<F>,
    store: Option<&FeatureStore<F>>,
    profile: &ImbalanceProfile<F>,
    rule: PredictionRule,
    config_hash: &str,
    seed: u64,
    epoch: usize,
) -> Result<MetricsReport> {
    if dataset.num_classes() > fusion.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset labels span {} classes, checkpoint has {}",
            dataset.num_classes(),
            fusion.num_classes
        )));
    }
    let views = cached_views(dataset, store, fusion)?;
    evaluate_with_views(
        params,
        fusion,
        dataset,
        &views,
        profile,
        rule,
        config_hash,
        seed,
        epoch,
    )
}

#[allow(clippy::too_many_arguments)]
fn evaluate_with_views<F: Scalar>(
    params: &FusionParams<F>,
    fusion: &FusionConfig,
    dataset: &Dataset<F>,
    views: &[Option<ProviderViews<F>>],
    profile: &ImbalanceProfile<F>,
    rule: PredictionRule,
    config_hash: &str,
    seed: u64,
    epoch: usize,
) -> Result<MetricsReport> {
    let k = dataset.num_classes();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for i in 0..dataset.len() {
        let trace = forward_with_views(
            dataset.image(i),
            views[i].as_ref(),
            fusion,
            params,
            Mode::Eval,
            None,
        )?;
        let prediction = match &rule.adjust {
            Some((priors, tau)) => argmax(&adjust_logits(&trace.logits, priors, *tau)?),
            None => argmax(&trace.logits),
        };
        let label = dataset.label(i);
        total[label] += 1;
        if prediction == label {
            correct[label] += 1;
        }
    }

    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| (total[c] > 0).then(|| 100.0 * correct[c] as f64 / total[c] as f64))
        .collect();
    let group_acc = |group: Group| -> Option<f64> {
        let mut c = 0usize;
        let mut t = 0usize;
        for class in 0..k {
            if profile.groups.get(class) == Some(&group) {
                c += correct[class];
                t += total[class];
            }
        }
        (t > 0).then(|| 100.0 * c as f64 / t as f64)
    };
    let total_samples: usize = total.iter().sum();
    let total_correct: usize = correct.iter().sum();
    Ok(MetricsReport {
        overall: 100.0 * total_correct as f64 / total_samples.max(1) as f64,
        many: group_acc(Group::Many),
        medium: group_acc(Group::Medium),
        few: group_acc(Group::Few),
        per_class,
        config_hash: config_hash.to_string(),
        seed,
        epoch,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

/// One grid cell: a named delta over the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub map_fusion: bool,
    pub latent_fusion: bool,
    pub beta: f64,
    pub tau_head: f64,
    pub tau_tail_std: f64,
    pub tau_tail_dist: f64,
}

/// The standard grid mirroring the paper-style tables: baseline, each fusion
/// path, both paths, and both paths with each prototype-loss component
/// isolated via its threshold (τ_head = 0 disables the head pull; τ_tail = 1
/// disables a tail term, since weights live in [0,1)).
pub fn standard_grid(base: &LossConfig) -> Vec<AblationCell> {
    let cell = |name: &str, map: bool, latent: bool, beta: f64, th: f64, ts: f64, td: f64| {
        AblationCell {
            name: name.to_string(),
            map_fusion: map,
            latent_fusion: latent,
            beta,
            tau_head: th,
            tau_tail_std: ts,
            tau_tail_dist: td,
        }
    };
    vec![
        cell("baseline", false, false, 0.0, base.tau_head, base.tau_tail_std, base.tau_tail_dist),
        cell("+map", true, false, 0.0, base.tau_head, base.tau_tail_std, base.tau_tail_dist),
        cell("+latent", false, true, 0.0, base.tau_head, base.tau_tail_std, base.tau_tail_dist),
        cell("+map+latent", true, true, 0.0, base.tau_head, base.tau_tail_std, base.tau_tail_dist),
        cell("+both+head", true, true, base.beta, base.tau_head, 1.0, 1.0),
        cell("+both+tail_std", true, true, base.beta, 0.0, base.tau_tail_std, 1.0),
        cell("+both+tail_dist", true, true, base.beta, 0.0, 1.0, base.tau_tail_dist),
        cell("+both+proto", true, true, base.beta, base.tau_head, base.tau_tail_std, base.tau_tail_dist),
    ]
}

/// Result of one grid cell; failures are recorded and the grid continues.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// Run every cell (train on the train split, evaluate on the eval split) and
/// emit rows in declaration order. `threads` bounds the worker pool.
#[allow(clippy::too_many_arguments)]
pub fn ablate<F: Scalar>(
    train_set: &Dataset<F>,
    train_store: Option<&FeatureStore<F>>,
    eval_set: &Dataset<F>,
    eval_store: Option<&FeatureStore<F>>,
    profile: &ImbalanceProfile<F>,
    fusion_base: &FusionConfig,
    loss_base: &LossConfig,
    train_cfg: &TrainConfig,
    grid: &[AblationCell],
    threads: usize,
) -> Vec<AblationRow> {
    let workers = threads.max(1).min(grid.len().max(1));
    let run_cell = |cell: &AblationCell| -> std::result::Result<MetricsReport, String> {
        let mut fusion = fusion_base.clone();
        fusion.map_fusion_stage = cell
            .map_fusion
            .then(|| fusion_base.map_fusion_stage.unwrap_or(fusion_base.stages.len() - 1));
        fusion.latent_fusion = cell.latent_fusion;
        let loss = LossConfig {
            beta: cell.beta,
            tau_head: cell.tau_head,
            tau_tail_std: cell.tau_tail_std,
            tau_tail_dist: cell.tau_tail_dist,
            ..loss_base.clone()
        };
        let outcome = train(
            train_set,
            train_store,
            None,
            profile,
            &fusion,
            &loss,
            train_cfg,
        )
        .map_err(|e| e.to_string())?;
        let hash = config_hash(&fusion, &loss, train_cfg);
        let rule = prediction_for(train_cfg.baseline, &profile.priors(), train_cfg.logit_adjust_tau);
        evaluate(
            &outcome.params,
            &fusion,
            eval_set,
            eval_store,
            profile,
            rule,
            &hash,
            train_cfg.seed,
            train_cfg.epochs.saturating_sub(1),
        )
        .map_err(|e| e.to_string())
    };

    let mut outcomes: Vec<Option<AblationRow>> = (0..grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..workers {
            let grid_ref = grid;
            let run = &run_cell;
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                let mut idx = worker;
                while idx < grid_ref.len() {
                    let cell = &grid_ref[idx];
                    local.push((
                        idx,
                        AblationRow {
                            name: cell.name.clone(),
                            outcome: run(cell),
                        },
                    ));
                    idx += workers;
                }
                local
            }));
        }
        for handle in handles {
            for (idx, row) in handle.join().expect("ablation worker") {
                outcomes[idx] = Some(row);
            }
        }
    });
    outcomes.into_iter().map(|r| r.expect("all cells ran")).collect()
}

/// Ablation table as CSV in the paper-table layout (method, many, medium,
/// few, all). Failed rows keep their place with empty metric cells.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,many,medium,few,all\n");
    for row in rows {
        match &row.outcome {
            Ok(report) => {
                let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    row.name,
                    cell(report.many),
                    cell(report.medium),
                    cell(report.few),
                    report.overall
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{},,,,", row.name);
            }
        }
    }
    out
}

/// Per-epoch history as CSV (one row per epoch).
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,total_loss,baseline_loss,proto_loss,overall,many,medium,few\n");
    for rec in history {
        let (overall, many, medium, few) = match &rec.val {
            Some(v) => (
                v.overall.to_string(),
                v.many.map(|x| x.to_string()).unwrap_or_default(),
                v.medium.map(|x| x.to_string()).unwrap_or_default(),
                v.few.map(|x| x.to_string()).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.epoch,
            rec.total_loss,
            rec.baseline_loss,
            rec.proto_loss,
            overall,
            many,
            medium,
            few
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Linear probe on raw provider features
// ---------------------------------------------------------------------------

/// Softmax regression on pooled provider features (the "provider features
/// straight into a classifier" control). Features are standardized with
/// training statistics; training is full-batch gradient descent. Returns
/// accuracy (%) on the eval pairs.
pub fn linear_probe<F: Scalar>(
    train_store: &FeatureStore<F>,
    train_labels: &[usize],
    eval_store: &FeatureStore<F>,
    eval_labels: &[usize],
    num_classes: usize,
    iterations: usize,
    lr: f64,
) -> Result<f64> {
    let pooled = |store: &FeatureStore<F>, n: usize| -> Result<Vec<Vec<f64>>> {
        (0..n as u32)
            .map(|id| {
                Ok(pool_latent(store.get(id)?)
                    .into_iter()
                    .map(|v| v.to_f64_lossy())
                    .collect())
            })
            .collect()
    };
    let train_x = pooled(train_store, train_labels.len())?;
    let eval_x = pooled(eval_store, eval_labels.len())?;
    if train_x.is_empty() {
        return Err(Error::InvalidInput("probe needs training samples".into()));
    }
    let dim = train_x[0].len();

    // Standardize with training statistics.
    let n = train_x.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for x in &train_x {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0f64; dim];
    for x in &train_x {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt().max(1e-8);
    }
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train_x.iter().map(|x| standardize(x)).collect();
    let eval_x: Vec<Vec<f64>> = eval_x.iter().map(|x| standardize(x)).collect();

    let mut weight = vec![0.0f64; num_classes * dim];
    let mut bias = vec![0.0f64; num_classes];
    for _ in 0..iterations {
        let mut gw = vec![0.0f64; num_classes * dim];
        let mut gb = vec![0.0f64; num_classes];
        for (x, &y) in train_x.iter().zip(train_labels) {
            let mut z = bias.clone();
            for (k, zk) in z.iter_mut().enumerate() {
                for (w, v) in weight[k * dim..(k + 1) * dim].iter().zip(x) {
                    *zk += w * v;
                }
            }
            let mut p = softmax(&z);
            p[y] -= 1.0;
            for (k, pk) in p.iter().enumerate() {
                gb[k] += pk / n;
                for (g, v) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                    *g += pk * v / n;
                }
            }
        }
        for (w, g) in weight.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }

    let mut correct = 0usize;
    for (x, &y) in eval_x.iter().zip(eval_labels) {
        let mut z = bias.clone();
        for (k, zk) in z.iter_mut().enumerate() {
            for (w, v) in weight[k * dim..(k + 1) * dim].iter().zip(x) {
                *zk += w * v;
            }
        }
        if argmax(&z) == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / eval_labels.len().max(1) as f64)
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
