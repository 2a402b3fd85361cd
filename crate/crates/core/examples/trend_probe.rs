//! Scratch harness for sizing the trend experiment (not part of the API).

use std::time::Instant;

use ltfuse_core::data::{
    synth_balanced, synth_longtailed, GroupThresholds, ImageShape, ImbalanceKind,
    ImbalanceProfile, Split,
};
use ltfuse_core::loss::LossConfig;
use ltfuse_core::net::{FusionConfig, StageSpec};
use ltfuse_core::provider::{synth_provider, ProviderConfig};
use ltfuse_core::train::{
    evaluate, linear_probe, prediction_for, train, BaselineKind, LrSchedule, TrainConfig,
};

fn fusion_config(latent: bool, map: bool) -> FusionConfig {
    FusionConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 1,
        stages: vec![
            StageSpec { channels: 8, height: 8, width: 8 },
            StageSpec { channels: 16, height: 4, width: 4 },
            StageSpec { channels: 24, height: 2, width: 2 },
        ],
        map_fusion_stage: map.then_some(2),
        latent_fusion: latent,
        alpha: 0.5,
        cnn_latent_dim: 24,
        provider_latent_dim: 16,
        token_dim: 16,
        num_classes: 10,
        dropout_rate: 0.5,
    }
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let lr = env_f64("LR", 0.1);
    let beta = env_f64("BETA", 1e-4);
    let dropout = env_f64("DROPOUT", 0.5);
    let alpha = env_f64("ALPHA", 0.5);
    let epochs = env_f64("EPOCHS", 50.0) as usize;
    let seeds = env_f64("SEEDS", 5.0) as u64;
    let shape = ImageShape { height: 16, width: 16, channels: 1 };
    let provider_cfg = ProviderConfig { channels: 16, height: 8, width: 8, signal_strength: 0.5 };

    let mut ce_few = Vec::new();
    let mut ce_all = Vec::new();
    let mut fx_few = Vec::new();
    let mut fx_all = Vec::new();

    for seed in 0..seeds {
        if std::env::var("SKIP_TRAIN").is_ok() { break; }
        let t0 = Instant::now();
        let train_set = synth_longtailed::<f32>(10, 500, 100.0, ImbalanceKind::Exponential, shape, seed).unwrap();
        let test_set = synth_balanced::<f32>(10, 50, Split::Test, shape, seed).unwrap();
        let store_train = synth_provider(&train_set, &provider_cfg, seed).unwrap();
        let store_test = synth_provider(&test_set, &provider_cfg, seed).unwrap();
        let profile = ImbalanceProfile::from_counts(train_set.class_counts(), GroupThresholds::default()).unwrap();

        let train_cfg = TrainConfig {
            epochs,
            batch_size: 32,
            lr,
            lr_schedule: if std::env::var("COSINE").is_ok() { LrSchedule::Cosine } else { LrSchedule::Constant },
            momentum: 0.9,
            seed,
            baseline: BaselineKind::Ce,
            logit_adjust_tau: 1.0,
        };
        let loss_plain = LossConfig { beta: 0.0, ..LossConfig::default() };
        let loss_proto = LossConfig { beta, ..LossConfig::default() };

        // CE baseline: no fusion.
        let mut cfg_ce = fusion_config(false, false);
        cfg_ce.dropout_rate = dropout;
        cfg_ce.alpha = alpha;
        let rep_ce = match train(&train_set, None, None, &profile, &cfg_ce, &loss_plain, &train_cfg) {
            Ok(out) => evaluate(&out.params, &cfg_ce, &test_set, None, &profile,
                prediction_for(BaselineKind::Ce, &profile.priors(), 1.0), "ce", seed, 49).unwrap(),
            Err(e) => { println!("seed {seed}: CE DIVERGED: {e}"); continue; }
        };

        // Fusion + proto.
        let mut cfg_fx = fusion_config(true, true);
        cfg_fx.dropout_rate = dropout;
        cfg_fx.alpha = alpha;
        let rep_fx = match train(&train_set, Some(&store_train), None, &profile, &cfg_fx, &loss_proto, &train_cfg) {
            Ok(out) => evaluate(&out.params, &cfg_fx, &test_set, Some(&store_test), &profile,
                prediction_for(BaselineKind::Ce, &profile.priors(), 1.0), "fx", seed, 49).unwrap(),
            Err(e) => { println!("seed {seed}: FX DIVERGED: {e}"); continue; }
        };

        println!(
            "seed {seed}: CE  all {:5.1} many {:5.1} med {:5.1} few {:5.1} | FX all {:5.1} many {:5.1} med {:5.1} few {:5.1}  ({:.1?})",
            rep_ce.overall, rep_ce.many.unwrap_or(0.0), rep_ce.medium.unwrap_or(0.0), rep_ce.few.unwrap_or(0.0),
            rep_fx.overall, rep_fx.many.unwrap_or(0.0), rep_fx.medium.unwrap_or(0.0), rep_fx.few.unwrap_or(0.0),
            t0.elapsed()
        );
        ce_few.push(rep_ce.few.unwrap_or(0.0));
        ce_all.push(rep_ce.overall);
        fx_few.push(rep_fx.few.unwrap_or(0.0));
        fx_all.push(rep_fx.overall);
    }

    let median = |v: &mut Vec<f64>| -> f64 {
        if v.is_empty() { return f64::NAN; }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    println!(
        "medians: CE few {:.1} all {:.1} | FX few {:.1} all {:.1} | few gap {:+.1}, all gap {:+.1}",
        median(&mut ce_few.clone()), median(&mut ce_all.clone()),
        median(&mut fx_few.clone()), median(&mut fx_all.clone()),
        median(&mut fx_few.clone()) - median(&mut ce_few.clone()),
        median(&mut fx_all.clone()) - median(&mut ce_all.clone()),
    );

    // Probe accuracies at the three signal levels.
    let train_set = synth_longtailed::<f32>(10, 500, 100.0, ImbalanceKind::Exponential, shape, 0).unwrap();
    let val_set = synth_balanced::<f32>(10, 50, Split::Val, shape, 0).unwrap();
    for signal in [0.0, 0.5, 1.0, 2.0] {
        let cfg = ProviderConfig { signal_strength: signal, ..provider_cfg };
        let st = synth_provider(&train_set, &cfg, 0).unwrap();
        let sv = synth_provider(&val_set, &cfg, 0).unwrap();
        let acc = linear_probe(&st, train_set.labels(), &sv, val_set.labels(), 10, 400, 0.5).unwrap();
        println!("probe @ signal {signal}: {acc:.1}%");
    }
}
