use super::*;
use crate::data::ImageShape;
use crate::rng::{normal, seeded_rng};

fn small_config(map_fusion: bool, latent: bool) -> FusionConfig {
    FusionConfig {
        input_height: 8,
        input_width: 8,
        input_channels: 1,
        stages: vec![
            StageSpec {
                channels: 3,
                height: 4,
                width: 4,
            },
            StageSpec {
                channels: 5,
                height: 2,
                width: 2,
            },
        ],
        map_fusion_stage: map_fusion.then_some(1),
        latent_fusion: latent,
        alpha: 0.5,
        cnn_latent_dim: 5,
        provider_latent_dim: 4,
        token_dim: 6,
        num_classes: 3,
        dropout_rate: 0.5,
    }
}

fn random_image(seed: u64, shape: ImageShape) -> Image<f64> {
    let mut rng = seeded_rng(seed);
    let data = (0..shape.height * shape.width * shape.channels)
        .map(|_| normal::<f64, _>(&mut rng))
        .collect();
    Image::from_vec(shape.height, shape.width, shape.channels, data).unwrap()
}

fn random_features(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let mut rng = seeded_rng(seed);
    let data = (0..c * h * w).map(|_| normal::<f64, _>(&mut rng)).collect();
    FeatureMap::from_vec(c, h, w, data).unwrap()
}

#[test]
fn project_mask_zero_params_gives_zeros() {
    let mask = random_features(1, 1, 2, 2);
    let proj = MaskProjection::<f64>::zeros(4);
    let out = project_mask(&mask, &proj).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn project_mask_identity_params() {
    let mask = random_features(2, 1, 3, 3);
    let proj = MaskProjection {
        scale: vec![1.0f64],
        shift: vec![0.0],
    };
    let out = project_mask(&mask, &proj).unwrap();
    assert_eq!(out.data(), mask.data());
}

#[test]
fn project_mask_matches_loop_oracle() {
    let mask = random_features(3, 1, 4, 4);
    let mut rng = seeded_rng(4);
    let proj = MaskProjection {
        scale: (0..4).map(|_| normal::<f64, _>(&mut rng)).collect(),
        shift: (0..4).map(|_| normal::<f64, _>(&mut rng)).collect(),
    };
    let out = project_mask(&mask, &proj).unwrap();
    for c in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                let expect = proj.scale[c] * mask.at(0, y, x) + proj.shift[c];
                assert_eq!(out.at(c, y, x), expect);
            }
        }
    }
}

#[test]
fn fuse_map_substitutions() {
    let residual = random_features(5, 2, 3, 3);
    let zeros = FeatureMap::zeros(2, 3, 3);
    assert_eq!(fuse_map(&zeros, &residual).unwrap().data(), residual.data());

    let ones = FeatureMap::from_vec(2, 3, 3, vec![1.0f64; 18]).unwrap();
    let doubled = fuse_map(&ones, &residual).unwrap();
    for (d, r) in doubled.data().iter().zip(residual.data()) {
        assert_eq!(*d, 2.0 * r);
    }

    let neg = FeatureMap::from_vec(2, 3, 3, vec![-1.0f64; 18]).unwrap();
    let cancelled = fuse_map(&neg, &residual).unwrap();
    assert!(cancelled.data().iter().all(|v| *v == 0.0));

    let mismatched = FeatureMap::<f64>::zeros(2, 2, 3);
    assert!(matches!(
        fuse_map(&mismatched, &residual),
        Err(Error::InvalidShape(_))
    ));
}

#[test]
fn blend_logits_endpoints_and_midpoint() {
    let sam = vec![2.0f64, 0.0];
    let cnn = vec![0.0f64, 2.0];
    assert_eq!(blend_logits(&sam, &cnn, 1.0).unwrap(), cnn);
    assert_eq!(blend_logits(&sam, &cnn, 0.0).unwrap(), sam);
    assert_eq!(blend_logits(&sam, &cnn, 0.5).unwrap(), vec![1.0, 1.0]);
    assert!(matches!(
        blend_logits(&sam, &cnn, 1.5),
        Err(Error::InvalidConfig(_))
    ));
    assert!(matches!(
        blend_logits(&sam, &cnn[..1], 0.5),
        Err(Error::InvalidShape(_))
    ));
}

#[test]
fn latent_fuse_zero_params_is_bias() {
    let mut fusion = LatentFusion::<f64>::zeros(3, 4, 5, 2);
    fusion.classifier.bias = vec![0.7, -0.3];
    let (embedding, logits, _) =
        latent_fuse(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0], &fusion, None).unwrap();
    assert!(embedding.iter().all(|v| *v == 0.0));
    assert_eq!(logits, vec![0.7, -0.3]);
}

/// Dense-loop attention oracle written independently of `latent_fuse`:
/// builds explicit matrices and normalizes the softmax the long way.
fn attention_oracle(
    cnn: &[f64],
    sam: &[f64],
    fusion: &LatentFusion<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let d = fusion.token_dim;
    let proj = |lin: &Linear<f64>, x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; lin.out_dim];
        for o in 0..lin.out_dim {
            out[o] = lin.bias[o];
            for i in 0..lin.in_dim {
                out[o] += lin.weight[o * lin.in_dim + i] * x[i];
            }
        }
        out
    };
    let tokens = [proj(&fusion.token_cnn, cnn), proj(&fusion.token_sam, sam)];
    let apply_sq = |m: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = tokens.iter().map(|t| apply_sq(&fusion.query, t)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|t| apply_sq(&fusion.key, t)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|t| apply_sq(&fusion.value, t)).collect();
    let mut embedding = vec![0.0; 2 * d];
    for i in 0..2 {
        let scores: Vec<f64> = (0..2)
            .map(|j| {
                (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..2 {
            let a = scores[j].exp() / denom;
            for c in 0..d {
                embedding[i * d + c] += a * v[j][c];
            }
        }
    }
    let logits = proj(&fusion.classifier, &embedding);
    (embedding, logits)
}

fn random_latent_fusion(seed: u64, cnn_dim: usize, sam_dim: usize, d: usize, k: usize) -> LatentFusion<f64> {
    let mut rng = seeded_rng(seed);
    let mut fusion = LatentFusion::<f64>::zeros(cnn_dim, sam_dim, d, k);
    for arr in [
        &mut fusion.token_cnn.weight,
        &mut fusion.token_cnn.bias,
        &mut fusion.token_sam.weight,
        &mut fusion.token_sam.bias,
        &mut fusion.query,
        &mut fusion.key,
        &mut fusion.value,
        &mut fusion.classifier.weight,
        &mut fusion.classifier.bias,
    ] {
        for v in arr.iter_mut() {
            *v = normal::<f64, _>(&mut rng);
        }
    }
    fusion
}

#[test]
fn latent_fuse_matches_attention_oracle() {
    for seed in 0..10u64 {
        let fusion = random_latent_fusion(seed, 5, 4, 6, 3);
        let mut rng = seeded_rng(100 + seed);
        let cnn: Vec<f64> = (0..5).map(|_| normal::<f64, _>(&mut rng)).collect();
        let sam: Vec<f64> = (0..4).map(|_| normal::<f64, _>(&mut rng)).collect();
        let (embedding, logits, _) = latent_fuse(&cnn, &sam, &fusion, None).unwrap();
        let (oracle_emb, oracle_logits) = attention_oracle(&cnn, &sam, &fusion);
        for (a, b) in embedding.iter().zip(&oracle_emb) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in logits.iter().zip(&oracle_logits) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn latent_fuse_token_swap_with_tied_projections() {
    // Tied projections require equal source dims.
    let mut fusion = random_latent_fusion(3, 4, 4, 5, 2);
    fusion.token_sam = fusion.token_cnn.clone();
    let mut rng = seeded_rng(17);
    let a: Vec<f64> = (0..4).map(|_| normal::<f64, _>(&mut rng)).collect();
    let b: Vec<f64> = (0..4).map(|_| normal::<f64, _>(&mut rng)).collect();
    let (emb_ab, _, _) = latent_fuse(&a, &b, &fusion, None).unwrap();
    let (emb_ba, _, _) = latent_fuse(&b, &a, &fusion, None).unwrap();
    let d = fusion.token_dim;
    for c in 0..d {
        assert!((emb_ab[c] - emb_ba[d + c]).abs() < 1e-12);
        assert!((emb_ab[d + c] - emb_ba[c]).abs() < 1e-12);
    }
}

#[test]
fn forward_without_fusion_is_plain_cnn() {
    let config = small_config(false, false);
    let params = FusionParams::init(&config, 5);
    let image = random_image(
        8,
        ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        },
    );
    let trace = forward(&image, None, &config, &params, Mode::Eval, None).unwrap();
    assert_eq!(trace.logits, trace.cnn_logits);
    assert!(trace.embedding.is_none());
    assert!(trace.map_fused.is_none());
}

#[test]
fn forward_alpha_one_bit_equals_cnn_logits() {
    let mut config = small_config(false, true);
    config.alpha = 1.0;
    let params = FusionParams::init(&config, 5);
    let image = random_image(
        8,
        ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        },
    );
    let features = random_features(9, 4, 4, 4);
    let trace = forward(&image, Some(&features), &config, &params, Mode::Eval, None).unwrap();
    assert!(trace.sam_logits.is_some());
    assert_eq!(trace.logits, trace.cnn_logits, "alpha=1 must be bit-exact");
}

#[test]
fn forward_eval_is_deterministic() {
    let config = small_config(true, true);
    let params = FusionParams::init(&config, 11);
    let image = random_image(
        21,
        ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        },
    );
    let features = random_features(22, 4, 4, 4);
    let a = forward(&image, Some(&features), &config, &params, Mode::Eval, None).unwrap();
    let b = forward(&image, Some(&features), &config, &params, Mode::Eval, None).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.embedding, b.embedding);
}

#[test]
fn forward_missing_features_is_an_error() {
    let config = small_config(true, false);
    let params = FusionParams::init(&config, 1);
    let image = random_image(
        2,
        ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        },
    );
    assert!(matches!(
        forward(&image, None, &config, &params, Mode::Eval, None),
        Err(Error::MissingFeature(_))
    ));
}

#[test]
fn trace_shapes_depend_only_on_config() {
    let config = small_config(true, true);
    let params = FusionParams::init(&config, 3);
    let shape = ImageShape {
        height: 8,
        width: 8,
        channels: 1,
    };
    let t1 = forward(
        &random_image(1, shape),
        Some(&random_features(2, 4, 4, 4)),
        &config,
        &params,
        Mode::Eval,
        None,
    )
    .unwrap();
    let t2 = forward(
        &random_image(3, shape),
        Some(&random_features(4, 4, 8, 8)),
        &config,
        &params,
        Mode::Eval,
        None,
    )
    .unwrap();
    assert_eq!(t1.logits.len(), t2.logits.len());
    assert_eq!(
        t1.embedding.as_ref().unwrap().len(),
        t2.embedding.as_ref().unwrap().len()
    );
    assert_eq!(
        t1.map_fused.as_ref().unwrap().shape(),
        t2.map_fused.as_ref().unwrap().shape()
    );
    assert_eq!(t1.cnn_latent.len(), config.cnn_latent_dim);
    assert_eq!(
        t1.concat_latent.as_ref().unwrap().len(),
        config.embedding_dim()
    );
}

#[test]
fn zeroed_gate_params_match_fusion_disabled_backbone() {
    // With the mask projection at zero, map fusion is a no-op for forward
    // values and for backbone gradients.
    let with = small_config(true, false);
    let mut without = with.clone();
    without.map_fusion_stage = None;
    let params_with = {
        let mut p = FusionParams::init(&with, 7);
        p.mask_projection = Some(MaskProjection::zeros(5));
        p
    };
    let params_without = FusionParams::init(&without, 7);
    let shape = ImageShape {
        height: 8,
        width: 8,
        channels: 1,
    };
    let image = random_image(31, shape);
    let features = random_features(32, 4, 4, 4);
    let t_with = forward(&image, Some(&features), &with, &params_with, Mode::Eval, None).unwrap();
    let t_without = forward(&image, None, &without, &params_without, Mode::Eval, None).unwrap();
    assert_eq!(t_with.logits, t_without.logits);

    // Same incoming logit grad; backbone grads must agree exactly.
    let dz = vec![0.3, -0.2, 0.5];
    let mut g_with = FusionGrads::zeros(&with);
    let mut g_without = FusionGrads::zeros(&without);
    backward(&with, &params_with, &t_with, &dz, None, &mut g_with).unwrap();
    backward(
        &without,
        &params_without,
        &t_without,
        &dz,
        None,
        &mut g_without,
    )
    .unwrap();
    for (a, b) in g_with.stages.iter().zip(&g_without.stages) {
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
    }
    assert_eq!(g_with.cnn_head.weight, g_without.cnn_head.weight);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(true, true);
    let params = FusionParams::<f32>::init(&config, 13);
    let bin = dir.path().join("ckpt.bin");
    let json = dir.path().join("ckpt.json");
    save_checkpoint(&bin, &json, &config, &params).unwrap();
    let loaded = load_checkpoint(&bin, &json).unwrap();
    assert_eq!(loaded.config, config);
    for ((na, a), (nb, b)) in params.arrays().iter().zip(loaded.params.arrays().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
}

#[test]
fn config_validation_rejects_bad_setups() {
    let mut c = small_config(false, false);
    c.alpha = 1.2;
    assert!(c.validate().is_err());
    let mut c = small_config(false, false);
    c.map_fusion_stage = Some(9);
    assert!(c.validate().is_err());
    let mut c = small_config(false, false);
    c.cnn_latent_dim = 7;
    assert!(c.validate().is_err());
    let mut c = small_config(false, false);
    c.stages[1].height = 3; // does not divide 4
    assert!(c.validate().is_err());
    assert!(small_config(true, true).validate().is_ok());
}

#[test]
fn init_is_per_array_stable_across_configs() {
    // Enabling the latent path must not change backbone initialization.
    let plain = small_config(false, false);
    let fused = small_config(false, true);
    let p1 = FusionParams::<f64>::init(&plain, 99);
    let p2 = FusionParams::<f64>::init(&fused, 99);
    for (a, b) in p1.stages.iter().zip(&p2.stages) {
        assert_eq!(a.weight, b.weight);
    }
    assert_eq!(p1.cnn_head.weight, p2.cnn_head.weight);
}

#[test]
fn dropout_only_active_in_train_mode() {
    let config = small_config(false, true);
    let params = FusionParams::init(&config, 5);
    let shape = ImageShape {
        height: 8,
        width: 8,
        channels: 1,
    };
    let image = random_image(51, shape);
    let features = random_features(52, 4, 4, 4);
    let mut rng = seeded_rng(1);
    let train = forward(
        &image,
        Some(&features),
        &config,
        &params,
        Mode::Train,
        Some(&mut rng),
    )
    .unwrap();
    assert!(train.dropout_scale.is_some());
    let eval = forward(&image, Some(&features), &config, &params, Mode::Eval, None).unwrap();
    assert!(eval.dropout_scale.is_none());
    // Dropout rescales or zeroes classifier inputs; embeddings agree.
    assert_eq!(train.embedding, eval.embedding);
}
