//! Hand-written reverse pass for the fusion classifier. Verified against
//! central finite differences by the gradcheck harness and the test suite.

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::net::{ForwardTrace, FusionConfig, FusionParams};
use crate::scalar::Scalar;

/// Gradients mirror the parameter layout exactly.
pub type FusionGrads<F> = FusionParams<F>;

/// Accumulate parameter gradients for one sample into `grads`.
///
/// `logit_grad` is ∂loss/∂z (the blended logits). `embedding_grad`, when
/// given, is ∂loss/∂embedding for the pre-dropout post-attention embedding
/// (the prototype-loss path).
pub fn backward<F: Scalar>(
    config: &FusionConfig,
    params: &FusionParams<F>,
    trace: &ForwardTrace<F>,
    logit_grad: &[F],
    embedding_grad: Option<&[F]>,
    grads: &mut FusionGrads<F>,
) -> Result<()> {
    if logit_grad.len() != config.num_classes {
        return Err(Error::InvalidShape(format!(
            "logit grad length {} != {} classes",
            logit_grad.len(),
            config.num_classes
        )));
    }

    let mut cnn_latent_grad = vec![F::zero(); config.cnn_latent_dim];

    // Blend: z = (1−α)·z_sam + α·z_cnn.
    let (sam_logit_grad, cnn_logit_grad): (Option<Vec<F>>, Vec<F>) = if config.latent_fusion {
        let a = F::from_f64_lossy(config.alpha);
        let one_minus = F::one() - a;
        (
            Some(logit_grad.iter().map(|g| one_minus * *g).collect()),
            logit_grad.iter().map(|g| a * *g).collect(),
        )
    } else {
        (None, logit_grad.to_vec())
    };

    // Latent path.
    if config.latent_fusion {
        let fusion = params
            .latent
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing latent fusion params".into()))?;
        let fusion_grads = grads
            .latent
            .as_mut()
            .ok_or_else(|| Error::InvalidConfig("grads missing latent fusion".into()))?;
        let latent_trace = trace
            .latent
            .as_ref()
            .ok_or_else(|| Error::InvalidShape("trace lacks latent internals".into()))?;
        let embedding = trace
            .embedding
            .as_ref()
            .ok_or_else(|| Error::InvalidShape("trace lacks embedding".into()))?;
        let d = fusion.token_dim;

        // Classifier head back to the dropped embedding.
        let sam_grad = sam_logit_grad.expect("set when latent_fusion");
        let dropped_grad = fusion.classifier.backward(
            &latent_trace.dropped,
            &sam_grad,
            &mut fusion_grads.classifier.weight,
            &mut fusion_grads.classifier.bias,
        );

        // Undo dropout, then add the external (prototype-loss) embedding grad.
        let mut emb_grad: Vec<F> = match &trace.dropout_scale {
            Some(scale) => dropped_grad.iter().zip(scale).map(|(g, s)| *g * *s).collect(),
            None => dropped_grad,
        };
        if let Some(extra) = embedding_grad {
            if extra.len() != emb_grad.len() {
                return Err(Error::InvalidShape(format!(
                    "embedding grad length {} != {}",
                    extra.len(),
                    emb_grad.len()
                )));
            }
            for (g, e) in emb_grad.iter_mut().zip(extra) {
                *g += *e;
            }
        }
        debug_assert_eq!(embedding.len(), 2 * d);

        // Attention backward. Rows of queries/keys/values are per token.
        let attn = &latent_trace.attn;
        let mut value_grad = vec![F::zero(); 2 * d];
        let mut attn_grad = vec![F::zero(); 4];
        for i in 0..2 {
            let out_grad = &emb_grad[i * d..(i + 1) * d];
            for j in 0..2 {
                let a = attn[i * 2 + j];
                let mut dot = F::zero();
                for c in 0..d {
                    value_grad[j * d + c] += a * out_grad[c];
                    dot += out_grad[c] * latent_trace.values[j * d + c];
                }
                attn_grad[i * 2 + j] = dot;
            }
        }
        // Softmax rows.
        let scale = F::from_f64_lossy(1.0 / (d as f64).sqrt());
        let mut score_grad = vec![F::zero(); 4];
        for i in 0..2 {
            let row_dot =
                attn_grad[i * 2] * attn[i * 2] + attn_grad[i * 2 + 1] * attn[i * 2 + 1];
            for j in 0..2 {
                score_grad[i * 2 + j] = attn[i * 2 + j] * (attn_grad[i * 2 + j] - row_dot);
            }
        }
        let mut query_grad = vec![F::zero(); 2 * d];
        let mut key_grad = vec![F::zero(); 2 * d];
        for i in 0..2 {
            for j in 0..2 {
                let g = score_grad[i * 2 + j] * scale;
                for c in 0..d {
                    query_grad[i * d + c] += g * latent_trace.keys[j * d + c];
                    key_grad[j * d + c] += g * latent_trace.queries[i * d + c];
                }
            }
        }

        // Projection weights and token grads. q_i = Wq·t_i etc.
        let tokens = [&latent_trace.token_cnn, &latent_trace.token_sam];
        let mut token_grads = [vec![F::zero(); d], vec![F::zero(); d]];
        for i in 0..2 {
            for r in 0..d {
                let gq = query_grad[i * d + r];
                let gk = key_grad[i * d + r];
                let gv = value_grad[i * d + r];
                for c in 0..d {
                    let t = tokens[i][c];
                    fusion_grads.query[r * d + c] += gq * t;
                    fusion_grads.key[r * d + c] += gk * t;
                    fusion_grads.value[r * d + c] += gv * t;
                    token_grads[i][c] += fusion.query[r * d + c] * gq
                        + fusion.key[r * d + c] * gk
                        + fusion.value[r * d + c] * gv;
                }
            }
        }

        // Token projections back to the source latents.
        let cnn_in = fusion.token_cnn.backward(
            &trace.cnn_latent,
            &token_grads[0],
            &mut fusion_grads.token_cnn.weight,
            &mut fusion_grads.token_cnn.bias,
        );
        for (acc, g) in cnn_latent_grad.iter_mut().zip(&cnn_in) {
            *acc += *g;
        }
        let provider_latent = trace
            .provider_latent
            .as_ref()
            .ok_or_else(|| Error::InvalidShape("trace lacks provider latent".into()))?;
        // Provider latent is a frozen input; its grad is discarded.
        let _ = fusion.token_sam.backward(
            provider_latent,
            &token_grads[1],
            &mut fusion_grads.token_sam.weight,
            &mut fusion_grads.token_sam.bias,
        );
    }

    // CNN logit head.
    let head_in = params.cnn_head.backward(
        &trace.cnn_latent,
        &cnn_logit_grad,
        &mut grads.cnn_head.weight,
        &mut grads.cnn_head.bias,
    );
    for (acc, g) in cnn_latent_grad.iter_mut().zip(&head_in) {
        *acc += *g;
    }

    // Global average pool back into the last stage output.
    let last = config.stages.last().unwrap();
    let norm = F::from_f64_lossy((last.height * last.width) as f64);
    let mut out_grad = FeatureMap::zeros(last.channels, last.height, last.width);
    for c in 0..last.channels {
        let g = cnn_latent_grad[c] / norm;
        for p in 0..last.height * last.width {
            out_grad.data_mut()[c * last.height * last.width + p] = g;
        }
    }

    // Backbone stages, last to first.
    for i in (0..config.stages.len()).rev() {
        let spec = &config.stages[i];

        // Map fusion: fused = gate ⊗ residual ⊕ residual.
        if config.map_fusion_stage == Some(i) {
            let gate = trace
                .map_gate
                .as_ref()
                .ok_or_else(|| Error::InvalidShape("trace lacks map gate".into()))?;
            let residual = trace
                .map_residual
                .as_ref()
                .ok_or_else(|| Error::InvalidShape("trace lacks map residual".into()))?;
            let mask = trace
                .mask
                .as_ref()
                .ok_or_else(|| Error::InvalidShape("trace lacks mask".into()))?;
            let proj_grads = grads
                .mask_projection
                .as_mut()
                .ok_or_else(|| Error::InvalidConfig("grads missing mask projection".into()))?;
            let positions = spec.height * spec.width;
            let mut residual_grad = FeatureMap::zeros(spec.channels, spec.height, spec.width);
            for c in 0..spec.channels {
                let mut scale_acc = F::zero();
                let mut shift_acc = F::zero();
                for p in 0..positions {
                    let g_fused = out_grad.data()[c * positions + p];
                    let gate_grad = g_fused * residual.data()[c * positions + p];
                    scale_acc += gate_grad * mask.data()[p];
                    shift_acc += gate_grad;
                    residual_grad.data_mut()[c * positions + p] =
                        g_fused * (gate.data()[c * positions + p] + F::one());
                }
                proj_grads.scale[c] += scale_acc;
                proj_grads.shift[c] += shift_acc;
            }
            out_grad = residual_grad;
        }

        // Average pool backward.
        let pre = &trace.pre_activation[i];
        let (_, pre_h, pre_w) = pre.shape();
        let fy = pre_h / spec.height;
        let fx = pre_w / spec.width;
        let inv = F::one() / F::from_f64_lossy((fy * fx) as f64);
        let mut act_grad = FeatureMap::zeros(spec.channels, pre_h, pre_w);
        for c in 0..spec.channels {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let g = out_grad.at(c, y, x) * inv;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            act_grad.set(c, y * fy + dy, x * fx + dx, g);
                        }
                    }
                }
            }
        }

        // ReLU backward.
        for (g, p) in act_grad.data_mut().iter_mut().zip(pre.data()) {
            if *p <= F::zero() {
                *g = F::zero();
            }
        }

        // Convolution backward.
        let input = &trace.stage_inputs[i];
        let (in_ch, h, w) = input.shape();
        let stage = &params.stages[i];
        let stage_grads = &mut grads.stages[i];
        let need_input_grad = i > 0;
        let mut input_grad = if need_input_grad {
            Some(FeatureMap::zeros(in_ch, h, w))
        } else {
            None
        };
        for o in 0..spec.channels {
            for y in 0..h {
                for x in 0..w {
                    let g = act_grad.at(o, y, x);
                    if g == F::zero() {
                        continue;
                    }
                    stage_grads.bias[o] += g;
                    for ic in 0..in_ch {
                        let base = (o * in_ch + ic) * 9;
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let (sy, sx) = (sy as usize, sx as usize);
                                stage_grads.weight[base + ky * 3 + kx] += g * input.at(ic, sy, sx);
                                if let Some(ig) = input_grad.as_mut() {
                                    let v = ig.at(ic, sy, sx)
                                        + g * stage.weight[base + ky * 3 + kx];
                                    ig.set(ic, sy, sx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(ig) = input_grad {
            out_grad = ig;
        }
    }

    Ok(())
}
