//! The trainable classifier: a small configurable CNN backbone plus the two
//! fusion paths — map-space gating of backbone activations by a projected
//! provider mask, and latent-space attention fusion with logit blending.

mod backward;
mod checkpoint;
mod params;

pub use backward::{backward, FusionGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{ConvStage, FusionParams, LatentFusion, Linear, MaskProjection};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::{FeatureMap, Image, LatentVector};
use crate::provider::{normalize_resize, pca_reduce, pool_latent};
use crate::scalar::Scalar;

/// One backbone stage: output channels and spatial size after pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Architecture and fusion hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Backbone stage whose output the projected mask gates; `None` disables
    /// map fusion.
    pub map_fusion_stage: Option<usize>,
    pub latent_fusion: bool,
    /// Blend weight of the CNN logits in z = (1−α)·z_sam + α·z_cnn.
    pub alpha: f64,
    /// Backbone latent width; must equal the last stage's channel count.
    pub cnn_latent_dim: usize,
    /// Provider latent width (pooled feature channels).
    pub provider_latent_dim: usize,
    /// Attention token width; the fused embedding has 2× this length.
    pub token_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl FusionConfig {
    /// The declared feature-embedding width (CNN + provider latents).
    pub fn embedding_dim(&self) -> usize {
        self.cnn_latent_dim + self.provider_latent_dim
    }

    /// Width of the post-attention embedding the prototype losses act on.
    pub fn fused_embedding_dim(&self) -> usize {
        2 * self.token_dim
    }

    pub fn fusion_enabled(&self) -> bool {
        self.map_fusion_stage.is_some() || self.latent_fusion
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("at least one backbone stage".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need ≥ 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.token_dim == 0 {
            return Err(Error::InvalidConfig("token_dim must be ≥ 1".into()));
        }
        if let Some(s) = self.map_fusion_stage {
            if s >= self.stages.len() {
                return Err(Error::InvalidConfig(format!(
                    "map_fusion_stage {s} out of range for {} stages",
                    self.stages.len()
                )));
            }
        }
        let last = self.stages.last().unwrap();
        if self.cnn_latent_dim != last.channels {
            return Err(Error::InvalidConfig(format!(
                "cnn_latent_dim {} must equal last stage channels {}",
                self.cnn_latent_dim, last.channels
            )));
        }
        // Each stage pools the previous spatial size by an integer factor.
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.height == 0 || stage.width == 0 || stage.channels == 0 {
                return Err(Error::InvalidConfig(format!("stage {i} has a zero dim")));
            }
            if h % stage.height != 0 || w % stage.width != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i} size {}x{} must divide {}x{}",
                    stage.height, stage.width, h, w
                )));
            }
            h = stage.height;
            w = stage.width;
        }
        Ok(())
    }
}

/// Train/eval mode; dropout is active only in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Provider-side views the network consumes: the normalized mask resized to
/// the fusion stage, and the pooled latent vector. Both are functions of the
/// frozen features only, so callers may compute them once per sample.
#[derive(Debug, Clone)]
pub struct ProviderViews<F> {
    pub mask: Option<FeatureMap<F>>,
    pub mask_degenerate: bool,
    pub latent: Option<LatentVector<F>>,
}

/// Reduce raw provider features to the views required by `config`.
pub fn prepare_provider_views<F: Scalar>(
    features: &FeatureMap<F>,
    config: &FusionConfig,
) -> Result<ProviderViews<F>> {
    let mask = match config.map_fusion_stage {
        Some(stage) => {
            let spec = &config.stages[stage];
            let reduced = pca_reduce(features)?;
            let resized = normalize_resize(&reduced.map, spec.height, spec.width)?;
            Some((resized, reduced.degenerate))
        }
        None => None,
    };
    let latent = if config.latent_fusion {
        let v = pool_latent(features);
        if v.len() != config.provider_latent_dim {
            return Err(Error::InvalidShape(format!(
                "provider latent dim {} != configured {}",
                v.len(),
                config.provider_latent_dim
            )));
        }
        Some(v)
    } else {
        None
    };
    let (mask, mask_degenerate) = match mask {
        Some((m, d)) => (Some(m), d),
        None => (None, false),
    };
    Ok(ProviderViews {
        mask,
        mask_degenerate,
        latent,
    })
}

/// Intermediate activations of one forward pass. Shapes depend only on the
/// config, never on data values.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// Input to each stage's convolution (index 0 is the image as a map).
    pub stage_inputs: Vec<FeatureMap<F>>,
    /// Convolution outputs before ReLU.
    pub pre_activation: Vec<FeatureMap<F>>,
    /// Backbone map entering the fusion (fusion stage output before gating).
    pub map_residual: Option<FeatureMap<F>>,
    /// Projected mask (the 1×1-conv output).
    pub map_gate: Option<FeatureMap<F>>,
    /// Gated map: gate ⊗ residual ⊕ residual.
    pub map_fused: Option<FeatureMap<F>>,
    pub mask: Option<FeatureMap<F>>,
    pub mask_degenerate: bool,
    pub cnn_latent: LatentVector<F>,
    pub provider_latent: Option<LatentVector<F>>,
    /// Concatenation of the two source latents (the declared embedding).
    pub concat_latent: Option<LatentVector<F>>,
    pub latent: Option<LatentTrace<F>>,
    /// Post-attention embedding (2·token_dim); the prototype-loss space.
    pub embedding: Option<LatentVector<F>>,
    /// Inverted-dropout scale per embedding slot (absent in eval mode).
    pub dropout_scale: Option<Vec<F>>,
    pub cnn_logits: Vec<F>,
    pub sam_logits: Option<Vec<F>>,
    pub logits: Vec<F>,
}

/// Attention internals cached for the backward pass.
#[derive(Debug, Clone)]
pub struct LatentTrace<F> {
    pub token_cnn: Vec<F>,
    pub token_sam: Vec<F>,
    /// Row-major 2×d query/key/value matrices.
    pub queries: Vec<F>,
    pub keys: Vec<F>,
    pub values: Vec<F>,
    /// Row-major 2×2 attention weights.
    pub attn: Vec<F>,
    /// Embedding after dropout, as fed to the classifier head.
    pub dropped: Vec<F>,
}

/// Eq. of the mask path: per-channel affine map of the single-channel mask.
pub fn project_mask<F: Scalar>(
    mask: &FeatureMap<F>,
    projection: &MaskProjection<F>,
) -> Result<FeatureMap<F>> {
    let (c, h, w) = mask.shape();
    if c != 1 {
        return Err(Error::InvalidShape(format!(
            "mask must be single-channel, got {c}"
        )));
    }
    let channels = projection.scale.len();
    let mut out = FeatureMap::zeros(channels, h, w);
    for ch in 0..channels {
        let a = projection.scale[ch];
        let b = projection.shift[ch];
        for p in 0..h * w {
            out.data_mut()[ch * h * w + p] = a * mask.data()[p] + b;
        }
    }
    Ok(out)
}

/// Map fusion: fused = gate ⊗ residual ⊕ residual (element-wise).
pub fn fuse_map<F: Scalar>(
    gate: &FeatureMap<F>,
    residual: &FeatureMap<F>,
) -> Result<FeatureMap<F>> {
    if gate.shape() != residual.shape() {
        return Err(Error::InvalidShape(format!(
            "fuse_map shapes differ: {:?} vs {:?}",
            gate.shape(),
            residual.shape()
        )));
    }
    let (c, h, w) = gate.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for ((slot, g), r) in out
        .data_mut()
        .iter_mut()
        .zip(gate.data())
        .zip(residual.data())
    {
        *slot = *g * *r + *r;
    }
    Ok(out)
}

/// Logit blending: z = (1−α)·z_sam + α·z_cnn.
pub fn blend_logits<F: Scalar>(sam_logits: &[F], cnn_logits: &[F], alpha: f64) -> Result<Vec<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    if sam_logits.len() != cnn_logits.len() {
        return Err(Error::InvalidShape(format!(
            "logit lengths differ: {} vs {}",
            sam_logits.len(),
            cnn_logits.len()
        )));
    }
    let a = F::from_f64_lossy(alpha);
    let one_minus = F::one() - a;
    Ok(sam_logits
        .iter()
        .zip(cnn_logits)
        .map(|(s, c)| one_minus * *s + a * *c)
        .collect())
}

/// Latent fusion on explicit inputs: project each source to a token, run
/// single-head scaled dot-product self-attention over the 2-token sequence,
/// concatenate the attended tokens, and classify. Returns (embedding, logits,
/// trace). Dropout is applied between the embedding and the classifier when
/// `dropout_scale` is given.
pub fn latent_fuse<F: Scalar>(
    cnn_latent: &[F],
    provider_latent: &[F],
    fusion: &LatentFusion<F>,
    dropout_scale: Option<&[F]>,
) -> Result<(Vec<F>, Vec<F>, LatentTrace<F>)> {
    if cnn_latent.len() != fusion.token_cnn.in_dim
        || provider_latent.len() != fusion.token_sam.in_dim
    {
        return Err(Error::InvalidShape(format!(
            "latent dims {}x{} do not match projections {}x{}",
            cnn_latent.len(),
            provider_latent.len(),
            fusion.token_cnn.in_dim,
            fusion.token_sam.in_dim
        )));
    }
    let d = fusion.token_dim;
    let token_cnn = fusion.token_cnn.apply(cnn_latent);
    let token_sam = fusion.token_sam.apply(provider_latent);

    let mat_vec = |m: &[F], x: &[F]| -> Vec<F> {
        (0..d)
            .map(|r| {
                let mut acc = F::zero();
                for (w, v) in m[r * d..(r + 1) * d].iter().zip(x) {
                    acc += *w * *v;
                }
                acc
            })
            .collect()
    };
    let tokens = [token_cnn.clone(), token_sam.clone()];
    let mut queries = Vec::with_capacity(2 * d);
    let mut keys = Vec::with_capacity(2 * d);
    let mut values = Vec::with_capacity(2 * d);
    for t in &tokens {
        queries.extend(mat_vec(&fusion.query, t));
        keys.extend(mat_vec(&fusion.key, t));
        values.extend(mat_vec(&fusion.value, t));
    }

    // 2×2 attention: scores[i][j] = q_i·k_j / √d, softmax over j.
    let scale = F::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut attn = vec![F::zero(); 4];
    for i in 0..2 {
        let mut scores = [F::zero(); 2];
        for (j, score) in scores.iter_mut().enumerate() {
            let mut acc = F::zero();
            for c in 0..d {
                acc += queries[i * d + c] * keys[j * d + c];
            }
            *score = acc * scale;
        }
        let m = scores[0].max(scores[1]);
        let e0 = (scores[0] - m).exp();
        let e1 = (scores[1] - m).exp();
        let z = e0 + e1;
        attn[i * 2] = e0 / z;
        attn[i * 2 + 1] = e1 / z;
    }

    let mut embedding = vec![F::zero(); 2 * d];
    for i in 0..2 {
        for c in 0..d {
            embedding[i * d + c] = attn[i * 2] * values[c] + attn[i * 2 + 1] * values[d + c];
        }
    }

    let dropped: Vec<F> = match dropout_scale {
        Some(scale) => embedding.iter().zip(scale).map(|(e, s)| *e * *s).collect(),
        None => embedding.clone(),
    };
    let logits = fusion.classifier.apply(&dropped);
    let trace = LatentTrace {
        token_cnn,
        token_sam,
        queries,
        keys,
        values,
        attn,
        dropped,
    };
    Ok((embedding, logits, trace))
}

fn conv3x3<F: Scalar>(input: &FeatureMap<F>, stage: &ConvStage<F>) -> FeatureMap<F> {
    let (in_ch, h, w) = input.shape();
    debug_assert_eq!(in_ch, stage.in_channels);
    let mut out = FeatureMap::zeros(stage.out_channels, h, w);
    for o in 0..stage.out_channels {
        let bias = stage.bias[o];
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias;
                for i in 0..in_ch {
                    let base = (o * in_ch + i) * 9;
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
                            acc += stage.weight[base + ky * 3 + kx]
                                * input.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

fn relu<F: Scalar>(map: &FeatureMap<F>) -> FeatureMap<F> {
    let (c, h, w) = map.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for (slot, v) in out.data_mut().iter_mut().zip(map.data()) {
        *slot = v.max(F::zero());
    }
    out
}

fn avg_pool<F: Scalar>(map: &FeatureMap<F>, out_h: usize, out_w: usize) -> FeatureMap<F> {
    let (c, h, w) = map.shape();
    let fy = h / out_h;
    let fx = w / out_w;
    let norm = F::from_f64_lossy((fy * fx) as f64);
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = F::zero();
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += map.at(ch, y * fy + dy, x * fx + dx);
                    }
                }
                out.set(ch, y, x, acc / norm);
            }
        }
    }
    out
}

/// Full forward pass from precomputed provider views.
pub fn forward_with_views<F: Scalar>(
    image: &Image<F>,
    views: Option<&ProviderViews<F>>,
    config: &FusionConfig,
    params: &FusionParams<F>,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace<F>> {
    if config.fusion_enabled() && views.is_none() {
        return Err(Error::MissingFeature(
            "fusion enabled but no provider features supplied".into(),
        ));
    }

    let mut stage_inputs = Vec::with_capacity(config.stages.len());
    let mut pre_activation = Vec::with_capacity(config.stages.len());
    let mut map_residual = None;
    let mut map_gate = None;
    let mut map_fused = None;
    let mut mask_out = None;
    let mut mask_degenerate = false;

    let mut current = image.to_feature_map();
    for (i, spec) in config.stages.iter().enumerate() {
        stage_inputs.push(current.clone());
        let pre = conv3x3(&current, &params.stages[i]);
        let activated = relu(&pre);
        pre_activation.push(pre);
        let mut pooled = avg_pool(&activated, spec.height, spec.width);
        if config.map_fusion_stage == Some(i) {
            let views = views.expect("checked above");
            let mask = views
                .mask
                .as_ref()
                .ok_or_else(|| Error::MissingFeature("provider views lack a mask".into()))?;
            if mask.shape() != (1, spec.height, spec.width) {
                return Err(Error::InvalidShape(format!(
                    "mask shape {:?} does not match fusion stage {}x{}",
                    mask.shape(),
                    spec.height,
                    spec.width
                )));
            }
            let projection = params
                .mask_projection
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("missing mask projection params".into()))?;
            let gate = project_mask(mask, projection)?;
            let fused = fuse_map(&gate, &pooled)?;
            map_residual = Some(pooled);
            map_gate = Some(gate);
            map_fused = Some(fused.clone());
            mask_out = Some(mask.clone());
            mask_degenerate = views.mask_degenerate;
            pooled = fused;
        }
        current = pooled;
    }

    let cnn_latent = pool_latent(&current);
    let cnn_logits = params.cnn_head.apply(&cnn_latent);

    let mut provider_latent = None;
    let mut concat_latent = None;
    let mut latent_trace = None;
    let mut embedding = None;
    let mut dropout_scale = None;
    let mut sam_logits = None;

    let logits = if config.latent_fusion {
        let views = views.expect("checked above");
        let latent_in = views
            .latent
            .as_ref()
            .ok_or_else(|| Error::MissingFeature("provider views lack a latent".into()))?;
        let fusion = params
            .latent
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing latent fusion params".into()))?;

        let scale = if mode == Mode::Train && config.dropout_rate > 0.0 {
            let rng = dropout_rng
                .ok_or_else(|| Error::InvalidConfig("train mode requires a dropout rng".into()))?;
            let keep = 1.0 - config.dropout_rate;
            let inv = F::from_f64_lossy(1.0 / keep);
            Some(
                (0..config.fused_embedding_dim())
                    .map(|_| {
                        if rng.gen_range(0.0..1.0) < keep {
                            inv
                        } else {
                            F::zero()
                        }
                    })
                    .collect::<Vec<F>>(),
            )
        } else {
            None
        };

        let (emb, z_sam, trace) = latent_fuse(&cnn_latent, latent_in, fusion, scale.as_deref())?;
        let z = blend_logits(&z_sam, &cnn_logits, config.alpha)?;
        let mut concat = cnn_latent.clone();
        concat.extend_from_slice(latent_in);
        provider_latent = Some(latent_in.clone());
        concat_latent = Some(concat);
        latent_trace = Some(trace);
        embedding = Some(emb);
        dropout_scale = scale;
        sam_logits = Some(z_sam);
        z
    } else {
        cnn_logits.clone()
    };

    Ok(ForwardTrace {
        stage_inputs,
        pre_activation,
        map_residual,
        map_gate,
        map_fused,
        mask: mask_out,
        mask_degenerate,
        cnn_latent,
        provider_latent,
        concat_latent,
        latent: latent_trace,
        embedding,
        dropout_scale,
        cnn_logits,
        sam_logits,
        logits,
    })
}

/// Full forward pass from raw provider features (reduces them first).
pub fn forward<F: Scalar>(
    image: &Image<F>,
    features: Option<&FeatureMap<F>>,
    config: &FusionConfig,
    params: &FusionParams<F>,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace<F>> {
    let views = match (config.fusion_enabled(), features) {
        (true, Some(f)) => Some(prepare_provider_views(f, config)?),
        (true, None) => {
            return Err(Error::MissingFeature(
                "fusion enabled but no provider features supplied".into(),
            ))
        }
        (false, _) => None,
    };
    forward_with_views(image, views.as_ref(), config, params, mode, dropout_rng)
}

#[cfg(test)]
mod tests;
