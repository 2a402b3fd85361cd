//! Learnable parameters of the fusion classifier, addressable by name for
//! optimizer updates, checkpointing, and finite-difference checks.

use rand::Rng;

use crate::net::FusionConfig;
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::Scalar;

/// Dense affine map; `weight` is row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![F::zero(); in_dim * out_dim],
            bias: vec![F::zero(); out_dim],
        }
    }

    pub fn apply(&self, input: &[F]) -> Vec<F> {
        debug_assert_eq!(input.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = F::zero();
            for (w, x) in row.iter().zip(input) {
                acc += *w * *x;
            }
            *slot += acc;
        }
        out
    }

    /// Accumulate grads for `output_grad` at `input`, returning the input grad.
    pub fn backward(
        &self,
        input: &[F],
        output_grad: &[F],
        weight_grad: &mut [F],
        bias_grad: &mut [F],
    ) -> Vec<F> {
        let mut input_grad = vec![F::zero(); self.in_dim];
        for (o, &g) in output_grad.iter().enumerate() {
            bias_grad[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut weight_grad[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * input[i];
                input_grad[i] += row[i] * g;
            }
        }
        input_grad
    }
}

/// One backbone stage: 3×3 convolution (stride 1, zero padding 1).
/// `weight` is `[out][in][3][3]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> ConvStage<F> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![F::zero(); out_channels * in_channels * 9],
            bias: vec![F::zero(); out_channels],
        }
    }
}

/// The 1×1 convolution on a single-channel mask degenerates to a per-output-
/// channel affine map: out[c] = scale[c]·mask + shift[c].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProjection<F> {
    pub scale: Vec<F>,
    pub shift: Vec<F>,
}

impl<F: Scalar> MaskProjection<F> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            scale: vec![F::zero(); channels],
            shift: vec![F::zero(); channels],
        }
    }
}

/// Latent fusion parameters: per-source token projections, single-head
/// attention projections (square, bias-free), and the classifier head on the
/// concatenated attended tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFusion<F> {
    pub token_dim: usize,
    pub token_cnn: Linear<F>,
    pub token_sam: Linear<F>,
    pub query: Vec<F>,
    pub key: Vec<F>,
    pub value: Vec<F>,
    pub classifier: Linear<F>,
}

impl<F: Scalar> LatentFusion<F> {
    pub fn zeros(cnn_dim: usize, sam_dim: usize, token_dim: usize, num_classes: usize) -> Self {
        Self {
            token_dim,
            token_cnn: Linear::zeros(cnn_dim, token_dim),
            token_sam: Linear::zeros(sam_dim, token_dim),
            query: vec![F::zero(); token_dim * token_dim],
            key: vec![F::zero(); token_dim * token_dim],
            value: vec![F::zero(); token_dim * token_dim],
            classifier: Linear::zeros(2 * token_dim, num_classes),
        }
    }
}

/// All learnable parameters, mirroring the enabled paths of a `FusionConfig`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<F> {
    pub stages: Vec<ConvStage<F>>,
    pub mask_projection: Option<MaskProjection<F>>,
    pub cnn_head: Linear<F>,
    pub latent: Option<LatentFusion<F>>,
}

impl<F: Scalar> FusionParams<F> {
    /// Zero-valued parameters with the shapes the config dictates.
    pub fn zeros(config: &FusionConfig) -> Self {
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_ch = config.input_channels;
        for stage in &config.stages {
            stages.push(ConvStage::zeros(in_ch, stage.channels));
            in_ch = stage.channels;
        }
        let mask_projection = config
            .map_fusion_stage
            .map(|s| MaskProjection::zeros(config.stages[s].channels));
        let latent = config.latent_fusion.then(|| {
            LatentFusion::zeros(
                config.cnn_latent_dim,
                config.provider_latent_dim,
                config.token_dim,
                config.num_classes,
            )
        });
        Self {
            stages,
            mask_projection,
            cnn_head: Linear::zeros(config.cnn_latent_dim, config.num_classes),
            latent,
        }
    }

    /// Fan-in uniform initialization for every weight array; biases start at
    /// zero. Each array draws from its own seed stream derived from its name,
    /// so enabling one path never changes another path's initial values.
    pub fn init(config: &FusionConfig, seed: u64) -> Self {
        let mut params = Self::zeros(config);
        for (name, array, fan_in) in params.weight_arrays_mut() {
            let mut rng = seeded_rng(derive_seed(seed, &format!("init.{name}")));
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in array.iter_mut() {
                *v = F::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        params
    }

    /// Weight arrays with their fan-in (bias arrays stay zero at init).
    fn weight_arrays_mut(&mut self) -> Vec<(String, &mut Vec<F>, usize)> {
        let mut out: Vec<(String, &mut Vec<F>, usize)> = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((
                format!("stage{i}.weight"),
                &mut stage.weight,
                stage.in_channels * 9,
            ));
        }
        if let Some(mp) = &mut self.mask_projection {
            out.push(("mask_proj.scale".into(), &mut mp.scale, 1));
        }
        out.push((
            "cnn_head.weight".into(),
            &mut self.cnn_head.weight,
            self.cnn_head.in_dim,
        ));
        if let Some(latent) = &mut self.latent {
            let d = latent.token_dim;
            out.push((
                "latent.token_cnn.weight".into(),
                &mut latent.token_cnn.weight,
                latent.token_cnn.in_dim,
            ));
            out.push((
                "latent.token_sam.weight".into(),
                &mut latent.token_sam.weight,
                latent.token_sam.in_dim,
            ));
            out.push(("latent.query".into(), &mut latent.query, d));
            out.push(("latent.key".into(), &mut latent.key, d));
            out.push(("latent.value".into(), &mut latent.value, d));
            out.push((
                "latent.classifier.weight".into(),
                &mut latent.classifier.weight,
                latent.classifier.in_dim,
            ));
        }
        out
    }

    /// Every parameter array with its stable name, in a fixed order.
    pub fn arrays(&self) -> Vec<(String, &Vec<F>)> {
        let mut out: Vec<(String, &Vec<F>)> = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &stage.weight));
            out.push((format!("stage{i}.bias"), &stage.bias));
        }
        if let Some(mp) = &self.mask_projection {
            out.push(("mask_proj.scale".into(), &mp.scale));
            out.push(("mask_proj.shift".into(), &mp.shift));
        }
        out.push(("cnn_head.weight".into(), &self.cnn_head.weight));
        out.push(("cnn_head.bias".into(), &self.cnn_head.bias));
        if let Some(latent) = &self.latent {
            out.push(("latent.token_cnn.weight".into(), &latent.token_cnn.weight));
            out.push(("latent.token_cnn.bias".into(), &latent.token_cnn.bias));
            out.push(("latent.token_sam.weight".into(), &latent.token_sam.weight));
            out.push(("latent.token_sam.bias".into(), &latent.token_sam.bias));
            out.push(("latent.query".into(), &latent.query));
            out.push(("latent.key".into(), &latent.key));
            out.push(("latent.value".into(), &latent.value));
            out.push((
                "latent.classifier.weight".into(),
                &latent.classifier.weight,
            ));
            out.push(("latent.classifier.bias".into(), &latent.classifier.bias));
        }
        out
    }

    /// Mutable variant of [`FusionParams::arrays`], same names and order.
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        let mut out: Vec<(String, &mut Vec<F>)> = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{i}.weight"), &mut stage.weight));
            out.push((format!("stage{i}.bias"), &mut stage.bias));
        }
        if let Some(mp) = &mut self.mask_projection {
            out.push(("mask_proj.scale".into(), &mut mp.scale));
            out.push(("mask_proj.shift".into(), &mut mp.shift));
        }
        out.push(("cnn_head.weight".into(), &mut self.cnn_head.weight));
        out.push(("cnn_head.bias".into(), &mut self.cnn_head.bias));
        if let Some(latent) = &mut self.latent {
            out.push((
                "latent.token_cnn.weight".into(),
                &mut latent.token_cnn.weight,
            ));
            out.push(("latent.token_cnn.bias".into(), &mut latent.token_cnn.bias));
            out.push((
                "latent.token_sam.weight".into(),
                &mut latent.token_sam.weight,
            ));
            out.push(("latent.token_sam.bias".into(), &mut latent.token_sam.bias));
            out.push(("latent.query".into(), &mut latent.query));
            out.push(("latent.key".into(), &mut latent.key));
            out.push(("latent.value".into(), &mut latent.value));
            out.push((
                "latent.classifier.weight".into(),
                &mut latent.classifier.weight,
            ));
            out.push((
                "latent.classifier.bias".into(),
                &mut latent.classifier.bias,
            ));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Narrow to the on-disk precision.
    pub fn to_f32(&self) -> FusionParams<f32> {
        self.map(|v| v.to_f64_lossy() as f32)
    }

    /// Widen from on-disk precision (exact).
    pub fn from_f32(other: &FusionParams<f32>) -> Self {
        other.map(|v| F::from_f64_lossy(f64::from(v)))
    }

    fn map<G: Scalar>(&self, f: impl Fn(F) -> G + Copy) -> FusionParams<G> {
        let conv = |v: &Vec<F>| -> Vec<G> { v.iter().map(|x| f(*x)).collect() };
        FusionParams {
            stages: self
                .stages
                .iter()
                .map(|s| ConvStage {
                    in_channels: s.in_channels,
                    out_channels: s.out_channels,
                    weight: conv(&s.weight),
                    bias: conv(&s.bias),
                })
                .collect(),
            mask_projection: self.mask_projection.as_ref().map(|m| MaskProjection {
                scale: conv(&m.scale),
                shift: conv(&m.shift),
            }),
            cnn_head: Linear {
                in_dim: self.cnn_head.in_dim,
                out_dim: self.cnn_head.out_dim,
                weight: conv(&self.cnn_head.weight),
                bias: conv(&self.cnn_head.bias),
            },
            latent: self.latent.as_ref().map(|l| LatentFusion {
                token_dim: l.token_dim,
                token_cnn: Linear {
                    in_dim: l.token_cnn.in_dim,
                    out_dim: l.token_cnn.out_dim,
                    weight: conv(&l.token_cnn.weight),
                    bias: conv(&l.token_cnn.bias),
                },
                token_sam: Linear {
                    in_dim: l.token_sam.in_dim,
                    out_dim: l.token_sam.out_dim,
                    weight: conv(&l.token_sam.weight),
                    bias: conv(&l.token_sam.bias),
                },
                query: conv(&l.query),
                key: conv(&l.key),
                value: conv(&l.value),
                classifier: Linear {
                    in_dim: l.classifier.in_dim,
                    out_dim: l.classifier.out_dim,
                    weight: conv(&l.classifier.weight),
                    bias: conv(&l.classifier.bias),
                },
            }),
        }
    }
}
