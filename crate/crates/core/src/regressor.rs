//! Density-map regression: the transformer decoder over fused similarity
//! rows, the per-frame MLP head, the training loss, and the full forward
//! pass that ties every stage together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::context::{context_channel, inject_context_var, ContextParams};
use crate::error::{HtrmError, Result, StageExt};
use crate::features::{build_scales_with, sample_or_pad, FeatureSequence, ScaleSet, DEFAULT_WINDOWS};
use crate::fusion::{fuse, FusionParams};
use crate::init::uniform;
use crate::metrics::DensityMap;
use crate::tensor::Tensor;
use crate::tssm::{
    check_heads, dual_softmax_stack, joint_stack, random_matrix_drop, self_attention_stack,
    split_heads, ProjectionHeads, RmdPolicy, SimilarityStack,
};

/// Attention heads inside the decoder layer.
pub const ENCODER_HEADS: usize = 4;

/// Architecture hyper-parameters. Everything a checkpoint needs to rebuild
/// the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub dim: usize,
    pub heads: usize,
    pub half_window: usize,
    pub drop_prob: f64,
    pub windows: [usize; 3],
    pub positional: bool,
    pub self_attention: bool,
    pub dual_softmax: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 64,
            dim: 512,
            heads: 4,
            half_window: 2,
            drop_prob: 0.3,
            windows: DEFAULT_WINDOWS,
            positional: true,
            self_attention: true,
            dual_softmax: true,
        }
    }
}

impl ModelConfig {
    /// Channels per scale stack: one per head plus the context channel.
    pub fn stack_channels(&self) -> usize {
        self.heads + 1
    }

    /// Channels of the fused tensor.
    pub fn fused_channels(&self) -> usize {
        3 * self.stack_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim == 0 {
            return Err(HtrmError::usage("frames and dim must be positive"));
        }
        check_heads(self.dim, self.heads)?;
        if !self.dim.is_multiple_of(ENCODER_HEADS) {
            return Err(HtrmError::usage(format!(
                "feature dim {} is not divisible by the {ENCODER_HEADS} decoder heads",
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(HtrmError::usage(format!(
                "drop probability {} outside [0, 1]",
                self.drop_prob
            )));
        }
        if self.windows.contains(&0) {
            return Err(HtrmError::usage("scale windows must be positive"));
        }
        if !self.self_attention && !self.dual_softmax {
            return Err(HtrmError::usage(
                "at least one of the self-attention and dual-softmax branches must be enabled",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<P = Tensor> {
    /// `[T·3C, d]`
    pub input_proj: P,
    pub input_bias: P,
    /// `[T, d]` learned position embeddings.
    pub position: P,
    pub query: P,
    pub query_bias: P,
    pub key: P,
    pub key_bias: P,
    pub value: P,
    pub value_bias: P,
    pub output: P,
    pub output_bias: P,
    pub norm1_gamma: P,
    pub norm1_beta: P,
    /// `[d, 2d]`
    pub ff1: P,
    pub ff1_bias: P,
    /// `[2d, d]`
    pub ff2: P,
    pub ff2_bias: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
}

fn linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (uniform(&[fan_in, fan_out], bound, rng), Tensor::zeros(&[fan_out]))
}

impl EncoderLayerParams<Tensor> {
    pub fn init(frames: usize, fused_channels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let (input_proj, input_bias) = linear(frames * fused_channels, dim, rng);
        let position = uniform(&[frames, dim], 0.1, rng);
        let (query, query_bias) = linear(dim, dim, rng);
        let (key, key_bias) = linear(dim, dim, rng);
        let (value, value_bias) = linear(dim, dim, rng);
        let (output, output_bias) = linear(dim, dim, rng);
        let (ff1, ff1_bias) = linear(dim, 2 * dim, rng);
        let (ff2, ff2_bias) = linear(2 * dim, dim, rng);
        EncoderLayerParams {
            input_proj,
            input_bias,
            position,
            query,
            query_bias,
            key,
            key_bias,
            value,
            value_bias,
            output,
            output_bias,
            norm1_gamma: Tensor::full(&[dim], 1.0),
            norm1_beta: Tensor::zeros(&[dim]),
            ff1,
            ff1_bias,
            ff2,
            ff2_bias,
            norm2_gamma: Tensor::full(&[dim], 1.0),
            norm2_beta: Tensor::zeros(&[dim]),
        }
    }
}

macro_rules! param_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<P> $ty<P> {
            pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> $ty<Q> {
                $ty { $($field: f(&self.$field)),* }
            }

            pub fn named(&self) -> Vec<(&'static str, &P)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }
        }
    };
}

param_fields!(EncoderLayerParams {
    input_proj, input_bias, position, query, query_bias, key, key_bias, value, value_bias,
    output, output_bias, norm1_gamma, norm1_beta, ff1, ff1_bias, ff2, ff2_bias, norm2_gamma,
    norm2_beta,
});

/// Two fully connected layers with a ReLU between them, `d → d → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityHeadParams<P = Tensor> {
    pub hidden: P,
    pub hidden_bias: P,
    pub out: P,
    pub out_bias: P,
}

impl DensityHeadParams<Tensor> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let (hidden, hidden_bias) = linear(dim, dim, rng);
        let (out, out_bias) = linear(dim, 1, rng);
        DensityHeadParams {
            hidden,
            hidden_bias,
            out,
            out_bias,
        }
    }
}

param_fields!(DensityHeadParams { hidden, hidden_bias, out, out_bias });

/// Every learned tensor of the model.
///
/// TSSM projections and context filters are shared by the three scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub self_attention: ProjectionHeads<P>,
    pub dual_softmax: ProjectionHeads<P>,
    pub context: ContextParams<P>,
    pub fusion: FusionParams<P>,
    pub encoder: EncoderLayerParams<P>,
    pub head: DensityHeadParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            self_attention: self.self_attention.map(&mut f),
            dual_softmax: self.dual_softmax.map(&mut f),
            context: self.context.map(&mut f),
            fusion: self.fusion.map(&mut f),
            encoder: self.encoder.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    /// Flat `(module.field, value)` list in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        fn prefixed<'a, P>(prefix: &str, items: Vec<(&'static str, &'a P)>) -> Vec<(String, &'a P)> {
            items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
        }
        let mut out = prefixed("self_attention", self.self_attention.named());
        out.extend(prefixed("dual_softmax", self.dual_softmax.named()));
        out.extend(prefixed("context", self.context.named()));
        out.extend(prefixed("fusion", self.fusion.named()));
        out.extend(prefixed("encoder", self.encoder.named()));
        out.extend(prefixed("head", self.head.named()));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        fn prefixed<'a, P>(
            prefix: &str,
            items: Vec<(&'static str, &'a mut P)>,
        ) -> Vec<(String, &'a mut P)> {
            items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
        }
        let mut out = prefixed("self_attention", self.self_attention.named_mut());
        out.extend(prefixed("dual_softmax", self.dual_softmax.named_mut()));
        out.extend(prefixed("context", self.context.named_mut()));
        out.extend(prefixed("fusion", self.fusion.named_mut()));
        out.extend(prefixed("encoder", self.encoder.named_mut()));
        out.extend(prefixed("head", self.head.named_mut()));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (t, d) = (config.frames, config.dim);
        Ok(ModelParams {
            self_attention: ProjectionHeads::init(d, config.heads, rng)?,
            dual_softmax: ProjectionHeads::init(d, config.heads, rng)?,
            context: ContextParams::init(d, t, config.half_window, rng),
            fusion: FusionParams::init(config.stack_channels(), rng),
            encoder: EncoderLayerParams::init(t, config.fused_channels(), d, rng),
            head: DensityHeadParams::init(d, rng),
        })
    }

    /// Expected shape of every parameter under `config`, in `named` order.
    pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(config, &mut rng)?;
        Ok(p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect())
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Per-scale `[C, T, T]` stacks.
    pub stacks: [Var; 3],
    /// `[3C, T, T]`
    pub fused: Var,
    /// `[T, d]`
    pub decoded: Var,
    /// `[T]`
    pub density: Var,
    pub dropped: [Option<usize>; 3],
}

/// Value-level copy of [`ForwardNodes`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stacks: [SimilarityStack; 3],
    pub fused: SimilarityStack,
    pub decoded: Tensor,
    pub density: DensityMap,
}

/// Flattens each row of `[3C, T, T]` to `T·3C` values and runs the encoder
/// layer, returning `[T, d]`.
pub fn decode_var(
    g: &mut Graph,
    fused: Var,
    p: &EncoderLayerParams<Var>,
    positional: bool,
) -> Result<Var> {
    let (c, t) = match g.shape(fused) {
        [c, t, t2] if t == t2 => (*c, *t),
        s => return Err(HtrmError::usage(format!("decoder expects [3C, T, T], got {s:?}"))),
    };
    if g.shape(p.input_proj)[0] != t * c {
        return Err(HtrmError::usage(format!(
            "input projection {:?} does not accept rows of {} values",
            g.shape(p.input_proj),
            t * c
        )));
    }
    let rows = g.permute(fused, &[1, 2, 0])?;
    let rows = g.reshape(rows, &[t, t * c])?;
    let x = g.matmul(rows, p.input_proj)?;
    let mut x = g.add_bias(x, p.input_bias, 1)?;
    if positional {
        x = g.add(x, p.position)?;
    }
    let (x1, _) = encoder_layer(g, x, p)?;
    Ok(x1)
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

/// Post-norm transformer encoder layer. Also returns the first layer-norm
/// node for inspection.
pub fn encoder_layer(g: &mut Graph, x: Var, p: &EncoderLayerParams<Var>) -> Result<(Var, Var)> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let dh = d / ENCODER_HEADS;
    let q = dense(g, x, p.query, p.query_bias)?;
    let k = dense(g, x, p.key, p.key_bias)?;
    let v = dense(g, x, p.value, p.value_bias)?;
    let (qh, kh, vh) = (
        split_heads(g, q, ENCODER_HEADS)?,
        split_heads(g, k, ENCODER_HEADS)?,
        split_heads(g, v, ENCODER_HEADS)?,
    );
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, vh)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[t, d])?;
    let attn_out = dense(g, ctx, p.output, p.output_bias)?;
    let res1 = g.add(x, attn_out)?;
    let norm1 = g.layer_norm(res1, p.norm1_gamma, p.norm1_beta)?;
    let h = dense(g, norm1, p.ff1, p.ff1_bias)?;
    let h = g.relu(h)?;
    let ff = dense(g, h, p.ff2, p.ff2_bias)?;
    let res2 = g.add(norm1, ff)?;
    let out = g.layer_norm(res2, p.norm2_gamma, p.norm2_beta)?;
    Ok((out, norm1))
}

/// Per-token MLP, `[T, d]` to `[T]`.
pub fn density_head(g: &mut Graph, o: Var, p: &DensityHeadParams<Var>) -> Result<Var> {
    let t = g.shape(o)[0];
    let h = dense(g, o, p.hidden, p.hidden_bias)?;
    let h = g.relu(h)?;
    let y = dense(g, h, p.out, p.out_bias)?;
    g.reshape(y, &[t])
}

/// `‖pred − truth‖²` for one sample.
pub fn squared_error(g: &mut Graph, pred: Var, truth: &DensityMap) -> Result<Var> {
    if g.shape(pred) != [truth.len()] {
        return Err(HtrmError::usage(format!(
            "prediction {:?} vs ground truth of length {}",
            g.shape(pred),
            truth.len()
        )));
    }
    let t = g.constant(Tensor::from_parts(vec![truth.len()], truth.values.clone()));
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// The full pipeline on the tape.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    scales: &ScaleSet,
    p: &ModelParams<Var>,
    rmd: &RmdPolicy,
    rng: &mut impl Rng,
) -> Result<ForwardNodes> {
    if scales.frames() != config.frames || scales.dim() != config.dim {
        return Err(HtrmError::usage(format!(
            "input is {}×{} but the model expects {}×{}",
            scales.frames(),
            scales.dim(),
            config.frames,
            config.dim
        )));
    }
    let mut stacks = Vec::with_capacity(3);
    let mut dropped = [None; 3];
    for (i, seq) in scales.scales.iter().enumerate() {
        let v = g.constant(seq.values().clone());
        let joint = {
            let sa = config
                .self_attention
                .then(|| self_attention_stack(g, v, &p.self_attention))
                .transpose()
                .stage("self-attention similarity")?;
            let ds = config
                .dual_softmax
                .then(|| dual_softmax_stack(g, v, &p.dual_softmax))
                .transpose()
                .stage("dual-softmax similarity")?;
            match (sa, ds) {
                (Some(a), Some(b)) => joint_stack(g, a, b).stage("joint similarity")?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("validated config"),
            }
        };
        let (kept, which) = random_matrix_drop(g, joint, rmd, rng).stage("matrix dropping")?;
        dropped[i] = which;
        let ctx = context_channel(g, v, &p.context).stage("local temporal context")?;
        stacks.push(inject_context_var(g, kept, ctx).stage("context injection")?);
    }
    let stacks = [stacks[0], stacks[1], stacks[2]];
    let fused = fuse(g, stacks, &p.fusion).stage("multi-scale fusion")?;
    let decoded = decode_var(g, fused, &p.encoder, config.positional).stage("decoder")?;
    let density = density_head(g, decoded, &p.head).stage("density head")?;
    Ok(ForwardNodes {
        stacks,
        fused,
        decoded,
        density,
        dropped,
    })
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    /// Samples or pads raw features to `T` frames and builds the scales.
    pub fn prepare(&self, raw: &FeatureSequence) -> Result<ScaleSet> {
        if raw.dim() != self.config.dim {
            return Err(HtrmError::usage(format!(
                "features have dim {} but the model expects {}",
                raw.dim(),
                self.config.dim
            )));
        }
        let v = sample_or_pad(raw, self.config.frames)?;
        build_scales_with(&v, self.config.windows)
    }

    /// Forward pass; deterministic whenever `rmd.training` is false.
    pub fn forward_full(
        &self,
        scales: &ScaleSet,
        rmd: &RmdPolicy,
        rng: &mut impl Rng,
    ) -> Result<DensityMap> {
        Ok(self.trace(scales, rmd, rng)?.density)
    }

    /// Inference on prepared scales.
    pub fn predict_scales(&self, scales: &ScaleSet) -> Result<DensityMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_full(scales, &RmdPolicy::inference(), &mut rng)
    }

    /// Inference on raw features.
    pub fn predict(&self, raw: &FeatureSequence) -> Result<DensityMap> {
        self.predict_scales(&self.prepare(raw)?)
    }

    pub fn trace(
        &self,
        scales: &ScaleSet,
        rmd: &RmdPolicy,
        rng: &mut impl Rng,
    ) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let p = self.params.map(|t| g.constant(t.clone()));
        let nodes = forward_graph(&mut g, &self.config, scales, &p, rmd, rng)?;
        let stack = |v: Var| SimilarityStack::from_channels_first(g.value(v).clone());
        Ok(ForwardTrace {
            stacks: [stack(nodes.stacks[0])?, stack(nodes.stacks[1])?, stack(nodes.stacks[2])?],
            fused: stack(nodes.fused)?,
            decoded: g.value(nodes.decoded).clone(),
            density: DensityMap::new(g.value(nodes.density).data().to_vec()),
        })
    }
}

/// Value-level decoder.
pub fn decode(z: &SimilarityStack, params: &EncoderLayerParams, positional: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.channels_first().clone());
    let p = params.map(|t| g.constant(t.clone()));
    let out = decode_var(&mut g, zv, &p, positional)?;
    Ok(g.value(out).clone())
}

/// Value-level density head.
pub fn predict_density(o: &Tensor, params: &DensityHeadParams) -> Result<DensityMap> {
    let d = params.hidden.shape()[0];
    if o.rank() != 2 || o.shape()[1] != d {
        return Err(HtrmError::usage(format!(
            "density head expects [T, {d}], got {:?}",
            o.shape()
        )));
    }
    let mut g = Graph::new();
    let ov = g.constant(o.clone());
    let p = params.map(|t| g.constant(t.clone()));
    let out = density_head(&mut g, ov, &p)?;
    Ok(DensityMap::new(g.value(out).data().to_vec()))
}

/// `(1/N) Σ_i ‖D_i − D̂_i‖²`.
pub fn mse_loss(pred: &[DensityMap], truth: &[DensityMap]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(HtrmError::usage(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(HtrmError::usage(format!(
                "density lengths differ: {} vs {}",
                p.len(),
                t.len()
            )));
        }
        total += p
            .values
            .iter()
            .zip(&t.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}
