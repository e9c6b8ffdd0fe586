//! Multi-scale self-similarity fusion.
//!
//! Each scale's `T×T×C` stack (`C = H + 1`, so 5 with four heads) is read
//! as a single-feature volume of depth `C` over the `T×T` plane and
//! convolved with its own cubic kernel (1³, 3³, 5³ for scales 1..3),
//! followed by ReLU. The three results are concatenated, regrouped as `C`
//! features over a depth-3 scale axis, and mixed by a `3×3×3` same-padded
//! convolution. The concatenated inputs are added back as a residual.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{HtrmError, Result};
use crate::init::uniform;
use crate::tensor::Tensor;
use crate::tssm::SimilarityStack;

pub const SCALE_KERNELS: [usize; 3] = [1, 3, 5];
const SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<P = Tensor> {
    /// `[1, 1, k, k, k]` per scale.
    pub scale_kernels: [P; 3],
    /// `[1]` per scale.
    pub scale_biases: [P; 3],
    /// `[C, C, 3, 3, 3]` over (scale, T, T).
    pub reduction: P,
    /// `[C]`
    pub reduction_bias: P,
}

impl FusionParams<Tensor> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let kernel = |k: usize, rng: &mut _| {
            uniform(&[1, 1, k, k, k], 1.0 / ((k * k * k) as f64).sqrt(), rng)
        };
        FusionParams {
            scale_kernels: [
                kernel(SCALE_KERNELS[0], rng),
                kernel(SCALE_KERNELS[1], rng),
                kernel(SCALE_KERNELS[2], rng),
            ],
            scale_biases: [Tensor::zeros(&[1]), Tensor::zeros(&[1]), Tensor::zeros(&[1])],
            reduction: uniform(&[channels, channels, 3, 3, 3], 0.01, rng),
            reduction_bias: Tensor::zeros(&[channels]),
        }
    }

    /// Identity scale kernels and a zero reduction, so only the residual
    /// path reaches the output.
    pub fn residual_only(channels: usize) -> Self {
        let ident = |k: usize| {
            let mut t = Tensor::zeros(&[1, 1, k, k, k]);
            let c = k / 2;
            t.set(&[0, 0, c, c, c], 1.0);
            t
        };
        FusionParams {
            scale_kernels: [ident(1), ident(3), ident(5)],
            scale_biases: [Tensor::zeros(&[1]), Tensor::zeros(&[1]), Tensor::zeros(&[1])],
            reduction: Tensor::zeros(&[channels, channels, 3, 3, 3]),
            reduction_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduction.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> FusionParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

impl<P> FusionParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> FusionParams<Q> {
        FusionParams {
            scale_kernels: [
                f(&self.scale_kernels[0]),
                f(&self.scale_kernels[1]),
                f(&self.scale_kernels[2]),
            ],
            scale_biases: [
                f(&self.scale_biases[0]),
                f(&self.scale_biases[1]),
                f(&self.scale_biases[2]),
            ],
            reduction: f(&self.reduction),
            reduction_bias: f(&self.reduction_bias),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let [k1, k2, k3] = &self.scale_kernels;
        let [b1, b2, b3] = &self.scale_biases;
        vec![
            ("scale1_kernel", k1),
            ("scale2_kernel", k2),
            ("scale3_kernel", k3),
            ("scale1_bias", b1),
            ("scale2_bias", b2),
            ("scale3_bias", b3),
            ("reduction", &self.reduction),
            ("reduction_bias", &self.reduction_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let [k1, k2, k3] = &mut self.scale_kernels;
        let [b1, b2, b3] = &mut self.scale_biases;
        vec![
            ("scale1_kernel", k1),
            ("scale2_kernel", k2),
            ("scale3_kernel", k3),
            ("scale1_bias", b1),
            ("scale2_bias", b2),
            ("scale3_bias", b3),
            ("reduction", &mut self.reduction),
            ("reduction_bias", &mut self.reduction_bias),
        ]
    }
}

/// Three `[C, T, T]` stacks to the fused `[3C, T, T]` tensor.
pub fn fuse(g: &mut Graph, stacks: [Var; 3], p: &FusionParams<Var>) -> Result<Var> {
    let channels = g.shape(p.reduction)[0];
    let shape = g.shape(stacks[0]).to_vec();
    let t = match shape.as_slice() {
        [c, t, t2] if *c == channels && t == t2 => *t,
        s => {
            return Err(HtrmError::usage(format!(
                "fusion expects [{channels}, T, T] stacks, got {s:?}"
            )))
        }
    };
    if stacks.iter().any(|&s| g.shape(s) != shape.as_slice()) {
        return Err(HtrmError::usage("fusion inputs differ in shape"));
    }

    let mut per_scale = Vec::with_capacity(SCALES);
    for i in 0..SCALES {
        let vol = g.reshape(stacks[i], &[1, channels, t, t])?;
        let z = g.conv_same(vol, p.scale_kernels[i], 1)?;
        let z = g.add_bias(z, p.scale_biases[i], 0)?;
        let z = g.relu(z)?;
        per_scale.push(g.reshape(z, &[channels, t, t])?);
    }
    let cat = g.concat(&per_scale, 0)?;
    let grouped = g.reshape(cat, &[SCALES, channels, t, t])?;
    let grouped = g.permute(grouped, &[1, 0, 2, 3])?;
    let reduced = g.conv_same(grouped, p.reduction, 1)?;
    let reduced = g.add_bias(reduced, p.reduction_bias, 0)?;
    let reduced = g.permute(reduced, &[1, 0, 2, 3])?;
    let reduced = g.reshape(reduced, &[SCALES * channels, t, t])?;
    let residual = g.concat(&stacks, 0)?;
    g.add(reduced, residual)
}

/// Value-level fusion of three `T×T×C` stacks into `T×T×3C`.
pub fn multiscale_fuse(
    m1: &SimilarityStack,
    m2: &SimilarityStack,
    m3: &SimilarityStack,
    params: &FusionParams,
) -> Result<SimilarityStack> {
    let mut g = Graph::new();
    let vars = [m1, m2, m3].map(|m| g.constant(m.channels_first().clone()));
    let p = params.map(|t| g.constant(t.clone()));
    let out = fuse(&mut g, vars, &p)?;
    SimilarityStack::from_channels_first(g.value(out).clone())
}
