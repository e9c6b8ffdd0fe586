//! Bi-modal temporal self-similarity: multi-head self-attention maps,
//! multi-head dual-softmax maps, their sum, and random matrix dropping.
//!
//! Stacks are held channel-first (`C×T×T`) on the tape; [`SimilarityStack`]
//! exposes them with `(i, j, c)` indexing.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{HtrmError, Result};
use crate::features::FeatureSequence;
use crate::init::uniform;
use crate::tensor::Tensor;

/// Query/key projections for all heads plus the head-mixing matrix.
///
/// `query` and `key` are `d×d`; head `h` owns columns `h·d/H .. (h+1)·d/H`.
/// `mix` is `H×H` and recombines the per-head maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<P = Tensor> {
    pub query: P,
    pub key: P,
    pub mix: P,
}

impl ProjectionHeads<Tensor> {
    /// Query and key start equal, so every head's initial logits form a
    /// Gram matrix that peaks where frames coincide.
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        let query = uniform(&[dim, dim], 1.0 / (dim as f64).sqrt(), rng);
        Ok(ProjectionHeads {
            key: query.clone(),
            query,
            mix: Tensor::eye(heads),
        })
    }

    pub fn heads(&self) -> usize {
        self.mix.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> ProjectionHeads<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

impl<P> ProjectionHeads<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ProjectionHeads<Q> {
        ProjectionHeads {
            query: f(&self.query),
            key: f(&self.key),
            mix: f(&self.mix),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &P)> {
        vec![("query", &self.query), ("key", &self.key), ("mix", &self.mix)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        vec![
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("mix", &mut self.mix),
        ]
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(HtrmError::usage(format!(
            "feature dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// A `T×T×C` similarity tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack {
    // Channel-first storage: [C, T, T].
    values: Tensor,
}

impl SimilarityStack {
    /// Wraps a channel-first `[C, T, T]` tensor.
    pub fn from_channels_first(values: Tensor) -> Result<Self> {
        match values.shape() {
            [_, t1, t2] if t1 == t2 => Ok(SimilarityStack { values }),
            s => Err(HtrmError::usage(format!(
                "similarity stack must be [C, T, T] channel-first, got {s:?}"
            ))),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// `[T, T, C]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.frames(), self.frames(), self.channels()]
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values.get(&[c, i, j])
    }

    /// One `T×T` channel.
    pub fn channel(&self, c: usize) -> Tensor {
        let t = self.frames();
        let data = self.values.data()[c * t * t..(c + 1) * t * t].to_vec();
        Tensor::from_parts(vec![t, t], data)
    }

    /// Mean over channels, `T×T`.
    pub fn channel_mean(&self) -> Tensor {
        let (t, c) = (self.frames(), self.channels());
        let mut out = vec![0.0; t * t];
        for ch in self.values.data().chunks(t * t) {
            for (o, v) in out.iter_mut().zip(ch) {
                *o += v / c as f64;
            }
        }
        Tensor::from_parts(vec![t, t], out)
    }

    pub fn channels_first(&self) -> &Tensor {
        &self.values
    }
}

/// Splits `[T, d]` into `[H, T, d/H]`.
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let (t, d) = match g.shape(x) {
        [t, d] => (*t, *d),
        s => return Err(HtrmError::usage(format!("expected [T, d], got {s:?}"))),
    };
    check_heads(d, heads)?;
    let r = g.reshape(x, &[t, heads, d / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// Raw per-head correlation `Q_h K_hᵀ`, shape `[H, T, T]`.
pub fn head_logits(g: &mut Graph, v: Var, p: &ProjectionHeads<Var>) -> Result<Var> {
    let heads = g.shape(p.mix)[0];
    let d = g.shape(v)[1];
    if g.shape(p.query) != [d, d] || g.shape(p.key) != [d, d] || g.shape(p.mix) != [heads, heads] {
        return Err(HtrmError::usage(format!(
            "projection shapes {:?}/{:?}/{:?} do not fit feature dim {d}",
            g.shape(p.query),
            g.shape(p.key),
            g.shape(p.mix)
        )));
    }
    check_heads(d, heads)?;
    let q = g.matmul(v, p.query)?;
    let k = g.matmul(v, p.key)?;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let kt = g.transpose(kh)?;
    g.matmul(qh, kt)
}

/// Per-head row-softmax of `Q_h K_hᵀ / √d`, before channel mixing.
pub fn self_attention_heads(g: &mut Graph, v: Var, p: &ProjectionHeads<Var>) -> Result<Var> {
    let d = g.shape(v)[1];
    let logits = head_logits(g, v, p)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    g.softmax(scaled, 2)
}

/// Per-head `colsoftmax(Q_h K_hᵀ) ⊙ rowsoftmax(Q_h K_hᵀ)`, before mixing.
pub fn dual_softmax_heads(g: &mut Graph, v: Var, p: &ProjectionHeads<Var>) -> Result<Var> {
    let logits = head_logits(g, v, p)?;
    let rows = g.softmax(logits, 2)?;
    let cols = g.softmax(logits, 1)?;
    g.mul(cols, rows)
}

/// `out[c] = Σ_h mix[c, h] · stack[h]` over `[H, T, T]`.
pub fn mix_channels(g: &mut Graph, stack: Var, mix: Var) -> Result<Var> {
    let (h, t) = match g.shape(stack) {
        [h, t, t2] if t == t2 => (*h, *t),
        s => return Err(HtrmError::usage(format!("expected [H, T, T], got {s:?}"))),
    };
    let flat = g.reshape(stack, &[h, t * t])?;
    let mixed = g.matmul(mix, flat)?;
    g.reshape(mixed, &[h, t, t])
}

pub fn self_attention_stack(g: &mut Graph, v: Var, p: &ProjectionHeads<Var>) -> Result<Var> {
    let heads = self_attention_heads(g, v, p)?;
    mix_channels(g, heads, p.mix)
}

pub fn dual_softmax_stack(g: &mut Graph, v: Var, p: &ProjectionHeads<Var>) -> Result<Var> {
    let heads = dual_softmax_heads(g, v, p)?;
    mix_channels(g, heads, p.mix)
}

/// Elementwise sum of the two modalities.
pub fn joint_stack(g: &mut Graph, sa: Var, ds: Var) -> Result<Var> {
    g.add(sa, ds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmdPolicy {
    pub p: f64,
    pub training: bool,
}

impl RmdPolicy {
    pub fn new(p: f64, training: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(HtrmError::usage(format!("drop probability {p} outside [0, 1]")));
        }
        Ok(RmdPolicy { p, training })
    }

    pub fn inference() -> Self {
        RmdPolicy {
            p: 0.0,
            training: false,
        }
    }

    /// Which channel (if any) to zero for one stack of `channels` channels.
    pub fn draw(&self, channels: usize, rng: &mut impl Rng) -> Option<usize> {
        if !self.training || channels == 0 || self.p <= 0.0 {
            return None;
        }
        if rng.random::<f64>() < self.p {
            Some(rng.random_range(0..channels))
        } else {
            None
        }
    }
}

/// Zeroes at most one whole channel of a `[C, T, T]` stack during training.
///
/// Surviving channels are passed through unscaled; the gradient into the
/// dropped channel is zero. Returns the dropped channel index.
pub fn random_matrix_drop(
    g: &mut Graph,
    stack: Var,
    policy: &RmdPolicy,
    rng: &mut impl Rng,
) -> Result<(Var, Option<usize>)> {
    let shape = g.shape(stack).to_vec();
    let Some(c) = policy.draw(shape[0], rng) else {
        return Ok((stack, None));
    };
    let mut mask = Tensor::full(&shape, 1.0);
    let plane: usize = shape[1..].iter().product();
    mask.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
    let m = g.constant(mask);
    Ok((g.mul(stack, m)?, Some(c)))
}

fn evaluate(
    v: &FeatureSequence,
    heads: &ProjectionHeads,
    build: fn(&mut Graph, Var, &ProjectionHeads<Var>) -> Result<Var>,
) -> Result<SimilarityStack> {
    let mut g = Graph::new();
    let x = g.constant(v.values().clone());
    let p = heads.map(|t| g.constant(t.clone()));
    let out = build(&mut g, x, &p)?;
    SimilarityStack::from_channels_first(g.value(out).clone())
}

/// Mixed self-attention similarity stack `T×T×H`.
pub fn self_attention_tssm(v: &FeatureSequence, heads: &ProjectionHeads) -> Result<SimilarityStack> {
    evaluate(v, heads, self_attention_stack)
}

/// Mixed dual-softmax similarity stack `T×T×H`.
pub fn dual_softmax_tssm(v: &FeatureSequence, heads: &ProjectionHeads) -> Result<SimilarityStack> {
    evaluate(v, heads, dual_softmax_stack)
}

pub fn joint(sa: &SimilarityStack, ds: &SimilarityStack) -> Result<SimilarityStack> {
    if sa.values.shape() != ds.values.shape() {
        return Err(HtrmError::usage(format!(
            "joint: stacks {:?} and {:?} differ",
            sa.shape(),
            ds.shape()
        )));
    }
    let data = sa
        .values
        .data()
        .iter()
        .zip(ds.values.data())
        .map(|(a, b)| a + b)
        .collect();
    SimilarityStack::from_channels_first(Tensor::from_parts(sa.values.shape().to_vec(), data))
}

/// Value-level random matrix dropping; see [`random_matrix_drop`].
pub fn drop_matrix(
    m: &SimilarityStack,
    policy: &RmdPolicy,
    rng: &mut impl Rng,
) -> (SimilarityStack, Option<usize>) {
    match policy.draw(m.channels(), rng) {
        None => (m.clone(), None),
        Some(c) => {
            let mut values = m.values.clone();
            let plane = m.frames() * m.frames();
            values.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
            (SimilarityStack { values }, Some(c))
        }
    }
}
