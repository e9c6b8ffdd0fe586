//! Local temporal context: a depthwise temporal convolution followed by a
//! pointwise projection from `d` features to `T` values per frame, appended
//! to the similarity stack as one extra `T×T` channel.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{HtrmError, Result};
use crate::features::FeatureSequence;
use crate::init::uniform;
use crate::tensor::Tensor;
use crate::tssm::SimilarityStack;

#[derive(Clone, Debug, PartialEq)]
pub struct ContextParams<P = Tensor> {
    /// `[d, 1, 2ΔK+1]`, one temporal filter per feature channel.
    pub depthwise: P,
    /// `[d]`
    pub depthwise_bias: P,
    /// `[d, T]`
    pub pointwise: P,
    /// `[T]`
    pub pointwise_bias: P,
}

impl ContextParams<Tensor> {
    /// Averaging depthwise filters with small noise, uniform pointwise
    /// weights, zero biases.
    pub fn init(dim: usize, frames: usize, half_window: usize, rng: &mut impl Rng) -> Self {
        let k = 2 * half_window + 1;
        let mut depthwise = uniform(&[dim, 1, k], 0.01, rng);
        depthwise.data_mut().iter_mut().for_each(|w| *w += 1.0 / k as f64);
        ContextParams {
            depthwise,
            depthwise_bias: Tensor::zeros(&[dim]),
            pointwise: uniform(&[dim, frames], 1.0 / (dim as f64).sqrt(), rng),
            pointwise_bias: Tensor::zeros(&[frames]),
        }
    }

    pub fn half_window(&self) -> usize {
        self.depthwise.shape()[2] / 2
    }

    pub fn frames(&self) -> usize {
        self.pointwise.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> ContextParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

impl<P> ContextParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ContextParams<Q> {
        ContextParams {
            depthwise: f(&self.depthwise),
            depthwise_bias: f(&self.depthwise_bias),
            pointwise: f(&self.pointwise),
            pointwise_bias: f(&self.pointwise_bias),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &P)> {
        vec![
            ("depthwise", &self.depthwise),
            ("depthwise_bias", &self.depthwise_bias),
            ("pointwise", &self.pointwise),
            ("pointwise_bias", &self.pointwise_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        vec![
            ("depthwise", &mut self.depthwise),
            ("depthwise_bias", &mut self.depthwise_bias),
            ("pointwise", &mut self.pointwise),
            ("pointwise_bias", &mut self.pointwise_bias),
        ]
    }
}

/// `[T, d]` features to a `[1, T, T]` context channel; row `t` is frame `t`.
pub fn context_channel(g: &mut Graph, v: Var, p: &ContextParams<Var>) -> Result<Var> {
    let (t, d) = match g.shape(v) {
        [t, d] => (*t, *d),
        s => return Err(HtrmError::usage(format!("context expects [T, d], got {s:?}"))),
    };
    if g.shape(p.pointwise) != [d, t] {
        return Err(HtrmError::usage(format!(
            "pointwise kernel {:?} does not map {d} features to {t} frames",
            g.shape(p.pointwise)
        )));
    }
    let by_channel = g.transpose(v)?;
    let local = g.conv_same(by_channel, p.depthwise, d)?;
    let local = g.add_bias(local, p.depthwise_bias, 0)?;
    let per_frame = g.transpose(local)?;
    let projected = g.matmul(per_frame, p.pointwise)?;
    let projected = g.add_bias(projected, p.pointwise_bias, 1)?;
    g.reshape(projected, &[1, t, t])
}

/// Appends the context channel after the similarity channels.
pub fn inject_context_var(g: &mut Graph, stack: Var, ctx: Var) -> Result<Var> {
    let (s, c) = (g.shape(stack), g.shape(ctx));
    if s.len() != 3 || c.len() != 3 || c[0] != 1 || s[1..] != c[1..] {
        return Err(HtrmError::usage(format!(
            "cannot append context {c:?} to stack {s:?}"
        )));
    }
    g.concat(&[stack, ctx], 0)
}

/// Value-level context channel as a `T×T` tensor.
pub fn local_temporal_context(v: &FeatureSequence, params: &ContextParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(v.values().clone());
    let p = params.map(|t| g.constant(t.clone()));
    let out = context_channel(&mut g, x, &p)?;
    g.value(out).clone().reshape(&[v.frames(), v.frames()])
}

/// Channel concatenation `T×T×C` + `T×T` → `T×T×(C+1)`.
pub fn inject_context(stack: &SimilarityStack, ctx: &Tensor) -> Result<SimilarityStack> {
    let t = stack.frames();
    if ctx.shape() != [t, t] {
        return Err(HtrmError::usage(format!(
            "context {:?} does not match {t}×{t} stack",
            ctx.shape()
        )));
    }
    let mut data = stack.channels_first().data().to_vec();
    data.extend_from_slice(ctx.data());
    SimilarityStack::from_channels_first(Tensor::from_parts(vec![stack.channels() + 1, t, t], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop separable convolution.
    fn loop_oracle(v: &Tensor, p: &ContextParams) -> Tensor {
        let (t, d) = (v.shape()[0], v.shape()[1]);
        let k = p.depthwise.shape()[2];
        let half = (k / 2) as isize;
        let mut local = vec![vec![0.0; d]; t];
        for (f, row) in local.iter_mut().enumerate() {
            for (c, out) in row.iter_mut().enumerate() {
                let mut s = p.depthwise_bias.data()[c];
                for j in 0..k {
                    let src = f as isize + j as isize - half;
                    if src >= 0 && (src as usize) < t {
                        s += p.depthwise.get(&[c, 0, j]) * v.get(&[src as usize, c]);
                    }
                }
                *out = s;
            }
        }
        let mut out = Tensor::zeros(&[t, t]);
        for f in 0..t {
            for o in 0..t {
                let mut s = p.pointwise_bias.data()[o];
                for c in 0..d {
                    s += local[f][c] * p.pointwise.get(&[c, o]);
                }
                out.set(&[f, o], s);
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ContextParams::init(8, 6, 2, &mut rng);
        p.depthwise_bias = uniform(&[8], 0.5, &mut rng);
        p.pointwise_bias = uniform(&[6], 0.5, &mut rng);
        let v = FeatureSequence::new(uniform(&[6, 8], 1.0, &mut rng)).unwrap();
        let got = local_temporal_context(&v, &p).unwrap();
        assert!(got.max_abs_diff(&loop_oracle(v.values(), &p)) < 1e-12);
    }

    #[test]
    fn identity_composition_copies_frames() {
        let p = ContextParams {
            depthwise: Tensor::full(&[5, 1, 1], 1.0),
            depthwise_bias: Tensor::zeros(&[5]),
            pointwise: Tensor::eye(5),
            pointwise_bias: Tensor::zeros(&[5]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = FeatureSequence::new(uniform(&[5, 5], 1.0, &mut rng)).unwrap();
        let out = local_temporal_context(&v, &p).unwrap();
        assert_eq!(&out, v.values());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = ContextParams::init(4, 6, 2, &mut rng);
        let v = FeatureSequence::new(Tensor::zeros(&[6, 4])).unwrap();
        let out = local_temporal_context(&v, &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pointwise_length_must_match_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = ContextParams::init(4, 8, 1, &mut rng);
        let v = FeatureSequence::new(Tensor::zeros(&[6, 4])).unwrap();
        assert!(matches!(local_temporal_context(&v, &p), Err(HtrmError::Usage(_))));
    }

    #[test]
    fn output_rows_depend_only_on_nearby_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (t, d) = (10, 4);
        for half in 0..=3 {
            let p = ContextParams::init(d, t, half, &mut rng);
            let base = uniform(&[t, d], 1.0, &mut rng);
            let out = local_temporal_context(&FeatureSequence::new(base.clone()).unwrap(), &p).unwrap();
            for j in 0..t {
                let mut bumped = base.clone();
                for c in 0..d {
                    bumped.set(&[j, c], bumped.get(&[j, c]) + 0.5);
                }
                let out2 =
                    local_temporal_context(&FeatureSequence::new(bumped).unwrap(), &p).unwrap();
                for row in 0..t {
                    let changed = out.row(row) != out2.row(row);
                    assert_eq!(changed, row.abs_diff(j) <= half, "half {half} frame {j} row {row}");
                }
            }
        }
    }

    #[test]
    fn injection_appends_context_last() {
        for t in [8, 64] {
            let stack = SimilarityStack::from_channels_first(Tensor::full(&[4, t, t], 2.0)).unwrap();
            let ctx = Tensor::full(&[t, t], -1.0);
            let out = inject_context(&stack, &ctx).unwrap();
            assert_eq!(out.shape(), [t, t, 5]);
            for c in 0..4 {
                assert_eq!(out.channel(c), stack.channel(c));
            }
            assert_eq!(out.channel(4), ctx);
        }
        let stack = SimilarityStack::from_channels_first(Tensor::zeros(&[4, 8, 8])).unwrap();
        assert!(inject_context(&stack, &Tensor::zeros(&[7, 7])).is_err());
    }
}
