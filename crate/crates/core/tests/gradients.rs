mod common;

use common::*;
use htrm::autodiff::{Graph, Var};
use htrm::context::{context_channel, ContextParams};
use htrm::fusion::{fuse, FusionParams};
use htrm::gradcheck::{check_all, check_random};
use htrm::init::uniform;
use htrm::regressor::{decode_var, density_head, DensityHeadParams, EncoderLayerParams};
use htrm::tssm::{dual_softmax_stack, joint_stack, self_attention_stack};
use htrm::{ProjectionHeads, Tensor};

const MODULE_TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in primitive_errors() {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn similarity_builders() {
    let mut r = rng(1);
    let v = uniform(&[6, 8], 1.0, &mut r);
    let mut sa = ProjectionHeads::init(8, 2, &mut r).unwrap();
    let mut ds = ProjectionHeads::init(8, 2, &mut r).unwrap();
    // Distinct keys and a non-trivial mix exercise every path.
    sa.key = uniform(&[8, 8], 0.5, &mut r);
    ds.key = uniform(&[8, 8], 0.5, &mut r);
    sa.mix = uniform(&[2, 2], 1.0, &mut r);
    ds.mix = uniform(&[2, 2], 1.0, &mut r);
    let mut inputs = vec![v];
    inputs.extend(flatten!(sa));
    inputs.extend(flatten!(ds));
    let f = |g: &mut Graph, x: &[Var]| {
        let a = self_attention_stack(g, x[0], &rebuild!(sa, &x[1..4]))?;
        let b = dual_softmax_stack(g, x[0], &rebuild!(ds, &x[4..7]))?;
        let j = joint_stack(g, a, b)?;
        weighted_sum(g, j, 30)
    };
    let report = check_all(&inputs, f, STEP).unwrap();
    assert!(report.max_relative_error() < MODULE_TOL, "{:?}", report.worst());
}

#[test]
fn local_context() {
    let mut r = rng(2);
    let mut p = ContextParams::init(6, 7, 2, &mut r);
    p.depthwise_bias = uniform(&[6], 0.5, &mut r);
    p.pointwise_bias = uniform(&[7], 0.5, &mut r);
    let mut inputs = vec![uniform(&[7, 6], 1.0, &mut r)];
    inputs.extend(flatten!(p));
    let f = |g: &mut Graph, x: &[Var]| {
        let y = context_channel(g, x[0], &rebuild!(p, &x[1..]))?;
        weighted_sum(g, y, 31)
    };
    let report = check_all(&inputs, f, STEP).unwrap();
    assert!(report.max_relative_error() < MODULE_TOL, "{:?}", report.worst());
}

#[test]
fn multiscale_fusion() {
    let mut r = rng(3);
    let mut p = FusionParams::init(3, &mut r);
    p.reduction = uniform(&[3, 3, 3, 3, 3], 0.3, &mut r);
    // Positive biases keep the ReLU inputs away from their kink.
    for b in &mut p.scale_biases {
        *b = Tensor::full(&[1], 3.0);
    }
    let mut inputs: Vec<Tensor> = (0..3).map(|_| uniform(&[3, 5, 5], 0.2, &mut r)).collect();
    inputs.extend(flatten!(p));
    let f = |g: &mut Graph, x: &[Var]| {
        let y = fuse(g, [x[0], x[1], x[2]], &rebuild!(p, &x[3..]))?;
        weighted_sum(g, y, 32)
    };
    let report = check_all(&inputs, f, STEP).unwrap();
    assert!(report.max_relative_error() < MODULE_TOL, "{:?}", report.worst());
}

#[test]
fn decoder_and_head() {
    let mut r = rng(4);
    let enc = EncoderLayerParams::init(5, 6, 8, &mut r);
    let head = DensityHeadParams::init(8, &mut r);
    let mut inputs = vec![uniform(&[6, 5, 5], 1.0, &mut r)];
    let n_enc = flatten!(enc).len();
    inputs.extend(flatten!(enc));
    inputs.extend(flatten!(head));
    let f = |g: &mut Graph, x: &[Var]| {
        let o = decode_var(g, x[0], &rebuild!(enc, &x[1..1 + n_enc]), true)?;
        let d = density_head(g, o, &rebuild!(head, &x[1 + n_enc..]))?;
        weighted_sum(g, d, 33)
    };
    let report = check_random(&inputs, f, STEP, 300, &mut r).unwrap();
    assert!(report.max_relative_error() < MODULE_TOL, "{:?}", report.worst());
}

#[test]
fn whole_model() {
    let report = end_to_end_report(7);
    assert!(report.samples.len() >= 20);
    assert!(report.max_relative_error() < 1e-3, "{:?}", report.worst());
}
