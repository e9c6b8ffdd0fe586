//! Helpers shared by the integration tests.
#![allow(dead_code)]

use htrm::autodiff::{Graph, Var};
use htrm::gradcheck::{check_all, check_at, GradReport};
use htrm::init::uniform;
use htrm::regressor::{forward_graph, squared_error};
use htrm::tssm::RmdPolicy;
use htrm::{DensityMap, FeatureSequence, Model, ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every tensor of a parameter struct, in `map` order.
#[macro_export]
macro_rules! flatten {
    ($p:expr) => {{
        let mut out = Vec::new();
        let _ = $p.map(|t| out.push(t.clone()));
        out
    }};
}

/// The struct of `Var`s matching `flatten!` order.
#[macro_export]
macro_rules! rebuild {
    ($p:expr, $vars:expr) => {{
        let mut i = 0;
        $p.map(|_| {
            i += 1;
            $vars[i - 1]
        })
    }};
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(uniform(&shape, 1.0, &mut rng(seed)));
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

/// Uniform values bounded away from zero, so ReLU kinks stay out of reach
/// of the finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    uniform(shape, 1.0, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

type Primitive = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// One scalar function per tape operation.
pub fn primitives() -> Vec<Primitive> {
    let mut r = rng(1000);
    let mut u = |shape: &[usize]| uniform(shape, 1.0, &mut r);
    let a = u(&[3, 4]);
    let b = u(&[3, 4]);
    let m = u(&[4, 5]);
    let ba = u(&[2, 3, 4]);
    let bb = u(&[2, 4, 3]);
    let cube = u(&[2, 3, 4]);
    let bias = u(&[3]);
    let x1 = u(&[2, 7]);
    let w1 = u(&[3, 2, 3]);
    let x2 = u(&[4, 5, 6]);
    let w2 = u(&[4, 2, 3, 3]);
    let x3 = u(&[2, 4, 5, 5]);
    let w3 = u(&[3, 2, 3, 3, 3]);
    let ln = u(&[4, 6]);
    let gamma = u(&[6]);
    let beta = u(&[6]);
    let relu_in = away_from_zero(&[3, 4], &mut rng(1001));
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        })),
        ("scale", vec![a.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, 4)
        })),
        ("relu", vec![relu_in], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 5)
        })),
        ("sum", vec![a.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        })),
        ("matmul", vec![a.clone(), m], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 6)
        })),
        ("batched matmul", vec![ba, bb], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 7)
        })),
        ("permute", vec![cube.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            weighted_sum(g, y, 8)
        })),
        ("transpose", vec![a.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, 9)
        })),
        ("reshape", vec![cube.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.reshape(v[0], &[6, 4])?;
            weighted_sum(g, y, 10)
        })),
        ("softmax axis 0", vec![cube.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 11)
        })),
        ("softmax axis 1", vec![cube.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 12)
        })),
        ("softmax axis 2", vec![cube.clone()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.softmax(v[0], 2)?;
            weighted_sum(g, y, 13)
        })),
        ("add_bias", vec![cube.clone(), bias], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.add_bias(v[0], v[1], 1)?;
            weighted_sum(g, y, 14)
        })),
        ("concat", vec![a.clone(), b.clone(), cube.reshape(&[6, 4]).unwrap()], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.concat(&[v[0], v[1], v[2]], 0)?;
            weighted_sum(g, y, 15)
        })),
        ("conv 1-D", vec![x1, w1], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.conv_same(v[0], v[1], 1)?;
            weighted_sum(g, y, 16)
        })),
        ("conv 2-D grouped", vec![x2, w2], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.conv_same(v[0], v[1], 2)?;
            weighted_sum(g, y, 17)
        })),
        ("conv 3-D", vec![x3, w3], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.conv_same(v[0], v[1], 1)?;
            weighted_sum(g, y, 18)
        })),
        ("layer_norm", vec![ln, gamma, beta], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 19)
        })),
    ]
}

/// Worst relative error over every element, per primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    primitives()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_all(&inputs, f, STEP).expect(name);
            (name, report.max_relative_error())
        })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 8,
        dim: 16,
        heads: 2,
        half_window: 1,
        drop_prob: 0.3,
        windows: [1, 2, 4],
        ..ModelConfig::default()
    }
}

pub fn random_features(frames: usize, dim: usize, rng: &mut impl Rng) -> FeatureSequence {
    FeatureSequence::new(uniform(&[frames, dim], 1.0, rng)).unwrap()
}

/// Squared error of the whole model against a random target, checked at one
/// random element of every parameter tensor. Matrix dropping is active with
/// a fixed seed, so the same channel is dropped in every evaluation.
pub fn end_to_end_report(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let model = Model::new(tiny_config(), seed).unwrap();
    let scales = model.prepare(&random_features(8, 16, &mut r)).unwrap();
    let target = DensityMap::new((0..8).map(|_| r.random::<f64>()).collect());
    let inputs: Vec<Tensor> = flatten!(model.params);
    let at: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (i, r.random_range(0..t.len())))
        .collect();
    let config = model.config.clone();
    let rmd = RmdPolicy::new(0.3, true).unwrap();
    let f = move |g: &mut Graph, vars: &[Var]| {
        let p = rebuild!(model.params, vars);
        let mut drop_rng = rng(seed ^ 0xd0);
        let nodes = forward_graph(g, &config, &scales, &p, &rmd, &mut drop_rng)?;
        squared_error(g, nodes.density, &target)
    };
    check_at(&inputs, f, STEP, &at).unwrap()
}
