//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{HtrmError, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(RELATIVE_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.samples
            .iter()
            .map(GradSample::relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(HtrmError::usage("gradient check needs a scalar function"));
    }
    Ok(g.value(out).data()[0])
}

/// Compares analytic and central-difference gradients at the given
/// `(input, element)` coordinates.
pub fn check_at<F>(inputs: &[Tensor], f: F, step: f64, at: &[(usize, usize)]) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut samples = Vec::with_capacity(at.len());
    let mut probe = inputs.to_vec();
    for &(input, element) in at {
        let orig = probe[input].data()[element];
        probe[input].data_mut()[element] = orig + step;
        let plus = eval_scalar(&probe, &f)?;
        probe[input].data_mut()[element] = orig - step;
        let minus = eval_scalar(&probe, &f)?;
        probe[input].data_mut()[element] = orig;
        samples.push(GradSample {
            input,
            element,
            analytic: analytic[input].data()[element],
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(GradReport { samples })
}

/// Checks every element of every input.
pub fn check_all<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let at: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_at(inputs, f, step, &at)
}

/// Checks `count` coordinates drawn uniformly without replacement.
pub fn check_random<F, R>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    count: usize,
    rng: &mut R,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks = sample(rng, total, count.min(total));
    let mut at: Vec<(usize, usize)> = picks
        .into_iter()
        .map(|mut flat| {
            let mut input = 0;
            while flat >= inputs[input].len() {
                flat -= inputs[input].len();
                input += 1;
            }
            (input, flat)
        })
        .collect();
    at.sort_unstable();
    check_at(inputs, f, step, &at)
}
