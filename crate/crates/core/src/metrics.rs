//! Ground-truth densities from cycle annotations, and the counting metrics.

use crate::error::{HtrmError, Result};

/// Ordered, non-overlapping `[start, end)` frame spans, one per cycle.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CycleAnnotation {
    cycles: Vec<(usize, usize)>,
}

impl CycleAnnotation {
    /// Validates the spans against a sequence of `frames` frames.
    pub fn new(cycles: Vec<(usize, usize)>, frames: usize) -> Result<Self> {
        let mut prev_end = 0;
        for (i, &(s, e)) in cycles.iter().enumerate() {
            if s >= e {
                return Err(HtrmError::usage(format!("cycle {i}: start {s} is not before end {e}")));
            }
            if e > frames {
                return Err(HtrmError::usage(format!(
                    "cycle {i}: end {e} exceeds {frames} frames"
                )));
            }
            if s < prev_end {
                return Err(HtrmError::usage(format!(
                    "cycle {i} starting at {s} overlaps or precedes the previous cycle ending at {prev_end}"
                )));
            }
            prev_end = e;
        }
        Ok(CycleAnnotation { cycles })
    }

    pub fn cycles(&self) -> &[(usize, usize)] {
        &self.cycles
    }

    pub fn count(&self) -> usize {
        self.cycles.len()
    }
}

/// Per-frame density; the count is its sum.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new(values: Vec<f64>) -> Self {
        DensityMap { values }
    }

    pub fn zeros(frames: usize) -> Self {
        DensityMap::new(vec![0.0; frames])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> f64 {
        count_from_density(self)
    }
}

/// Width of the Gaussian bump placed on each cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaRule {
    /// Sigma as a fraction of the cycle span.
    pub fraction: f64,
    /// Lower bound on sigma, in frames.
    pub floor: f64,
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule {
            fraction: 1.0 / 6.0,
            floor: 0.5,
        }
    }
}

impl SigmaRule {
    pub fn sigma(&self, span: usize) -> f64 {
        (span as f64 * self.fraction).max(self.floor)
    }
}

pub fn annotations_to_density(ann: &CycleAnnotation, frames: usize) -> Result<DensityMap> {
    annotations_to_density_with(ann, frames, SigmaRule::default())
}

/// Each cycle `[s, e)` contributes a Gaussian centred at `(s + e − 1)/2`,
/// truncated to its own frames and renormalized to unit mass.
pub fn annotations_to_density_with(
    ann: &CycleAnnotation,
    frames: usize,
    rule: SigmaRule,
) -> Result<DensityMap> {
    // Re-validate: the annotation may have been built for a longer sequence.
    CycleAnnotation::new(ann.cycles.clone(), frames)?;
    if !(rule.fraction > 0.0 || rule.floor > 0.0) {
        return Err(HtrmError::usage("sigma rule must yield a positive width"));
    }
    let mut map = vec![0.0; frames];
    for &(s, e) in &ann.cycles {
        let center = (s + e - 1) as f64 / 2.0;
        let sigma = rule.sigma(e - s);
        let weights: Vec<f64> = (s..e)
            .map(|t| {
                let z = (t as f64 - center) / sigma;
                (-0.5 * z * z).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (t, w) in (s..e).zip(weights) {
            map[t] += w / total;
        }
    }
    Ok(DensityMap::new(map))
}

pub fn count_from_density(d: &DensityMap) -> f64 {
    d.values.iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountPair {
    /// Ground-truth count.
    pub truth: usize,
    /// Predicted count, unrounded.
    pub predicted: f64,
}

impl CountPair {
    pub fn new(truth: usize, predicted: f64) -> Self {
        CountPair { truth, predicted }
    }
}

/// Mean of `|c − ĉ| / c`. A zero ground-truth count is a usage error.
pub fn mae(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(HtrmError::usage("mae of an empty set"));
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        if p.truth == 0 {
            return Err(HtrmError::usage(format!(
                "mae undefined: item {i} has a ground-truth count of zero"
            )));
        }
        let c = p.truth as f64;
        total += (c - p.predicted).abs() / c;
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of items with `|c − ĉ| ≤ 1`.
pub fn obo(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(HtrmError::usage("obo of an empty set"));
    }
    let hits = pairs
        .iter()
        .filter(|p| (p.truth as f64 - p.predicted).abs() <= 1.0)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}
