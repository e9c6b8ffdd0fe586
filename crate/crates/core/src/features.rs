//! Per-frame feature sequences, multi-scale views of them, and a seeded
//! generator of periodic synthetic videos.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{HtrmError, Result};
use crate::metrics::CycleAnnotation;
use crate::tensor::Tensor;

/// Window lengths of the three temporal scales.
pub const DEFAULT_WINDOWS: [usize; 3] = [1, 4, 8];

/// A `T×d` feature matrix, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
}

impl FeatureSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(HtrmError::usage(format!(
                "feature sequence must be T×d, got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(HtrmError::data("feature sequence contains non-finite values"));
        }
        Ok(FeatureSequence { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(HtrmError::usage("feature sequence needs at least one frame and one dim"));
        }
        FeatureSequence::new(Tensor::from_rows(rows)?)
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.values.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Tensor::load(path)?;
        if t.rank() != 2 {
            return Err(HtrmError::format(
                path.display().to_string(),
                4,
                format!("feature file must be rank 2, found rank {}", t.rank()),
            ));
        }
        FeatureSequence::new(t)
    }
}

/// The same video at three temporal resolutions, all aligned to `T` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub scales: [FeatureSequence; 3],
}

impl ScaleSet {
    pub fn new(scales: [FeatureSequence; 3]) -> Result<Self> {
        let (t, d) = (scales[0].frames(), scales[0].dim());
        if scales.iter().any(|s| s.frames() != t || s.dim() != d) {
            return Err(HtrmError::usage("all scales must share T and d"));
        }
        Ok(ScaleSet { scales })
    }

    pub fn frames(&self) -> usize {
        self.scales[0].frames()
    }

    pub fn dim(&self) -> usize {
        self.scales[0].dim()
    }
}

/// Uniformly samples (or pads by repeating the last frame) to exactly
/// `frames` rows.
pub fn sample_or_pad(raw: &FeatureSequence, frames: usize) -> Result<FeatureSequence> {
    if frames == 0 {
        return Err(HtrmError::usage("target frame count must be positive"));
    }
    let n = raw.frames();
    let indices: Vec<usize> = if n > frames {
        sample_indices(n, frames)
    } else {
        (0..frames).map(|i| i.min(n - 1)).collect()
    };
    let d = raw.dim();
    let mut out = Vec::with_capacity(frames * d);
    for i in indices {
        out.extend_from_slice(raw.frame(i));
    }
    FeatureSequence::new(Tensor::from_parts(vec![frames, d], out))
}

/// `round(i·(n−1)/(frames−1))` for `i < frames`; used when `n > frames`.
pub fn sample_indices(n: usize, frames: usize) -> Vec<usize> {
    if frames == 1 {
        return vec![0];
    }
    (0..frames)
        .map(|i| ((i * (n - 1)) as f64 / (frames - 1) as f64).round() as usize)
        .collect()
}

/// Mean-pools `window`-frame windows with stride `max(1, window/2)`.
///
/// Returns `[n_windows, d]`. A sequence shorter than the window pools into
/// a single window over all its frames.
pub fn pool_windows(v: &FeatureSequence, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(HtrmError::usage("window length must be positive"));
    }
    let (t, d) = (v.frames(), v.dim());
    let stride = (window / 2).max(1);
    let spans: Vec<(usize, usize)> = if t < window {
        vec![(0, t)]
    } else {
        (0..)
            .map(|k| k * stride)
            .take_while(|&s| s + window <= t)
            .map(|s| (s, s + window))
            .collect()
    };
    let mut out = vec![0.0; spans.len() * d];
    for (w, &(s, e)) in spans.iter().enumerate() {
        let dst = &mut out[w * d..(w + 1) * d];
        for f in s..e {
            for (o, x) in dst.iter_mut().zip(v.frame(f)) {
                *o += x;
            }
        }
        let inv = 1.0 / (e - s) as f64;
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(Tensor::from_parts(vec![spans.len(), d], out))
}

/// Linear interpolation of `[n, d]` rows onto `frames` evenly spaced
/// positions, with the first and last rows pinned to the ends.
pub fn interpolate_rows(pooled: &Tensor, frames: usize) -> Tensor {
    let (n, d) = (pooled.shape()[0], pooled.shape()[1]);
    let mut out = vec![0.0; frames * d];
    for t in 0..frames {
        let dst = &mut out[t * d..(t + 1) * d];
        if n == 1 || frames == 1 {
            dst.copy_from_slice(pooled.row(0));
            continue;
        }
        let pos = t as f64 * (n - 1) as f64 / (frames - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        for ((o, a), b) in dst.iter_mut().zip(pooled.row(lo)).zip(pooled.row(hi)) {
            *o = a * (1.0 - frac) + b * frac;
        }
    }
    Tensor::from_parts(vec![frames, d], out)
}

pub fn build_scales(v: &FeatureSequence) -> Result<ScaleSet> {
    build_scales_with(v, DEFAULT_WINDOWS)
}

pub fn build_scales_with(v: &FeatureSequence, windows: [usize; 3]) -> Result<ScaleSet> {
    let t = v.frames();
    let make = |w: usize| -> Result<FeatureSequence> {
        if w == 1 {
            return Ok(v.clone());
        }
        FeatureSequence::new(interpolate_rows(&pool_windows(v, w)?, t))
    };
    ScaleSet::new([make(windows[0])?, make(windows[1])?, make(windows[2])?])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_cycles: usize,
    pub cycle_length_range: (usize, usize),
    pub interruption_prob: f64,
    pub noise_sigma: f64,
    pub dim: usize,
    pub frames: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.cycle_length_range;
        if lo == 0 || lo > hi {
            return Err(HtrmError::usage(format!(
                "cycle length range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.interruption_prob) {
            return Err(HtrmError::usage("interruption probability must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(HtrmError::usage("noise sigma must be finite and non-negative"));
        }
        if self.dim == 0 || self.frames == 0 {
            return Err(HtrmError::usage("frames and dim must be positive"));
        }
        if self.num_cycles * lo > self.frames {
            return Err(HtrmError::usage(format!(
                "{} cycles of at least {lo} frames cannot fit in {} frames",
                self.num_cycles, self.frames
            )));
        }
        Ok(())
    }
}

/// Closed loop in feature space traced once per cycle.
struct PhasePath {
    offset: Vec<f64>,
    harmonics: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl PhasePath {
    fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let mut vec = |scale: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let offset = vec(0.5);
        let harmonics = vec![(vec(1.0), vec(1.0), 1.0), (vec(0.5), vec(0.5), 2.0)];
        PhasePath { offset, harmonics }
    }

    fn at(&self, phase: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.offset);
        for (a, b, k) in &self.harmonics {
            let (s, c) = (TAU * k * phase).sin_cos();
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o += c * x + s * y;
            }
        }
    }
}

/// Generates one periodic video and the cycles it contains.
///
/// Each frame is a point on a seeded closed path in feature space, indexed
/// by the phase of the current cycle, plus Gaussian noise. Phase only
/// advances inside annotated cycles, so frames at equal phase coincide and
/// interruptions hold the path still.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureSequence, CycleAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t, d, n) = (spec.frames, spec.dim, spec.num_cycles);
    let path = PhasePath::random(d, &mut rng);

    let (lo, hi) = spec.cycle_length_range;
    let mut lengths = Vec::with_capacity(n);
    let mut used = 0;
    for i in 0..n {
        let reserve = (n - i - 1) * lo;
        let cap = hi.min(t - used - reserve);
        let len = rng.random_range(lo..=cap);
        lengths.push(len);
        used += len;
    }

    // Slack frames go to the lead-in, the tail, or an interrupted gap.
    let mut gaps = vec![0usize; n + 1];
    let mut slots = vec![0];
    for g in 1..n {
        if rng.random_bool(spec.interruption_prob) {
            slots.push(g);
        }
    }
    slots.push(n);
    for _ in 0..(t - used) {
        gaps[slots[rng.random_range(0..slots.len())]] += 1;
    }

    let mut cycles = Vec::with_capacity(n);
    let mut phase = vec![0.0; t];
    let mut cursor = gaps[0];
    for (i, &len) in lengths.iter().enumerate() {
        for (k, p) in phase[cursor..cursor + len].iter_mut().enumerate() {
            *p = k as f64 / len as f64;
        }
        cycles.push((cursor, cursor + len));
        cursor += len + gaps[i + 1];
    }

    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| HtrmError::usage(format!("noise distribution: {e}")))?;
    let mut data = vec![0.0; t * d];
    for (f, row) in data.chunks_mut(d).enumerate() {
        if n > 0 {
            path.at(phase[f], row);
        }
        if spec.noise_sigma > 0.0 {
            row.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
    }
    let features = FeatureSequence::new(Tensor::from_parts(vec![t, d], data))?;
    let annotation = CycleAnnotation::new(cycles, t)?;
    Ok((features, annotation))
}
