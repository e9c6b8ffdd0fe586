//! Grayscale heatmaps and similarity matrices for inspection.
//!
//! Each image is min-max normalized on its own: values map linearly onto
//! `[-1, 1]` with `0/0` mapped to 0, then onto 0..=255 with
//! `round((v + 1) / 2 · 255)`. A constant image is therefore uniform
//! mid-gray (128).

use std::fs;
use std::path::Path;

use crate::error::{HtrmError, Result};
use crate::tensor::Tensor;

/// Min-max normalization onto `[-1, 1]`.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let range = hi - lo;
    values
        .iter()
        .map(|&x| if range > 0.0 { 2.0 * (x - lo) / range - 1.0 } else { 0.0 })
        .collect()
}

pub fn to_gray(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (`P5`) of a 2-D tensor; row 0 is the top of the image.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(HtrmError::usage(format!("heatmap must be 2-D, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize(image.data()).into_iter().map(to_gray));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, pgm_bytes(image)?).map_err(|e| HtrmError::io(path, e))
}

/// Cosine similarity between every pair of rows of a `[T, d]` tensor.
/// A zero row has similarity 0 with everything.
pub fn cosine_matrix(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(HtrmError::usage(format!("cosine matrix needs [T, d], got {:?}", x.shape())));
    }
    let t = x.shape()[0];
    let norms: Vec<f64> = (0..t)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                out.set(&[i, j], dot / denom);
            }
        }
    }
    Ok(out)
}
