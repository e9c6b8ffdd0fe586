//! Mini-batch training and evaluation.
//!
//! Batch items run in parallel; per-item gradients are summed in item order
//! so results do not depend on the thread count. Batch order and matrix
//! dropping are seeded, so a run is fully determined by its inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::dataset::Sample;
use crate::error::{HtrmError, Result};
use crate::metrics::{count_from_density, mae, obo, CountPair, DensityMap};
use crate::optim::AdamState;
use crate::regressor::{forward_graph, squared_error, Model, ModelParams};
use crate::tensor::Tensor;
use crate::tssm::RmdPolicy;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch, with matrix dropping active.
    pub loss: f64,
    pub train_mae: f64,
    pub train_obo: f64,
    pub val_mae: Option<f64>,
    pub val_obo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation MAE, or training MAE without a validation set.
    pub best: Model,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub last: Model,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed derived from a run seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |h, &x| mix(h ^ x))
}

/// Loss `(1/N) Σ ‖D − D̂‖²` over a batch and its gradient.
///
/// Item `i` draws matrix dropping from `rmd_seeds[i]`.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Sample],
    rmd: &RmdPolicy,
    rmd_seeds: &[u64],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() || batch.len() != rmd_seeds.len() {
        return Err(HtrmError::usage("batch needs one seed per item and at least one item"));
    }
    let n = batch.len() as f64;
    let per_item: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .zip(rmd_seeds.par_iter())
        .map(|(sample, &seed)| {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = forward_graph(&mut g, &model.config, &sample.scales, &p, rmd, &mut rng)?;
            let se = squared_error(&mut g, nodes.density, &sample.density)?;
            let loss = g.scale(se, 1.0 / n)?;
            let grads = g.backward(loss)?;
            Ok((g.value(loss).data()[0], p.map(|&v| grads.get(v))))
        })
        .collect::<Result<_>>()?;

    let mut items = per_item.into_iter();
    let (mut loss, mut total) = items.next().expect("non-empty batch");
    for (l, grad) in items {
        loss += l;
        for ((_, acc), (_, g)) in total.named_mut().into_iter().zip(grad.named()) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    if !loss.is_finite() {
        return Err(HtrmError::Numeric(format!("batch loss is {loss}")));
    }
    Ok((loss, total))
}

/// Inference densities for every sample, in order.
pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<DensityMap>> {
    samples
        .par_iter()
        .map(|s| model.predict_scales(&s.scales))
        .collect()
}

pub fn count_pairs(model: &Model, samples: &[Sample]) -> Result<Vec<CountPair>> {
    Ok(predict_all(model, samples)?
        .iter()
        .zip(samples)
        .map(|(d, s)| CountPair::new(s.count, count_from_density(d)))
        .collect())
}

/// Inference MAE and OBO.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let pairs = count_pairs(model, samples)?;
    Ok((mae(&pairs)?, obo(&pairs)?))
}

/// Inference loss `(1/N) Σ ‖D − D̂‖²` over all samples.
pub fn inference_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let pred = predict_all(model, samples)?;
    let truth: Vec<DensityMap> = samples.iter().map(|s| s.density.clone()).collect();
    crate::regressor::mse_loss(&pred, &truth)
}

fn check_samples(model: &Model, samples: &[Sample], what: &str) -> Result<()> {
    let c = &model.config;
    for s in samples {
        if s.scales.frames() != c.frames || s.scales.dim() != c.dim {
            return Err(HtrmError::data(format!(
                "{what} video {}: {}×{} features, model expects {}×{}",
                s.id,
                s.scales.frames(),
                s.scales.dim(),
                c.frames,
                c.dim
            )));
        }
        if s.count == 0 {
            return Err(HtrmError::data(format!(
                "{what} video {} has no annotated cycles; MAE needs counts of at least 1",
                s.id
            )));
        }
    }
    Ok(())
}

/// Runs `options.epochs` epochs of Adam from `model`.
///
/// `on_epoch` sees each epoch record as soon as it is complete.
pub fn train(
    model: Model,
    train_set: &[Sample],
    val_set: &[Sample],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if options.batch_size == 0 {
        return Err(HtrmError::usage("batch_size must be at least 1"));
    }
    if !(options.learning_rate > 0.0 && options.learning_rate.is_finite()) {
        return Err(HtrmError::usage("learning_rate must be positive and finite"));
    }
    if options.epochs > 0 && train_set.is_empty() {
        return Err(HtrmError::data("the training split is empty"));
    }
    check_samples(&model, train_set, "training")?;
    check_samples(&model, val_set, "validation")?;
    let rmd = RmdPolicy::new(model.config.drop_prob, true)?;

    let mut current = model;
    let mut adam = AdamState::new(options.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(options.epochs);
    let mut batches = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=options.epochs {
        let e = epoch as u64;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(options.seed, &[e])));
        let mut loss_sum = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(options.batch_size).collect();
        for (b, chunk) in chunks.iter().enumerate() {
            let items: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| derive_seed(options.seed, &[e, b as u64 + 1, k as u64]))
                .collect();
            let (loss, grads) = batch_gradient(&current, &items, &rmd, &seeds)?;
            let grads: Vec<Tensor> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
            let mut params: Vec<&mut Tensor> =
                current.params.named_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &grads)?;
            loss_sum += loss;
            batches.push(BatchRecord {
                epoch,
                batch: b + 1,
                loss,
            });
        }

        let (train_mae, train_obo) = evaluate(&current, train_set)?;
        let (val_mae, val_obo) = if val_set.is_empty() {
            (None, None)
        } else {
            let (m, o) = evaluate(&current, val_set)?;
            (Some(m), Some(o))
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / chunks.len() as f64,
            train_mae,
            train_obo,
            val_mae,
            val_obo,
        };
        on_epoch(&record);
        let score = val_mae.unwrap_or(train_mae);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, current.clone()));
        }
        epochs.push(record);
    }

    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, current.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: current,
        epochs,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{prepare_all, synthesize, SynthDatasetSpec};
    use crate::metrics::SigmaRule;
    use crate::regressor::ModelConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            frames: 8,
            dim: 8,
            heads: 2,
            half_window: 1,
            drop_prob: 0.3,
            windows: [1, 2, 4],
            ..ModelConfig::default()
        }
    }

    fn samples(model: &Model, n: usize, seed: u64) -> Vec<Sample> {
        let ds = synthesize(&SynthDatasetSpec {
            videos: n,
            count_range: (1, 3),
            cycle_length_range: (2, 4),
            min_coverage: 0.0,
            interruption_prob: 0.0,
            noise_sigma: 0.05,
            frames: 8,
            dim: 8,
            seed,
            split: None,
        })
        .unwrap();
        let refs: Vec<_> = ds.videos.iter().collect();
        prepare_all(model, &refs, &SigmaRule::default()).unwrap()
    }

    fn options(epochs: usize) -> TrainOptions {
        TrainOptions {
            learning_rate: 1e-3,
            batch_size: 3,
            epochs,
            seed: 5,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let model = Model::new(config(), 1).unwrap();
        let data = samples(&model, 4, 2);
        let out = train(model.clone(), &data, &[], &options(0), |_| {}).unwrap();
        assert_eq!(out.best, model);
        assert_eq!(out.last, model);
        assert!(out.epochs.is_empty() && out.batches.is_empty());
    }

    #[test]
    fn batch_loss_matches_independent_forward() {
        let model = Model::new(config(), 3).unwrap();
        let data = samples(&model, 3, 4);
        let batch: Vec<&Sample> = data.iter().collect();
        let seeds = [11, 12, 13];
        let rmd = RmdPolicy::new(0.3, true).unwrap();
        let (loss, _) = batch_gradient(&model, &batch, &rmd, &seeds).unwrap();
        let mut expected = 0.0;
        for (s, &seed) in data.iter().zip(&seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = model.forward_full(&s.scales, &rmd, &mut rng).unwrap();
            expected += pred
                .values
                .iter()
                .zip(&s.density.values)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        assert!((loss - expected / 3.0).abs() < 1e-12, "{loss} vs {}", expected / 3.0);
    }

    #[test]
    fn batch_gradient_is_thread_count_independent() {
        let model = Model::new(config(), 6).unwrap();
        let data = samples(&model, 5, 7);
        let batch: Vec<&Sample> = data.iter().collect();
        let seeds = [1, 2, 3, 4, 5];
        let rmd = RmdPolicy::new(0.3, true).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_gradient(&model, &batch, &rmd, &seeds).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let model = Model::new(config(), 8).unwrap();
        let data = samples(&model, 9, 9);
        let before = inference_loss(&model, &data).unwrap();
        let a = train(model.clone(), &data, &data[..3], &options(6), |_| {}).unwrap();
        let b = train(model, &data, &data[..3], &options(6), |_| {}).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.batches.len(), 6 * 3);
        assert!(inference_loss(&a.last, &data).unwrap() < before);
        let best = &a.epochs[a.best_epoch - 1];
        assert!(a.epochs.iter().all(|r| r.val_mae.unwrap() >= best.val_mae.unwrap()));
        assert_eq!(evaluate(&a.last, &data).unwrap().0, a.epochs[5].train_mae);
    }

    #[test]
    fn zero_count_videos_are_rejected_before_training() {
        let model = Model::new(config(), 10).unwrap();
        let mut data = samples(&model, 3, 11);
        data[1].count = 0;
        let err = train(model, &data, &[], &options(1), |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
