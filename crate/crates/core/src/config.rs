//! Run configuration: a flat UTF-8 `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Relative paths are resolved against the directory that
//! holds the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{Subset, SynthDatasetSpec};
use crate::error::{HtrmError, Result};
use crate::metrics::SigmaRule;
use crate::regressor::ModelConfig;

/// How `eval` obtains predicted counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// The checkpointed model.
    Model,
    /// Ground-truth densities.
    GroundTruth,
    /// Always zero.
    Zero,
    /// Mean count of the training split.
    Mean,
}

impl FromStr for Predictor {
    type Err = HtrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Predictor::Model),
            "ground_truth" => Ok(Predictor::GroundTruth),
            "zero" => Ok(Predictor::Zero),
            "mean" => Ok(Predictor::Mean),
            _ => Err(HtrmError::usage(format!(
                "unknown predictor {s:?}, expected model, ground_truth, zero or mean"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub videos: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub cycle_min: usize,
    pub cycle_max: usize,
    pub min_coverage: f64,
    pub interruption: f64,
    pub noise: f64,
    /// Raw frames per video; defaults to the model's `T`.
    pub frames: Option<usize>,
    /// Train/val/test sizes written as split files.
    pub split: Option<[usize; 3]>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            videos: 100,
            count_min: 2,
            count_max: 8,
            cycle_min: 3,
            cycle_max: 16,
            min_coverage: 0.6,
            interruption: 0.1,
            noise: 0.1,
            frames: None,
            split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub sigma: SigmaRule,
    pub eval_subset: Subset,
    pub predictor: Predictor,
    /// Feature file for `infer`.
    pub features: Option<PathBuf>,
    /// Video id for `viz`.
    pub video: Option<String>,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            threads: 0,
            data_dir: None,
            checkpoint: None,
            out_dir: None,
            sigma: SigmaRule::default(),
            eval_subset: Subset::Test,
            predictor: Predictor::Model,
            features: None,
            video: None,
            synth: SynthSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HtrmError::usage(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HtrmError::usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| HtrmError::usage(format!("{key}: expected three comma-separated integers")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HtrmError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            HtrmError::Usage(m) => HtrmError::usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HtrmError::usage(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(HtrmError::usage(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            c.set(key, value, base)
                .map_err(|e| HtrmError::usage(format!("line {}: {}", n + 1, e.root())))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(value));
        let m = &mut self.model;
        let s = &mut self.synth;
        match key {
            "frames" => m.frames = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "half_window" => m.half_window = parse(key, value)?,
            "drop_prob" => m.drop_prob = parse(key, value)?,
            "windows" => m.windows = parse_triple(key, value)?,
            "positional" => m.positional = parse_bool(key, value)?,
            "self_attention" => m.self_attention = parse_bool(key, value)?,
            "dual_softmax" => m.dual_softmax = parse_bool(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "data_dir" => self.data_dir = path(),
            "checkpoint" => self.checkpoint = path(),
            "out_dir" => self.out_dir = path(),
            "features" => self.features = path(),
            "video" => self.video = Some(value.to_string()),
            "sigma_fraction" => self.sigma.fraction = parse(key, value)?,
            "sigma_floor" => self.sigma.floor = parse(key, value)?,
            "eval_subset" => self.eval_subset = Subset::parse(value)?,
            "predictor" => self.predictor = value.parse()?,
            "synth_videos" => s.videos = parse(key, value)?,
            "synth_count_min" => s.count_min = parse(key, value)?,
            "synth_count_max" => s.count_max = parse(key, value)?,
            "synth_cycle_min" => s.cycle_min = parse(key, value)?,
            "synth_cycle_max" => s.cycle_max = parse(key, value)?,
            "synth_min_coverage" => s.min_coverage = parse(key, value)?,
            "synth_interruption" => s.interruption = parse(key, value)?,
            "synth_noise" => s.noise = parse(key, value)?,
            "synth_frames" => s.frames = Some(parse(key, value)?),
            "synth_split" => s.split = Some(parse_triple(key, value)?),
            _ => return Err(HtrmError::usage(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HtrmError::usage("learning_rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(HtrmError::usage("batch_size must be at least 1"));
        }
        if !(self.sigma.fraction > 0.0 && self.sigma.floor > 0.0) {
            return Err(HtrmError::usage("sigma_fraction and sigma_floor must be positive"));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthDatasetSpec {
        let s = &self.synth;
        SynthDatasetSpec {
            videos: s.videos,
            count_range: (s.count_min, s.count_max),
            cycle_length_range: (s.cycle_min, s.cycle_max),
            min_coverage: s.min_coverage,
            interruption_prob: s.interruption,
            noise_sigma: s.noise,
            frames: s.frames.unwrap_or(self.model.frames),
            dim: self.model.dim,
            seed: self.seed,
            split: s.split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", Path::new("/x")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.model.frames, c.model.dim, c.model.heads), (64, 512, 4));
        assert_eq!((c.model.half_window, c.model.drop_prob), (2, 0.3));
        assert_eq!((c.learning_rate, c.batch_size), (1e-4, 8));
    }

    #[test]
    fn parses_values_and_resolves_paths() {
        let text = "# tiny\nframes = 32\ndim=32\n\nwindows = 1, 2, 4\ndual_softmax = false\n\
                    data_dir = data\ncheckpoint = /abs/m.ckpt\npredictor = ground_truth\n\
                    synth_split = 8,1,1\neval_subset = all\n";
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.model.frames, 32);
        assert_eq!(c.model.windows, [1, 2, 4]);
        assert!(!c.model.dual_softmax);
        assert_eq!(c.data_dir.as_deref(), Some(Path::new("/cfg/data")));
        assert_eq!(c.checkpoint.as_deref(), Some(Path::new("/abs/m.ckpt")));
        assert_eq!(c.predictor, Predictor::GroundTruth);
        assert_eq!(c.synth.split, Some([8, 1, 1]));
        assert_eq!(c.eval_subset, Subset::All);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "frames = 32\nframes = 16",
            "frames",
            "frames = many",
            "positional = yes",
            "windows = 1,2",
            "heads = 3",
            "learning_rate = 0",
            "predictor = oracle",
        ] {
            let err = RunConfig::parse(text, Path::new(".")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text:?}: {err}");
        }
    }
}
