//! The `htrm` commands.
//!
//! | command | reads                         | writes into the output directory |
//! |---------|-------------------------------|----------------------------------|
//! | synth   | config                        | the dataset directory            |
//! | train   | dataset                       | `best.ckpt`, `last.ckpt`, `train_log.csv`, `batch_log.csv` |
//! | eval    | dataset, checkpoint           | `per_video.csv`, `metrics.csv`   |
//! | infer   | feature file, checkpoint      | `density.csv`                    |
//! | viz     | dataset video, checkpoint     | PGM heatmaps, `density.csv`      |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Predictor, RunConfig};
use crate::dataset::{prepare_all, synthesize, target, Dataset, Subset, Video};
use crate::error::{HtrmError, Result};
use crate::features::FeatureSequence;
use crate::metrics::{count_from_density, mae, obo, CountPair, DensityMap};
use crate::regressor::{Model, ModelConfig};
use crate::train::{count_pairs, train, TrainOptions, TrainOutcome};
use crate::tssm::RmdPolicy;
use crate::viz::{cosine_matrix, write_pgm};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Infer,
    Viz,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// `--out` names the dataset directory for `synth` and the output
    /// directory otherwise.
    pub fn apply(self, command: Command, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint;
        }
        match (command, self.out) {
            (_, None) => {}
            (Command::Synth, out) => cfg.data_dir = out,
            (_, out) => cfg.out_dir = out,
        }
    }
}

pub fn run(command: Command, config: &Path, overrides: Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(command, &mut cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HtrmError::usage(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Synth => cmd_synth(&cfg).map(|dir| {
            eprintln!("wrote {} videos to {}", cfg.synth.videos, dir.display());
        }),
        Command::Train => cmd_train(&cfg, |line| eprintln!("{line}")).map(|out| {
            eprintln!("best epoch {} of {}", out.best_epoch, out.epochs.len());
        }),
        Command::Eval => cmd_eval(&cfg).map(|r| print!("{}", r.table())),
        Command::Infer => cmd_infer(&cfg).map(|d| println!("predicted count: {}", d.count())),
        Command::Viz => cmd_viz(&cfg).map(|files| {
            eprintln!("wrote {} files", files.len());
        }),
    })
}

fn need<'a, T: ?Sized>(value: Option<&'a T>, key: &str, command: &str) -> Result<&'a T> {
    value.ok_or_else(|| HtrmError::usage(format!("{command} needs `{key}` to be set")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HtrmError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HtrmError::io(path, e))
}

/// Writes a synthetic dataset to `data_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = need(cfg.data_dir.as_deref(), "data_dir", "synth")?;
    let ds = synthesize(&cfg.synth_spec())?;
    create_dir(dir)?;
    ds.save(dir)?;
    Ok(dir.to_path_buf())
}

fn best_checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Trains from a fresh model seeded by `seed`; `progress` receives one line
/// per epoch.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    let data_dir = need(cfg.data_dir.as_deref(), "data_dir", "train")?;
    let out = need(cfg.out_dir.as_deref(), "out_dir", "train")?;
    let ds = Dataset::load(data_dir)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let train_set = prepare_all(&model, &ds.subset(Subset::Train), &cfg.sigma)?;
    let val_set = prepare_all(&model, &ds.subset(Subset::Val), &cfg.sigma)?;
    let options = TrainOptions {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    create_dir(out)?;
    let outcome = train(model, &train_set, &val_set, &options, |r| {
        progress(&format!(
            "epoch {:>4}  loss {:.6}  train MAE {:.4}  train OBO {:.4}  val MAE {}",
            r.epoch,
            r.loss,
            r.train_mae,
            r.train_obo,
            r.val_mae.map_or("-".into(), |v| format!("{v:.4}"))
        ))
    })?;

    checkpoint::save(&outcome.best, &best_checkpoint_path(cfg, out))?;
    checkpoint::save(&outcome.last, &out.join("last.ckpt"))?;
    let mut log = String::from("epoch,loss,train_mae,train_obo,val_mae,val_obo\n");
    for r in &outcome.epochs {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{}",
            r.epoch,
            r.loss,
            r.train_mae,
            r.train_obo,
            opt(r.val_mae),
            opt(r.val_obo)
        );
    }
    write_text(&out.join("train_log.csv"), &log)?;
    let mut batches = String::from("epoch,batch,loss\n");
    for b in &outcome.batches {
        let _ = writeln!(batches, "{},{},{}", b.epoch, b.batch, b.loss);
    }
    write_text(&out.join("batch_log.csv"), &batches)?;
    Ok(outcome)
}

/// Loads the configured checkpoint and checks it against the config.
pub fn load_compatible(cfg: &RunConfig, command: &str) -> Result<Model> {
    let path = need(cfg.checkpoint.as_deref(), "checkpoint", command)?;
    let model = checkpoint::load(path)?;
    let diffs = config_differences(&cfg.model, &model.config);
    if !diffs.is_empty() {
        return Err(HtrmError::usage(format!(
            "checkpoint {} does not match the config: {}",
            path.display(),
            diffs.join(", ")
        )));
    }
    Ok(model)
}

/// Architecture fields that differ; the drop probability only affects
/// training and is not compared.
fn config_differences(want: &ModelConfig, got: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |name: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{name} is {a} in the config but {b} in the checkpoint"));
        }
    };
    cmp("frames", want.frames.to_string(), got.frames.to_string());
    cmp("dim", want.dim.to_string(), got.dim.to_string());
    cmp("heads", want.heads.to_string(), got.heads.to_string());
    cmp("half_window", want.half_window.to_string(), got.half_window.to_string());
    cmp("windows", format!("{:?}", want.windows), format!("{:?}", got.windows));
    cmp("positional", want.positional.to_string(), got.positional.to_string());
    cmp("self_attention", want.self_attention.to_string(), got.self_attention.to_string());
    cmp("dual_softmax", want.dual_softmax.to_string(), got.dual_softmax.to_string());
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub pairs: Vec<CountPair>,
    pub mae: f64,
    pub obo: f64,
}

impl EvalReport {
    pub fn per_video_csv(&self) -> String {
        let mut s = String::from("video_id,count,predicted\n");
        for (id, p) in self.ids.iter().zip(&self.pairs) {
            let _ = writeln!(s, "{id},{},{}", p.truth, p.predicted);
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        format!(
            "metric,value\nmae,{}\nobo,{}\nvideos,{}\n",
            self.mae,
            self.obo,
            self.pairs.len()
        )
    }

    pub fn table(&self) -> String {
        format!(
            "+--------+------------+\n\
             | metric |      value |\n\
             +--------+------------+\n\
             | MAE    | {:>10.4} |\n\
             | OBO    | {:>10.4} |\n\
             | videos | {:>10} |\n\
             +--------+------------+\n",
            self.mae,
            self.obo,
            self.pairs.len()
        )
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let data_dir = need(cfg.data_dir.as_deref(), "data_dir", "eval")?;
    let out = need(cfg.out_dir.as_deref(), "out_dir", "eval")?;
    let ds = Dataset::load(data_dir)?;
    let videos = ds.subset(cfg.eval_subset);
    let frames = cfg.model.frames;
    let mut ids = Vec::with_capacity(videos.len());
    let mut targets = Vec::with_capacity(videos.len());
    for v in &videos {
        let (density, count) = target(v, frames, &cfg.sigma)?;
        if count == 0 {
            return Err(HtrmError::data(format!(
                "video {} has no annotated cycles; MAE needs counts of at least 1",
                v.id
            )));
        }
        ids.push(v.id.clone());
        targets.push((density, count));
    }
    let pairs: Vec<CountPair> = match cfg.predictor {
        Predictor::Model => {
            let model = load_compatible(cfg, "eval")?;
            count_pairs(&model, &prepare_all(&model, &videos, &cfg.sigma)?)?
        }
        Predictor::GroundTruth => targets
            .iter()
            .map(|(d, c)| CountPair::new(*c, count_from_density(d)))
            .collect(),
        Predictor::Zero => targets.iter().map(|(_, c)| CountPair::new(*c, 0.0)).collect(),
        Predictor::Mean => {
            let train = ds.subset(Subset::Train);
            if train.is_empty() {
                return Err(HtrmError::data("the mean predictor needs a non-empty training split"));
            }
            let mut total = 0.0;
            for v in &train {
                total += target(v, frames, &cfg.sigma)?.1 as f64;
            }
            let mean = total / train.len() as f64;
            targets.iter().map(|(_, c)| CountPair::new(*c, mean)).collect()
        }
    };
    let report = EvalReport {
        ids,
        mae: mae(&pairs).map_err(|e| HtrmError::data(e.to_string()))?,
        obo: obo(&pairs).map_err(|e| HtrmError::data(e.to_string()))?,
        pairs,
    };
    create_dir(out)?;
    write_text(&out.join("per_video.csv"), &report.per_video_csv())?;
    write_text(&out.join("metrics.csv"), &report.metrics_csv())?;
    Ok(report)
}

/// Predicts the density of the `features` file and writes `density.csv`.
pub fn cmd_infer(cfg: &RunConfig) -> Result<DensityMap> {
    let features = need(cfg.features.as_deref(), "features", "infer")?;
    let out = need(cfg.out_dir.as_deref(), "out_dir", "infer")?;
    let model = load_compatible(cfg, "infer")?;
    let density = model.predict(&FeatureSequence::load(features)?)?;
    let mut csv = String::from("frame,density\n");
    for (i, v) in density.values.iter().enumerate() {
        let _ = writeln!(csv, "{i},{v}");
    }
    create_dir(out)?;
    write_text(&out.join("density.csv"), &csv)?;
    Ok(density)
}

fn find_video<'a>(ds: &'a Dataset, id: &str) -> Result<&'a Video> {
    ds.videos
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| HtrmError::usage(format!("video {id:?} is not in the dataset")))
}

/// Heatmaps of one video: every stack channel per scale, the mean of the
/// similarity channels per scale, and the cosine similarity of the decoded
/// features; plus predicted and ground-truth densities.
pub fn cmd_viz(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data_dir = need(cfg.data_dir.as_deref(), "data_dir", "viz")?;
    let out = need(cfg.out_dir.as_deref(), "out_dir", "viz")?;
    let id = need(cfg.video.as_deref(), "video", "viz")?;
    let model = load_compatible(cfg, "viz")?;
    let ds = Dataset::load(data_dir)?;
    let video = find_video(&ds, id)?;
    let (truth, _) = target(video, model.config.frames, &cfg.sigma)?;
    let scales = model.prepare(&video.features)?;
    let trace = model.trace(&scales, &RmdPolicy::inference(), &mut ChaCha8Rng::seed_from_u64(0))?;

    create_dir(out)?;
    let mut written = Vec::new();
    let heads = model.config.heads;
    for (s, stack) in trace.stacks.iter().enumerate() {
        for c in 0..stack.channels() {
            let path = out.join(format!("tssm_scale{}_ch{c}.pgm", s + 1));
            write_pgm(&path, &stack.channel(c))?;
            written.push(path);
        }
        let mut mean = stack.channel(0);
        for c in 1..heads {
            let ch = stack.channel(c);
            mean.data_mut().iter_mut().zip(ch.data()).for_each(|(m, x)| *m += x);
        }
        let mean = mean.map(|x| x / heads as f64);
        let path = out.join(format!("tssm_scale{}_mean.pgm", s + 1));
        write_pgm(&path, &mean)?;
        written.push(path);
    }
    let path = out.join("cosine.pgm");
    write_pgm(&path, &cosine_matrix(&trace.decoded)?)?;
    written.push(path);

    let mut csv = String::from("frame,predicted,ground_truth\n");
    for (i, (p, t)) in trace.density.values.iter().zip(&truth.values).enumerate() {
        let _ = writeln!(csv, "{i},{p},{t}");
    }
    let path = out.join("density.csv");
    write_text(&path, &csv)?;
    written.push(path);
    Ok(written)
}
