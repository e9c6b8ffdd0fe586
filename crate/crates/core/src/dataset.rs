//! On-disk datasets.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.csv      video_id,path,frames   (path relative to the directory)
//! annotations.csv   video_id,start_frame,end_frame
//! features/<id>.bin per-video feature tensors
//! train.txt, val.txt, test.txt   optional fixed splits, one id per line
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HtrmError, Result};
use crate::features::{generate_synthetic, sample_indices, FeatureSequence, ScaleSet, SyntheticSpec};
use crate::metrics::{annotations_to_density_with, CycleAnnotation, DensityMap, SigmaRule};
use crate::regressor::Model;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const FEATURES_DIR: &str = "features";
pub const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: FeatureSequence,
    /// Cycles in raw frame indices.
    pub annotation: CycleAnnotation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    /// Fixed splits read from the split files, if present.
    pub fixed_split: Option<Split>,
}

/// Indices into `Dataset::videos`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

impl Subset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            _ => Err(HtrmError::usage(format!(
                "unknown subset {s:?}, expected train, val, test or all"
            ))),
        }
    }
}

impl Split {
    pub fn indices(&self, subset: Subset, total: usize) -> Vec<usize> {
        match subset {
            Subset::Train => self.train.clone(),
            Subset::Val => self.val.clone(),
            Subset::Test => self.test.clone(),
            Subset::All => (0..total).collect(),
        }
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Buckets `0..8` train, `8` val, `9` test, by a hash of the video id.
pub fn hash_split(ids: &[&str]) -> Split {
    let mut split = Split::default();
    for (i, id) in ids.iter().enumerate() {
        match fnv1a(id.as_bytes()) % 10 {
            0..=7 => split.train.push(i),
            8 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    split
}

impl Dataset {
    pub fn ids(&self) -> Vec<&str> {
        self.videos.iter().map(|v| v.id.as_str()).collect()
    }

    /// Fixed split if one was provided, otherwise the hash split.
    pub fn split(&self) -> Split {
        self.fixed_split
            .clone()
            .unwrap_or_else(|| hash_split(&self.ids()))
    }

    pub fn subset(&self, subset: Subset) -> Vec<&Video> {
        self.split()
            .indices(subset, self.videos.len())
            .into_iter()
            .map(|i| &self.videos[i])
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut cycles = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let mut videos = Vec::with_capacity(manifest.len());
        for entry in manifest {
            let path = dir.join(&entry.path);
            let features = FeatureSequence::load(&path)?;
            if features.frames() != entry.frames {
                return Err(HtrmError::data(format!(
                    "{}: manifest says {} frames, file has {}",
                    entry.id,
                    entry.frames,
                    features.frames()
                )));
            }
            let spans = cycles.remove(&entry.id).unwrap_or_default();
            let annotation = CycleAnnotation::new(spans, entry.frames)
                .map_err(|e| HtrmError::data(format!("{}: {e}", entry.id)))?;
            videos.push(Video {
                id: entry.id,
                features,
                annotation,
            });
        }
        if let Some(id) = cycles.keys().next() {
            return Err(HtrmError::data(format!(
                "{ANNOTATIONS_FILE} mentions {id:?}, which is not in the manifest"
            )));
        }
        let fixed_split = read_split_files(dir, &videos)?;
        Ok(Dataset {
            videos,
            fixed_split,
        })
    }

    /// Writes features, manifest and annotations; the split files only if
    /// `fixed_split` is set.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let features_dir = dir.join(FEATURES_DIR);
        fs::create_dir_all(&features_dir).map_err(|e| HtrmError::io(&features_dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = csv_writer(&manifest_path)?;
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let mut ann = csv_writer(&ann_path)?;
        write_row(&mut manifest, &manifest_path, &["video_id", "path", "frames"])?;
        write_row(&mut ann, &ann_path, &["video_id", "start_frame", "end_frame"])?;
        for v in &self.videos {
            let rel = format!("{FEATURES_DIR}/{}.bin", v.id);
            v.features.save(&dir.join(&rel))?;
            let frames = v.features.frames().to_string();
            write_row(&mut manifest, &manifest_path, &[&v.id, &rel, &frames])?;
            for &(s, e) in v.annotation.cycles() {
                write_row(&mut ann, &ann_path, &[&v.id, &s.to_string(), &e.to_string()])?;
            }
        }
        manifest.flush().map_err(|e| HtrmError::io(&manifest_path, e))?;
        ann.flush().map_err(|e| HtrmError::io(&ann_path, e))?;
        if let Some(split) = &self.fixed_split {
            for (name, idx) in SPLIT_FILES.iter().zip([&split.train, &split.val, &split.test]) {
                let text: String = idx.iter().map(|&i| format!("{}\n", self.videos[i].id)).collect();
                let path = dir.join(name);
                fs::write(&path, text).map_err(|e| HtrmError::io(&path, e))?;
            }
        }
        Ok(())
    }
}

struct ManifestEntry {
    id: String,
    path: String,
    frames: usize,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| HtrmError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| HtrmError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[&str]) -> Result<()> {
    w.write_record(row)
        .map_err(|e| HtrmError::data(format!("{}: {e}", path.display())))
}

fn check_header(reader: &mut csv::Reader<fs::File>, path: &Path, want: &[&str]) -> Result<()> {
    let header = reader
        .headers()
        .map_err(|e| HtrmError::data(format!("{}: {e}", path.display())))?;
    if header.iter().ne(want.iter().copied()) {
        return Err(HtrmError::data(format!(
            "{}: header {:?}, expected {}",
            path.display(),
            header.iter().collect::<Vec<_>>(),
            want.join(",")
        )));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| {
        HtrmError::data(format!("{}:{line}: {name} {s:?} is not a valid integer", path.display()))
    })
}

fn records(
    path: &Path,
    header: &[&str],
) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, path, header)?;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| HtrmError::data(format!("{}: {e}", path.display())))?;
            let line = r.position().map_or(0, |p| p.line());
            Ok((line, r))
        })
        .collect()
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (line, r) in records(path, &["video_id", "path", "frames"])? {
        let id = r[0].to_string();
        if id.is_empty() {
            return Err(HtrmError::data(format!("{}:{line}: empty video_id", path.display())));
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(HtrmError::data(format!(
                "{}:{line}: duplicate video_id {id:?}",
                path.display()
            )));
        }
        out.push(ManifestEntry {
            id,
            path: r[1].to_string(),
            frames: parse_field(path, line, "frames", &r[2])?,
        });
    }
    Ok(out)
}

fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    let mut out: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (line, r) in records(path, &["video_id", "start_frame", "end_frame"])? {
        let s = parse_field(path, line, "start_frame", &r[1])?;
        let e = parse_field(path, line, "end_frame", &r[2])?;
        out.entry(r[0].to_string()).or_default().push((s, e));
    }
    Ok(out)
}

fn read_split_files(dir: &Path, videos: &[Video]) -> Result<Option<Split>> {
    let present: Vec<PathBuf> = SPLIT_FILES
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| p.exists())
        .collect();
    if present.is_empty() {
        return Ok(None);
    }
    let index: BTreeMap<&str, usize> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.as_str(), i))
        .collect();
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (name, part) in SPLIT_FILES.iter().zip(parts.iter_mut()) {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| HtrmError::io(&path, e))?;
        for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let &i = index.get(id).ok_or_else(|| {
                HtrmError::data(format!("{}: unknown video_id {id:?}", path.display()))
            })?;
            part.push(i);
        }
    }
    let [train, val, test] = parts;
    Ok(Some(Split { train, val, test }))
}

/// Maps raw-frame cycles onto the `frames` sampled frames.
///
/// A cycle keeps the sampled frames whose source index falls inside it.
/// Inputs that are padded rather than sampled keep their spans unchanged.
pub fn resample_annotation(
    ann: &CycleAnnotation,
    raw_frames: usize,
    frames: usize,
) -> Result<CycleAnnotation> {
    if raw_frames <= frames {
        return CycleAnnotation::new(ann.cycles().to_vec(), frames);
    }
    let idx = sample_indices(raw_frames, frames);
    let first_at_or_after = |x: usize| idx.partition_point(|&i| i < x);
    let mut cycles = Vec::with_capacity(ann.count());
    for &(s, e) in ann.cycles() {
        let (s2, e2) = (first_at_or_after(s), first_at_or_after(e));
        if s2 == e2 {
            return Err(HtrmError::data(format!(
                "cycle [{s}, {e}) vanishes when {raw_frames} frames are sampled down to {frames}"
            )));
        }
        cycles.push((s2, e2));
    }
    CycleAnnotation::new(cycles, frames)
}

/// A video ready for the model: scales, target density and count.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scales: ScaleSet,
    pub density: DensityMap,
    pub count: usize,
}

/// Ground-truth density and count of a video sampled to `frames` frames.
pub fn target(video: &Video, frames: usize, sigma: &SigmaRule) -> Result<(DensityMap, usize)> {
    let ann = resample_annotation(&video.annotation, video.features.frames(), frames)
        .map_err(|e| HtrmError::data(format!("{}: {e}", video.id)))?;
    Ok((annotations_to_density_with(&ann, frames, *sigma)?, ann.count()))
}

pub fn prepare(model: &Model, video: &Video, sigma: &SigmaRule) -> Result<Sample> {
    let scales = model
        .prepare(&video.features)
        .map_err(|e| HtrmError::data(format!("{}: {e}", video.id)))?;
    let (density, count) = target(video, model.config.frames, sigma)?;
    Ok(Sample {
        id: video.id.clone(),
        scales,
        density,
        count,
    })
}

pub fn prepare_all(model: &Model, videos: &[&Video], sigma: &SigmaRule) -> Result<Vec<Sample>> {
    videos.iter().map(|v| prepare(model, v, sigma)).collect()
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasetSpec {
    pub videos: usize,
    /// Inclusive cycle-count range.
    pub count_range: (usize, usize),
    pub cycle_length_range: (usize, usize),
    /// Lower bound on the fraction of frames covered by cycles, as far as
    /// the length range allows.
    pub min_coverage: f64,
    pub interruption_prob: f64,
    pub noise_sigma: f64,
    pub frames: usize,
    pub dim: usize,
    pub seed: u64,
    /// Sizes of fixed train/val/test splits, in id order; hash split if absent.
    pub split: Option<[usize; 3]>,
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count_range;
        if lo > hi {
            return Err(HtrmError::usage(format!("count range ({lo}, {hi}) is empty")));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(HtrmError::usage("minimum coverage must lie in [0, 1]"));
        }
        if let Some(s) = self.split {
            if s.iter().sum::<usize>() != self.videos {
                return Err(HtrmError::usage(format!(
                    "split sizes {s:?} do not add up to {} videos",
                    self.videos
                )));
            }
        }
        let (min_len, max_len) = self.cycle_length_range;
        if min_len == 0 || min_len > max_len {
            return Err(HtrmError::usage(format!(
                "cycle length range ({min_len}, {max_len}) must satisfy 1 <= min <= max"
            )));
        }
        // Probabilities, noise and feasibility of the largest count.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.video_spec(hi, &mut rng).validate()
    }

    /// Each video has a base period drawn from the length range, bounded so
    /// its cycles fit and cover at least `min_coverage` of the timeline;
    /// cycle lengths stay within 20% of the base period.
    fn video_spec(&self, count: usize, rng: &mut impl Rng) -> SyntheticSpec {
        let (lo, hi) = self.cycle_length_range;
        let (floor, cap) = if count == 0 {
            (lo, hi)
        } else {
            let cap = hi.min(self.frames / count).max(lo);
            let want = (self.min_coverage * self.frames as f64 / count as f64).ceil() as usize;
            (want.clamp(lo, cap), cap)
        };
        let base = rng.random_range(floor..=cap) as f64;
        let range = (
            ((0.8 * base).round() as usize).max(lo),
            ((1.2 * base).round() as usize).min(cap).max(lo),
        );
        SyntheticSpec {
            num_cycles: count,
            cycle_length_range: range,
            interruption_prob: self.interruption_prob,
            noise_sigma: self.noise_sigma,
            dim: self.dim,
            frames: self.frames,
            seed: rng.random(),
        }
    }
}

/// Video ids are `vid_00000`, `vid_00001`, ...; per-video periods and seeds
/// are drawn from the dataset seed.
pub fn synthesize(spec: &SynthDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.videos);
    for i in 0..spec.videos {
        let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
        let (features, annotation) = generate_synthetic(&spec.video_spec(count, &mut rng))?;
        // Match the precision of the feature files.
        let features = FeatureSequence::new(features.into_values().map(|x| x as f32 as f64))?;
        videos.push(Video {
            id: format!("vid_{i:05}"),
            features,
            annotation,
        });
    }
    let fixed_split = spec.split.map(|[a, b, _]| Split {
        train: (0..a).collect(),
        val: (a..a + b).collect(),
        test: (a + b..spec.videos).collect(),
    });
    Ok(Dataset {
        videos,
        fixed_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(videos: usize, seed: u64) -> SynthDatasetSpec {
        SynthDatasetSpec {
            videos,
            count_range: (2, 8),
            cycle_length_range: (3, 16),
            min_coverage: 0.6,
            interruption_prob: 0.2,
            noise_sigma: 0.1,
            frames: 32,
            dim: 8,
            seed,
            split: None,
        }
    }

    fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synthesize(&spec(12, 3)).unwrap();
        ds.fixed_split = Some(Split {
            train: vec![0, 1, 2, 3, 4, 5, 6, 7],
            val: vec![8, 9],
            test: vec![10, 11],
        });
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn synthesis_is_deterministic_and_within_range() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synthesize(&spec(20, 9)).unwrap().save(a.path()).unwrap();
        synthesize(&spec(20, 9)).unwrap().save(b.path()).unwrap();
        assert_eq!(read_tree(a.path()), read_tree(b.path()));
        for v in synthesize(&spec(50, 10)).unwrap().videos {
            let n = v.annotation.count();
            assert!((2..=8).contains(&n));
            let covered: usize = v.annotation.cycles().iter().map(|(s, e)| e - s).sum();
            // Jitter can shave up to 20% off the 60% target.
            assert!(covered as f64 >= 0.8 * 0.6 * 32.0 - n as f64, "{covered} frames in {n} cycles");
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        synthesize(&spec(0, 1)).unwrap().save(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest, "video_id,path,frames\n");
        assert!(Dataset::load(dir.path()).unwrap().videos.is_empty());
    }

    #[test]
    fn hash_split_is_disjoint_and_covering() {
        let ids: Vec<String> = (0..1000).map(|i| format!("vid_{i:05}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = hash_split(&refs);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!((700..900).contains(&s.train.len()), "{}", s.train.len());
        assert!((50..150).contains(&s.val.len()));
        assert_eq!(hash_split(&refs), s);
    }

    #[test]
    fn bad_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        synthesize(&spec(3, 4)).unwrap().save(dir.path()).unwrap();
        let ann = dir.path().join(ANNOTATIONS_FILE);
        let good = fs::read_to_string(&ann).unwrap();

        fs::write(&ann, good.replace("start_frame", "begin")).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);
        fs::write(&ann, format!("{good}ghost,0,1\n")).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);
        fs::write(&ann, format!("{good}vid_00000,1,x\n")).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);
        fs::write(&ann, format!("{good}vid_00000,0,99\n")).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);

        fs::write(&ann, &good).unwrap();
        fs::write(dir.path().join("val.txt"), "nobody\n").unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn resampling_follows_sampled_indices() {
        // 64 raw frames to 32: sampled index i is round(i * 63 / 31).
        let ann = CycleAnnotation::new(vec![(0, 10), (10, 21), (40, 64)], 64).unwrap();
        let out = resample_annotation(&ann, 64, 32).unwrap();
        let idx = sample_indices(64, 32);
        for (&(s, e), &(s2, e2)) in ann.cycles().iter().zip(out.cycles()) {
            for (i, &src) in idx.iter().enumerate() {
                assert_eq!((s2..e2).contains(&i), (s..e).contains(&src), "frame {i}");
            }
        }
        let short = CycleAnnotation::new(vec![(1, 2)], 64).unwrap();
        assert!(resample_annotation(&short, 64, 8).is_err());
        let padded = CycleAnnotation::new(vec![(1, 5)], 10).unwrap();
        assert_eq!(resample_annotation(&padded, 10, 32).unwrap().cycles(), &[(1, 5)]);
    }
}
