//! Datasets, class-incremental task splits, label-scarce subsets and replay.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Magic prefix of a feature file.
pub const FEATURE_MAGIC: &[u8; 5] = b"CRLF1";

/// A log-magnitude spectrogram stored frequency-major: `data[f * frames + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    data: Vec<f32>,
}

impl Spectrogram {
    pub fn new(bins: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if bins == 0 || frames == 0 {
            return Err(Error::Usage(format!("empty spectrogram {bins}x{frames}")));
        }
        if data.len() != bins * frames {
            return Err(Error::Usage(format!(
                "spectrogram {bins}x{frames} given {} values",
                data.len()
            )));
        }
        Ok(Spectrogram { bins, frames, data })
    }

    pub fn filled(bins: usize, frames: usize, value: f32) -> Self {
        Spectrogram {
            bins,
            frames,
            data: vec![value; bins * frames],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, f: usize, n: usize) -> f32 {
        self.data[f * self.frames + n]
    }

    pub fn set(&mut self, f: usize, n: usize, v: f32) {
        self.data[f * self.frames + n] = v;
    }

    pub fn row(&self, f: usize) -> &[f32] {
        &self.data[f * self.frames..(f + 1) * self.frames]
    }

    pub fn row_mut(&mut self, f: usize) -> &mut [f32] {
        &mut self.data[f * self.frames..(f + 1) * self.frames]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be train or test, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramClip {
    pub clip_id: String,
    pub features: Spectrogram,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub clips: Vec<SpectrogramClip>,
    pub fold_of: Option<BTreeMap<String, u32>>,
}

impl Dataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(name: impl Into<String>, num_classes: usize, clips: Vec<SpectrogramClip>) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            num_classes,
            clips,
            fold_of: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "dataset {} needs at least 2 classes, has {}",
                self.name, self.num_classes
            )));
        }
        let mut ids = HashSet::with_capacity(self.clips.len());
        let mut seen = vec![[false; 2]; self.num_classes];
        let shape = self.clips.first().map(|c| (c.features.bins(), c.features.frames()));
        for clip in &self.clips {
            if !ids.insert(clip.clip_id.as_str()) {
                return Err(Error::Config(format!("duplicate clip id {}", clip.clip_id)));
            }
            if clip.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "clip {} has label {} but dataset declares {} classes",
                    clip.clip_id, clip.label, self.num_classes
                )));
            }
            if Some((clip.features.bins(), clip.features.frames())) != shape {
                return Err(Error::Config(format!("clip {} has a different shape", clip.clip_id)));
            }
            if !clip.features.is_finite() {
                return Err(Error::Config(format!("clip {} has non-finite features", clip.clip_id)));
            }
            seen[clip.label][clip.split as usize] = true;
        }
        for (class, [train, test]) in seen.iter().enumerate() {
            if !train || !test {
                return Err(Error::Config(format!(
                    "class {class} must appear in both train and test splits of {}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// `(bins, frames)` of every clip.
    pub fn feature_shape(&self) -> (usize, usize) {
        self.clips
            .first()
            .map_or((0, 0), |c| (c.features.bins(), c.features.frames()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SpectrogramClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Reassigns splits so that clips in `fold` become the test split and all
    /// other folds become train.
    pub fn with_test_fold(&self, fold: u32) -> Result<Dataset> {
        let folds = self
            .fold_of
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset {} has no fold column", self.name)))?;
        let mut clips = self.clips.clone();
        for clip in &mut clips {
            let f = folds
                .get(&clip.clip_id)
                .ok_or_else(|| Error::Config(format!("clip {} has no fold assignment", clip.clip_id)))?;
            clip.split = if *f == fold { Split::Test } else { Split::Train };
        }
        let ds = Dataset {
            name: format!("{}-fold{fold}", self.name),
            num_classes: self.num_classes,
            clips,
            fold_of: self.fold_of.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parameters of the synthetic spectrogram corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.freq_bins < 16 {
            return Err(Error::Config(format!(
                "freq_bins must be >= 16, got {}",
                self.freq_bins
            )));
        }
        if self.frames < 32 {
            return Err(Error::Config(format!("frames must be >= 32, got {}", self.frames)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "every class needs at least one train and one test clip".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        format!("synthetic-c{}-s{}", self.num_classes, self.seed)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let templates = ClassTemplate::draw_all(self);
        let mut clips = Vec::with_capacity(self.num_classes * (self.train_per_class + self.test_per_class));
        for (split, per_class) in [(Split::Train, self.train_per_class), (Split::Test, self.test_per_class)] {
            for (class, template) in templates.iter().enumerate() {
                for index in 0..per_class {
                    let stream = ((split as u64) << 40) | ((class as u64) << 20) | index as u64;
                    let mut rng = rng::stream(self.seed, Purpose::Synthetic, stream + 1);
                    let features = template.render(self, &mut rng);
                    clips.push(SpectrogramClip {
                        clip_id: format!("{}-c{class:03}-{index:05}", split.as_str()),
                        features,
                        label: class,
                        split,
                    });
                }
            }
        }
        Dataset::new(self.dataset_name(), self.num_classes, clips)
    }
}

/// Convenience wrapper around [`SyntheticSpec::generate`].
pub fn generate_synthetic(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    freq_bins: usize,
    frames: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec {
        num_classes,
        train_per_class,
        test_per_class,
        freq_bins,
        frames,
        noise_sigma,
        seed,
    }
    .generate()
}

/// Per-class generative parameters, in units of bins and cycles per frame.
#[derive(Clone, Debug)]
struct ClassTemplate {
    center: f64,
    band_width: f64,
    fundamental: f64,
    spacing: f64,
    am_rate: f64,
}

const FLOOR: f64 = 0.02;

impl ClassTemplate {
    fn draw_all(spec: &SyntheticSpec) -> Vec<ClassTemplate> {
        let c = spec.num_classes;
        let f = spec.freq_bins as f64;
        let mut rng = rng::stream(spec.seed, Purpose::Synthetic, 0);
        // Independent permutations decorrelate the three class attributes.
        let mut perms: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let mut p: Vec<usize> = (0..c).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let am_perm = perms.pop().unwrap_or_default();
        let spacing_perm = perms.pop().unwrap_or_default();
        let center_perm = perms.pop().unwrap_or_default();
        let denom = (c - 1).max(1) as f64;
        (0..c)
            .map(|k| {
                let center_pos = center_perm[k] as f64 / denom;
                let spacing_pos = spacing_perm[k] as f64 / denom;
                let am_pos = am_perm[k] as f64 / denom;
                ClassTemplate {
                    center: f * (0.12 + 0.76 * center_pos),
                    band_width: (f / 40.0).max(0.8),
                    fundamental: f * 0.04 + rng.random_range(0.0..1.0),
                    spacing: f * (0.05 + 0.12 * spacing_pos),
                    am_rate: 1.0 / 48.0 + am_pos * (1.0 / 8.0 - 1.0 / 48.0),
                }
            })
            .collect()
    }

    fn render(&self, spec: &SyntheticSpec, rng: &mut impl Rng) -> Spectrogram {
        let bins = spec.freq_bins;
        let frames = spec.frames;
        let phase = rng.random_range(0.0..2.0 * PI);
        let jitter = rng.random_range(-0.5..0.5);
        let gain = rng.random_range(0.7..1.3);
        let depth = rng.random_range(0.6..0.95);
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).ok();

        let mut envelope = vec![0.0f64; bins];
        for (fi, e) in envelope.iter_mut().enumerate() {
            let x = fi as f64;
            let band = (-0.5 * ((x - self.center - jitter) / self.band_width).powi(2)).exp();
            let mut harm = 0.0;
            let mut h = 0;
            loop {
                let peak = self.fundamental + jitter + h as f64 * self.spacing;
                if peak > bins as f64 + 2.0 {
                    break;
                }
                harm += 0.6 * 0.8f64.powi(h) * (-0.5 * ((x - peak) / 0.7).powi(2)).exp();
                h += 1;
            }
            *e = gain * (band + harm);
        }

        let mut data = Vec::with_capacity(bins * frames);
        for e in &envelope {
            for n in 0..frames {
                let am = 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * self.am_rate * n as f64 + phase).sin());
                let mut v = (FLOOR + e * am).ln();
                if let Some(dist) = &noise {
                    if spec.noise_sigma > 0.0 {
                        v += dist.sample(rng);
                    }
                }
                data.push(v as f32);
            }
        }
        Spectrogram { bins, frames, data }
    }
}

/// An ordered class-disjoint partition of the label set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub num_tasks: usize,
    pub class_order: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
    pub seed: u64,
}

impl TaskSequence {
    /// Classes of task `t` (1-based).
    pub fn classes(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.num_tasks {
            return Err(Error::Usage(format!("task {t} out of range 1..={}", self.num_tasks)));
        }
        Ok(&self.tasks[t - 1])
    }

    /// All classes of tasks `1..=t`, in task order.
    pub fn classes_through(&self, t: usize) -> Result<Vec<usize>> {
        self.classes(t)?;
        Ok(self.tasks[..t].concat())
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|cs| cs.contains(&class)).map(|i| i + 1)
    }
}

/// Shuffles the classes with `seed` and deals them contiguously into `t`
/// tasks; the first `C mod T` tasks take one extra class.
pub fn split_tasks(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    split_classes(dataset.num_classes, num_tasks, seed)
}

pub fn split_classes(num_classes: usize, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::Config("number of tasks must be >= 1".into()));
    }
    if num_tasks > num_classes {
        return Err(Error::Config(format!(
            "cannot split {num_classes} classes into {num_tasks} tasks"
        )));
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng::stream(seed, Purpose::TaskSplit, 0));
    let base = num_classes / num_tasks;
    let extra = num_classes % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let len = base + usize::from(t < extra);
        tasks.push(class_order[start..start + len].to_vec());
        start += len;
    }
    Ok(TaskSequence {
        num_tasks,
        class_order,
        tasks,
        seed,
    })
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub task_index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<SpectrogramClip>,
    pub test: Vec<SpectrogramClip>,
}

/// Filters `dataset` to the classes of task `t` (1-based), keeping dataset order.
pub fn materialize_task(dataset: &Dataset, seq: &TaskSequence, t: usize) -> Result<TaskDataset> {
    let classes = seq.classes(t)?.to_vec();
    let wanted: BTreeSet<usize> = classes.iter().copied().collect();
    let pick = |split| {
        dataset
            .split(split)
            .filter(|c| wanted.contains(&c.label))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok(TaskDataset {
        task_index: t,
        train: pick(Split::Train),
        test: pick(Split::Test),
        classes,
    })
}

/// Class-stratified sample of at most `budget` training clips.
///
/// Quotas are dealt one clip at a time to classes in a seeded order, skipping
/// exhausted classes, so per-class counts differ by at most one whenever the
/// class sizes allow it. The result keeps the input order. When the budget
/// covers the whole list the input is returned unchanged.
pub fn slep_subset(task_train: &[SpectrogramClip], budget: usize, seed: u64) -> Result<Vec<SpectrogramClip>> {
    let picked = slep_indices(task_train, budget, seed)?;
    Ok(picked.into_iter().map(|i| task_train[i].clone()).collect())
}

pub(crate) fn slep_indices(task_train: &[SpectrogramClip], budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::Usage("SLEP budget must be >= 1".into()));
    }
    if task_train.is_empty() {
        return Err(Error::Usage("cannot draw a SLEP subset from an empty task".into()));
    }
    if let Some(bad) = task_train.iter().find(|c| c.split != Split::Train) {
        return Err(Error::Usage(format!(
            "SLEP subset given non-train clip {}",
            bad.clip_id
        )));
    }
    if budget >= task_train.len() {
        return Ok((0..task_train.len()).collect());
    }
    let mut rng = rng::stream(seed, Purpose::Slep, 0);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, clip) in task_train.iter().enumerate() {
        by_class.entry(clip.label).or_default().push(i);
    }
    let mut pools: Vec<Vec<usize>> = by_class.into_values().collect();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut order: Vec<usize> = (0..pools.len()).collect();
    order.shuffle(&mut rng);

    let mut quota = vec![0usize; pools.len()];
    let mut remaining = budget;
    while remaining > 0 {
        let mut progressed = false;
        for &k in &order {
            if remaining == 0 {
                break;
            }
            if quota[k] < pools[k].len() {
                quota[k] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut picked: Vec<usize> = pools
        .iter()
        .zip(&quota)
        .flat_map(|(pool, &q)| pool[..q].iter().copied())
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    #[default]
    None,
    Full,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    pub mode: ReplayMode,
    pub stored: Vec<SpectrogramClip>,
}

impl ReplayBuffer {
    pub fn new(mode: ReplayMode) -> Self {
        ReplayBuffer {
            mode,
            stored: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }
}

/// Adds a finished task's training clips to the buffer (full mode only).
pub fn replay_extend(mut buffer: ReplayBuffer, task_train: &[SpectrogramClip]) -> ReplayBuffer {
    match buffer.mode {
        ReplayMode::None => buffer.stored.clear(),
        ReplayMode::Full => buffer.stored.extend_from_slice(task_train),
    }
    buffer
}

// ---------------------------------------------------------------------------
// Manifest and feature files

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    clip_id: String,
    path: String,
    label: String,
    split: String,
    #[serde(default)]
    fold: Option<String>,
}

pub fn read_feature_file(path: &Path) -> Result<Spectrogram> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|msg| Error::ingestion(path.display().to_string(), msg))
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Spectrogram, String> {
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err("missing CRLF1 magic".into());
    }
    let bins = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != bins * frames * 4 {
        return Err(format!(
            "header declares {bins}x{frames} but body holds {} bytes",
            body.len()
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Spectrogram::new(bins, frames, data).map_err(|e| e.to_string())
}

pub fn encode_features(spec: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + spec.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(spec.bins as u32).to_le_bytes());
    out.extend_from_slice(&(spec.frames as u32).to_le_bytes());
    for v in &spec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_feature_file(path: &Path, spec: &Spectrogram) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_features(spec)).map_err(|e| Error::io(path, e))
}

/// Loads a CSV manifest (`clip_id,path,label,split,fold`). Feature paths are
/// resolved relative to the manifest's directory. The class count is one more
/// than the largest label.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(manifest_path)
        .map_err(|e| Error::ingestion(manifest_path.display().to_string(), e.to_string()))?;
    let mut clips = Vec::new();
    let mut folds = BTreeMap::new();
    let mut shape: Option<(usize, usize)> = None;
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let loc = format!("{} row {line}", manifest_path.display());
        let row = row.map_err(|e| Error::ingestion(&loc, e.to_string()))?;
        let label: usize =
            row.label.trim().parse().map_err(|_| {
                Error::ingestion(&loc, format!("unknown label {:?} for clip {}", row.label, row.clip_id))
            })?;
        let split: Split = row.split.parse().map_err(|e: String| Error::ingestion(&loc, e))?;
        let path: PathBuf = base.join(&row.path);
        if !path.exists() {
            return Err(Error::ingestion(
                &loc,
                format!("feature file {} does not exist", path.display()),
            ));
        }
        let features = read_feature_file(&path).map_err(|e| Error::ingestion(&loc, e.to_string()))?;
        let dims = (features.bins(), features.frames());
        match shape {
            None => shape = Some(dims),
            Some(expected) if expected != dims => {
                return Err(Error::ingestion(
                    &loc,
                    format!(
                        "clip {} has shape {}x{}, expected {}x{} (bins x frames)",
                        row.clip_id, dims.0, dims.1, expected.0, expected.1
                    ),
                ));
            }
            Some(_) => {}
        }
        if let Some(fold) = row.fold.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            let fold: u32 = fold
                .parse()
                .map_err(|_| Error::ingestion(&loc, format!("fold {fold:?} is not an integer")))?;
            folds.insert(row.clip_id.clone(), fold);
        }
        clips.push(SpectrogramClip {
            clip_id: row.clip_id,
            features,
            label,
            split,
        });
    }
    if clips.is_empty() {
        return Err(Error::ingestion(
            manifest_path.display().to_string(),
            "manifest has no rows",
        ));
    }
    let num_classes = clips.iter().map(|c| c.label).max().unwrap_or(0) + 1;
    let name = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let ds = Dataset {
        name,
        num_classes,
        clips,
        fold_of: (!folds.is_empty()).then_some(folds),
    };
    ds.validate()
        .map_err(|e| Error::ingestion(manifest_path.display().to_string(), e.to_string()))?;
    Ok(ds)
}

/// Writes `dataset` as `manifest.csv` plus one feature file per clip under
/// `dir/features/`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    for clip in &dataset.clips {
        let rel = format!("features/{}.bin", clip.clip_id);
        write_feature_file(&dir.join(&rel), &clip.features)?;
        let fold = dataset
            .fold_of
            .as_ref()
            .and_then(|f| f.get(&clip.clip_id))
            .map(u32::to_string);
        writer
            .serialize(ManifestRow {
                clip_id: clip.clip_id.clone(),
                path: rel,
                label: clip.label.to_string(),
                split: clip.split.as_str().to_string(),
                fold,
            })
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
