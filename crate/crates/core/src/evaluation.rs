//! Linear-probe protocols and continual-learning metrics.
//!
//! After task `t` a fresh linear classifier is trained on the frozen encoder's
//! outputs and scored on the test split of every task seen so far, filling row
//! `t` of the accuracy matrix `A[t][j]`. From the matrix:
//!
//! * average accuracy `Ā_t = (1/t) Σ_{j≤t} A[t][j]`, with `Ā = Ā_T`;
//! * forgetting `F̄ = 1/(T-1) Σ_{j<T} max_{τ=1..T} (A[τ][j] - A[T][j])`.
//!
//! The maximum runs over every checkpoint including `T`, so each column term
//! is non-negative.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::center_segment;
use crate::dataspec::{slep_subset, Dataset, SpectrogramClip, Split, TaskDataset};
use crate::nncore::{train_step, Batch, ClassifierHead, Embeddings, Encoder, Optimizer, OptimizerKind, ParamGroup};
use crate::objectives::cross_entropy;
use crate::rng::{self, Purpose};
use crate::tensor::Mat;
use crate::{Error, Result};

const FEATURE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Lep,
    Slep,
    Flep,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Lep => "lep",
            ProtocolKind::Slep => "slep",
            ProtocolKind::Flep => "flep",
        }
    }

    pub fn in_domain(self) -> bool {
        !matches!(self, ProtocolKind::Flep)
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f32,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

fn default_probe_epochs() -> usize {
    30
}
fn default_probe_lr() -> f32 {
    1e-2
}
fn default_probe_batch() -> usize {
    32
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            batch_size: default_probe_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Labeled clips kept per task (SLEP only).
    pub slep_budget: usize,
    pub probe: ProbeConfig,
}

impl ProtocolSpec {
    pub fn lep() -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Lep,
            slep_budget: 0,
            probe: ProbeConfig::default(),
        }
    }

    pub fn slep(budget: usize) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Slep,
            slep_budget: budget,
            probe: ProbeConfig::default(),
        }
    }

    pub fn flep() -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Flep,
            slep_budget: 0,
            probe: ProbeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ProtocolKind::Slep && self.slep_budget == 0 {
            return Err(Error::Config("eval.slep_budget must be >= 1".into()));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe epochs, batch size and lr must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Accuracy matrix and metrics

/// Lower-triangular `T x T` matrix; row `t` holds `A[t][1..=t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            rows: vec![None; num_tasks],
        }
    }

    /// Builds a matrix from complete rows (`rows[t-1].len() == t`).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            m.set_row(i + 1, row)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn set_row(&mut self, t: usize, row: Vec<f64>) -> Result<()> {
        if t == 0 || t > self.num_tasks {
            return Err(Error::Usage(format!("row {t} out of range 1..={}", self.num_tasks)));
        }
        if row.len() != t {
            return Err(Error::Usage(format!("row {t} needs {t} entries, got {}", row.len())));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Usage(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows[t - 1] = Some(row);
        Ok(())
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t.wrapping_sub(1))?.as_deref()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        if j == 0 || j > t {
            return None;
        }
        self.row(t).map(|r| r[j - 1])
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(Option::is_some)
    }

    /// `(t, j, accuracy)` for every defined entry, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                out.extend(row.iter().enumerate().map(|(j, &a)| (i + 1, j + 1, a)));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,j,accuracy\n");
        for (t, j, a) in self.entries() {
            s.push_str(&format!("{t},{j},{a}\n"));
        }
        s
    }
}

/// `Ā_t`: mean of row `t`.
pub fn avg_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = m
        .row(t)
        .ok_or_else(|| Error::Usage(format!("row {t} of the accuracy matrix is not populated")))?;
    Ok(row.iter().sum::<f64>() / t as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forgetting {
    pub value: f64,
    pub warning: Option<String>,
}

/// `F̄` over a fully populated matrix. A single-task matrix has no forgetting
/// and yields 0 with a warning.
pub fn forgetting(m: &AccuracyMatrix) -> Result<Forgetting> {
    if !m.is_complete() {
        return Err(Error::Usage(
            "forgetting needs a fully populated accuracy matrix".into(),
        ));
    }
    let t_final = m.num_tasks();
    if t_final < 2 {
        let warning = "forgetting is undefined for a single task; reporting 0".to_string();
        log::warn!("{warning}");
        return Ok(Forgetting {
            value: 0.0,
            warning: Some(warning),
        });
    }
    let mut total = 0.0;
    for j in 1..t_final {
        let last = m.get(t_final, j).expect("complete");
        let peak = (j..=t_final)
            .filter_map(|tau| m.get(tau, j))
            .map(|a| a - last)
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak;
    }
    Ok(Forgetting {
        value: total / (t_final - 1) as f64,
        warning: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: ProtocolKind,
    pub avg_accuracy: Vec<f64>,
    pub final_avg_accuracy: f64,
    pub forgetting: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting_warning: Option<String>,
    /// `1 / |classes seen by task t|`.
    pub chance: Vec<f64>,
}

impl MetricsReport {
    pub fn from_matrix(protocol: ProtocolKind, m: &AccuracyMatrix, classes_seen: &[usize]) -> Result<Self> {
        let avg = (1..=m.num_tasks())
            .map(|t| avg_accuracy(m, t))
            .collect::<Result<Vec<_>>>()?;
        let f = forgetting(m)?;
        Ok(MetricsReport {
            protocol,
            final_avg_accuracy: *avg.last().unwrap_or(&0.0),
            avg_accuracy: avg,
            forgetting: f.value,
            forgetting_warning: f.warning,
            chance: classes_seen.iter().map(|&c| 1.0 / c.max(1) as f64).collect(),
        })
    }

    /// FLEP summary: the downstream accuracy after each task, with forgetting
    /// taken as the drop from the curve's peak to its final value.
    pub fn from_curve(curve: &[f64], downstream_classes: usize) -> Result<Self> {
        let last = *curve.last().ok_or_else(|| Error::Usage("FLEP curve is empty".into()))?;
        let peak = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(MetricsReport {
            protocol: ProtocolKind::Flep,
            avg_accuracy: curve.to_vec(),
            final_avg_accuracy: last,
            forgetting: peak - last,
            forgetting_warning: None,
            chance: vec![1.0 / downstream_classes.max(1) as f64; curve.len()],
        })
    }
}

// ---------------------------------------------------------------------------
// Probes

/// Inference-mode representations of the deterministic center segment of each clip.
pub fn extract_features(encoder: &Encoder, clips: &[&SpectrogramClip], segment_len: usize) -> Result<Embeddings> {
    let dim = encoder.output_dim();
    let mut data = Vec::with_capacity(clips.len() * dim);
    for chunk in clips.chunks(FEATURE_BATCH) {
        let segs: Vec<_> = chunk.iter().map(|c| center_segment(&c.features, segment_len)).collect();
        let out = encoder.forward(&Batch::from_spectrograms(&segs)?)?;
        data.extend_from_slice(&out.data);
    }
    Ok(Embeddings {
        rows: clips.len(),
        dim,
        data,
    })
}

/// Fits a randomly initialized linear head with cross-entropy on fixed features.
pub fn fit_linear_probe(
    features: &Embeddings,
    labels: &[usize],
    classes: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ClassifierHead> {
    if features.rows != labels.len() {
        return Err(Error::Usage(format!(
            "{} feature rows for {} labels",
            features.rows,
            labels.len()
        )));
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let absent: Vec<usize> = classes.iter().copied().filter(|c| !present.contains(c)).collect();
    if !absent.is_empty() {
        return Err(Error::Evaluation(format!(
            "no probe training clips for classes {absent:?}"
        )));
    }
    let index: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let local: Vec<usize> = labels
        .iter()
        .map(|l| {
            index
                .get(l)
                .copied()
                .ok_or_else(|| Error::Evaluation(format!("label {l} is not in the evaluation label set")))
        })
        .collect::<Result<_>>()?;

    let mut head = ClassifierHead::new(
        features.dim,
        classes.to_vec(),
        &mut rng::stream(seed, Purpose::ProbeInit, 0),
    );
    let mut opt = Optimizer::new(OptimizerKind::default(), cfg.lr);
    let mut shuffle = rng::stream(seed, Purpose::ProbeShuffle, 0);
    let mut order: Vec<usize> = (0..features.rows).collect();
    let mut grads = vec![0.0f32; head.layer.params.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let x = features.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| local[i]).collect();
            let logits = head.forward(&x)?;
            let loss = cross_entropy(&Mat::from_f32(logits.rows, logits.dim, &logits.data)?, &y)?;
            grads.fill(0.0);
            head.layer.backward(&x, &loss.grad.to_f32(), &mut grads);
            train_step(
                loss.value,
                &mut [ParamGroup::new(&mut head.layer.params, &grads)],
                &mut opt,
            )?;
        }
    }
    Ok(head)
}

/// Fraction of rows whose predicted label matches.
pub fn probe_accuracy(head: &ClassifierHead, features: &Embeddings, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Evaluation("accuracy on an empty test set".into()));
    }
    let pred = head.predict(features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trains a probe on a frozen encoder. The encoder is only borrowed immutably,
/// so it cannot change.
pub fn train_probe(
    encoder: &Encoder,
    clips: &[&SpectrogramClip],
    classes: &[usize],
    cfg: &ProbeConfig,
    segment_len: usize,
    seed: u64,
) -> Result<ClassifierHead> {
    let feats = extract_features(encoder, clips, segment_len)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    fit_linear_probe(&feats, &labels, classes, cfg, seed)
}

/// Representations of every clip of the tasks seen so far, computed once per
/// checkpoint and shared by all in-domain protocols.
pub struct FeatureCache {
    by_id: HashMap<String, usize>,
    features: Embeddings,
}

impl FeatureCache {
    pub fn build(encoder: &Encoder, clips: &[&SpectrogramClip], segment_len: usize) -> Result<Self> {
        Ok(FeatureCache {
            by_id: clips.iter().enumerate().map(|(i, c)| (c.clip_id.clone(), i)).collect(),
            features: extract_features(encoder, clips, segment_len)?,
        })
    }

    pub fn gather(&self, clips: &[&SpectrogramClip]) -> Result<Embeddings> {
        let rows = clips
            .iter()
            .map(|c| {
                self.by_id
                    .get(&c.clip_id)
                    .copied()
                    .ok_or_else(|| Error::Usage(format!("clip {} missing from feature cache", c.clip_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.features.select(&rows))
    }
}

/// Seed of the SLEP subset for task `task` in a run with `seed`.
pub fn slep_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(task as u64)
}

/// Seed of the probe trained at checkpoint `t`; shared by LEP and SLEP.
pub fn probe_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(7_919).wrapping_add(t as u64)
}

/// Row `t` of the accuracy matrix for LEP or SLEP. `tasks` are the task
/// datasets `1..=t` in order.
pub fn evaluate_in_domain(
    encoder: &Encoder,
    tasks: &[TaskDataset],
    proto: &ProtocolSpec,
    segment_len: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let clips: Vec<&SpectrogramClip> = tasks.iter().flat_map(|t| t.train.iter().chain(&t.test)).collect();
    let cache = FeatureCache::build(encoder, &clips, segment_len)?;
    evaluate_in_domain_cached(&cache, tasks, proto, seed)
}

pub fn evaluate_in_domain_cached(
    cache: &FeatureCache,
    tasks: &[TaskDataset],
    proto: &ProtocolSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    proto.validate()?;
    if !proto.kind.in_domain() {
        return Err(Error::Usage("FLEP is evaluated with evaluate_flep".into()));
    }
    let t = tasks.len();
    if t == 0 {
        return Err(Error::Usage(
            "in-domain evaluation needs at least one completed task".into(),
        ));
    }
    let mut train: Vec<SpectrogramClip> = Vec::new();
    let mut classes = Vec::new();
    for task in tasks {
        classes.extend_from_slice(&task.classes);
        match proto.kind {
            ProtocolKind::Slep => train.extend(slep_subset(
                &task.train,
                proto.slep_budget,
                slep_seed(seed, task.task_index),
            )?),
            _ => train.extend(task.train.iter().cloned()),
        }
    }
    let train_refs: Vec<&SpectrogramClip> = train.iter().collect();
    let feats = cache.gather(&train_refs)?;
    let labels: Vec<usize> = train.iter().map(|c| c.label).collect();
    let head = fit_linear_probe(&feats, &labels, &classes, &proto.probe, probe_seed(seed, t))?;
    tasks
        .iter()
        .map(|task| {
            let test: Vec<&SpectrogramClip> = task.test.iter().collect();
            let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
            probe_accuracy(&head, &cache.gather(&test)?, &labels)
        })
        .collect()
}

/// Out-of-domain accuracy: probe trained on the downstream train split (all
/// classes at once) and scored on its test split.
pub fn evaluate_flep(
    encoder: &Encoder,
    downstream: &Dataset,
    training: &Dataset,
    proto: &ProtocolSpec,
    segment_len: usize,
    seed: u64,
) -> Result<f64> {
    proto.validate()?;
    if same_dataset(downstream, training) {
        return Err(Error::Config(format!(
            "FLEP downstream dataset {} is the encoder-training dataset",
            downstream.name
        )));
    }
    let train: Vec<&SpectrogramClip> = downstream.split(Split::Train).collect();
    let test: Vec<&SpectrogramClip> = downstream.split(Split::Test).collect();
    let classes: Vec<usize> = (0..downstream.num_classes).collect();
    let head = train_probe(encoder, &train, &classes, &proto.probe, segment_len, seed)?;
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    probe_accuracy(&head, &extract_features(encoder, &test, segment_len)?, &labels)
}

fn same_dataset(a: &Dataset, b: &Dataset) -> bool {
    if a.name == b.name {
        return true;
    }
    a.clips.len() == b.clips.len()
        && a.clips
            .iter()
            .zip(&b.clips)
            .all(|(x, y)| x.clip_id == y.clip_id && x.features == y.features)
}

/// Per-protocol accuracy matrices of one run.
pub type MatrixSet = BTreeMap<ProtocolKind, AccuracyMatrix>;
