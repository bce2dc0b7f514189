//! Task-by-task encoder training.
//!
//! Each task starts from the encoder snapshot left by the previous task and
//! trains on that task's clips (plus the replay buffer in full-replay mode)
//! with a self-supervised objective (CSSL), a supervised classifier (CSUP) or
//! a weighted mix of both (joint). Optional distillation pulls the student
//! toward the frozen previous-task encoder. After every task the encoder is
//! snapshotted, the evaluation protocols fill one row of each accuracy
//! matrix, and the training-only heads stay out of evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, AugmentConfig};
use crate::dataspec::{
    materialize_task, replay_extend, Dataset, ReplayBuffer, ReplayMode, Spectrogram, SpectrogramClip, TaskDataset,
    TaskSequence,
};
use crate::evaluation::{
    evaluate_flep, evaluate_in_domain_cached, AccuracyMatrix, FeatureCache, MetricsReport, ProtocolKind, ProtocolSpec,
};
use crate::nncore::{
    train_step, Batch, ClassifierHead, Dense, Embeddings, Encoder, EncoderArch, EncoderState, MomentumEncoder,
    Optimizer, OptimizerKind, ParamGroup, ProjectionHead,
};
use crate::objectives::{
    barlow_twins, cross_entropy, distill_kld, distill_mse, distill_sim, moco_loss, nt_xent, JointLossWeights,
    NegativeQueue, PairLoss, SslConfig, SslMethod,
};
use crate::rng::{self, Purpose};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeMode {
    Cssl,
    Csup,
    Joint,
}

impl RegimeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeMode::Cssl => "cssl",
            RegimeMode::Csup => "csup",
            RegimeMode::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistillKind {
    #[default]
    None,
    Mse,
    Sim,
    Kld,
}

impl DistillKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillKind::None => "none",
            DistillKind::Mse => "mse",
            DistillKind::Sim => "sim",
            DistillKind::Kld => "kld",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub kind: DistillKind,
    #[serde(default = "default_distill_weight")]
    pub weight: f64,
    /// Temperature of the similarity distillation loss.
    #[serde(default = "default_sim_temperature")]
    pub temperature: f64,
    /// Softmax temperature of the KL distillation loss.
    #[serde(default = "default_kld_temperature")]
    pub kld_temperature: f64,
}

fn default_distill_weight() -> f64 {
    1.0
}
fn default_sim_temperature() -> f64 {
    0.5
}
fn default_kld_temperature() -> f64 {
    2.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            kind: DistillKind::None,
            weight: default_distill_weight(),
            temperature: default_sim_temperature(),
            kld_temperature: default_kld_temperature(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Hidden width of the projection head; defaults to the encoder output dim.
    #[serde(default)]
    pub proj_hidden: Option<usize>,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
}

fn default_channels() -> Vec<usize> {
    vec![32, 64, 128]
}
fn default_kernel() -> usize {
    3
}
fn default_proj_dim() -> usize {
    64
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            channels: default_channels(),
            kernel: default_kernel(),
            proj_hidden: None,
            proj_dim: default_proj_dim(),
        }
    }
}

impl ModelSpec {
    pub fn arch(&self, in_bins: usize) -> EncoderArch {
        let mut arch = EncoderArch::new(in_bins, self.channels.clone());
        arch.kernel = self.kernel;
        arch
    }

    pub fn projection_head(&self, d: usize, rng: &mut impl rand::Rng) -> ProjectionHead {
        ProjectionHead::new(d, self.proj_hidden.unwrap_or(d), self.proj_dim, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRegime {
    pub mode: RegimeMode,
    pub ssl: SslConfig,
    pub distill: DistillConfig,
    pub replay: ReplayMode,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub joint: JointLossWeights,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub augment: AugmentConfig,
    pub model: ModelSpec,
}

impl TrainingRegime {
    /// Desk-scale defaults: 20 epochs per task, batch 32, Adam at 3e-3.
    pub fn new(mode: RegimeMode, ssl: SslMethod, augment: AugmentConfig) -> Self {
        TrainingRegime {
            mode,
            ssl: SslConfig::new(ssl),
            distill: DistillConfig::default(),
            replay: ReplayMode::None,
            epochs_per_task: 20,
            batch_size: 32,
            joint: JointLossWeights::default(),
            optimizer: OptimizerKind::default(),
            lr: 3e-3,
            augment,
            model: ModelSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssl.validate()?;
        if self.mode == RegimeMode::Cssl && self.distill.kind == DistillKind::Kld {
            return Err(Error::Config(
                "distill.kind = \"kld\" needs class logits and is not available with regime.mode = \"cssl\"".into(),
            ));
        }
        if self.mode == RegimeMode::Joint {
            self.joint.validate()?;
        }
        if !(self.distill.weight >= 0.0 && self.distill.temperature > 0.0 && self.distill.kld_temperature > 0.0) {
            return Err(Error::Config("distill weight must be >= 0 and temperatures > 0".into()));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::Config("regime.epochs_per_task must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("regime.batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("regime.lr must be > 0".into()));
        }
        if self.model.proj_dim == 0 || self.model.proj_hidden == Some(0) {
            return Err(Error::Config("model projection sizes must be >= 1".into()));
        }
        let arch = self.model.arch(1);
        arch.validate()?;
        if self.augment.segment_len < arch.min_frames() {
            return Err(Error::Config(format!(
                "augment.segment_len {} is shorter than the {} frames the encoder needs",
                self.augment.segment_len,
                arch.min_frames()
            )));
        }
        Ok(())
    }

    fn uses_ssl(&self) -> bool {
        match self.mode {
            RegimeMode::Cssl => true,
            RegimeMode::Csup => false,
            RegimeMode::Joint => self.joint.beta > 0.0,
        }
    }

    fn uses_labels(&self) -> bool {
        self.mode != RegimeMode::Cssl
    }

    /// Weights of the supervised and self-supervised terms.
    fn term_weights(&self) -> (f64, f64) {
        match self.mode {
            RegimeMode::Cssl => (0.0, 1.0),
            RegimeMode::Csup => (1.0, 0.0),
            RegimeMode::Joint => (self.joint.alpha, self.joint.beta),
        }
    }
}

// ---------------------------------------------------------------------------
// Data access

/// Record of what the loader of one task touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskAccess {
    pub task: usize,
    pub clips: BTreeSet<String>,
    pub feature_reads: usize,
    pub label_reads: usize,
}

/// The training clips of one task. Every feature or label read goes through
/// here and is logged.
pub struct TrainingSet<'a> {
    clips: Vec<&'a SpectrogramClip>,
    log: TaskAccess,
}

impl<'a> TrainingSet<'a> {
    pub fn new(task: usize, clips: Vec<&'a SpectrogramClip>) -> Self {
        TrainingSet {
            clips,
            log: TaskAccess {
                task,
                ..TaskAccess::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn features(&mut self, i: usize) -> &'a Spectrogram {
        let clip = self.clips[i];
        self.log.feature_reads += 1;
        if !self.log.clips.contains(&clip.clip_id) {
            self.log.clips.insert(clip.clip_id.clone());
        }
        &clip.features
    }

    pub fn label(&mut self, i: usize) -> usize {
        self.log.label_reads += 1;
        self.clips[i].label
    }

    pub fn into_log(self) -> TaskAccess {
        self.log
    }
}

// ---------------------------------------------------------------------------
// Run state

/// Per-task training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub train_size: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub feature_reads: usize,
    pub label_reads: usize,
    pub teacher_checksum: Option<String>,
    pub encoder_checksum: String,
}

pub struct RunState {
    /// Number of completed tasks.
    pub t: usize,
    pub seed: u64,
    pub arch: EncoderArch,
    pub encoder: Encoder,
    pub projector: ProjectionHead,
    /// Snapshot of the encoder at the end of task `t`.
    pub last_snapshot: Option<EncoderState>,
    /// Classifier over every class seen so far, used as the KLD teacher.
    pub teacher_head: Option<ClassifierHead>,
    pub replay: ReplayBuffer,
    pub access: Vec<TaskAccess>,
    pub history: Vec<TaskLog>,
}

impl RunState {
    pub fn new(in_bins: usize, regime: &TrainingRegime, seed: u64) -> Result<Self> {
        let arch = regime.model.arch(in_bins);
        let encoder = fresh_encoder(&arch, seed)?;
        let projector = regime
            .model
            .projection_head(arch.output_dim(), &mut rng::stream(seed, Purpose::HeadInit, 0));
        Ok(RunState {
            t: 0,
            seed,
            arch,
            encoder,
            projector,
            last_snapshot: None,
            teacher_head: None,
            replay: ReplayBuffer::new(regime.replay),
            access: Vec::new(),
            history: Vec::new(),
        })
    }
}

fn fresh_encoder(arch: &EncoderArch, seed: u64) -> Result<Encoder> {
    Encoder::new(arch, &mut rng::stream(seed, Purpose::EncoderInit, 0))
}

/// The encoder a new task starts from: a fresh seeded init before the first
/// task, otherwise an exact copy of the previous task's snapshot.
pub fn init_from_previous(state: &RunState) -> Result<Encoder> {
    if state.t == 0 {
        return fresh_encoder(&state.arch, state.seed);
    }
    match &state.last_snapshot {
        Some(snap) if snap.task_tag == state.t as u64 => Encoder::restore(&state.arch, snap),
        Some(snap) => Err(Error::Integrity(format!(
            "expected the snapshot of task {}, found task {}",
            state.t, snap.task_tag
        ))),
        None => Err(Error::Integrity(format!("no encoder snapshot for task {}", state.t))),
    }
}

// ---------------------------------------------------------------------------
// Training

struct Teacher {
    encoder: Encoder,
    head: Option<ClassifierHead>,
}

struct Momentum {
    key: MomentumEncoder,
    queue: NegativeQueue,
}

struct Learner<'r> {
    regime: &'r TrainingRegime,
    encoder: Encoder,
    projector: ProjectionHead,
    head: Option<ClassifierHead>,
    head_index: HashMap<usize, usize>,
    /// Trainable copy of the previous head, fed to the KLD term.
    old_head: Option<ClassifierHead>,
    teacher: Option<Teacher>,
    momentum: Option<Momentum>,
    opt: Optimizer,
    g_encoder: Vec<f32>,
    g_projector: Vec<f32>,
    g_head: Vec<f32>,
    g_old: Vec<f32>,
}

fn to_mat(e: &Embeddings) -> Result<Mat> {
    Mat::from_f32(e.rows, e.dim, &e.data)
}

fn add_rows(dst: &mut [f32], src: &[f32], scale: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl Learner<'_> {
    /// One optimizer step on a minibatch. `views_b` is present when the
    /// self-supervised term is active, `labels` when the supervised one is.
    fn step(
        &mut self,
        views_a: &[Spectrogram],
        views_b: Option<&[Spectrogram]>,
        labels: Option<&[usize]>,
    ) -> Result<f64> {
        let regime = self.regime;
        let b = views_a.len();
        let (w_sup, w_ssl) = regime.term_weights();
        let moco = regime.ssl.method == SslMethod::Moco;
        let batch = match views_b {
            Some(vb) if !moco => Batch::from_spectrograms(views_a.iter().chain(vb))?,
            _ => Batch::from_spectrograms(views_a)?,
        };
        let (h, tape) = self.encoder.forward_train(&batch)?;
        let d = h.dim;
        let mut gh = vec![0.0f32; h.data.len()];
        let mut total = 0.0;
        let h_a = if h.rows == b {
            h.clone()
        } else {
            h.select(&(0..b).collect::<Vec<_>>())
        };

        let mut keys = None;
        if let Some(vb) = views_b {
            let (z, ptape) = self.projector.forward(&h)?;
            let zm = to_mat(&z)?;
            let (value, grad) = match regime.ssl.method {
                SslMethod::Simclr | SslMethod::Barlow => {
                    let (za, zb) = zm.split_rows(b);
                    let l = if regime.ssl.method == SslMethod::Simclr {
                        nt_xent(&za, &zb, regime.ssl.temperature())?
                    } else {
                        barlow_twins(&za, &zb, regime.ssl.barlow_lambda)?
                    };
                    (l.value, Mat::vstack(&l.grad_a, &l.grad_b)?)
                }
                SslMethod::Moco => {
                    let m = self.momentum.as_mut().expect("momentum encoder present for MoCo");
                    let k = to_mat(&m.key.keys(&Batch::from_spectrograms(vb)?)?)?;
                    let l = moco_loss(&zm, &k, &m.queue, regime.ssl.temperature())?;
                    keys = Some(k);
                    (l.value, l.grad_a)
                }
            };
            total += w_ssl * value;
            let mut grad = grad;
            grad.scale(w_ssl);
            self.g_projector.fill(0.0);
            let gx = self.projector.backward(&ptape, &grad.to_f32(), &mut self.g_projector);
            add_rows(&mut gh, &gx, 1.0);
        }

        if let Some(labels) = labels {
            let head = self
                .head
                .as_ref()
                .expect("classifier head present when labels are used");
            let local: Vec<usize> = labels.iter().map(|l| self.head_index[l]).collect();
            let logits = head.forward(&h_a)?;
            let ce = cross_entropy(&to_mat(&logits)?, &local)?;
            total += w_sup * ce.value;
            let mut grad = ce.grad;
            grad.scale(w_sup);
            self.g_head.fill(0.0);
            let gx = head.layer.backward(&h_a, &grad.to_f32(), &mut self.g_head);
            add_rows(&mut gh[..b * d], &gx, 1.0);
        }

        if let Some(teacher) = &self.teacher {
            let weight = regime.distill.weight;
            let t_out = teacher.encoder.forward(&Batch::from_spectrograms(views_a)?)?;
            // Gradients returned here are unweighted except for KLD, whose
            // weight must also reach the old head's parameters.
            let (value, gx, scale) = match regime.distill.kind {
                DistillKind::None => unreachable!("teacher only exists when distilling"),
                DistillKind::Mse | DistillKind::Sim => {
                    let (s, t) = (to_mat(&h_a)?, to_mat(&t_out)?);
                    let l: PairLoss = if regime.distill.kind == DistillKind::Mse {
                        distill_mse(&s, &t)?
                    } else {
                        distill_sim(&s, &t, regime.distill.temperature)?
                    };
                    (l.value, l.grad_a.to_f32(), weight as f32)
                }
                DistillKind::Kld => {
                    let old = self.old_head.as_ref().expect("old head present for KLD");
                    let t_head = teacher.head.as_ref().expect("teacher head present for KLD");
                    let s_logits = to_mat(&old.forward(&h_a)?)?;
                    let t_logits = to_mat(&t_head.forward(&t_out)?)?;
                    let l = distill_kld(&s_logits, &t_logits, regime.distill.kld_temperature)?;
                    let mut g = l.grad_a;
                    g.scale(weight);
                    self.g_old.fill(0.0);
                    let gx = old.layer.backward(&h_a, &g.to_f32(), &mut self.g_old);
                    (l.value, gx, 1.0)
                }
            };
            total += weight * value;
            add_rows(&mut gh[..b * d], &gx, scale);
        }

        self.g_encoder.fill(0.0);
        self.encoder.backward(&tape, &gh, &mut self.g_encoder)?;

        let mut groups = vec![ParamGroup::new(self.encoder.params_mut(), &self.g_encoder)];
        if views_b.is_some() {
            let split = self.projector.first.params.len();
            let (g1, g2) = self.g_projector.split_at(split);
            groups.push(ParamGroup::new(&mut self.projector.first.params, g1));
            groups.push(ParamGroup::new(&mut self.projector.second.params, g2));
        }
        if labels.is_some() {
            let head = self.head.as_mut().expect("head present");
            groups.push(ParamGroup::new(&mut head.layer.params, &self.g_head));
        }
        if let (Some(_), Some(old)) = (&self.teacher, self.old_head.as_mut()) {
            groups.push(ParamGroup::new(&mut old.layer.params, &self.g_old));
        }
        train_step(total, &mut groups, &mut self.opt)?;

        if let (Some(m), Some(k)) = (self.momentum.as_mut(), keys) {
            m.queue.push_rows(&k)?;
            m.key.update(&self.encoder, &self.projector)?;
        }
        Ok(total)
    }
}

/// Queue of random unit vectors so the first MoCo step has negatives.
fn random_queue(capacity: usize, dim: usize, seed: u64, task: usize) -> Result<NegativeQueue> {
    let mut queue = NegativeQueue::new(capacity, dim)?;
    let mut rng = rng::stream(seed, Purpose::Queue, task as u64);
    for _ in 0..capacity {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        queue.push(&v)?;
    }
    Ok(queue)
}

/// Rows of `head` for the labels in `keep`, in that order.
fn head_subset(head: &ClassifierHead, keep: &[usize]) -> ClassifierHead {
    let din = head.layer.din;
    let rows: Vec<usize> = keep.iter().filter_map(|&c| head.index_of(c)).collect();
    let mut params = Vec::with_capacity(rows.len() * (din + 1));
    for &r in &rows {
        params.extend_from_slice(&head.layer.params[r * din..(r + 1) * din]);
    }
    let bias = &head.layer.params[head.layer.dout * din..];
    params.extend(rows.iter().map(|&r| bias[r]));
    ClassifierHead {
        layer: Dense {
            din,
            dout: rows.len(),
            params,
        },
        classes: rows.iter().map(|&r| head.classes[r]).collect(),
    }
}

/// Previous-task classes not covered by `new`, followed by `new`.
fn merge_heads(old: Option<&ClassifierHead>, new: &ClassifierHead) -> Result<ClassifierHead> {
    match old {
        None => Ok(new.clone()),
        Some(old) => {
            let keep: Vec<usize> = old
                .classes
                .iter()
                .copied()
                .filter(|c| new.index_of(*c).is_none())
                .collect();
            head_subset(old, &keep).concat(new)
        }
    }
}

fn with_context(e: Error, task: usize, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("task {task}, epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}

/// Trains the encoder on the next task and advances `state` by one task.
pub fn run_task(state: &mut RunState, task: &TaskDataset, regime: &TrainingRegime) -> Result<TaskLog> {
    regime.validate()?;
    let t = state.t + 1;
    if task.task_index != t {
        return Err(Error::Usage(format!("expected task {t}, got task {}", task.task_index)));
    }
    if task.train.is_empty() {
        return Err(Error::Config(format!("task {t} has no training clips")));
    }
    regime.augment.validate(state.arch.in_bins)?;
    if state.replay.mode != regime.replay {
        return Err(Error::Usage("replay buffer mode differs from the regime".into()));
    }

    let encoder = init_from_previous(state)?;
    let teacher = if t > 1 && regime.distill.kind != DistillKind::None {
        let snap = state
            .last_snapshot
            .as_ref()
            .ok_or_else(|| Error::Integrity(format!("no teacher snapshot for task {}", t - 1)))?;
        let head = if regime.distill.kind == DistillKind::Kld {
            Some(
                state
                    .teacher_head
                    .clone()
                    .ok_or_else(|| Error::Integrity(format!("no teacher classifier after task {}", t - 1)))?,
            )
        } else {
            None
        };
        Some(Teacher {
            encoder: Encoder::restore(&state.arch, snap)?,
            head,
        })
    } else {
        None
    };
    let teacher_sum = teacher.as_ref().map(|tc| tc.encoder.checksum());

    let mut clips: Vec<&SpectrogramClip> = Vec::new();
    if regime.replay == ReplayMode::Full {
        clips.extend(state.replay.stored.iter());
    }
    clips.extend(task.train.iter());
    let mut set = TrainingSet::new(t, clips);
    let n = set.len();

    let seed = state.seed;
    let (head, head_index) = if regime.uses_labels() {
        let classes: Vec<usize> = (0..n)
            .map(|i| set.label(i))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let head = ClassifierHead::new(
            state.arch.output_dim(),
            classes.clone(),
            &mut rng::stream(seed, Purpose::HeadInit, t as u64),
        );
        let index = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        (Some(head), index)
    } else {
        (None, HashMap::new())
    };
    let old_head = teacher.as_ref().and_then(|tc| tc.head.clone());
    let momentum = if regime.uses_ssl() && regime.ssl.method == SslMethod::Moco {
        Some(Momentum {
            key: MomentumEncoder::from_query(&encoder, &state.projector, regime.ssl.moco_momentum as f32)?,
            queue: random_queue(regime.ssl.moco_queue, state.projector.output_dim(), seed, t)?,
        })
    } else {
        None
    };

    let mut learner = Learner {
        regime,
        g_encoder: vec![0.0; encoder.num_params()],
        g_projector: vec![0.0; state.projector.num_params()],
        g_head: vec![0.0; head.as_ref().map_or(0, |h| h.layer.params.len())],
        g_old: vec![0.0; old_head.as_ref().map_or(0, |h| h.layer.params.len())],
        encoder,
        projector: state.projector.clone(),
        head,
        head_index,
        old_head,
        teacher,
        momentum,
        opt: Optimizer::new(regime.optimizer, regime.lr),
    };

    let mut shuffle_rng = rng::stream(seed, Purpose::Shuffle, t as u64);
    let mut aug_rng = rng::stream(seed, Purpose::Augment, t as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(regime.epochs_per_task);
    let mut steps = 0;
    for epoch in 1..=regime.epochs_per_task {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, idx) in order.chunks(regime.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut views_a = Vec::with_capacity(idx.len());
            let mut views_b = Vec::with_capacity(idx.len());
            for &i in idx {
                let x = set.features(i);
                views_a.push(augment_view(x, &regime.augment, &mut aug_rng)?);
                if regime.uses_ssl() {
                    views_b.push(augment_view(x, &regime.augment, &mut aug_rng)?);
                }
            }
            let labels: Option<Vec<usize>> = regime
                .uses_labels()
                .then(|| idx.iter().map(|&i| set.label(i)).collect());
            let loss = learner
                .step(
                    &views_a,
                    regime.uses_ssl().then_some(views_b.as_slice()),
                    labels.as_deref(),
                )
                .map_err(|e| with_context(e, t, epoch, step + 1))?;
            sum += loss;
            count += 1;
            steps += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }

    if let (Some(before), Some(tc)) = (teacher_sum, learner.teacher.as_ref()) {
        if tc.encoder.checksum() != before {
            return Err(Error::Integrity(format!("teacher encoder changed during task {t}")));
        }
    }
    let access = set.into_log();

    let Learner {
        encoder,
        projector,
        head,
        old_head,
        ..
    } = learner;
    if let Some(head) = &head {
        let previous = old_head.as_ref().or(state.teacher_head.as_ref());
        state.teacher_head = Some(merge_heads(previous, head)?);
    }
    let replay = std::mem::take(&mut state.replay);
    state.replay = replay_extend(replay, &task.train);
    state.last_snapshot = Some(encoder.snapshot(t as u64));
    let log = TaskLog {
        task: t,
        train_size: n,
        steps,
        epoch_losses,
        feature_reads: access.feature_reads,
        label_reads: access.label_reads,
        teacher_checksum: teacher_sum.map(|s| format!("{s:016x}")),
        encoder_checksum: format!("{:016x}", encoder.checksum()),
    };
    state.encoder = encoder;
    state.projector = projector;
    state.t = t;
    state.access.push(access);
    state.history.push(log.clone());
    Ok(log)
}

// ---------------------------------------------------------------------------
// Sequence

pub struct EvalPlan {
    pub protocols: Vec<ProtocolSpec>,
    pub downstream: Option<Dataset>,
    /// Frames per probe input (center crop).
    pub segment_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub num_tasks: usize,
    pub task_classes: Vec<Vec<usize>>,
    pub matrices: BTreeMap<ProtocolKind, AccuracyMatrix>,
    pub metrics: BTreeMap<ProtocolKind, MetricsReport>,
    pub tasks: Vec<TaskLog>,
}

/// Trains tasks `1..=T` in order, evaluating after each one. When
/// `snapshot_dir` is given, `encoder_task{t}.bin` is written there.
pub fn run_sequence(
    dataset: &Dataset,
    seq: &TaskSequence,
    regime: &TrainingRegime,
    plan: &EvalPlan,
    seed: u64,
    snapshot_dir: Option<&Path>,
) -> Result<(RunResult, RunState)> {
    regime.validate()?;
    let (bins, _) = dataset.feature_shape();
    let mut state = RunState::new(bins, regime, seed)?;
    let mut kinds = BTreeSet::new();
    for p in &plan.protocols {
        p.validate()?;
        if !kinds.insert(p.kind) {
            return Err(Error::Config(format!("protocol {} is listed twice", p.kind)));
        }
        if p.kind == ProtocolKind::Flep && plan.downstream.is_none() {
            return Err(Error::Config("FLEP requested without a downstream dataset".into()));
        }
    }
    let t_total = seq.num_tasks;
    let mut matrices: BTreeMap<ProtocolKind, AccuracyMatrix> = plan
        .protocols
        .iter()
        .map(|p| (p.kind, AccuracyMatrix::new(t_total)))
        .collect();
    let mut flep_curve = Vec::new();
    let mut tasks: Vec<TaskDataset> = Vec::with_capacity(t_total);
    let mut classes_seen = Vec::with_capacity(t_total);
    for t in 1..=t_total {
        let task = materialize_task(dataset, seq, t)?;
        let log = run_task(&mut state, &task, regime)?;
        log::info!(
            "seed {seed} task {t}/{t_total}: {} clips, final loss {:.4}",
            log.train_size,
            log.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        if let (Some(dir), Some(snap)) = (snapshot_dir, &state.last_snapshot) {
            snap.save(&dir.join(EncoderState::file_name(t)))?;
        }
        tasks.push(task);
        classes_seen.push(tasks.iter().map(|t| t.classes.len()).sum::<usize>());

        let in_domain: Vec<&ProtocolSpec> = plan.protocols.iter().filter(|p| p.kind.in_domain()).collect();
        if !in_domain.is_empty() {
            let clips: Vec<&SpectrogramClip> = tasks.iter().flat_map(|t| t.train.iter().chain(&t.test)).collect();
            let cache = FeatureCache::build(&state.encoder, &clips, plan.segment_len)?;
            for p in in_domain {
                let row = evaluate_in_domain_cached(&cache, &tasks, p, seed)?;
                matrices
                    .get_mut(&p.kind)
                    .expect("matrix per protocol")
                    .set_row(t, row)?;
            }
        }
        for p in plan.protocols.iter().filter(|p| p.kind == ProtocolKind::Flep) {
            let downstream = plan.downstream.as_ref().expect("checked above");
            let acc = evaluate_flep(
                &state.encoder,
                downstream,
                dataset,
                p,
                plan.segment_len,
                crate::evaluation::probe_seed(seed, t),
            )?;
            flep_curve.push(acc);
        }
    }

    let mut metrics = BTreeMap::new();
    for (kind, m) in matrices.iter_mut() {
        if *kind == ProtocolKind::Flep {
            let ds = plan.downstream.as_ref().expect("checked above");
            *m = flep_matrix(&flep_curve)?;
            metrics.insert(*kind, MetricsReport::from_curve(&flep_curve, ds.num_classes)?);
        } else {
            metrics.insert(*kind, MetricsReport::from_matrix(*kind, m, &classes_seen)?);
        }
    }
    let result = RunResult {
        seed,
        num_tasks: t_total,
        task_classes: seq.tasks.clone(),
        matrices,
        metrics,
        tasks: state.history.clone(),
    };
    Ok((result, state))
}

/// FLEP has a single fixed downstream test set; its matrix keeps the
/// accuracy after task `t` in every column of row `t`.
fn flep_matrix(curve: &[f64]) -> Result<AccuracyMatrix> {
    AccuracyMatrix::from_rows(curve.iter().enumerate().map(|(i, &a)| vec![a; i + 1]).collect())
}
