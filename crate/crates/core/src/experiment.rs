//! Config-driven experiments: TOML config, per-seed run directories, and the
//! report and plot emitters.
//!
//! Run directory layout:
//!
//! ```text
//! <output>/config.echo.toml
//! <output>/results.json                      aggregate over seeds
//! <output>/seed-<s>/config.echo.toml
//! <output>/seed-<s>/encoder_task<t>.bin
//! <output>/seed-<s>/results.json
//! <output>/seed-<s>/<protocol>/accuracy_matrix.csv
//! <output>/seed-<s>/<protocol>/metrics.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::continual::{run_sequence, DistillConfig, EvalPlan, ModelSpec, RegimeMode, RunResult, TrainingRegime};
use crate::dataspec::{load_dataset, split_tasks, write_dataset, Dataset, ReplayMode, SyntheticSpec};
use crate::evaluation::{AccuracyMatrix, ProbeConfig, ProtocolKind, ProtocolSpec};
use crate::nncore::OptimizerKind;
use crate::objectives::{JointLossWeights, SslConfig, SslMethod};
use crate::{Error, Result};

pub const CONFIG_ECHO: &str = "config.echo.toml";
pub const RESULTS_JSON: &str = "results.json";

// ---------------------------------------------------------------------------
// Config

/// Either a synthetic corpus or a manifest of pre-extracted features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Manifest CSV; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

impl DataConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => s.validate(),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(format!(
                "{key}: set exactly one of `synthetic` or `manifest`"
            ))),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => s.generate(),
            (None, Some(m)) => load_dataset(&base_dir.join(m)),
            _ => Err(Error::Config(
                "data: set exactly one of `synthetic` or `manifest`".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    pub num_tasks: usize,
    /// Seed of the class order; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Masking recipe; widths default to `ceil(F/8)` and `ceil(L/8)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub segment_len: usize,
    #[serde(default = "two")]
    pub num_freq_masks: usize,
    #[serde(default)]
    pub max_freq_width: Option<usize>,
    #[serde(default = "two")]
    pub num_time_masks: usize,
    #[serde(default)]
    pub max_time_width: Option<usize>,
    #[serde(default)]
    pub mask_value: f32,
}

fn two() -> usize {
    2
}

impl AugmentSection {
    pub fn resolve(&self, freq_bins: usize) -> AugmentConfig {
        let d = AugmentConfig::defaults_for(freq_bins, self.segment_len);
        AugmentConfig {
            segment_len: self.segment_len,
            num_freq_masks: self.num_freq_masks,
            max_freq_width: self.max_freq_width.unwrap_or(d.max_freq_width),
            num_time_masks: self.num_time_masks,
            max_time_width: self.max_time_width.unwrap_or(d.max_time_width),
            mask_value: self.mask_value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub mode: RegimeMode,
    #[serde(default)]
    pub replay: ReplayMode,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f32 {
    3e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocols: Vec<ProtocolKind>,
    #[serde(default = "default_slep_budget")]
    pub slep_budget: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Probe input length; defaults to `augment.segment_len`.
    #[serde(default)]
    pub segment_len: Option<usize>,
    /// Out-of-domain dataset for FLEP.
    #[serde(default)]
    pub downstream: Option<DataConfig>,
}

fn default_slep_budget() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports; derived from the regime when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    /// Test folds to sweep (manifest datasets with a fold column).
    #[serde(default)]
    pub folds: Vec<u32>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub tasks: TasksConfig,
    pub augment: AugmentSection,
    #[serde(default)]
    pub model: ModelSpec,
    pub objective: SslConfig,
    pub regime: RegimeSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub joint: JointLossWeights,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        self.data.validate("data")?;
        if let Some(d) = &self.eval.downstream {
            d.validate("eval.downstream")?;
        }
        if self.tasks.num_tasks == 0 {
            return Err(Error::Config("tasks.num_tasks must be >= 1".into()));
        }
        if self.eval.protocols.is_empty() {
            return Err(Error::Config("eval.protocols must list at least one protocol".into()));
        }
        if self.eval.protocols.contains(&ProtocolKind::Flep) && self.eval.downstream.is_none() {
            return Err(Error::Config(
                "eval.protocols includes flep but eval.downstream is not set".into(),
            ));
        }
        if let Some(s) = &self.data.synthetic {
            if self.tasks.num_tasks > s.num_classes {
                return Err(Error::Config(format!(
                    "tasks.num_tasks {} exceeds {} classes",
                    self.tasks.num_tasks, s.num_classes
                )));
            }
            self.regime(s.freq_bins).validate()?;
            self.augment.resolve(s.freq_bins).validate(s.freq_bins)?;
        }
        for p in self.protocols() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn regime(&self, freq_bins: usize) -> TrainingRegime {
        TrainingRegime {
            mode: self.regime.mode,
            ssl: self.objective.clone(),
            distill: self.distill.clone(),
            replay: self.regime.replay,
            epochs_per_task: self.regime.epochs_per_task,
            batch_size: self.regime.batch_size,
            joint: self.joint,
            optimizer: self.regime.optimizer,
            lr: self.regime.lr,
            augment: self.augment.resolve(freq_bins),
            model: self.model.clone(),
        }
    }

    pub fn protocols(&self) -> Vec<ProtocolSpec> {
        self.eval
            .protocols
            .iter()
            .map(|&kind| ProtocolSpec {
                kind,
                slep_budget: if kind == ProtocolKind::Slep {
                    self.eval.slep_budget
                } else {
                    0
                },
                probe: self.eval.probe.clone(),
            })
            .collect()
    }

    /// Report label, e.g. `cssl-simclr`, `csup+kld-fr`.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = match self.regime.mode {
            RegimeMode::Cssl => format!("cssl-{}", self.objective.method.as_str()),
            RegimeMode::Csup => "csup".to_string(),
            RegimeMode::Joint => format!(
                "joint-{}-a{}-b{}",
                self.objective.method.as_str(),
                self.joint.alpha,
                self.joint.beta
            ),
        };
        if self.distill.kind != crate::continual::DistillKind::None {
            s.push('+');
            s.push_str(self.distill.kind.as_str());
        }
        if self.regime.replay == ReplayMode::Full {
            s.push_str("-fr");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Results

/// Persisted outcome of one seed (and fold).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub label: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<u32>,
    pub regime: TrainingRegime,
    pub result: RunResult,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
            values: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub final_avg_accuracy: MeanStd,
    pub forgetting: MeanStd,
    /// Mean over seeds of `Ā_t` for each `t`.
    pub avg_accuracy: Vec<f64>,
    pub chance: Vec<f64>,
}

/// Aggregate over all seeds and folds of one config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub label: String,
    pub mode: RegimeMode,
    pub method: SslMethod,
    pub distill: String,
    pub replay: ReplayMode,
    pub num_tasks: usize,
    pub protocols: BTreeMap<ProtocolKind, ProtocolSummary>,
    /// Run directories relative to the output directory.
    pub runs: Vec<String>,
}

impl AggregateResult {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(RESULTS_JSON)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", file.display())))
    }
}

pub fn aggregate(label: &str, regime: &TrainingRegime, runs: &[(String, SeedResult)]) -> Result<AggregateResult> {
    let first = &runs
        .first()
        .ok_or_else(|| Error::Usage("no runs to aggregate".into()))?
        .1;
    let mut protocols = BTreeMap::new();
    for (&kind, m0) in &first.result.metrics {
        let reports: Vec<_> = runs.iter().map(|(_, r)| &r.result.metrics[&kind]).collect();
        let t = m0.avg_accuracy.len();
        let avg = (0..t)
            .map(|i| reports.iter().map(|r| r.avg_accuracy[i]).sum::<f64>() / reports.len() as f64)
            .collect();
        protocols.insert(
            kind,
            ProtocolSummary {
                final_avg_accuracy: MeanStd::of(&reports.iter().map(|r| r.final_avg_accuracy).collect::<Vec<_>>()),
                forgetting: MeanStd::of(&reports.iter().map(|r| r.forgetting).collect::<Vec<_>>()),
                avg_accuracy: avg,
                chance: m0.chance.clone(),
            },
        );
    }
    Ok(AggregateResult {
        label: label.to_string(),
        mode: regime.mode,
        method: regime.ssl.method,
        distill: regime.distill.kind.as_str().to_string(),
        replay: regime.replay,
        num_tasks: first.result.num_tasks,
        protocols,
        runs: runs.iter().map(|(d, _)| d.clone()).collect(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    protocol: &'a str,
    seed: u64,
    avg_accuracy: &'a [f64],
    final_avg_accuracy: f64,
    forgetting: f64,
    chance: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<&'a str>,
}

// ---------------------------------------------------------------------------
// Commands

/// Options shared by the commands that read a config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub quiet: bool,
}

fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions, base_dir: &Path) -> Result<PathBuf> {
    opts.output
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|p| base_dir.join(p)))
        .ok_or_else(|| Error::Config("no output directory: pass --output or set output_dir".into()))
}

/// Writes the configured dataset (and the downstream dataset, if any) as a
/// manifest plus feature files. Returns the manifest paths.
pub fn cmd_generate_data(cfg: &ExperimentConfig, base_dir: &Path, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let out = output_dir(cfg, opts, base_dir)?;
    let mut written = Vec::new();
    let mut sources = vec![("data", &cfg.data)];
    if let Some(d) = &cfg.eval.downstream {
        sources.push(("downstream", d));
    }
    for (name, src) in sources {
        let ds = src.load(base_dir)?;
        let path = write_dataset(&ds, &out.join(name))?;
        if !opts.quiet {
            println!(
                "{name}: {} clips of {} classes -> {}",
                ds.clips.len(),
                ds.num_classes,
                path.display()
            );
        }
        written.push(path);
    }
    Ok(written)
}

/// Runs every configured seed (and fold), persisting per-run artifacts and the
/// aggregate. `config_text` is echoed verbatim.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    config_text: &str,
    base_dir: &Path,
    opts: &RunOptions,
) -> Result<AggregateResult> {
    cfg.validate()?;
    let out = output_dir(cfg, opts, base_dir)?;
    create_dir(&out)?;
    write_text(&out.join(CONFIG_ECHO), config_text)?;
    let dataset = cfg.data.load(base_dir)?;
    let downstream = cfg.eval.downstream.as_ref().map(|d| d.load(base_dir)).transpose()?;
    let (bins, _) = dataset.feature_shape();
    let regime = cfg.regime(bins);
    regime.validate()?;
    let label = cfg.label();
    let seeds = opts.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::Config("no seeds to run".into()));
    }
    let folds: Vec<Option<u32>> = if cfg.folds.is_empty() {
        vec![None]
    } else {
        cfg.folds.iter().map(|&f| Some(f)).collect()
    };
    let plan = EvalPlan {
        protocols: cfg.protocols(),
        downstream,
        segment_len: cfg.eval.segment_len.unwrap_or(cfg.augment.segment_len),
    };

    let mut runs = Vec::new();
    for &seed in &seeds {
        for &fold in &folds {
            let ds = match fold {
                Some(f) => dataset.with_test_fold(f)?,
                None => dataset.clone(),
            };
            let dir_name = match fold {
                Some(f) => format!("seed-{seed}-fold-{f}"),
                None => format!("seed-{seed}"),
            };
            let dir = out.join(&dir_name);
            create_dir(&dir)?;
            write_text(&dir.join(CONFIG_ECHO), config_text)?;
            let seq = split_tasks(&ds, cfg.tasks.num_tasks, cfg.tasks.seed.unwrap_or(seed))?;
            let start = Instant::now();
            let (result, _) = run_sequence(&ds, &seq, &regime, &plan, seed, Some(&dir))?;
            let wall = start.elapsed().as_secs_f64();

            let mut artifacts: Vec<String> = (1..=result.num_tasks)
                .map(crate::nncore::EncoderState::file_name)
                .collect();
            for (kind, m) in &result.matrices {
                let pdir = dir.join(kind.as_str());
                create_dir(&pdir)?;
                write_text(&pdir.join("accuracy_matrix.csv"), &m.to_csv())?;
                let rep = &result.metrics[kind];
                write_json(
                    &pdir.join("metrics.json"),
                    &MetricsFile {
                        protocol: kind.as_str(),
                        seed,
                        avg_accuracy: &rep.avg_accuracy,
                        final_avg_accuracy: rep.final_avg_accuracy,
                        forgetting: rep.forgetting,
                        chance: &rep.chance,
                        warning: rep.forgetting_warning.as_deref(),
                    },
                )?;
                artifacts.push(format!("{}/accuracy_matrix.csv", kind.as_str()));
                artifacts.push(format!("{}/metrics.json", kind.as_str()));
                if !opts.quiet {
                    println!(
                        "{label} {dir_name} {kind}: final A = {:.4}, F = {:.4}",
                        rep.final_avg_accuracy, rep.forgetting
                    );
                }
            }
            let seed_result = SeedResult {
                label: label.clone(),
                seed,
                fold,
                regime: regime.clone(),
                result,
                artifacts,
                wall_clock_seconds: wall,
            };
            write_json(&dir.join(RESULTS_JSON), &seed_result)?;
            runs.push((dir_name, seed_result));
        }
    }
    let agg = aggregate(&label, &regime, &runs)?;
    write_json(&out.join(RESULTS_JSON), &agg)?;
    if !opts.quiet {
        for (kind, s) in &agg.protocols {
            println!(
                "{label} {kind} over {} runs: final A = {:.4} ± {:.4}, F = {:.4} ± {:.4}",
                runs.len(),
                s.final_avg_accuracy.mean,
                s.final_avg_accuracy.std,
                s.forgetting.mean,
                s.forgetting.std
            );
        }
    }
    Ok(agg)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<AggregateResult>> {
    if paths.is_empty() {
        return Err(Error::Usage("no results given".into()));
    }
    let results = paths
        .iter()
        .map(|p| AggregateResult::load(p))
        .collect::<Result<Vec<_>>>()?;
    let t = results[0].num_tasks;
    if let Some(bad) = results.iter().find(|r| r.num_tasks != t) {
        return Err(Error::Usage(format!(
            "results disagree on the number of tasks: {} has T={}, {} has T={t}",
            bad.label, bad.num_tasks, results[0].label
        )));
    }
    Ok(results)
}

/// Report tables as `(csv, markdown)`. One row per result, one column pair
/// (A, F) per protocol; the best value of each column is bold in markdown
/// (highest A, lowest F).
pub fn render_report(results: &[AggregateResult]) -> (String, String) {
    let protocols: Vec<ProtocolKind> = {
        let mut v: Vec<ProtocolKind> = results.iter().flat_map(|r| r.protocols.keys().copied()).collect();
        v.sort();
        v.dedup();
        v
    };
    let mut csv = String::from("label,mode,distill,replay");
    let mut md = String::from("| run |");
    let mut rule = String::from("|---|");
    for p in &protocols {
        let _ = write!(csv, ",{0}_A,{0}_A_std,{0}_F,{0}_F_std", p.as_str());
        let _ = write!(md, " {p} A | {p} F |");
        rule.push_str("---:|---:|");
    }
    csv.push('\n');
    md.push('\n');
    md.push_str(&rule);
    md.push('\n');

    let best = |p: ProtocolKind, acc: bool| -> Option<f64> {
        let vals = results.iter().filter_map(|r| cell(r, p, acc)).map(|m| m.mean);
        if acc {
            vals.reduce(f64::max)
        } else {
            vals.reduce(f64::min)
        }
    };
    for r in results {
        let _ = write!(
            csv,
            "{},{},{},{}",
            r.label,
            r.mode.as_str(),
            r.distill,
            if r.replay == ReplayMode::Full { "full" } else { "none" }
        );
        let _ = write!(md, "| {} |", r.label);
        for &p in &protocols {
            for acc in [true, false] {
                match cell(r, p, acc) {
                    Some(m) => {
                        let _ = write!(csv, ",{},{}", m.mean, m.std);
                        let text = format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std);
                        if best(p, acc) == Some(m.mean) {
                            let _ = write!(md, " **{text}** |");
                        } else {
                            let _ = write!(md, " {text} |");
                        }
                    }
                    None => {
                        csv.push_str(",,");
                        md.push_str(" - |");
                    }
                }
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    (csv, md)
}

fn cell(r: &AggregateResult, p: ProtocolKind, acc: bool) -> Option<&MeanStd> {
    r.protocols
        .get(&p)
        .map(|s| if acc { &s.final_avg_accuracy } else { &s.forgetting })
}

/// Writes `report.csv` and `report.md` into `out`.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let results = load_all(paths)?;
    let (csv, md) = render_report(&results);
    create_dir(out)?;
    let files = vec![out.join("report.csv"), out.join("report.md")];
    write_text(&files[0], &csv)?;
    write_text(&files[1], &md)?;
    Ok(files)
}

/// Writes one trajectory figure per protocol (`<protocol>_trajectory.svg`
/// and `.png`): mean `Ā_t` against `t` per result plus the chance level.
pub fn cmd_plot(paths: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let results = load_all(paths)?;
    create_dir(out)?;
    let mut protocols: Vec<ProtocolKind> = results.iter().flat_map(|r| r.protocols.keys().copied()).collect();
    protocols.sort();
    protocols.dedup();
    let mut files = Vec::new();
    for p in protocols {
        let series: Vec<crate::plot::Series> = results
            .iter()
            .filter_map(|r| {
                r.protocols.get(&p).map(|s| crate::plot::Series {
                    label: r.label.clone(),
                    values: s.avg_accuracy.clone(),
                })
            })
            .collect();
        let chance = results
            .iter()
            .find_map(|r| r.protocols.get(&p).map(|s| s.chance.clone()))
            .unwrap_or_default();
        let fig = crate::plot::Figure {
            title: format!("{p}: average accuracy after each task"),
            series,
            chance,
        };
        let svg = out.join(format!("{}_trajectory.svg", p.as_str()));
        let png = out.join(format!("{}_trajectory.png", p.as_str()));
        write_text(&svg, &fig.to_svg())?;
        fig.to_png()
            .save(&png)
            .map_err(|e| Error::Serde(format!("{}: {e}", png.display())))?;
        files.push(svg);
        files.push(png);
    }
    Ok(files)
}

/// Reads a per-seed accuracy matrix back from its CSV.
pub fn read_matrix_csv(path: &Path) -> Result<AccuracyMatrix> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::ingestion(path.display().to_string(), e.to_string()))?;
    let mut rows: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for rec in reader.deserialize::<(usize, usize, f64)>() {
        let (t, j, a) = rec.map_err(|e| Error::ingestion(path.display().to_string(), e.to_string()))?;
        rows.entry(t).or_default().push((j, a));
    }
    let rows = rows
        .into_values()
        .map(|mut r| {
            r.sort_by_key(|e| e.0);
            r.into_iter().map(|e| e.1).collect()
        })
        .collect();
    AccuracyMatrix::from_rows(rows)
}
