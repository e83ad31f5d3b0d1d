//! Experiment runner: wires streams to learners, records online metrics per
//! step, aggregates them per task and selects hyperparameters by cumulative
//! error.
//!
//! Every run writes one CSV per seed with the fixed header produced by
//! [`csv_header`]. The first column carries [`SCHEMA_ID`]; per-group gamma
//! summaries follow as `gamma_min_<group>` / `gamma_mean_<group>` pairs, where
//! groups are labelled `w<layer>` and `b<layer>`. The CSV holds no timing
//! data, so reruns are byte-identical; timings go to the summary JSON.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{MlpSpec, TaskKind};
use crate::optim::{group_labels, Learner, OptimizerConfig, ResetMask, ResetPolicy, Variant};
use crate::streams::{
    load_mnist_dir, synthetic_fallback_dataset, Dataset, Stream, StreamKind, StreamSpec, Targets,
};

pub const SCHEMA_ID: &str = "sr-metrics-v1";

/// JSON schema for [`ExperimentConfig`] files.
pub const CONFIG_SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the stream.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Defaults to the stream's subset size.
    pub examples: Option<usize>,
    pub features: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            examples: None,
            features: 784,
            classes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
    /// When absent the synthetic fallback is used.
    pub idx_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Write the per-step CSV.
    pub csv: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { csv: true }
    }
}

/// One declarative experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub stream: StreamSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    /// Seeds `0..num_seeds` unless overridden.
    pub num_seeds: usize,
    pub metrics: MetricOptions,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            stream: StreamSpec::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            num_seeds: 1,
            metrics: MetricOptions::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.stream.validate()?;
        self.optimizer.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).collect()
    }

    /// Canonical JSON text, used for tie-breaking in sweeps.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Loads the dataset a config asks for (`None` for mean tracking).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    if cfg.stream.kind == StreamKind::MeanTracking {
        return Ok(None);
    }
    match &cfg.data.idx_dir {
        Some(dir) => load_mnist_dir(dir).map(Some),
        None => {
            let s = &cfg.data.synthetic;
            synthetic_fallback_dataset(
                s.examples.unwrap_or(cfg.stream.subset_size),
                s.classes,
                s.features,
                s.seed,
            )
            .map(Some)
        }
    }
}

/// Batch-averaged correctness (classification) or squared error (regression)
/// of `pred` against `targets`. Ties in the argmax go to the lowest class.
pub fn online_accuracy(pred: &Tensor, targets: &Targets) -> f64 {
    match targets {
        Targets::Classes(y) => {
            let cols = pred.shape()[1];
            let hits = y
                .iter()
                .enumerate()
                .filter(|&(r, &label)| {
                    let row = &pred.data()[r * cols..(r + 1) * cols];
                    let mut best = 0;
                    for (c, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = c;
                        }
                    }
                    best == label
                })
                .count();
            hits as f64 / y.len() as f64
        }
        Targets::Values(y) => {
            let se: f64 = pred
                .data()
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            se / y.len() as f64
        }
    }
}

/// Mean of the per-step metric over one task.
pub fn per_task_accuracy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("task has no steps"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean of the per-task accuracies.
pub fn overall_accuracy(per_task: &[f64]) -> f64 {
    per_task.iter().sum::<f64>() / per_task.len() as f64
}

/// `sum (1 - a_t)` for accuracies, or the plain sum of squared errors.
pub fn cumulative_error(values: &[f64], kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Classification => values.iter().map(|a| 1.0 - a).sum(),
        TaskKind::Regression => values.iter().sum(),
    }
}

/// One CSV record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub task: usize,
    pub boundary: bool,
    /// Accuracy or squared error, depending on the task kind.
    pub metric: f64,
    /// Mean prediction over the batch (regression only).
    pub prediction: Option<f64>,
    pub loss: f64,
    pub lr_mean: f64,
    /// `(min, mean)` gamma per parameter group.
    pub gamma: Vec<(f64, f64)>,
}

pub fn csv_header(groups: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "schema",
        "seed",
        "step",
        "task",
        "boundary",
        "accuracy",
        "sq_error",
        "prediction",
        "loss",
        "lr_mean",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for g in groups {
        h.push(format!("gamma_min_{g}"));
        h.push(format!("gamma_mean_{g}"));
    }
    h
}

impl MetricsRow {
    fn record(&self, kind: TaskKind) -> Vec<String> {
        let (acc, se) = match kind {
            TaskKind::Classification => (self.metric.to_string(), String::new()),
            TaskKind::Regression => (String::new(), self.metric.to_string()),
        };
        let mut r = vec![
            SCHEMA_ID.to_string(),
            self.seed.to_string(),
            self.step.to_string(),
            self.task.to_string(),
            u8::from(self.boundary).to_string(),
            acc,
            se,
            self.prediction.map(|p| p.to_string()).unwrap_or_default(),
            self.loss.to_string(),
            self.lr_mean.to_string(),
        ];
        for (min, mean) in &self.gamma {
            r.push(min.to_string());
            r.push(mean.to_string());
        }
        r
    }
}

/// Per-task length and mean metric, in task order.
pub fn task_summaries(rows: &[MetricsRow]) -> Vec<(usize, usize, f64)> {
    let mut by_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_task.entry(r.task).or_default().push(r.metric);
    }
    by_task
        .into_iter()
        .map(|(t, v)| (t, v.len(), per_task_accuracy(&v).expect("non-empty task")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub seed: u64,
    pub step: usize,
    pub error: String,
}

/// Aggregates of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub steps: usize,
    pub per_task: Vec<f64>,
    pub overall: f64,
    pub cumulative_error: f64,
    /// Smallest gamma seen per parameter group.
    pub min_gamma: BTreeMap<String, f64>,
    pub wall_clock_per_step_s: f64,
    pub csv: Option<PathBuf>,
    pub failure: Option<FailureRecord>,
}

/// Rows and summary of one seed.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<MetricsRow>,
    pub summary: SeedSummary,
    pub groups: Vec<String>,
    pub kind: TaskKind,
    /// Mean of the regression target per step (mean-tracking streams).
    pub target_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema: String,
    pub name: String,
    pub variant: Variant,
    pub seeds: Vec<SeedSummary>,
    pub overall: MeanStd,
    pub cumulative_error: MeanStd,
    pub per_task: Vec<MeanStd>,
    pub failures: Vec<FailureRecord>,
}

impl ExperimentSummary {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

fn model_spec(cfg: &ExperimentConfig, stream: &Stream) -> Result<MlpSpec> {
    let mut sizes = vec![stream.input_width()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(stream.output_width());
    MlpSpec::new(sizes, cfg.stream.task_kind())
}

/// Runs one seed. Step errors end the run early and are recorded in the
/// summary; rows up to the failing step are kept (and already on disk).
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: Option<&Dataset>,
    seed: u64,
    csv_path: Option<&Path>,
) -> Result<RunRecord> {
    let stream = Stream::new(&cfg.stream, data, seed)?;
    let spec = model_spec(cfg, &stream)?;
    let kind = spec.task_kind;
    let groups = group_labels(&spec);
    let mut learner = Learner::new(&spec, &cfg.optimizer, seed)?;
    let mut writer = match csv_path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(csv_header(&groups))?;
            Some(w)
        }
        None => None,
    };
    let sees_boundaries = cfg.optimizer.variant.uses_boundaries();
    let mut rows = Vec::with_capacity(stream.total_steps());
    let mut target_mean = Vec::new();
    let mut min_gamma = vec![f64::INFINITY; groups.len()];
    let mut failure = None;
    let mut elapsed = 0.0;
    let means: Vec<f64> = match cfg.stream.kind {
        StreamKind::MeanTracking => (0..stream.total_steps())
            .map(|t| stream.target_mean(t))
            .collect(),
        _ => Vec::new(),
    };
    for batch in stream {
        let step = batch.step;
        let outcome = (|| -> Result<MetricsRow> {
            // the learner predicts with its pre-update parameters before updating
            let report = if sees_boundaries {
                learner.step(&batch)?
            } else {
                learner.step(&batch.without_boundary())?
            };
            let pred = &report.output;
            let metric = online_accuracy(pred, &batch.targets);
            let prediction = match kind {
                TaskKind::Regression => Some(pred.data().iter().sum::<f64>() / pred.len() as f64),
                TaskKind::Classification => None,
            };
            elapsed += report.elapsed.as_secs_f64();
            Ok(MetricsRow {
                seed,
                step,
                task: batch.task,
                boundary: batch.boundary,
                metric,
                prediction,
                loss: report.loss,
                lr_mean: report.lr_mean,
                gamma: report.gamma_groups,
            })
        })();
        match outcome {
            Ok(row) => {
                for (m, (g, _)) in min_gamma.iter_mut().zip(&row.gamma) {
                    *m = m.min(*g);
                }
                if let Some(w) = writer.as_mut() {
                    w.write_record(row.record(kind))?;
                }
                if !means.is_empty() {
                    target_mean.push(means[step]);
                }
                rows.push(row);
            }
            Err(e) => {
                log::error!("seed {seed} aborted at step {step}: {e}");
                failure = Some(FailureRecord {
                    seed,
                    step,
                    error: e.to_string(),
                });
                break;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()
            .map_err(|e| Error::io(csv_path.expect("csv path"), e))?;
    }
    let tasks = task_summaries(&rows);
    let per_task: Vec<f64> = tasks.iter().map(|t| t.2).collect();
    let metrics: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let summary = SeedSummary {
        seed,
        steps: rows.len(),
        overall: if per_task.is_empty() {
            f64::NAN
        } else {
            overall_accuracy(&per_task)
        },
        per_task,
        cumulative_error: cumulative_error(&metrics, kind),
        min_gamma: groups.iter().cloned().zip(min_gamma).collect(),
        wall_clock_per_step_s: if rows.is_empty() {
            0.0
        } else {
            elapsed / rows.len() as f64
        },
        csv: csv_path.map(Path::to_path_buf),
        failure,
    };
    Ok(RunRecord {
        rows,
        summary,
        groups,
        kind,
        target_mean,
    })
}

/// Runs every seed (in parallel), writing `<name>_seed<k>.csv` and
/// `<name>_summary.json` into `out` when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(ExperimentSummary, Vec<RunRecord>)> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds to run".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = load_dataset(cfg)?;
    let records: Vec<RunRecord> = seeds
        .par_iter()
        .map(|&seed| {
            let csv = match (out, cfg.metrics.csv) {
                (Some(dir), true) => Some(dir.join(format!("{}_seed{seed}.csv", cfg.name))),
                _ => None,
            };
            run_seed(cfg, data.as_ref(), seed, csv.as_deref())
        })
        .collect::<Result<_>>()?;
    let summary = summarize(cfg, &records);
    if let Some(dir) = out {
        let path = dir.join(format!("{}_summary.json", cfg.name));
        fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((summary, records))
}

fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> ExperimentSummary {
    let seeds: Vec<SeedSummary> = records.iter().map(|r| r.summary.clone()).collect();
    let ok: Vec<&SeedSummary> = seeds.iter().filter(|s| s.failure.is_none()).collect();
    let stat = |f: &dyn Fn(&SeedSummary) -> f64| -> MeanStd {
        if ok.is_empty() {
            MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            }
        } else {
            MeanStd::of(&ok.iter().map(|s| f(s)).collect::<Vec<_>>())
        }
    };
    let tasks = ok.iter().map(|s| s.per_task.len()).min().unwrap_or(0);
    ExperimentSummary {
        schema: SCHEMA_ID.to_string(),
        name: cfg.name.clone(),
        variant: cfg.optimizer.variant,
        overall: stat(&|s| s.overall),
        cumulative_error: stat(&|s| s.cumulative_error),
        per_task: (0..tasks).map(|t| stat(&|s| s.per_task[t])).collect(),
        failures: seeds.iter().filter_map(|s| s.failure.clone()).collect(),
        seeds,
    }
}

/// A sweep file: a base config plus a grid of dotted-key overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: Value,
    pub grid: BTreeMap<String, Vec<Value>>,
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not an object")))?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cartesian product of the grid applied to the base config, in
    /// lexicographic key order.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        if self.grid.is_empty() || self.grid.values().any(|v| v.is_empty()) {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        let mut points = vec![self.base.clone()];
        for (key, values) in &self.grid {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut q = p.clone();
                    set_dotted(&mut q, key, v.clone())?;
                    next.push(q);
                }
            }
            points = next;
        }
        points
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut cfg: ExperimentConfig =
                    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
                cfg.name = format!("{}-{i:04}", cfg.name);
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub config: ExperimentConfig,
    pub cumulative_error: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Index of the selected point per method.
    pub best: BTreeMap<String, usize>,
}

/// Argmin of mean cumulative error per variant; ties go to the
/// lexicographically smaller canonical config. Failed points are never selected.
pub fn select_best(points: &[SweepPoint]) -> BTreeMap<String, usize> {
    let mut best: BTreeMap<String, usize> = BTreeMap::new();
    for p in points
        .iter()
        .filter(|p| !p.failed && p.cumulative_error.is_finite())
    {
        let key = p.config.optimizer.variant.name().to_string();
        let better = match best.get(&key) {
            None => true,
            Some(&b) => {
                let q = &points[b];
                p.cumulative_error < q.cumulative_error
                    || (p.cumulative_error == q.cumulative_error
                        && p.config.canonical() < q.config.canonical())
            }
        };
        if better {
            best.insert(key, p.index);
        }
    }
    best
}

/// Runs every grid point (in parallel) and selects the best per method.
pub fn sweep(
    configs: &[ExperimentConfig],
    seeds: Option<&[u64]>,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if configs.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let points: Vec<SweepPoint> = configs
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let own = cfg.seeds();
            let seeds = seeds.unwrap_or(&own);
            let dir = out.map(|d| d.join(&cfg.name));
            let (summary, _) = run_experiment(cfg, seeds, dir.as_deref())?;
            Ok(SweepPoint {
                index,
                config: cfg.clone(),
                cumulative_error: summary.cumulative_error.mean,
                failed: summary.failed(),
            })
        })
        .collect::<Result<_>>()?;
    let result = SweepResult {
        best: select_best(&points),
        points,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("sweep_summary.json");
        fs::write(&path, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

/// The mean-tracking toy: `(10, 5, 1)` MLP, mean switching between -2 and 2
/// every 50 steps. Returns no-reset SGD at 0.05 and 0.15, reset-at-switch SGD
/// (hard reset to the initial parameters, `beta` on the reset step) at 0.05,
/// and learned-gamma Soft Reset at 0.05.
pub fn toy_configs(num_switches: usize) -> Vec<ExperimentConfig> {
    let base = ExperimentConfig {
        name: "toy".into(),
        stream: StreamSpec::mean_tracking(num_switches),
        model: ModelConfig { hidden: vec![5] },
        num_seeds: 3,
        ..ExperimentConfig::default()
    };
    let with = |name: &str, opt: OptimizerConfig| ExperimentConfig {
        name: name.into(),
        optimizer: opt,
        ..base.clone()
    };
    let sgd = |alpha: f64| OptimizerConfig {
        alpha,
        ..OptimizerConfig::with_variant(Variant::Sgd)
    };
    vec![
        with("toy_sgd_0.05", sgd(0.05)),
        with("toy_sgd_0.15", sgd(0.15)),
        with(
            "toy_reset_0.05",
            OptimizerConfig {
                alpha: 0.05,
                reset_alpha: Some(0.05),
                reset_policy: ResetPolicy::FixedInit,
                reset_mask: ResetMask::All,
                ..OptimizerConfig::with_variant(Variant::HardReset)
            },
        ),
        with(
            "toy_soft_reset_0.05",
            OptimizerConfig {
                alpha: 0.05,
                ..toy_soft_reset()
            },
        ),
    ]
}

/// Soft Reset settings used on the mean-tracking toy.
pub fn toy_soft_reset() -> OptimizerConfig {
    OptimizerConfig {
        alpha: 0.05,
        eta_gamma: 0.05,
        s: 0.5,
        p: Some(1.0),
        ..OptimizerConfig::with_variant(Variant::SoftReset)
    }
}

/// Steps after each switch until the pre-update prediction is within `tol`
/// of the true mean (`None` if it never gets there before the next switch).
pub fn recovery_steps(record: &RunRecord, segment: usize, tol: f64) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    let n = record.rows.len();
    let mut start = segment;
    while start < n {
        let end = (start + segment).min(n);
        let hit = (start..end).find(|&t| {
            let p = record.rows[t].prediction.unwrap_or(f64::NAN);
            (p - record.target_mean[t]).abs() < tol
        });
        out.push(hit.map(|t| t - start));
        start += segment;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let pred = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            online_accuracy(&pred, &Targets::Classes(vec![0, 1, 0, 1])),
            1.0
        );
        assert_eq!(
            online_accuracy(&pred, &Targets::Classes(vec![0, 0, 1, 0])),
            0.25
        );
        let reg = Tensor::matrix(1, 1, vec![1.5]).unwrap();
        assert_eq!(online_accuracy(&reg, &Targets::Values(vec![2.0])), 0.25);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(per_task_accuracy(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(per_task_accuracy(&[]).is_err());
        assert_eq!(overall_accuracy(&[0.5, 0.75]), 0.625);
        assert_eq!(cumulative_error(&[1.0; 7], TaskKind::Classification), 0.0);
        assert_eq!(cumulative_error(&[0.0; 10], TaskKind::Classification), 10.0);
    }

    #[test]
    fn dotted_keys() {
        let mut v = serde_json::json!({"optimizer": {"alpha": 0.1}});
        set_dotted(&mut v, "optimizer.alpha", serde_json::json!(0.5)).unwrap();
        set_dotted(&mut v, "stream.batch_size", serde_json::json!(4)).unwrap();
        assert_eq!(v["optimizer"]["alpha"], 0.5);
        assert_eq!(v["stream"]["batch_size"], 4);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let spec = SweepSpec {
            base: serde_json::json!({}),
            grid: BTreeMap::new(),
        };
        assert!(spec.expand().is_err());
        assert!(sweep(&[], None, None).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"name": "x", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"name": "x", "optimizer": {"variant": "soft_reset"}}"#
        )
        .is_ok());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
