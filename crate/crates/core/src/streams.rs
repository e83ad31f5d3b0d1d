//! Piecewise non-stationary data streams.
//!
//! A [`Stream`] yields one [`Batch`] per online step. Every batch carries its
//! task id and a boundary flag set on the first batch of each task; the
//! harness strips the flag before handing batches to learners that are not
//! supposed to know about boundaries.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::rng::{lane, Lane};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `rows x features`.
    pub inputs: Tensor,
    pub targets: Targets,
    pub step: usize,
    pub task: usize,
    pub boundary: bool,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Self {
        Batch {
            inputs,
            targets,
            step: 0,
            task: 0,
            boundary: false,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Copy with the boundary flag cleared.
    pub fn without_boundary(&self) -> Batch {
        Batch {
            boundary: false,
            ..self.clone()
        }
    }
}

/// Labelled examples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `len x features`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub features: usize,
    pub num_classes: usize,
    /// `(rows, cols)` when the features are an image, enabling crops.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.features);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        Dataset {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: self.features,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            actual: bytes.len(),
        }),
    }
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::UnexpectedMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_u32(&bytes, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * ndims;
    let needed = start + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok((dims, bytes[start..needed].to_vec()))
}

/// Reads an IDX image file (`0x803`) and label file (`0x801`).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images, IMAGE_MAGIC)?;
    let (ldims, raw_labels) = read_idx(labels, LABEL_MAGIC)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if count != ldims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    Ok(Dataset {
        inputs: pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        num_classes: labels.iter().max().map_or(0, |m| m + 1).max(10),
        labels,
        features: rows * cols,
        image_shape: Some((rows, cols)),
    })
}

/// Loads the training split from a directory holding the canonical file names.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
}

/// Gaussian class clusters around random prototypes in `[0, 1]^features`.
///
/// Every example is kept only if the nearest-prototype linear score of its
/// own class beats every other class by at least 1, so the set is linearly
/// separable with margin 1. Class counts differ by at most one.
pub fn synthetic_fallback_dataset(
    num_examples: usize,
    num_classes: usize,
    features: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_examples == 0 || num_classes == 0 || features == 0 {
        return Err(Error::invalid("synthetic dataset sizes must be positive"));
    }
    let mut rng = Lane::new(seed, &[lane::SYNTHETIC]);
    let protos: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..features).map(|_| 0.2 + 0.6 * rng.uniform()).collect())
        .collect();
    let norms: Vec<f64> = protos
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum())
        .collect();
    // score_c(x) = 2 m_c.x - |m_c|^2, i.e. -|x - m_c|^2 up to a shared term
    let score = |x: &[f64], c: usize| -> f64 {
        2.0 * x.iter().zip(&protos[c]).map(|(a, b)| a * b).sum::<f64>() - norms[c]
    };
    let mut labels: Vec<usize> = (0..num_examples).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let mut inputs = Vec::with_capacity(num_examples * features);
    for &c in &labels {
        let mut tries = 0;
        loop {
            let x: Vec<f64> = protos[c]
                .iter()
                .map(|m| (m + 0.15 * rng.normal()).clamp(0.0, 1.0))
                .collect();
            let own = score(&x, c);
            if (0..num_classes).all(|k| k == c || own - score(&x, k) >= 1.0) {
                inputs.extend(x);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::invalid(
                    "synthetic clusters overlap; use more features",
                ));
            }
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        features,
        num_classes,
        image_shape: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    RandomLabel,
    Permuted,
    LabelNoise,
    MeanTracking,
}

/// Declarative description of a stream. The run seed is supplied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub kind: StreamKind,
    /// Number of examples drawn once from the dataset and reused by every task.
    pub subset_size: usize,
    pub num_tasks: usize,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    /// Fraction of relabelled examples per task (label-noise streams).
    pub noise_fraction: f64,
    /// Side length of a random square crop, for image datasets.
    pub crop: Option<usize>,
    /// Permuted streams: keep task 0 unpermuted.
    pub identity_first_task: bool,
    /// Mean tracking: steps between mean switches.
    pub segment_length: usize,
    /// Mean tracking: observation noise std.
    pub noise_std: f64,
    /// Mean tracking: width of the constant input.
    pub input_dim: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: StreamKind::RandomLabel,
            subset_size: 10_000,
            num_tasks: 10,
            epochs_per_task: 1,
            batch_size: 128,
            noise_fraction: 0.2,
            crop: None,
            identity_first_task: false,
            segment_length: 50,
            noise_std: 0.01,
            input_dim: 10,
        }
    }
}

impl StreamSpec {
    /// The toy mean-tracking stream: `+-2` switching every 50 steps, batch 1.
    pub fn mean_tracking(num_switches: usize) -> Self {
        StreamSpec {
            kind: StreamKind::MeanTracking,
            num_tasks: num_switches + 1,
            batch_size: 1,
            ..StreamSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "num_tasks and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!(
                "noise_fraction must be in [0, 1], got {}",
                self.noise_fraction
            )));
        }
        match self.kind {
            StreamKind::MeanTracking => {
                if self.segment_length == 0 || self.input_dim == 0 || !(self.noise_std >= 0.0) {
                    return Err(Error::Config("invalid mean-tracking parameters".into()));
                }
            }
            _ => {
                if self.subset_size == 0 || self.epochs_per_task == 0 {
                    return Err(Error::Config(
                        "subset_size and epochs_per_task must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.kind {
            StreamKind::MeanTracking => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }
}

/// Per-task labelling and pixel order of a classification stream.
struct TaskView {
    labels: Vec<usize>,
    permutation: Option<Vec<usize>>,
}

/// Iterator over the batches of one stream realization.
pub struct Stream {
    spec: StreamSpec,
    seed: u64,
    data: Option<Arc<Dataset>>,
    task: usize,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    view: Option<TaskView>,
    step: usize,
    crop_rng: Lane,
    noise_rng: Lane,
}

impl Stream {
    /// Builds a stream over `data` (ignored for mean tracking). The subset is
    /// drawn here, once.
    pub fn new(spec: &StreamSpec, data: Option<&Dataset>, seed: u64) -> Result<Stream> {
        spec.validate()?;
        let data = match spec.kind {
            StreamKind::MeanTracking => None,
            _ => {
                let ds = data.ok_or_else(|| Error::Config("stream needs a dataset".into()))?;
                if spec.subset_size > ds.len() {
                    return Err(Error::Config(format!(
                        "subset_size {} exceeds dataset size {}",
                        spec.subset_size,
                        ds.len()
                    )));
                }
                if let Some(c) = spec.crop {
                    match ds.image_shape {
                        Some((r, w)) if c > 0 && c <= r && c <= w => {}
                        _ => {
                            return Err(Error::Config(format!("crop {c} does not fit the inputs")))
                        }
                    }
                }
                let mut idx = Lane::new(seed, &[lane::SUBSET]).permutation(ds.len());
                idx.truncate(spec.subset_size);
                Some(Arc::new(ds.select(&idx)))
            }
        };
        Ok(Stream {
            spec: spec.clone(),
            seed,
            data,
            task: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            view: None,
            step: 0,
            crop_rng: Lane::new(seed, &[lane::CROP]),
            noise_rng: Lane::new(seed, &[lane::TARGET_NOISE]),
        })
    }

    /// The fixed subset every task is built from.
    pub fn subset(&self) -> Option<&Dataset> {
        self.data.as_deref()
    }

    pub fn steps_per_task(&self) -> usize {
        match &self.data {
            None => self.spec.segment_length,
            Some(ds) => self.spec.epochs_per_task * ds.len().div_ceil(self.spec.batch_size),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.spec.num_tasks * self.steps_per_task()
    }

    pub fn input_width(&self) -> usize {
        match (&self.data, self.spec.crop) {
            (None, _) => self.spec.input_dim,
            (Some(_), Some(c)) => c * c,
            (Some(ds), None) => ds.features,
        }
    }

    pub fn output_width(&self) -> usize {
        match &self.data {
            None => 1,
            Some(ds) => ds.num_classes,
        }
    }

    /// Mean of the mean-tracking target at `step`.
    pub fn target_mean(&self, step: usize) -> f64 {
        if (step / self.spec.segment_length).is_multiple_of(2) {
            -2.0
        } else {
            2.0
        }
    }

    /// Label map and pixel permutation used for `task`.
    fn task_view(&self, task: usize) -> TaskView {
        let ds = self.data.as_ref().expect("classification stream");
        let n = ds.len();
        let classes = ds.num_classes;
        match self.spec.kind {
            StreamKind::RandomLabel => {
                let mut rng = Lane::new(self.seed, &[lane::LABELS, task as u64]);
                TaskView {
                    labels: (0..n).map(|_| rng.below(classes)).collect(),
                    permutation: None,
                }
            }
            StreamKind::LabelNoise => {
                let mut rng = Lane::new(self.seed, &[lane::LABELS, task as u64]);
                let k = (self.spec.noise_fraction * n as f64).round() as usize;
                let mut labels = ds.labels.clone();
                for i in rng.permutation(n).into_iter().take(k) {
                    labels[i] = rng.below(classes);
                }
                TaskView {
                    labels,
                    permutation: None,
                }
            }
            StreamKind::Permuted => {
                let permutation = if task == 0 && self.spec.identity_first_task {
                    None
                } else {
                    let mut rng = Lane::new(self.seed, &[lane::PERMUTATION, task as u64]);
                    Some(rng.permutation(ds.features))
                };
                TaskView {
                    labels: ds.labels.clone(),
                    permutation,
                }
            }
            StreamKind::MeanTracking => unreachable!("no dataset view for mean tracking"),
        }
    }

    /// Labels assigned to the subset during `task`.
    pub fn task_labels(&self, task: usize) -> Option<Vec<usize>> {
        self.data.as_ref().map(|_| self.task_view(task).labels)
    }

    /// Pixel permutation used during `task`, if any.
    pub fn task_permutation(&self, task: usize) -> Option<Vec<usize>> {
        self.data
            .as_ref()
            .and_then(|_| self.task_view(task).permutation)
    }

    fn next_mean_tracking(&mut self) -> Option<Batch> {
        if self.step >= self.total_steps() {
            return None;
        }
        let rows = self.spec.batch_size;
        let mu = self.target_mean(self.step);
        let targets = (0..rows)
            .map(|_| mu + self.spec.noise_std * self.noise_rng.normal())
            .collect();
        let inputs = Tensor::new(
            vec![rows, self.spec.input_dim],
            vec![1.0; rows * self.spec.input_dim],
        )
        .expect("finite constant input");
        let batch = Batch {
            inputs,
            targets: Targets::Values(targets),
            step: self.step,
            task: self.step / self.spec.segment_length,
            boundary: self.step.is_multiple_of(self.spec.segment_length),
        };
        self.step += 1;
        Some(batch)
    }

    fn next_classification(&mut self) -> Option<Batch> {
        let ds = Arc::clone(self.data.as_ref().expect("classification stream"));
        if self.cursor >= self.order.len() {
            // start of a new epoch, possibly of a new task
            if self.view.is_some() {
                self.epoch += 1;
                if self.epoch == self.spec.epochs_per_task {
                    self.epoch = 0;
                    self.task += 1;
                    self.view = None;
                }
            }
            if self.task >= self.spec.num_tasks {
                return None;
            }
            if self.view.is_none() {
                self.view = Some(self.task_view(self.task));
            }
            let mut rng = Lane::new(
                self.seed,
                &[lane::SHUFFLE, self.task as u64, self.epoch as u64],
            );
            self.order = rng.permutation(ds.len());
            self.cursor = 0;
        }
        let boundary = self.epoch == 0 && self.cursor == 0;
        let end = (self.cursor + self.spec.batch_size).min(self.order.len());
        let rows = &self.order[self.cursor..end];
        self.cursor = end;
        let view = self.view.as_ref().expect("task view");

        let crop = self.spec.crop.map(|c| {
            let (h, w) = ds.image_shape.expect("validated image shape");
            let top = self.crop_rng.below(h - c + 1);
            let left = self.crop_rng.below(w - c + 1);
            (c, w, top, left)
        });
        let width = self.input_width();
        let mut inputs = Vec::with_capacity(rows.len() * width);
        let mut permuted = vec![0.0; ds.features];
        for &i in rows {
            let x = match &view.permutation {
                Some(p) => {
                    let src = ds.row(i);
                    for (dst, &j) in permuted.iter_mut().zip(p) {
                        *dst = src[j];
                    }
                    &permuted[..]
                }
                None => ds.row(i),
            };
            match crop {
                Some((c, w, top, left)) => {
                    for r in top..top + c {
                        inputs.extend_from_slice(&x[r * w + left..r * w + left + c]);
                    }
                }
                None => inputs.extend_from_slice(x),
            }
        }
        let batch = Batch {
            inputs: Tensor::new(vec![rows.len(), width], inputs).expect("finite inputs"),
            targets: Targets::Classes(rows.iter().map(|&i| view.labels[i]).collect()),
            step: self.step,
            task: self.task,
            boundary,
        };
        self.step += 1;
        Some(batch)
    }
}

impl Iterator for Stream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match self.spec.kind {
            StreamKind::MeanTracking => self.next_mean_tracking(),
            _ => self.next_classification(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images(n: usize) -> Dataset {
        Dataset {
            inputs: (0..n * 16).map(|v| v as f64 / (n * 16) as f64).collect(),
            labels: (0..n).map(|i| i % 10).collect(),
            features: 16,
            num_classes: 10,
            image_shape: Some((4, 4)),
        }
    }

    fn spec(kind: StreamKind) -> StreamSpec {
        StreamSpec {
            kind,
            subset_size: 20,
            num_tasks: 3,
            epochs_per_task: 2,
            batch_size: 8,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn schedule_and_boundaries() {
        let ds = tiny_images(30);
        let s = Stream::new(&spec(StreamKind::RandomLabel), Some(&ds), 1).unwrap();
        assert_eq!(s.steps_per_task(), 6);
        let total = s.total_steps();
        let batches: Vec<Batch> = s.collect();
        assert_eq!(batches.len(), total);
        for (t, b) in batches.iter().enumerate() {
            assert_eq!(b.step, t);
            assert_eq!(b.task, t / 6);
            assert_eq!(b.boundary, t % 6 == 0);
            assert!(b.len() <= 8);
        }
        // every epoch covers the subset exactly once
        let per_epoch: usize = batches[..3].iter().map(|b| b.len()).sum();
        assert_eq!(per_epoch, 20);
    }

    #[test]
    fn labels_fixed_within_task() {
        let ds = tiny_images(30);
        let s = Stream::new(&spec(StreamKind::RandomLabel), Some(&ds), 5).unwrap();
        let labels: Vec<Vec<usize>> = (0..3).map(|t| s.task_labels(t).unwrap()).collect();
        let subset = s.subset().unwrap().clone();
        for b in s {
            let Targets::Classes(y) = &b.targets else {
                panic!()
            };
            for (r, &label) in y.iter().enumerate() {
                let row = &b.inputs.data()[r * 16..(r + 1) * 16];
                let i = (0..subset.len()).find(|&i| subset.row(i) == row).unwrap();
                assert_eq!(labels[b.task][i], label);
            }
        }
    }

    #[test]
    fn replay_is_identical() {
        let ds = tiny_images(30);
        let mut sp = spec(StreamKind::Permuted);
        sp.crop = Some(3);
        let a: Vec<Batch> = Stream::new(&sp, Some(&ds), 9).unwrap().collect();
        let b: Vec<Batch> = Stream::new(&sp, Some(&ds), 9).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a[0].inputs.shape(), &[8, 9]);
    }

    #[test]
    fn permuted_identity_first_task() {
        let ds = tiny_images(20);
        let mut sp = spec(StreamKind::Permuted);
        sp.identity_first_task = true;
        let s = Stream::new(&sp, Some(&ds), 2).unwrap();
        assert!(s.task_permutation(0).is_none());
        let p = s.task_permutation(1).unwrap();
        let mut inverse = vec![0; p.len()];
        for (i, &j) in p.iter().enumerate() {
            inverse[j] = i;
        }
        let x: Vec<usize> = (100..116).collect();
        let y: Vec<usize> = p.iter().map(|&j| x[j]).collect();
        let back: Vec<usize> = inverse.iter().map(|&j| y[j]).collect();
        assert_eq!(back, x);
        let subset = s.subset().unwrap().clone();
        for b in s.take(6) {
            for r in 0..b.len() {
                let row = &b.inputs.data()[r * 16..(r + 1) * 16];
                assert!((0..subset.len()).any(|i| subset.row(i) == row));
            }
        }
    }

    #[test]
    fn label_noise_fraction() {
        let ds = tiny_images(20);
        let mut sp = spec(StreamKind::LabelNoise);
        sp.noise_fraction = 0.0;
        let s = Stream::new(&sp, Some(&ds), 3).unwrap();
        assert_eq!(s.task_labels(1).unwrap(), s.subset().unwrap().labels);
        sp.noise_fraction = 1.5;
        assert!(Stream::new(&sp, Some(&ds), 3).is_err());
        sp.noise_fraction = -0.1;
        assert!(Stream::new(&sp, Some(&ds), 3).is_err());
    }

    #[test]
    fn mean_tracking_schedule() {
        let sp = StreamSpec::mean_tracking(3);
        let s = Stream::new(&sp, None, 0).unwrap();
        assert_eq!(s.total_steps(), 200);
        assert_eq!(s.target_mean(0), -2.0);
        assert_eq!(s.target_mean(49), -2.0);
        assert_eq!(s.target_mean(50), 2.0);
        assert_eq!(s.target_mean(100), -2.0);
        let batches: Vec<Batch> = s.collect();
        assert!(batches[50].boundary && !batches[51].boundary);
        assert_eq!(batches[0].inputs.shape(), &[1, 10]);
        for seg in batches.chunks(50) {
            let mu = if seg[0].task % 2 == 0 { -2.0 } else { 2.0 };
            let ys: Vec<f64> = seg
                .iter()
                .map(|b| match &b.targets {
                    Targets::Values(v) => v[0],
                    _ => unreachable!(),
                })
                .collect();
            let mean = ys.iter().sum::<f64>() / 50.0;
            let se = 0.01 / 50f64.sqrt();
            assert!((mean - mu).abs() < 5.0 * se, "{mean} vs {mu}");
        }
    }

    #[test]
    fn synthetic_is_balanced_and_bounded() {
        let ds = synthetic_fallback_dataset(1003, 10, 64, 4).unwrap();
        let mut counts = [0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(ds.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds, synthetic_fallback_dataset(1003, 10, 64, 4).unwrap());
    }

    #[test]
    fn subset_too_large() {
        let ds = tiny_images(10);
        assert!(Stream::new(&spec(StreamKind::RandomLabel), Some(&ds), 0).is_err());
    }
}
