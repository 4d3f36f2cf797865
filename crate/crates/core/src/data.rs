//! Datasets, class-incremental task streams and their sources.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, purpose};
use crate::tensor::Tensor;

/// Samples (values in [0, 1]) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} exceeds declared class count {num_classes}")));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of one sample (without the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.gather_rows(rows)?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(rows)?;
        Dataset::new(x, y, self.num_classes)
    }

    /// Relabels every sample through `map` (old label → new label).
    pub fn relabel(&self, map: &[Option<usize>], num_classes: usize) -> Result<Dataset> {
        let labels = self
            .labels
            .iter()
            .map(|&l| map.get(l).copied().flatten().ok_or_else(|| Error::Data(format!("label {l} has no mapping"))))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.inputs.clone(), labels, num_classes)
    }

    fn with_inputs(&self, inputs: Tensor) -> Dataset {
        Dataset { inputs, labels: self.labels.clone(), num_classes: self.num_classes }
    }
}

/// One step of a class-incremental stream. Labels inside `train`/`test` are global
/// output indices: task `t` owns indices `offset..offset + classes.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Source class ids, in the order of this task's head outputs.
    pub classes: Vec<usize>,
    pub offset: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Global output index → position inside this task's head.
    pub fn local_labels(&self, labels: &[usize]) -> Vec<usize> {
        labels.iter().map(|l| l - self.offset).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Seed of the class permutation, when one was applied.
    pub order_seed: Option<u64>,
}

impl TaskStream {
    /// Checks non-emptiness, pairwise class disjointness and label ranges.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::StreamValidation("stream has no tasks".into()));
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if a.classes.is_empty() {
                return Err(Error::StreamValidation(format!("task {} has no classes", i + 1)));
            }
            for (j, b) in self.tasks.iter().enumerate().skip(i + 1) {
                if let Some(c) = a.classes.iter().find(|c| b.classes.contains(c)) {
                    return Err(Error::StreamValidation(format!(
                        "class {c} appears in task {} and task {}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let mut offset = 0;
        for (i, t) in self.tasks.iter().enumerate() {
            if t.offset != offset {
                return Err(Error::StreamValidation(format!("task {} has offset {}, expected {offset}", i + 1, t.offset)));
            }
            let range = t.offset..t.offset + t.classes.len();
            for ds in [&t.train, &t.test] {
                if let Some(l) = ds.labels().iter().find(|l| !range.contains(l)) {
                    return Err(Error::StreamValidation(format!("task {} holds label {l} outside {range:?}", i + 1)));
                }
            }
            offset += t.classes.len();
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(Task::num_classes).sum()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.tasks[0].train.sample_shape()
    }

    /// Index of the task owning a global output index.
    pub fn task_of(&self, label: usize) -> Option<usize> {
        self.tasks.iter().position(|t| (t.offset..t.offset + t.classes.len()).contains(&label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "tasks")]
pub enum SplitScheme {
    /// `n` tasks of equal size.
    Equal(usize),
    /// Half the classes first, the rest in `n` equal incremental tasks.
    HalfFirst(usize),
}

/// Partitions `0..num_classes` into tasks, optionally after a seeded permutation.
pub fn split_classes(num_classes: usize, scheme: SplitScheme, order_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    if let Some(s) = order_seed {
        order.shuffle(&mut seed::rng(seed::derive(s, &[purpose::ORDER])));
    }
    let sizes = match scheme {
        SplitScheme::Equal(n) => {
            if n == 0 || !num_classes.is_multiple_of(n) {
                return Err(Error::param(format!("{num_classes} classes cannot be split into {n} equal tasks")));
            }
            vec![num_classes / n; n]
        }
        SplitScheme::HalfFirst(n) => {
            let first = num_classes / 2;
            let rest = num_classes - first;
            if !num_classes.is_multiple_of(2) || n == 0 || !rest.is_multiple_of(n) || first == 0 {
                return Err(Error::param(format!(
                    "{num_classes} classes cannot be split into a half-size first task plus {n} equal tasks"
                )));
            }
            std::iter::once(first).chain(std::iter::repeat_n(rest / n, n)).collect()
        }
    };
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(out)
}

/// Row indices for a per-class train/test split; each class keeps `round(fraction * count)` training rows.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = seed::rng(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng);
        let k = (train_fraction * rows.len() as f64).round() as usize;
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Builds a stream from class-labelled train/test sets and a class partition.
pub fn stream_from_datasets(train: &Dataset, test: &Dataset, partition: &[Vec<usize>], order_seed: Option<u64>) -> Result<TaskStream> {
    let mut tasks = Vec::with_capacity(partition.len());
    let mut offset = 0;
    let total: usize = partition.iter().map(Vec::len).sum();
    for classes in partition {
        let mut map = vec![None; train.num_classes().max(test.num_classes())];
        for (i, &c) in classes.iter().enumerate() {
            if c >= map.len() {
                return Err(Error::Data(format!("class {c} not present in dataset")));
            }
            map[c] = Some(offset + i);
        }
        let pick = |ds: &Dataset| -> Result<Dataset> {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| map[ds.labels()[i]].is_some()).collect();
            if rows.is_empty() {
                return Err(Error::Data(format!("no samples for classes {classes:?}")));
            }
            ds.subset(&rows)?.relabel(&map, total)
        };
        tasks.push(Task { classes: classes.clone(), offset, train: pick(train)?, test: pick(test)? });
        offset += classes.len();
    }
    let stream = TaskStream { tasks, order_seed };
    stream.validate()?;
    Ok(stream)
}

/// Layout of synthetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleLayout {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl SampleLayout {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            SampleLayout::Vector { dim } => vec![dim],
            SampleLayout::Image { channels, height, width } => vec![channels, height, width],
        }
    }
}

/// Parameters of the synthetic drifting stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub layout: SampleLayout,
    pub samples_per_class: usize,
    /// Additive input offset per task: task `t` (0-based) is shifted by `t * shift`.
    pub shift: f64,
    /// Per-feature noise around each class prototype.
    pub noise: f64,
    /// Interval prototype features are drawn from (vector layout only).
    pub proto_range: (f64, f64),
    /// In [0, 1]: how much class `k` of every task blends toward class `k` of the first task,
    /// making later classes resemble earlier ones. 0 gives independent prototypes.
    pub sharing: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Vector stream used for the teacher-adaptation experiments: 5 classes per task in 20
    /// dimensions, prototypes spread over [0, 1] and later classes resembling earlier ones.
    pub fn drifting(n_tasks: usize, shift: f64, seed: u64) -> Self {
        Self { proto_range: (0.0, 1.0), sharing: 0.7, ..Self::vector(n_tasks, 5, 20, 100, shift, seed) }
    }

    pub fn vector(n_tasks: usize, classes_per_task: usize, dim: usize, samples_per_class: usize, shift: f64, seed: u64) -> Self {
        Self {
            n_tasks,
            classes_per_task,
            layout: SampleLayout::Vector { dim },
            samples_per_class,
            shift,
            noise: 0.08,
            proto_range: (0.15, 0.45),
            sharing: 0.0,
            seed,
        }
    }
}

fn class_prototype(layout: SampleLayout, range: (f64, f64), rng: &mut seed::Rng) -> Vec<f64> {
    match layout {
        SampleLayout::Vector { dim } => (0..dim).map(|_| rng.gen_range(range.0..range.1)).collect(),
        SampleLayout::Image { channels, height, width } => {
            let mut img = vec![0.15; channels * height * width];
            for _ in 0..3 {
                let cy = rng.gen_range(0.0..height as f64);
                let cx = rng.gen_range(0.0..width as f64);
                let radius = rng.gen_range(0.15..0.3) * height.min(width) as f64;
                let amp: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.05..0.3)).collect();
                for c in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(c * height + y) * width + x] += amp[c] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
            }
            img
        }
    }
}

/// Gaussian class blobs (vector layout) or blob-rendered patches (image layout), task `t`
/// shifted by `t * shift` and clipped to [0, 1], split 80/20 per class.
pub fn synthetic_stream(spec: &SyntheticSpec) -> Result<TaskStream> {
    if spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.samples_per_class == 0 {
        return Err(Error::param("synthetic stream counts must be at least 1"));
    }
    let shape = spec.layout.shape();
    if shape.contains(&0) {
        return Err(Error::param("synthetic sample shape must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.sharing) {
        return Err(Error::param("sharing must lie in [0, 1]"));
    }
    if !(spec.proto_range.0 < spec.proto_range.1) {
        return Err(Error::param("proto_range must be a non-empty interval"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::param(e.to_string()))?;
    let per = shape.iter().product::<usize>();
    let total = spec.n_tasks * spec.classes_per_task;
    let n_train = ((0.8 * spec.samples_per_class as f64).round() as usize).min(spec.samples_per_class);
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let offset = t * spec.classes_per_task;
        let mut train = (Vec::new(), Vec::new());
        let mut test = (Vec::new(), Vec::new());
        for k in 0..spec.classes_per_task {
            let class = offset + k;
            let mut rng = seed::rng(seed::derive(spec.seed, &[purpose::DATA, class as u64]));
            let mut proto = class_prototype(spec.layout, spec.proto_range, &mut rng);
            if spec.sharing > 0.0 && t > 0 {
                let mut base_rng = seed::rng(seed::derive(spec.seed, &[purpose::DATA, k as u64]));
                let base = class_prototype(spec.layout, spec.proto_range, &mut base_rng);
                proto.iter_mut().zip(&base).for_each(|(p, b)| *p = (1.0 - spec.sharing) * *p + spec.sharing * b);
            }
            for s in 0..spec.samples_per_class {
                let sample = proto.iter().map(|&p| (p + noise.sample(&mut rng) + t as f64 * spec.shift).clamp(0.0, 1.0));
                let dst = if s < n_train { &mut train } else { &mut test };
                dst.0.extend(sample);
                dst.1.push(class);
            }
        }
        let make = |(x, y): (Vec<f64>, Vec<usize>)| -> Result<Dataset> {
            let n = y.len();
            if n == 0 {
                return Err(Error::param("samples_per_class too small for an 80/20 split"));
            }
            let mut full = vec![n];
            full.extend_from_slice(&shape);
            debug_assert_eq!(x.len(), n * per);
            Dataset::new(Tensor::new(full, x)?, y, total)
        };
        tasks.push(Task {
            classes: (offset..offset + spec.classes_per_task).collect(),
            offset,
            train: make(train)?,
            test: make(test)?,
        });
    }
    let stream = TaskStream { tasks, order_seed: None };
    stream.validate()?;
    Ok(stream)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(path, "header"))
}

/// Parses an IDX image file (magic 0x00000803) into (count, rows, cols, pixels scaled to [0, 1]).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { path: path.into(), msg: format!("bad image magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n.checked_mul(rows).and_then(|v| v.checked_mul(cols)).ok_or_else(|| truncated(path, "dimensions"))?;
    let pixels = bytes.get(16..16 + need).ok_or_else(|| truncated(path, "pixel data"))?;
    Ok((n, rows, cols, pixels.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { path: path.into(), msg: format!("bad label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let labels = bytes.get(8..8 + n).ok_or_else(|| truncated(path, "label data"))?;
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair as a dataset of (1, rows, cols) images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, classes)
}

/// Loads a CIFAR-style binary batch: records of one label byte followed by 3×32×32 pixel bytes.
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    const RECORD: usize = 1 + 3072;
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(truncated(path, "record"));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks(RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, classes)
}

/// Gaussian noise severity on the 1–5 ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub severity: u8,
    pub sigmas: [f64; 5],
}

impl CorruptionSpec {
    pub const DEFAULT_SIGMAS: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];

    pub fn new(severity: u8) -> Result<Self> {
        Self::with_sigmas(severity, Self::DEFAULT_SIGMAS)
    }

    pub fn with_sigmas(severity: u8, sigmas: [f64; 5]) -> Result<Self> {
        if severity > 5 {
            return Err(Error::param(format!("severity must be in 0..=5, got {severity}")));
        }
        if sigmas[0] <= 0.0 || sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("noise sigmas must be positive and strictly increasing"));
        }
        Ok(Self { severity, sigmas })
    }

    /// Noise standard deviation; 0 at severity 0.
    pub fn sigma(&self) -> f64 {
        match self.severity {
            0 => 0.0,
            s => self.sigmas[s as usize - 1],
        }
    }
}

/// `clip(x + N(0, σ²), 0, 1)`; severity 0 returns the input unchanged.
pub fn corrupt_gaussian(dataset: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<Dataset> {
    if spec.severity > 5 {
        return Err(Error::param(format!("severity must be in 0..=5, got {}", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(dataset.clone());
    }
    let normal = Normal::new(0.0, spec.sigma()).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = seed::rng(seed::derive(seed, &[purpose::CORRUPT]));
    let values = dataset.inputs.values().iter().map(|&x| (x + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    Ok(dataset.with_inputs(Tensor::new(dataset.inputs.shape().to_vec(), values)?))
}

/// Corrupts the train and test data of every other task (the 2nd, 4th, ...).
pub fn corrupt_every_other(stream: &TaskStream, spec: &CorruptionSpec, seed: u64) -> Result<TaskStream> {
    let mut out = stream.clone();
    for (t, task) in out.tasks.iter_mut().enumerate().filter(|(t, _)| t % 2 == 1) {
        task.train = corrupt_gaussian(&task.train, spec, seed::derive(seed, &[t as u64, 0]))?;
        task.test = corrupt_gaussian(&task.test, spec, seed::derive(seed, &[t as u64, 1]))?;
    }
    Ok(out)
}
