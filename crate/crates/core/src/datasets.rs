//! Task construction: IDX/CSV ingestion, disjoint-class splits, synthetic
//! per-writer similar tasks and mixed sequences.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, label};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw grayscale images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols * labels.len() {
            return Err(Error::Input(format!(
                "{} pixels for {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw(i).iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn classes(&self) -> Vec<u8> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn indices_of(&self, classes: &[u8]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                offset: 0,
                msg: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: buf.len() as u64,
            msg: format!("truncated header, needed 4 bytes at {offset}"),
        })
}

/// Parses an IDX3 image file (optionally gzipped) into
/// `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated pixel data: header promises {need} bytes, found {}", body.len()),
        });
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

/// Parses an IDX1 label file (optionally gzipped).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated labels: header promises {count}, found {}", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

/// Loads a matching pair of IDX image and label files.
pub fn parse_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let (count, rows, cols, pixels) = parse_idx_images(&open_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&open_maybe_gz(labels)?)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {} does not match image count {count}", labels.len()),
        });
    }
    ImageSet::new(rows, cols, pixels, labels)
}

/// Loads a CSV with a header row, a `label` column and one 0–255 column per
/// pixel. Square pixel counts are treated as square images.
pub fn parse_csv(path: &Path) -> Result<ImageSet> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: "no `label` column in header".into(),
        })?;
    let dim = headers.len() - 1;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != headers.len() {
            return Err(Error::Format {
                offset,
                msg: format!("{} fields, header has {}", record.len(), headers.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let v: u8 = field.trim().parse().map_err(|_| Error::Format {
                offset,
                msg: format!("field {j} = {field:?} is not a byte value"),
            })?;
            if j == label_col {
                labels.push(v);
            } else {
                pixels.push(v);
            }
        }
    }
    let side = (dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };
    ImageSet::new(rows, cols, pixels, labels)
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        offset,
        msg: e.to_string(),
    }
}

/// Features and labels of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.features.row_slice(i));
        }
        let t = Tensor::new(idx.len(), d, values).expect("gathered shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in self.features.values() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
    }
}

/// Ground-truth similarity group from construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Dissimilar,
    Similar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub name: String,
    pub group: Group,
    /// Source labels of local classes `0..class_count`.
    pub classes: Vec<u8>,
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    pub provenance: String,
}

impl TaskDataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }

    /// SHA-256 over all three splits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.train.hash_into(&mut h);
        self.validation.hash_into(&mut h);
        self.test.hash_into(&mut h);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        let c = self.class_count();
        for (name, s) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            if s.dim() != d {
                return Err(Error::Input(format!(
                    "task {}: {name} width {} differs from {d}",
                    self.task_id,
                    s.dim()
                )));
            }
            if let Some(y) = s.labels.iter().find(|&&y| y >= c) {
                return Err(Error::Input(format!(
                    "task {}: {name} label {y} outside 0..{c}",
                    self.task_id
                )));
            }
        }
        if self.train.is_empty() {
            return Err(Error::Input(format!("task {}: empty training split", self.task_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Carve 10% of the training samples out as validation.
    Holdout,
    /// Validate on the training set itself.
    SameAsTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisjointConfig {
    pub classes_per_task: usize,
    /// Fixes the number of tasks; the last task absorbs all leftover
    /// classes. Without it, leftovers form one extra task.
    #[serde(default)]
    pub task_count: Option<usize>,
    /// Keep only the first `n` tasks.
    #[serde(default)]
    pub max_tasks: Option<usize>,
    #[serde(default = "default_train_cap")]
    pub train_cap: usize,
    #[serde(default = "default_test_cap")]
    pub test_cap: usize,
    #[serde(default = "default_validation")]
    pub validation: ValidationMode,
}

fn default_train_cap() -> usize {
    600
}
fn default_test_cap() -> usize {
    200
}
fn default_validation() -> ValidationMode {
    ValidationMode::Holdout
}

impl DisjointConfig {
    pub fn new(classes_per_task: usize) -> Self {
        Self {
            classes_per_task,
            task_count: None,
            max_tasks: None,
            train_cap: default_train_cap(),
            test_cap: default_test_cap(),
            validation: ValidationMode::Holdout,
        }
    }
}

/// Groups `classes` (already in the desired order) into tasks.
pub fn partition_classes(
    classes: &[u8],
    classes_per_task: usize,
    task_count: Option<usize>,
) -> Result<Vec<Vec<u8>>> {
    let total = classes.len();
    if classes_per_task < 2 {
        return Err(Error::Input("classes_per_task must be at least 2".into()));
    }
    if classes_per_task > total {
        return Err(Error::Input(format!(
            "classes_per_task {classes_per_task} exceeds {total} available classes"
        )));
    }
    let groups = match task_count {
        Some(n) => {
            if n == 0 || (n - 1) * classes_per_task >= total {
                return Err(Error::Input(format!(
                    "{n} tasks of {classes_per_task} classes do not fit {total} classes"
                )));
            }
            let mut g: Vec<Vec<u8>> = classes[..(n - 1) * classes_per_task]
                .chunks(classes_per_task)
                .map(<[u8]>::to_vec)
                .collect();
            g.push(classes[(n - 1) * classes_per_task..].to_vec());
            g
        }
        None => {
            let mut g: Vec<Vec<u8>> = classes.chunks(classes_per_task).map(<[u8]>::to_vec).collect();
            // A single leftover class cannot form a classification task.
            if g.last().is_some_and(|l| l.len() == 1) {
                let last = g.pop().expect("non-empty");
                g.last_mut().expect("at least one full group").extend(last);
            }
            g
        }
    };
    Ok(groups)
}

fn build_split(
    images: impl Fn(usize) -> Vec<f64>,
    idx: &[usize],
    label_of: impl Fn(usize) -> usize,
    dim: usize,
) -> Split {
    let mut values = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        values.extend(images(i));
    }
    Split {
        features: Tensor::new(idx.len(), dim, values).expect("split shape"),
        labels: idx.iter().map(|&i| label_of(i)).collect(),
    }
}

/// Splits a shuffled sample pool into `(train, validation, test)` indices.
fn carve(
    pool: &[usize],
    test_size: usize,
    train_cap: usize,
    validation: ValidationMode,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let test = pool[..test_size].to_vec();
    let rest = &pool[test_size..];
    let train_all = &rest[..rest.len().min(train_cap)];
    match validation {
        ValidationMode::SameAsTrain => (train_all.to_vec(), train_all.to_vec(), test),
        ValidationMode::Holdout => {
            let n_val = (train_all.len() as f64 * 0.1).round().max(1.0) as usize;
            let n_val = n_val.min(train_all.len().saturating_sub(1));
            (train_all[n_val..].to_vec(), train_all[..n_val].to_vec(), test)
        }
    }
}

/// Partitions the classes of `data` into dissimilar tasks.
pub fn split_disjoint_tasks(data: &ImageSet, cfg: &DisjointConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    let mut rng = rng::stream(seed, &[label::DATA, 0]);
    let mut classes = data.classes();
    classes.shuffle(&mut rng);
    let mut groups = partition_classes(&classes, cfg.classes_per_task, cfg.task_count)?;
    if let Some(m) = cfg.max_tasks {
        groups.truncate(m);
    }
    let dim = data.dim();
    groups
        .into_iter()
        .enumerate()
        .map(|(t, mut group)| {
            group.sort_unstable();
            let mut task_rng = rng::stream(seed, &[label::DATA, 1, t as u64]);
            let mut pool = data.indices_of(&group);
            pool.shuffle(&mut task_rng);
            let test_size = (pool.len() / 5).min(cfg.test_cap);
            if pool.len() < test_size + 2 {
                return Err(Error::Input(format!("classes {group:?} have too few samples")));
            }
            let (train, val, test) = carve(&pool, test_size, cfg.train_cap, cfg.validation);
            let local = |i: usize| {
                group
                    .iter()
                    .position(|&c| c == data.label(i))
                    .expect("sample drawn from task classes")
            };
            let img = |i| data.image(i);
            Ok(TaskDataset {
                task_id: t,
                name: format!("disjoint-{}", join(&group)),
                group: Group::Dissimilar,
                train: build_split(img, &train, local, dim),
                validation: build_split(img, &val, local, dim),
                test: build_split(img, &test, local, dim),
                classes: group,
                provenance: format!("disjoint-classes seed={seed}"),
            })
        })
        .collect()
}

fn join(v: &[u8]) -> String {
    v.iter().map(u8::to_string).collect::<Vec<_>>().join("_")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarConfig {
    pub n_tasks: usize,
    /// Total samples per task (train + validation + test).
    pub per_task_size: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_rotation")]
    pub max_rotation_deg: f64,
    #[serde(default = "default_gain")]
    pub gain_range: [f64; 2],
    /// Source classes to draw from; all classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<u8>>,
    /// Apply one fixed pixel permutation to every task of the group, so the
    /// group's input statistics differ from the unpermuted source.
    #[serde(default)]
    pub permute_pixels: bool,
}

fn default_test_fraction() -> f64 {
    0.25
}
fn default_rotation() -> f64 {
    15.0
}
fn default_gain() -> [f64; 2] {
    [0.8, 1.2]
}

impl SimilarConfig {
    pub fn new(n_tasks: usize, per_task_size: usize) -> Self {
        Self {
            n_tasks,
            per_task_size,
            test_fraction: default_test_fraction(),
            max_rotation_deg: default_rotation(),
            gain_range: default_gain(),
            classes: None,
            permute_pixels: false,
        }
    }
}

/// Bilinear rotation about the image centre, then intensity gain, clamped to
/// `[0, 1]`.
pub fn perturb(image: &[f64], rows: usize, cols: usize, degrees: f64, gain: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= rows as isize || x >= cols as isize {
            0.0
        } else {
            image[y as usize * cols + x as usize]
        }
    };
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let v = if degrees == 0.0 {
                image[y * cols + x]
            } else {
                // inverse rotation to find the source location
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x0 + 1) * fx * (1.0 - fy)
                    + at(y0 + 1, x0) * (1.0 - fx) * fy
                    + at(y0 + 1, x0 + 1) * fx * fy
            };
            out[y * cols + x] = (v * gain).clamp(0.0, 1.0);
        }
    }
    out
}

/// Pixel permutation shared by a similar-task group.
pub fn group_permutation(dim: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..dim).collect();
    p.shuffle(&mut rng::stream(seed, &[label::DATA, 3]));
    p
}

/// One synthetic "writer": a resample of `data` with a fixed style
/// perturbation. `task_seed` drives the resample and the perturbation.
pub fn generate_similar_task(
    data: &ImageSet,
    cfg: &SimilarConfig,
    permutation: Option<&[usize]>,
    task_seed: u64,
    task_id: usize,
) -> Result<TaskDataset> {
    let classes = cfg.classes.clone().unwrap_or_else(|| data.classes());
    let mut pool = data.indices_of(&classes);
    if pool.len() < cfg.per_task_size || cfg.per_task_size < 4 {
        return Err(Error::Input(format!(
            "need {} samples per task, source has {}",
            cfg.per_task_size,
            pool.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || cfg.gain_range[0] > cfg.gain_range[1] {
        return Err(Error::Input("invalid similar-task perturbation settings".into()));
    }
    let mut rng = rng::stream(task_seed, &[label::DATA, 2]);
    let rotation = if cfg.max_rotation_deg > 0.0 {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let gain = if cfg.gain_range[0] < cfg.gain_range[1] {
        rng.random_range(cfg.gain_range[0]..=cfg.gain_range[1])
    } else {
        cfg.gain_range[0]
    };
    pool.shuffle(&mut rng);
    pool.truncate(cfg.per_task_size);

    let test_size = ((cfg.per_task_size as f64) * cfg.test_fraction).round() as usize;
    let (train, val, test) = carve(&pool, test_size, usize::MAX, ValidationMode::Holdout);
    let (rows, cols) = (data.rows, data.cols);
    let img = |i: usize| {
        let p = perturb(&data.image(i), rows, cols, rotation, gain);
        match permutation {
            Some(perm) => perm.iter().map(|&j| p[j]).collect(),
            None => p,
        }
    };
    let local = |i: usize| {
        classes
            .iter()
            .position(|&c| c == data.label(i))
            .expect("sample drawn from task classes")
    };
    let dim = data.dim();
    Ok(TaskDataset {
        task_id,
        name: format!("writer-{task_id}"),
        group: Group::Similar,
        train: build_split(img, &train, local, dim),
        validation: build_split(img, &val, local, dim),
        test: build_split(img, &test, local, dim),
        classes,
        provenance: format!(
            "similar seed={task_seed} rotation={rotation:.3} gain={gain:.3} permuted={}",
            permutation.is_some()
        ),
    })
}

pub fn generate_similar_tasks(data: &ImageSet, cfg: &SimilarConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    let perm = cfg.permute_pixels.then(|| group_permutation(data.dim(), seed));
    (0..cfg.n_tasks)
        .map(|i| {
            let task_seed = rng::derive_seed(seed, &[label::DATA, 4, i as u64]);
            generate_similar_task(data, cfg, perm.as_deref(), task_seed, i)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub dissimilar: DisjointConfig,
    pub similar: SimilarConfig,
    /// Drives class partitioning and resampling.
    pub data_seed: u64,
    /// Drives the task order only.
    pub interleave_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSequence {
    pub tasks: Vec<TaskDataset>,
}

impl MixedSequence {
    pub fn groups(&self) -> Vec<Group> {
        self.tasks.iter().map(|t| t.group).collect()
    }

    /// `truth[t][k]` is true when tasks `k < t` share a group.
    pub fn ground_truth_similarity(&self) -> Vec<Vec<bool>> {
        let g = self.groups();
        (0..g.len())
            .map(|t| (0..t).map(|k| g[k] == Group::Similar && g[t] == Group::Similar).collect())
            .collect()
    }

    pub fn content_hashes(&self) -> Vec<String> {
        self.tasks.iter().map(TaskDataset::content_hash).collect()
    }
}

/// Interleaves dissimilar and similar tasks under a seeded permutation and
/// renumbers them in sequence order.
pub fn build_mixed_sequence(data: &ImageSet, spec: &SequenceSpec) -> Result<MixedSequence> {
    let mut tasks = split_disjoint_tasks(data, &spec.dissimilar, spec.data_seed)?;
    tasks.extend(generate_similar_tasks(
        data,
        &spec.similar,
        rng::derive_seed(spec.data_seed, &[label::DATA, 5]),
    )?);
    tasks.shuffle(&mut rng::stream(spec.interleave_seed, &[label::SEQUENCE]));
    for (i, t) in tasks.iter_mut().enumerate() {
        t.task_id = i;
    }
    Ok(MixedSequence { tasks })
}

/// Returns the first pair of splits of `task` that share a sample, if any.
pub fn overlapping_splits(task: &TaskDataset) -> Option<(&'static str, &'static str)> {
    let hashes = |s: &Split| -> HashSet<Vec<u8>> {
        (0..s.len())
            .map(|i| {
                let mut h = Sha256::new();
                for v in s.features.row_slice(i) {
                    h.update(v.to_le_bytes());
                }
                h.finalize().to_vec()
            })
            .collect()
    };
    let named = [
        ("train", hashes(&task.train)),
        ("validation", hashes(&task.validation)),
        ("test", hashes(&task.test)),
    ];
    for i in 0..3 {
        for j in i + 1..3 {
            if !named[i].1.is_disjoint(&named[j].1) {
                return Some((named[i].0, named[j].0));
            }
        }
    }
    None
}

const BUNDLE_MAGIC: &[u8; 8] = b"CATBNDL\0";
const BUNDLE_VERSION: u32 = 1;

/// Writes tasks to a versioned container file.
pub fn write_bundle(path: &Path, seq: &MixedSequence) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(BUNDLE_MAGIC)?;
    f.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    bincode::serialize_into(&mut f, seq).map_err(|e| Error::Format {
        offset: 12,
        msg: e.to_string(),
    })?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<MixedSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != BUNDLE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a task bundle".into(),
        });
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != BUNDLE_VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported bundle version {version}"),
        });
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| Error::Format {
        offset: 12,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(classes: u8, per_class: usize) -> ImageSet {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                labels.push(c);
                // first two pixels encode a unique sample index
                let idx = c as usize * per_class + i;
                pixels.push((idx & 0xff) as u8);
                pixels.push((idx >> 8) as u8);
                for p in 2..16usize {
                    pixels.push(((p * 7 + i * 13 + c as usize * 31) % 256) as u8);
                }
            }
        }
        ImageSet::new(4, 4, pixels, labels).unwrap()
    }

    fn idx_images(count: u32, rows: u32, cols: u32, data: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(data);
        v
    }

    #[test]
    fn idx_header_and_normalization() {
        let bytes = idx_images(2, 1, 2, &[0, 255, 128, 1]);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c), (2, 1, 2));
        let set = ImageSet::new(r, c, px, vec![3, 4]).unwrap();
        assert_eq!(set.image(0), vec![0.0, 1.0]);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let mut bytes = idx_images(2, 1, 2, &[0, 255, 128, 1]);
        assert!(matches!(
            parse_idx_images(&bytes[..bytes.len() - 1]),
            Err(Error::Format { offset: 19, .. })
        ));
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2, 1, 1, &[0, 1])).unwrap();
        let mut l = Vec::new();
        l.extend(IDX_LABELS_MAGIC.to_be_bytes());
        l.extend(3u32.to_be_bytes());
        l.extend([0, 1, 2]);
        std::fs::write(&lab, l).unwrap();
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,a,b,c,d\n1,0,255,0,0\n0,3,3,3,3\n").unwrap();
        let s = parse_csv(&p).unwrap();
        assert_eq!((s.rows, s.cols, s.len()), (2, 2, 2));
        assert_eq!(s.labels(), &[1, 0]);
        assert_eq!(s.image(0), vec![0.0, 1.0, 0.0, 0.0]);
        std::fs::write(&p, "label,a\n1,300\n").unwrap();
        assert!(matches!(parse_csv(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn partition_matches_emnist_layouts() {
        let classes: Vec<u8> = (0..47).collect();
        let g = partition_classes(&classes, 5, None).unwrap();
        let sizes: Vec<usize> = g.iter().map(Vec::len).collect();
        assert_eq!(sizes, [vec![5; 9], vec![2]].concat());
        let g = partition_classes(&classes, 2, Some(20)).unwrap();
        let sizes: Vec<usize> = g.iter().map(Vec::len).collect();
        assert_eq!(sizes, [vec![2; 19], vec![9]].concat());
        assert!(partition_classes(&classes, 48, None).is_err());
        assert!(partition_classes(&classes, 1, None).is_err());
    }

    #[test]
    fn disjoint_tasks_partition_classes() {
        let data = synthetic(10, 30);
        let tasks = split_disjoint_tasks(&data, &DisjointConfig::new(3), 4).unwrap();
        let mut seen = BTreeSet::new();
        for t in &tasks {
            for c in &t.classes {
                assert!(seen.insert(*c), "class {c} in two tasks");
            }
            let mut local: Vec<usize> = t.train.labels.clone();
            local.sort_unstable();
            local.dedup();
            assert_eq!(local, (0..t.class_count()).collect::<Vec<_>>());
            assert!(overlapping_splits(t).is_none());
            t.validate().unwrap();
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks.last().unwrap().class_count(), 4);
    }

    #[test]
    fn same_as_train_validation() {
        let data = synthetic(4, 20);
        let mut cfg = DisjointConfig::new(2);
        cfg.validation = ValidationMode::SameAsTrain;
        let tasks = split_disjoint_tasks(&data, &cfg, 0).unwrap();
        assert_eq!(tasks[0].train, tasks[0].validation);
    }

    #[test]
    fn similar_tasks_share_classes_and_degenerate_case() {
        let data = synthetic(5, 40);
        let cfg = SimilarConfig::new(3, 60);
        let tasks = generate_similar_tasks(&data, &cfg, 9).unwrap();
        assert!(tasks.iter().all(|t| t.classes == tasks[0].classes));
        assert_ne!(tasks[0].train, tasks[1].train);

        let mut flat = cfg.clone();
        flat.max_rotation_deg = 0.0;
        flat.gain_range = [1.0, 1.0];
        let a = generate_similar_task(&data, &flat, None, 77, 0).unwrap();
        let b = generate_similar_task(&data, &flat, None, 77, 0).unwrap();
        assert_eq!(a, b);
        assert!(overlapping_splits(&a).is_none());
    }

    #[test]
    fn rotation_by_zero_is_identity_and_gain_clamps() {
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        assert_eq!(perturb(&img, 4, 4, 0.0, 1.0), img);
        assert!(perturb(&img, 4, 4, 0.0, 10.0).iter().all(|&v| v <= 1.0));
        let turned = perturb(&img, 4, 4, 90.0, 1.0);
        assert_ne!(turned, img);
    }

    #[test]
    fn mixed_sequence_permutes_tasks() {
        let data = synthetic(10, 30);
        let spec = SequenceSpec {
            dissimilar: DisjointConfig::new(2),
            similar: SimilarConfig::new(5, 60),
            data_seed: 1,
            interleave_seed: 1,
        };
        let a = build_mixed_sequence(&data, &spec).unwrap();
        assert_eq!(a.tasks.len(), 10);
        let ids: Vec<usize> = a.tasks.iter().map(|t| t.task_id).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        let b = build_mixed_sequence(&data, &SequenceSpec { interleave_seed: 2, ..spec.clone() }).unwrap();
        let mut ha = a.content_hashes();
        let mut hb = b.content_hashes();
        assert_ne!(ha, hb);
        ha.sort();
        hb.sort();
        assert_eq!(ha, hb);
        let groups: HashSet<Group> = a.groups().into_iter().collect();
        assert_eq!(groups.len(), 2);
        assert_eq!(build_mixed_sequence(&data, &spec).unwrap(), a);
    }

    #[test]
    fn bundle_round_trip() {
        let data = synthetic(4, 20);
        let spec = SequenceSpec {
            dissimilar: DisjointConfig::new(2),
            similar: SimilarConfig::new(1, 30),
            data_seed: 3,
            interleave_seed: 3,
        };
        let seq = build_mixed_sequence(&data, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        write_bundle(&p, &seq).unwrap();
        assert_eq!(read_bundle(&p).unwrap(), seq);
        std::fs::write(&p, b"garbage-garbage").unwrap();
        assert!(matches!(read_bundle(&p), Err(Error::Format { .. })));
    }
}
