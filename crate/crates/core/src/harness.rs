//! Config-driven experiments: multi-seed runs, ablation grids, checkpoint
//! inspection and task-bundle preparation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::datasets::{
    build_mixed_sequence, parse_csv, parse_idx, read_bundle, write_bundle, DisjointConfig, Group, ImageSet,
    MixedSequence, SequenceSpec, SimilarConfig,
};
use crate::error::{Error, Result};
use crate::kb::LAYERS;
use crate::learner::{
    transfer_metrics, AccuracyMatrix, ContinualLearner, LearnerConfig, SequenceRun, TransferMetrics, Variant,
};
use crate::similarity::{tsv_csv, DetectorConfig, TaskSimilarityVector};
use crate::train::Protocol;

/// Environment variable that relative data paths are resolved against.
pub const DATA_ROOT_ENV: &str = "CAT_DATA_ROOT";

/// The ablation grid, in report column order.
pub const ABLATION: [Variant; 5] = [
    Variant::CatAllSimMinusKta,
    Variant::CatAllSim,
    Variant::CatAllDis,
    Variant::CatMinusKta,
    Variant::Cat,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

/// Sequence layout; the per-seed data and interleaving seeds are the run
/// seed itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceTemplate {
    pub dissimilar: DisjointConfig,
    pub similar: SimilarConfig,
}

impl SequenceTemplate {
    pub fn spec(&self, seed: u64) -> SequenceSpec {
        SequenceSpec {
            dissimilar: self.dissimilar.clone(),
            similar: self.similar.clone(),
            data_seed: seed,
            interleave_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub variant: Variant,
    pub s_max: f64,
    pub protocol: Protocol,
    pub kb_width: usize,
    pub dropout: f64,
    pub detector: DetectorConfig,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let d = LearnerConfig::default();
        Self {
            variant: d.variant,
            s_max: d.s_max,
            protocol: d.protocol,
            kb_width: d.kb_width,
            dropout: d.dropout,
            detector: d.detector,
        }
    }
}

/// Settings that only exist for variants with attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KtaSection {
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub sequence: SequenceTemplate,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kta: Option<KtaSection>,
    /// Save a checkpoint after every task.
    #[serde(default)]
    pub checkpoints: bool,
    /// Directory relative paths are resolved against (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

fn located(text: &str, e: &toml::de::Error) -> Error {
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            Error::Config(format!("line {line}, column {col}: {}", e.message().trim_end()))
        }
        None => Error::Config(e.message().trim_end().to_string()),
    }
}

/// Applies `key.path=value` to a TOML table. The value is read as a TOML
/// literal, or taken as a bare string when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates a config document. Errors in the document carry
    /// its line and column; errors introduced by `overrides` name the
    /// override.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| located(text, &e))?;
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| located(text, &e))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message().trim_end())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name {:?} is not a plain directory name", self.name)));
        }
        if let Some(k) = &self.kta {
            if !self.learner.variant.uses_kta() {
                return Err(Error::Config(format!(
                    "the [kta] section does not apply to variant {}",
                    self.learner.variant
                )));
            }
            if k.heads == 0 {
                return Err(Error::Config("kta.heads must be positive".into()));
            }
        }
        for v in self.variants_checked() {
            self.learner_config(v, self.seeds[0]).validate()?;
        }
        let s = &self.sequence.similar;
        if s.n_tasks > 0 && !(0.0..1.0).contains(&s.test_fraction) {
            return Err(Error::Config("sequence.similar.test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn variants_checked(&self) -> Vec<Variant> {
        let mut v = vec![self.learner.variant];
        if self.kta.is_some() {
            v.extend(ABLATION);
        }
        v
    }

    pub fn heads(&self) -> usize {
        self.kta.as_ref().map_or(LearnerConfig::default().heads, |k| k.heads)
    }

    pub fn learner_config(&self, variant: Variant, seed: u64) -> LearnerConfig {
        let l = &self.learner;
        LearnerConfig {
            variant,
            s_max: l.s_max,
            protocol: l.protocol,
            kb_width: l.kb_width,
            heads: self.heads(),
            dropout: l.dropout,
            seed,
            detector: l.detector.clone(),
        }
    }

    /// Absolute paths stay; relative ones resolve against
    /// [`DATA_ROOT_ENV`] when set, else the config directory.
    pub fn resolve_data(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => self.base_dir.join(p),
        }
    }

    pub fn output_root(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            self.base_dir.join(&self.output_dir)
        }
    }

    pub fn load_images(&self) -> Result<ImageSet> {
        match &self.data {
            DataSource::Idx { images, labels } => parse_idx(&self.resolve_data(images), &self.resolve_data(labels)),
            DataSource::Csv { path } => parse_csv(&self.resolve_data(path)),
        }
    }

    /// Content key of the sequence built for `seed`, used to name bundles.
    pub fn bundle_key(&self, seed: u64) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataSource,
            spec: SequenceSpec,
        }
        let key = Key {
            data: &self.data,
            spec: self.sequence.spec(seed),
        };
        let text = toml::to_string(&key).expect("serializable spec");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bundle_path(&self, seed: u64) -> PathBuf {
        self.output_root()
            .join("bundles")
            .join(format!("seed-{seed}-{}.bundle", self.bundle_key(seed)))
    }

    /// Task sequences for every seed, from prepared bundles when present.
    pub fn sequences(&self) -> Result<Vec<(u64, MixedSequence)>> {
        let mut images = None;
        let mut out = Vec::with_capacity(self.seeds.len());
        for &seed in &self.seeds {
            let bundle = self.bundle_path(seed);
            let seq = if bundle.exists() {
                read_bundle(&bundle)?
            } else {
                if images.is_none() {
                    images = Some(self.load_images()?);
                }
                build_mixed_sequence(images.as_ref().expect("loaded"), &self.sequence.spec(seed))?
            };
            if seq.tasks.is_empty() {
                return Err(Error::Input("the configured sequence has no tasks".into()));
            }
            out.push((seed, seq));
        }
        Ok(out)
    }
}

/// Similarity-bit counts against the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl TsvCounts {
    pub fn tally(tsv: &[TaskSimilarityVector], truth: &[Vec<bool>]) -> Self {
        let mut c = Self::default();
        for (row, t) in tsv.iter().zip(truth) {
            for (&b, &g) in row.bits.iter().zip(t) {
                match (b, g) {
                    (true, true) => c.true_pos += 1,
                    (true, false) => c.false_pos += 1,
                    (false, true) => c.false_neg += 1,
                    (false, false) => c.true_neg += 1,
                }
            }
        }
        c
    }

    /// Undefined when no bit was predicted similar.
    pub fn precision(&self) -> Option<f64> {
        let p = self.true_pos + self.false_pos;
        (p > 0).then(|| self.true_pos as f64 / p as f64)
    }

    /// Undefined when no pair is truly similar.
    pub fn recall(&self) -> Option<f64> {
        let p = self.true_pos + self.false_neg;
        (p > 0).then(|| self.true_pos as f64 / p as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub groups: Vec<Group>,
    pub matrix: AccuracyMatrix,
    pub tsv: Vec<TaskSimilarityVector>,
    /// Mean final accuracy over all tasks.
    pub overall: f64,
    pub dissimilar: Option<TransferMetrics>,
    pub similar: Option<TransferMetrics>,
    /// Present for variants that detect similarity.
    pub tsv_counts: Option<TsvCounts>,
    pub dataset_hashes: Vec<String>,
}

impl SeedReport {
    pub fn new(seed: u64, seq: &MixedSequence, learner: &ContinualLearner, matrix: &AccuracyMatrix) -> Result<Self> {
        let groups = seq.groups();
        let n = groups.len();
        if matrix.len() != n || !matrix.is_complete() {
            return Err(Error::State("accuracy matrix does not cover the sequence".into()));
        }
        let of = |g: Group| (0..n).filter(|&i| groups[i] == g).collect::<Vec<_>>();
        let all: Vec<usize> = (0..n).collect();
        let overall = transfer_metrics(matrix, &all)?.expect("non-empty sequence").backward;
        let tsv = learner.tsv().to_vec();
        let tsv_counts = learner
            .config()
            .variant
            .detects()
            .then(|| TsvCounts::tally(&tsv, &seq.ground_truth_similarity()));
        Ok(Self {
            seed,
            matrix: matrix.clone(),
            tsv,
            overall,
            dissimilar: transfer_metrics(matrix, &of(Group::Dissimilar))?,
            similar: transfer_metrics(matrix, &of(Group::Similar))?,
            tsv_counts,
            dataset_hashes: seq.content_hashes(),
            groups,
        })
    }
}

/// Means over seeds; a metric is `None` when no seed defines it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub overall: f64,
    pub dissimilar_forward: Option<f64>,
    pub dissimilar_backward: Option<f64>,
    pub similar_forward: Option<f64>,
    pub similar_backward: Option<f64>,
    pub tsv_precision: Option<f64>,
    pub tsv_recall: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Aggregate {
    pub fn over(seeds: &[SeedReport]) -> Self {
        let n = seeds.len().max(1) as f64;
        Self {
            overall: seeds.iter().map(|s| s.overall).sum::<f64>() / n,
            dissimilar_forward: mean_of(seeds.iter().map(|s| s.dissimilar.map(|m| m.forward))),
            dissimilar_backward: mean_of(seeds.iter().map(|s| s.dissimilar.map(|m| m.backward))),
            similar_forward: mean_of(seeds.iter().map(|s| s.similar.map(|m| m.forward))),
            similar_backward: mean_of(seeds.iter().map(|s| s.similar.map(|m| m.backward))),
            tsv_precision: mean_of(seeds.iter().map(|s| s.tsv_counts.and_then(|c| c.precision()))),
            tsv_recall: mean_of(seeds.iter().map(|s| s.tsv_counts.and_then(|c| c.recall()))),
        }
    }
}

/// Results of one variant over all seeds. Wall-clock time is kept apart in
/// [`RunTiming`] so that reruns compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub variant: Variant,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seconds_per_seed: Vec<f64>,
}

/// Runs or resumes one seed. With `checkpoint`, state is saved there after
/// every task and an existing file is resumed from.
pub fn run_seed(
    seq: &MixedSequence,
    config: &LearnerConfig,
    checkpoint: Option<&Path>,
) -> Result<(ContinualLearner, AccuracyMatrix)> {
    let first = seq.tasks.first().ok_or_else(|| Error::Input("task sequence is empty".into()))?;
    let mut run = match checkpoint.filter(|p| p.exists()) {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.learner.config() != config {
                return Err(Error::State(format!("checkpoint {} was made with a different config", p.display())));
            }
            SequenceRun::resume(ck.learner, ck.matrix, &seq.tasks)?
        }
        None => SequenceRun::new(config.clone(), first.input_dim(), seq.tasks.len())?,
    };
    for task in &seq.tasks[run.completed()..] {
        run.step(task)?;
        if let Some(p) = checkpoint {
            Checkpoint {
                learner: run.learner().clone(),
                matrix: run.matrix().clone(),
            }
            .save(p)?;
        }
    }
    Ok(run.into_parts())
}

/// Runs `variant` on every sequence without touching the filesystem.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    sequences: &[(u64, MixedSequence)],
) -> Result<(RunReport, RunTiming)> {
    let mut seeds = Vec::with_capacity(sequences.len());
    let mut timing = RunTiming::default();
    for (seed, seq) in sequences {
        let start = Instant::now();
        let (learner, matrix) = run_seed(seq, &cfg.learner_config(variant, *seed), None)?;
        seeds.push(SeedReport::new(*seed, seq, &learner, &matrix)?);
        timing.seconds_per_seed.push(start.elapsed().as_secs_f64());
    }
    let aggregate = Aggregate::over(&seeds);
    Ok((
        RunReport {
            name: cfg.name.clone(),
            variant,
            seeds,
            aggregate,
        },
        timing,
    ))
}

/// Which stage an experiment command failed in; decides the exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(Error),
    #[error("{0}")]
    Data(Error),
    #[error("{0}")]
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per seed plus a `mean` row.
pub fn summary_csv(report: &RunReport, timing: &RunTiming) -> String {
    let mut out = String::from(
        "seed,overall,dissimilar_forward,dissimilar_backward,similar_forward,similar_backward,tsv_precision,tsv_recall,seconds\n",
    );
    for (i, s) in report.seeds.iter().enumerate() {
        let c = s.tsv_counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.seed,
            s.overall,
            opt(s.dissimilar.map(|m| m.forward)),
            opt(s.dissimilar.map(|m| m.backward)),
            opt(s.similar.map(|m| m.forward)),
            opt(s.similar.map(|m| m.backward)),
            opt(c.and_then(|c| c.precision())),
            opt(c.and_then(|c| c.recall())),
            opt(timing.seconds_per_seed.get(i).copied()),
        );
    }
    let a = &report.aggregate;
    let _ = writeln!(
        out,
        "mean,{},{},{},{},{},{},{},{}",
        a.overall,
        opt(a.dissimilar_forward),
        opt(a.dissimilar_backward),
        opt(a.similar_forward),
        opt(a.similar_backward),
        opt(a.tsv_precision),
        opt(a.tsv_recall),
        timing.seconds_per_seed.iter().sum::<f64>(),
    );
    out
}

/// Forward and backward transfer per seed and group.
pub fn transfer_csv(report: &RunReport) -> String {
    let mut out = String::from("seed,group,forward,backward\n");
    for s in &report.seeds {
        for (name, m) in [("dissimilar", s.dissimilar), ("similar", s.similar)] {
            if let Some(m) = m {
                let _ = writeln!(out, "{},{name},{},{}", s.seed, m.forward, m.backward);
            }
        }
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    variant: Variant,
    version: &'a str,
    seconds_per_seed: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config: &'a ExperimentConfig,
    datasets: Vec<SeedHashes>,
}

#[derive(Serialize)]
struct SeedHashes {
    seed: u64,
    tasks: Vec<String>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Runs one variant over all seeds and writes, under
/// `<output_dir>/<name>/<variant>/`: per-seed `accuracy.csv` and `tsv.csv`,
/// `summary.csv`, `transfer.csv` and `manifest.toml`. A failure mid-run
/// keeps finished seeds and leaves a `FAILED` marker.
pub fn execute_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    sequences: &[(u64, MixedSequence)],
    resume: bool,
) -> std::result::Result<RunReport, Failure> {
    let dir = cfg.output_root().join(&cfg.name).join(variant.name());
    let io = |e: Error| Failure::Runtime(e);
    fs::create_dir_all(&dir).map_err(|e| io(e.into()))?;
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| io(e.into()))?;
    }
    let mut seeds = Vec::new();
    let mut timing = RunTiming::default();
    let hashes: Vec<SeedHashes> = sequences
        .iter()
        .map(|(seed, seq)| SeedHashes {
            seed: *seed,
            tasks: seq.content_hashes(),
        })
        .collect();
    let manifest = |status: &str, timing: &RunTiming, error: Option<String>| -> Result<()> {
        let m = Manifest {
            status,
            variant,
            version: env!("CARGO_PKG_VERSION"),
            seconds_per_seed: &timing.seconds_per_seed,
            error,
            config: cfg,
            datasets: hashes
                .iter()
                .map(|h| SeedHashes {
                    seed: h.seed,
                    tasks: h.tasks.clone(),
                })
                .collect(),
        };
        let text = toml::to_string(&m).map_err(|e| Error::State(format!("manifest: {e}")))?;
        write(&dir.join("manifest.toml"), &text)
    };
    for (seed, seq) in sequences {
        let seed_dir = dir.join(format!("seed-{seed}"));
        let ckpt = seed_dir.join("checkpoint.bin");
        let outcome = (|| -> Result<SeedReport> {
            fs::create_dir_all(&seed_dir)?;
            if !resume && ckpt.exists() {
                fs::remove_file(&ckpt)?;
            }
            let start = Instant::now();
            let config = cfg.learner_config(variant, *seed);
            let (learner, matrix) = run_seed(seq, &config, cfg.checkpoints.then_some(ckpt.as_path()))?;
            let report = SeedReport::new(*seed, seq, &learner, &matrix)?;
            timing.seconds_per_seed.push(start.elapsed().as_secs_f64());
            write(&seed_dir.join("accuracy.csv"), &matrix.to_csv())?;
            write(&seed_dir.join("tsv.csv"), &tsv_csv(learner.tsv()))?;
            Ok(report)
        })();
        match outcome {
            Ok(r) => seeds.push(r),
            Err(e) => {
                let msg = format!("seed {seed}: {e}");
                let _ = write(&failed, &format!("{msg}\n"));
                let partial = RunReport {
                    name: cfg.name.clone(),
                    variant,
                    aggregate: Aggregate::over(&seeds),
                    seeds,
                };
                if !partial.seeds.is_empty() {
                    let _ = write(&dir.join("summary.csv"), &summary_csv(&partial, &timing));
                    let _ = write(&dir.join("transfer.csv"), &transfer_csv(&partial));
                }
                let _ = manifest("failed", &timing, Some(msg));
                return Err(Failure::Runtime(e));
            }
        }
    }
    let report = RunReport {
        name: cfg.name.clone(),
        variant,
        aggregate: Aggregate::over(&seeds),
        seeds,
    };
    write(&dir.join("summary.csv"), &summary_csv(&report, &timing)).map_err(io)?;
    write(&dir.join("transfer.csv"), &transfer_csv(&report)).map_err(io)?;
    manifest("complete", &timing, None).map_err(io)?;
    Ok(report)
}

fn prepared_sequences(cfg: &ExperimentConfig) -> std::result::Result<Vec<(u64, MixedSequence)>, Failure> {
    cfg.sequences().map_err(Failure::Data)
}

/// The `run` command: the configured variant over all seeds.
pub fn run(cfg: &ExperimentConfig, resume: bool) -> std::result::Result<RunReport, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let seqs = prepared_sequences(cfg)?;
    execute_variant(cfg, cfg.learner.variant, &seqs, resume)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunReport>,
}

impl AblationReport {
    /// Final-accuracy means per group, one column per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.runs {
            let _ = write!(out, ",{}", r.variant);
        }
        out.push('\n');
        type Pick = fn(&Aggregate) -> Option<f64>;
        let rows: [(&str, Pick); 5] = [
            ("overall", |a| Some(a.overall)),
            ("dissimilar", |a| a.dissimilar_backward),
            ("similar", |a| a.similar_backward),
            ("similar_forward", |a| a.similar_forward),
            ("dissimilar_forward", |a| a.dissimilar_forward),
        ];
        for (name, pick) in rows {
            out.push_str(name);
            for r in &self.runs {
                let _ = write!(out, ",{}", opt(pick(&r.aggregate)));
            }
            out.push('\n');
        }
        out
    }
}

/// The `ablate` command: every [`ABLATION`] variant on the same sequences,
/// plus `ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig) -> std::result::Result<AblationReport, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let seqs = prepared_sequences(cfg)?;
    let mut runs = Vec::with_capacity(ABLATION.len());
    for v in ABLATION {
        runs.push(execute_variant(cfg, v, &seqs, false)?);
    }
    let report = AblationReport { runs };
    write(&cfg.output_root().join(&cfg.name).join("ablation.csv"), &report.to_csv()).map_err(Failure::Runtime)?;
    Ok(report)
}

/// The `prepare-data` command: writes one task bundle per seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> std::result::Result<Vec<PathBuf>, Failure> {
    cfg.validate().map_err(Failure::Config)?;
    let images = cfg.load_images().map_err(Failure::Data)?;
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let seq = build_mixed_sequence(&images, &cfg.sequence.spec(seed)).map_err(Failure::Data)?;
        let path = cfg.bundle_path(seed);
        let dir = path.parent().expect("bundle dir");
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        write_bundle(&path, &seq).map_err(Failure::Runtime)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InspectTarget {
    Masks,
    Tsv,
    Attention,
}

/// Human-readable dump of a checkpoint.
pub fn inspect(ck: &Checkpoint, what: InspectTarget) -> Result<String> {
    let l = &ck.learner;
    let mut out = String::new();
    match what {
        InspectTarget::Masks => {
            let widths = vec![l.kb().width(); LAYERS];
            let _ = writeln!(out, "stored masks: {}", l.masks().len());
            for m in l.masks().iter() {
                let used: Vec<String> = (0..m.layer_count())
                    .map(|k| format!("{}/{}", m.used(k), m.layer(k).len()))
                    .collect();
                let _ = writeln!(out, "task {}: {}", m.task_id, used.join(" "));
            }
            for (k, u) in l.masks().used_units_report(&widths)?.iter().enumerate() {
                let _ = writeln!(out, "layer {}: used {} free {}", k + 1, u.used, u.free);
            }
        }
        InspectTarget::Tsv => out.push_str(&tsv_csv(l.tsv())),
        InspectTarget::Attention => {
            let mut any = false;
            for r in l.records() {
                if let Some(a) = &r.attention {
                    any = true;
                    let _ = writeln!(out, "task {}:", r.task_id);
                    for (src, heads) in a.sources.iter().zip(&a.mean) {
                        let w: Vec<String> = heads.iter().map(|x| format!("{x:.4}")).collect();
                        let _ = writeln!(out, "  source {src}: {}", w.join(" "));
                    }
                }
            }
            if !any {
                out.push_str("no task uses attention\n");
            }
        }
    }
    Ok(out)
}
