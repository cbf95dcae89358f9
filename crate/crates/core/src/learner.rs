//! The continual learner: similarity detection, masked or attended training
//! of each task, mask saving, evaluation routing, and the baseline variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::datasets::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::kb::{anneal_s, Gates, KnowledgeBase, Mode, LAYERS};
use crate::kta::{joint_loss, mean_weights, KtaBlock};
use crate::masks::{accumulate, install_blocking_hooks, remove_blocking_hooks, MaskStore, TaskMask};
use crate::rng::{self, label, Rng};
use crate::similarity::{detect, DetectionRecord, DetectorConfig, TaskSimilarityVector};
use crate::train::{accuracy, fit, in_chunks, FitSummary, Protocol, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CAT")]
    Cat,
    #[serde(rename = "CAT_minus_KTA")]
    CatMinusKta,
    #[serde(rename = "CAT_all_sim")]
    CatAllSim,
    #[serde(rename = "CAT_all_sim_minus_KTA")]
    CatAllSimMinusKta,
    #[serde(rename = "CAT_all_dis")]
    CatAllDis,
    #[serde(rename = "NCL")]
    Ncl,
    #[serde(rename = "ONE")]
    One,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Cat,
        Variant::CatMinusKta,
        Variant::CatAllSim,
        Variant::CatAllSimMinusKta,
        Variant::CatAllDis,
        Variant::Ncl,
        Variant::One,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cat => "CAT",
            Variant::CatMinusKta => "CAT_minus_KTA",
            Variant::CatAllSim => "CAT_all_sim",
            Variant::CatAllSimMinusKta => "CAT_all_sim_minus_KTA",
            Variant::CatAllDis => "CAT_all_dis",
            Variant::Ncl => "NCL",
            Variant::One => "ONE",
        }
    }

    pub fn uses_masks(self) -> bool {
        matches!(
            self,
            Variant::Cat
                | Variant::CatMinusKta
                | Variant::CatAllSim
                | Variant::CatAllSimMinusKta
                | Variant::CatAllDis
        )
    }

    pub fn uses_kta(self) -> bool {
        matches!(self, Variant::Cat | Variant::CatAllSim)
    }

    pub fn detects(self) -> bool {
        matches!(self, Variant::Cat | Variant::CatMinusKta)
    }

    /// TSV imposed without detection, if any.
    pub fn forced_tsv(self) -> Option<bool> {
        match self {
            Variant::CatAllSim | Variant::CatAllSimMinusKta => Some(true),
            Variant::CatAllDis => Some(false),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Training rule implied by a variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VariantBehavior {
    pub variant: Variant,
    pub detects_similarity: bool,
    pub forced_tsv: Option<bool>,
    pub task_masks: bool,
    pub gradient_blocking: bool,
    pub kta: bool,
    pub independent_networks: bool,
    pub summary: &'static str,
}

pub fn variant_behavior(config: &LearnerConfig) -> VariantBehavior {
    let v = config.variant;
    let summary = match v {
        Variant::Cat => "detected TSV; masks block dissimilar units; KTA over similar tasks",
        Variant::CatMinusKta => "detected TSV for blocking; trains and predicts with f_mask only",
        Variant::CatAllSim => "TSV forced to ones; no blocking; KTA over all earlier tasks",
        Variant::CatAllSimMinusKta => "TSV forced to ones; no blocking; f_mask only",
        Variant::CatAllDis => "TSV forced to zeros; every earlier task's units blocked; f_mask only",
        Variant::Ncl => "shared network and per-task heads; no masks or protection",
        Variant::One => "a fresh network per task",
    };
    VariantBehavior {
        variant: v,
        detects_similarity: v.detects(),
        forced_tsv: v.forced_tsv(),
        task_masks: v.uses_masks(),
        gradient_blocking: v.uses_masks() && v.forced_tsv() != Some(true),
        kta: v.uses_kta(),
        independent_networks: v == Variant::One,
        summary,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub variant: Variant,
    pub s_max: f64,
    pub protocol: Protocol,
    pub kb_width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub seed: u64,
    pub detector: DetectorConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cat,
            s_max: 140.0,
            protocol: Protocol::default(),
            kb_width: 2000,
            heads: 5,
            dropout: 0.5,
            seed: 0,
            detector: DetectorConfig::default(),
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.s_max > 1.0 && self.s_max.is_finite()) {
            return bad(format!("s_max must be a finite value above 1, got {}", self.s_max));
        }
        if self.kb_width == 0 {
            return bad("kb_width must be positive".into());
        }
        if self.variant.uses_kta() && (self.heads == 0 || !self.kb_width.is_multiple_of(self.heads)) {
            return bad(format!(
                "kb_width {} must be divisible by heads {}",
                self.kb_width, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, p) in [("protocol", &self.protocol), ("detector.protocol", &self.detector.protocol)] {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return bad(format!("{name}.lr must be positive, got {}", p.lr));
            }
            if p.batch_size == 0 || p.max_epochs == 0 {
                return bad(format!("{name}.batch_size and {name}.max_epochs must be positive"));
            }
        }
        if !(self.detector.reference_ratio > 0.0 && self.detector.reference_ratio <= 1.0) {
            return bad(format!(
                "detector.reference_ratio must lie in (0, 1], got {}",
                self.detector.reference_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.detector.reference_dropout) {
            return bad("detector.reference_dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Mean attention weights of a task over its validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub sources: Vec<usize>,
    /// `mean[i][h]`: weight of `sources[i]` in head `h`.
    pub mean: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub name: String,
    pub classes: usize,
    pub fit: FitSummary,
    pub attention: Option<AttentionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualLearner {
    config: LearnerConfig,
    input_dim: usize,
    store: ParamStore,
    kb: KnowledgeBase,
    /// Per-task networks of the ONE baseline.
    nets: Vec<KnowledgeBase>,
    masks: MaskStore,
    kta: BTreeMap<usize, KtaBlock>,
    tsv: Vec<TaskSimilarityVector>,
    detections: Vec<Option<DetectionRecord>>,
    records: Vec<TaskRecord>,
}

impl ContinualLearner {
    pub fn new(config: LearnerConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Input("input dimension must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(config.seed, &[label::INIT]);
        let kb = KnowledgeBase::new(&mut store, input_dim, config.kb_width, config.dropout, &mut init);
        Ok(Self {
            config,
            input_dim,
            store,
            kb,
            nets: Vec::new(),
            masks: MaskStore::new(),
            kta: BTreeMap::new(),
            tsv: Vec::new(),
            detections: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn task_count(&self) -> usize {
        self.records.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn masks(&self) -> &MaskStore {
        &self.masks
    }

    pub fn tsv(&self) -> &[TaskSimilarityVector] {
        &self.tsv
    }

    pub fn detections(&self) -> &[Option<DetectionRecord>] {
        &self.detections
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn kta_block(&self, t: usize) -> Option<&KtaBlock> {
        self.kta.get(&t)
    }

    pub fn kta_count(&self) -> usize {
        self.kta.len()
    }

    fn check_task(&self, data: &TaskDataset) -> Result<()> {
        data.validate()?;
        if data.input_dim() != self.input_dim {
            return Err(Error::Input(format!(
                "task {}: input width {} differs from {}",
                data.task_id,
                data.input_dim(),
                self.input_dim
            )));
        }
        if data.validation.is_empty() {
            return Err(Error::Input(format!("task {} has an empty validation split", data.task_id)));
        }
        Ok(())
    }

    /// Learns the next task of the sequence. The dataset is only borrowed;
    /// nothing derived from its training split is kept besides parameters.
    pub fn learn_task(&mut self, data: &TaskDataset) -> Result<&TaskRecord> {
        self.check_task(data)?;
        let t = self.records.len();
        let cfg = self.config.clone();
        let variant = cfg.variant;

        let (tsv, detection) = if variant.detects() && t > 0 {
            let d = detect(t, data, &self.kb, &self.store, &self.masks, &cfg.detector, cfg.seed)?;
            (d.tsv.clone(), Some(d))
        } else {
            (TaskSimilarityVector::uniform(t, variant.forced_tsv().unwrap_or(false)), None)
        };

        let mut init = rng::stream(cfg.seed, &[label::INIT, t as u64]);
        let classes = data.class_count();
        if variant == Variant::One {
            let mut net = KnowledgeBase::new(&mut self.store, self.input_dim, cfg.kb_width, cfg.dropout, &mut init);
            net.register_task(&mut self.store, classes, &mut init);
            self.nets.push(net);
        } else {
            self.kb.register_task(&mut self.store, classes, &mut init);
        }
        let block = if variant.uses_kta() && tsv.any() {
            let b = KtaBlock::new(&mut self.store, t, cfg.kb_width, cfg.heads, cfg.dropout, classes, &mut init)?;
            self.kta.insert(t, b.clone());
            Some(b)
        } else {
            None
        };

        if variant.uses_masks() {
            let widths = vec![cfg.kb_width; LAYERS];
            let dissimilar = tsv.dissimilar();
            let acc = accumulate(
                &widths,
                dissimilar.iter().map(|&k| self.masks.get(k)).collect::<Result<Vec<_>>>()?,
            )?;
            install_blocking_hooks(&mut self.store, &self.kb, &acc);
        }

        let similar = tsv.similar();
        let kind = match variant {
            Variant::One => Kind::One(self.nets.last().expect("net pushed above")),
            Variant::Ncl => Kind::Plain,
            _ => Kind::Masked {
                similar: &similar,
                block: block.as_ref(),
            },
        };
        let mut trainer = TaskTrainer {
            store: &mut self.store,
            kb: &self.kb,
            masks: &self.masks,
            task: t,
            kind,
            data,
            s_max: cfg.s_max,
            lr: cfg.protocol.lr,
        };
        let mut train_rng = rng::stream(cfg.seed, &[label::TRAIN, t as u64]);
        let fitted = fit(&mut trainer, data.train.len(), &cfg.protocol, &mut train_rng);
        if variant.uses_masks() {
            remove_blocking_hooks(&mut self.store, &self.kb);
        }
        self.store.zero_grad();
        let summary = fitted?;

        if variant.uses_masks() {
            self.masks.save_mask(t, &self.kb, &self.store, cfg.s_max)?;
        }
        self.tsv.push(tsv);
        self.detections.push(detection);
        let attention = match &block {
            Some(b) => {
                let w = self.attention_weights(t, &data.validation.features)?.expect("block present");
                Some(AttentionSummary {
                    sources: similar.clone(),
                    mean: mean_weights(&w, b.heads(), similar.len()),
                })
            }
            None => None,
        };
        self.records.push(TaskRecord {
            task_id: data.task_id,
            name: data.name.clone(),
            classes,
            fit: summary,
            attention,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    fn trained(&self, t: usize) -> Result<&TaskRecord> {
        self.records
            .get(t)
            .ok_or_else(|| Error::State(format!("task {t} has not been trained")))
    }

    /// Deployed logits for task `t`, evaluation mode. Routed to `f_KTA` when
    /// the task has a similar predecessor under a KTA variant, else `f_mask`.
    pub fn predict(&self, t: usize, x: &Tensor) -> Result<Vec<f64>> {
        self.trained(t)?;
        in_chunks(x, |chunk| {
            let mut g = Graph::new(&self.store);
            let xv = g.input(chunk);
            let z = self.deployed_logits(&mut g, t, xv, None)?;
            Ok(g.value(z).to_vec())
        })
    }

    /// Attention weights (`[row][head][source]`) of task `t` on `x`, or
    /// `None` when the task is not routed through attention.
    pub fn attention_weights(&self, t: usize, x: &Tensor) -> Result<Option<Vec<f64>>> {
        if !self.kta.contains_key(&t) {
            return Ok(None);
        }
        let w = in_chunks(x, |chunk| {
            let mut g = Graph::new(&self.store);
            let xv = g.input(chunk);
            let mut att = None;
            self.deployed_logits(&mut g, t, xv, Some(&mut att))?;
            let a = att.expect("kta route");
            Ok(g.attention_weights(a).expect("attention node").to_vec())
        })?;
        Ok(Some(w))
    }

    fn deployed_logits(&self, g: &mut Graph, t: usize, x: Var, att: Option<&mut Option<Var>>) -> Result<Var> {
        let mut unused = rng::stream(0, &[]);
        match self.config.variant {
            Variant::One => {
                let net = &self.nets[t];
                let out = net.forward(g, x, Gates::Open, Mode::Frozen, &mut unused)?;
                net.classify_mask_head(g, out.output, 0, Mode::Frozen)
            }
            Variant::Ncl => {
                let out = self.kb.forward(g, x, Gates::Open, Mode::Frozen, &mut unused)?;
                self.kb.classify_mask_head(g, out.output, t, Mode::Frozen)
            }
            _ => match self.kta.get(&t) {
                Some(block) => {
                    let mut sims = Vec::new();
                    for k in self.tsv[t].similar() {
                        sims.push(self.kb.forward_as_previous_task(g, x, self.masks.get(k)?, true)?);
                    }
                    let a = block.attend(g, &sims, Mode::Frozen, &mut unused)?;
                    if let Some(slot) = att {
                        *slot = Some(a.attention);
                    }
                    block.classify(g, a.output, Mode::Frozen)
                }
                None => {
                    let mask = self.masks.get(t)?;
                    let out = self.kb.forward(g, x, Gates::Stored(mask), Mode::Frozen, &mut unused)?;
                    self.kb.classify_mask_head(g, out.output, t, Mode::Frozen)
                }
            },
        }
    }

    pub fn evaluate(&self, t: usize, split: &Split) -> Result<f64> {
        let classes = self.trained(t)?.classes;
        let z = self.predict(t, &split.features)?;
        Ok(accuracy(&z, classes, &split.labels))
    }

    /// Whether task `t` is served by the attention head.
    pub fn routes_to_kta(&self, t: usize) -> bool {
        self.kta.contains_key(&t)
    }
}

enum Kind<'a> {
    One(&'a KnowledgeBase),
    Plain,
    Masked {
        similar: &'a [usize],
        block: Option<&'a KtaBlock>,
    },
}

struct TaskTrainer<'a> {
    store: &'a mut ParamStore,
    kb: &'a KnowledgeBase,
    masks: &'a MaskStore,
    task: usize,
    kind: Kind<'a>,
    data: &'a TaskDataset,
    s_max: f64,
    lr: f64,
}

impl TaskTrainer<'_> {
    fn trainable(&self) -> Vec<ParamId> {
        let head = |kb: &KnowledgeBase, t: usize| {
            let k = kb.task(t).expect("registered task");
            [k.head_w, k.head_b]
        };
        match &self.kind {
            Kind::One(net) => {
                let mut ids = net.shared_params();
                ids.extend(head(net, 0));
                ids
            }
            Kind::Plain => {
                let mut ids = self.kb.shared_params();
                ids.extend(head(self.kb, self.task));
                ids
            }
            Kind::Masked { block, .. } => {
                let mut ids = self.kb.shared_params();
                ids.extend(self.kb.task_params(self.task).expect("registered task"));
                if let Some(b) = block {
                    ids.extend(b.params());
                }
                ids
            }
        }
    }

    /// Validation logits of the classifier being trained: `f_KTA` when
    /// attention is active, otherwise `f_mask` under the binarized gates it
    /// would be saved with.
    fn validation_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut unused = rng::stream(0, &[]);
        match &self.kind {
            Kind::One(net) => {
                let out = net.forward(g, x, Gates::Open, Mode::Frozen, &mut unused)?;
                net.classify_mask_head(g, out.output, 0, Mode::Frozen)
            }
            Kind::Plain => {
                let out = self.kb.forward(g, x, Gates::Open, Mode::Frozen, &mut unused)?;
                self.kb.classify_mask_head(g, out.output, self.task, Mode::Frozen)
            }
            Kind::Masked {
                similar,
                block: Some(block),
            } => {
                let mut sims = Vec::new();
                for &k in similar.iter() {
                    sims.push(self.kb.forward_as_previous_task(g, x, self.masks.get(k)?, true)?);
                }
                let a = block.attend(g, &sims, Mode::Frozen, &mut unused)?;
                block.classify(g, a.output, Mode::Frozen)
            }
            Kind::Masked { block: None, .. } => {
                let mask = TaskMask::from_store(self.task, self.kb, self.store, self.s_max)?;
                let out = self.kb.forward(g, x, Gates::Stored(&mask), Mode::Frozen, &mut unused)?;
                self.kb.classify_mask_head(g, out.output, self.task, Mode::Frozen)
            }
        }
    }
}

impl Trainable for TaskTrainer<'_> {
    fn train_batch(&mut self, batch: &[usize], b: usize, total: usize, rng: &mut Rng) -> Result<()> {
        let (x, y) = self.data.train.gather(batch);
        let mut g = Graph::new(self.store);
        let xv = g.input(x);
        let loss = match &self.kind {
            Kind::One(net) => {
                let out = net.forward(&mut g, xv, Gates::Open, Mode::Train, rng)?;
                let h = g.dropout(out.output, net.dropout(), true, rng)?;
                let z = net.classify_mask_head(&mut g, h, 0, Mode::Train)?;
                g.softmax_cross_entropy(z, &y)?
            }
            Kind::Plain => {
                let out = self.kb.forward(&mut g, xv, Gates::Open, Mode::Train, rng)?;
                let h = g.dropout(out.output, self.kb.dropout(), true, rng)?;
                let z = self.kb.classify_mask_head(&mut g, h, self.task, Mode::Train)?;
                g.softmax_cross_entropy(z, &y)?
            }
            Kind::Masked { similar, block } => {
                let s = anneal_s(b, total, self.s_max)?;
                let out = self.kb.forward_masked(&mut g, xv, self.task, s, true, rng)?;
                let h = g.dropout(out.output, self.kb.dropout(), true, rng)?;
                let z = self.kb.classify_mask_head(&mut g, h, self.task, Mode::Train)?;
                match block {
                    Some(block) => {
                        let mut sims = Vec::with_capacity(similar.len());
                        for &k in similar.iter() {
                            sims.push(self.kb.forward_as_previous_task(&mut g, xv, self.masks.get(k)?, false)?);
                        }
                        let a = block.attend(&mut g, &sims, Mode::Train, rng)?;
                        let zk = block.classify(&mut g, a.output, Mode::Train)?;
                        joint_loss(&mut g, z, zk, &y)?
                    }
                    None => g.softmax_cross_entropy(z, &y)?,
                }
            }
        };
        let grads = g.backward(loss)?;
        drop(g);
        self.store.load_gradients(grads);
        let ids = self.trainable();
        self.store.sgd_step(&ids, self.lr)
    }

    fn validate(&self) -> Result<f64> {
        let v = &self.data.validation;
        let z = in_chunks(&v.features, |chunk| {
            let mut g = Graph::new(self.store);
            let xv = g.input(chunk);
            let z = self.validation_logits(&mut g, xv)?;
            Ok(g.value(z).to_vec())
        })?;
        Ok(accuracy(&z, self.data.class_count(), &v.labels))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.store.snapshot(&self.trainable())
    }

    fn restore(&mut self, s: &[Tensor]) {
        let ids = self.trainable();
        self.store.restore(&ids, s);
    }
}

/// `acc[i][j]`: test accuracy of task `i` right after task `j` was learned,
/// defined for `j ≥ i`. The last column holds the final accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            cells: vec![vec![None; n]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        let n = self.len();
        if i >= n || j >= n || j < i {
            return Err(Error::Input(format!("cell ({i}, {j}) outside the upper triangle of {n} tasks")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Input(format!("accuracy {acc} outside [0, 1]")));
        }
        self.cells[i][j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    /// Accuracy when task `i` was first learned.
    pub fn first_learned(&self, i: usize) -> Option<f64> {
        self.get(i, i)
    }

    /// Accuracy after the whole sequence.
    pub fn final_accuracy(&self, i: usize) -> Option<f64> {
        self.get(i, self.len().checked_sub(1)?)
    }

    pub fn is_complete(&self) -> bool {
        (0..self.len()).all(|i| (i..self.len()).all(|j| self.get(i, j).is_some()))
    }

    /// Rows are tasks, columns the task after which they were evaluated.
    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut out = String::from("task");
        for j in 0..n {
            out.push_str(&format!(",after_{j}"));
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&i.to_string());
            for j in 0..n {
                match self.get(i, j) {
                    Some(a) => out.push_str(&format!(",{a}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub forward: f64,
    pub backward: f64,
}

/// Means of first-learned and final accuracy over `tasks`; `None` for an
/// empty set.
pub fn transfer_metrics(matrix: &AccuracyMatrix, tasks: &[usize]) -> Result<Option<TransferMetrics>> {
    if tasks.is_empty() {
        return Ok(None);
    }
    if !matrix.is_complete() {
        return Err(Error::State("accuracy matrix is incomplete".into()));
    }
    let mut f = 0.0;
    let mut b = 0.0;
    for &i in tasks {
        f += matrix
            .first_learned(i)
            .ok_or_else(|| Error::Input(format!("task {i} outside the matrix")))?;
        b += matrix.final_accuracy(i).expect("complete matrix");
    }
    let n = tasks.len() as f64;
    Ok(Some(TransferMetrics {
        forward: f / n,
        backward: b / n,
    }))
}

/// A sequence in progress: the learner, the accuracy matrix so far, and the
/// test splits of learned tasks.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    learner: ContinualLearner,
    matrix: AccuracyMatrix,
    tests: Vec<Split>,
}

impl SequenceRun {
    pub fn new(config: LearnerConfig, input_dim: usize, total_tasks: usize) -> Result<Self> {
        if total_tasks == 0 {
            return Err(Error::Input("task sequence is empty".into()));
        }
        Ok(Self {
            learner: ContinualLearner::new(config, input_dim)?,
            matrix: AccuracyMatrix::new(total_tasks),
            tests: Vec::new(),
        })
    }

    /// Rebuilds a run from saved state; `tasks` is the full sequence, whose
    /// first `completed` test splits are reattached.
    pub fn resume(learner: ContinualLearner, matrix: AccuracyMatrix, tasks: &[TaskDataset]) -> Result<Self> {
        let done = learner.task_count();
        if matrix.len() != tasks.len() || done > tasks.len() {
            return Err(Error::Input(format!(
                "checkpoint covers {done} of {} tasks but the sequence has {}",
                matrix.len(),
                tasks.len()
            )));
        }
        for (i, (r, t)) in learner.records().iter().zip(tasks).enumerate() {
            if r.task_id != t.task_id || r.classes != t.class_count() {
                return Err(Error::Input(format!("task {i} of the sequence does not match the checkpoint")));
            }
        }
        Ok(Self {
            learner,
            matrix,
            tests: tasks[..done].iter().map(|t| t.test.clone()).collect(),
        })
    }

    pub fn completed(&self) -> usize {
        self.learner.task_count()
    }

    pub fn learner(&self) -> &ContinualLearner {
        &self.learner
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    /// Learns `task`, then evaluates every learned task on its test split.
    pub fn step(&mut self, task: &TaskDataset) -> Result<()> {
        let j = self.completed();
        if j >= self.matrix.len() {
            return Err(Error::State("sequence already complete".into()));
        }
        self.learner.learn_task(task)?;
        self.tests.push(task.test.clone());
        for (i, test) in self.tests.iter().enumerate() {
            let acc = self.learner.evaluate(i, test)?;
            self.matrix.set(i, j, acc)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ContinualLearner, AccuracyMatrix) {
        (self.learner, self.matrix)
    }
}

/// Learns `tasks` in order and fills the full accuracy matrix.
pub fn learn_sequence(tasks: &[TaskDataset], config: &LearnerConfig) -> Result<(ContinualLearner, AccuracyMatrix)> {
    let first = tasks.first().ok_or_else(|| Error::Input("task sequence is empty".into()))?;
    let mut run = SequenceRun::new(config.clone(), first.input_dim(), tasks.len())?;
    for t in tasks {
        run.step(t)?;
    }
    Ok(run.into_parts())
}
