//! Task similarity detection: for each earlier task `k`, a linear readout
//! trained on frozen features of `k` competes against a small network
//! trained from scratch on the new task.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor};
use crate::datasets::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::kb::{Gates, KnowledgeBase, Mode};
use crate::masks::{MaskStore, TaskMask};
use crate::rng::{self, label, Rng};
use crate::train::{accuracy, fit, in_chunks, FitSummary, Protocol, Trainable};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSimilarityVector {
    pub task_id: usize,
    /// `bits[k]` for every earlier task `k`.
    pub bits: Vec<bool>,
}

impl TaskSimilarityVector {
    pub fn uniform(task_id: usize, value: bool) -> Self {
        Self {
            task_id,
            bits: vec![value; task_id],
        }
    }

    pub fn similar(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&k| self.bits[k]).collect()
    }

    pub fn dissimilar(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&k| !self.bits[k]).collect()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub protocol: Protocol,
    /// Reference hidden width as a fraction of the KB width.
    pub reference_ratio: f64,
    /// Same rate as the KB so the reference differs only in size and masks.
    pub reference_dropout: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol {
                max_epochs: 100,
                ..Protocol::default()
            },
            reference_ratio: 0.5,
            reference_dropout: 0.5,
        }
    }
}

/// Linear readout over frozen KB features of a source task.
#[derive(Clone, Debug)]
pub struct TransferModel {
    pub source: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub hidden_width: usize,
    pub params: Vec<Tensor>,
}

/// Rule for one bit: transfer accuracy must beat the reference strictly.
pub fn similarity_bit(transfer_acc: f64, reference_acc: f64) -> bool {
    transfer_acc > reference_acc
}

/// KB output under `mask` for every row of `x`, with all weights constant.
pub fn frozen_features(kb: &KnowledgeBase, store: &ParamStore, mask: &TaskMask, x: &Tensor) -> Result<Tensor> {
    let values = in_chunks(x, |chunk| {
        let mut g = Graph::new(store);
        let v = g.input(chunk);
        let h = kb.forward_as_previous_task(&mut g, v, mask, true)?;
        Ok(g.value(h).to_vec())
    })?;
    Tensor::new(x.rows(), kb.width(), values)
}

struct Readout<'a> {
    store: ParamStore,
    w: ParamId,
    b: ParamId,
    train: &'a Split,
    validation: &'a Split,
    lr: f64,
}

impl Readout<'_> {
    fn logits(&self, x: Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let x = g.input(x);
        let w = g.frozen(self.w);
        let b = g.frozen(self.b);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        Ok(g.value(z).to_vec())
    }
}

impl Trainable for Readout<'_> {
    fn train_batch(&mut self, batch: &[usize], _: usize, _: usize, _: &mut Rng) -> Result<()> {
        let (x, y) = self.train.gather(batch);
        let mut g = Graph::new(&self.store);
        let x = g.input(x);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let loss = g.softmax_cross_entropy(z, &y)?;
        let grads = g.backward(loss)?;
        self.store.load_gradients(grads);
        self.store.sgd_step(&[self.w, self.b], self.lr)
    }

    fn validate(&self) -> Result<f64> {
        let classes = self.store.get(self.b).cols();
        let z = in_chunks(&self.validation.features, |c| self.logits(c))?;
        Ok(accuracy(&z, classes, &self.validation.labels))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.store.snapshot(&[self.w, self.b])
    }

    fn restore(&mut self, s: &[Tensor]) {
        self.store.restore(&[self.w, self.b], s);
    }
}

fn require_validation(data: &TaskDataset) -> Result<()> {
    if data.validation.is_empty() {
        return Err(Error::Input(format!("task {} has an empty validation split", data.task_id)));
    }
    Ok(())
}

/// Trains the readout `k → t` on frozen KB features. Neither `kb` nor `store`
/// is modified.
pub fn train_transfer(
    mask: &TaskMask,
    data: &TaskDataset,
    kb: &KnowledgeBase,
    store: &ParamStore,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<(TransferModel, FitSummary)> {
    require_validation(data)?;
    let train = Split::new(frozen_features(kb, store, mask, &data.train.features)?, data.train.labels.clone())?;
    let validation = Split::new(
        frozen_features(kb, store, mask, &data.validation.features)?,
        data.validation.labels.clone(),
    )?;
    let mut local = ParamStore::new();
    let w = local.add(Tensor::glorot(kb.width(), data.class_count(), rng));
    let b = local.add(Tensor::zeros(1, data.class_count()));
    let mut model = Readout {
        store: local,
        w,
        b,
        train: &train,
        validation: &validation,
        lr: cfg.protocol.lr,
    };
    let summary = fit(&mut model, train.len(), &cfg.protocol, rng)?;
    let out = TransferModel {
        source: mask.task_id,
        weight: model.store.get(w).clone(),
        bias: model.store.get(b).clone(),
    };
    Ok((out, summary))
}

struct Reference<'a> {
    store: ParamStore,
    net: KnowledgeBase,
    data: &'a TaskDataset,
    lr: f64,
}

impl Reference<'_> {
    fn trainable(&self) -> Vec<ParamId> {
        let mut ids = self.net.shared_params();
        let t = self.net.task(0).expect("reference head");
        ids.extend([t.head_w, t.head_b]);
        ids
    }
}

impl Trainable for Reference<'_> {
    fn train_batch(&mut self, batch: &[usize], _: usize, _: usize, rng: &mut Rng) -> Result<()> {
        let (x, y) = self.data.train.gather(batch);
        let mut g = Graph::new(&self.store);
        let x = g.input(x);
        let out = self.net.forward(&mut g, x, Gates::Open, Mode::Train, rng)?;
        let h = g.dropout(out.output, self.net.dropout(), true, rng)?;
        let z = self.net.classify_mask_head(&mut g, h, 0, Mode::Train)?;
        let loss = g.softmax_cross_entropy(z, &y)?;
        let grads = g.backward(loss)?;
        self.store.load_gradients(grads);
        let ids = self.trainable();
        self.store.sgd_step(&ids, self.lr)
    }

    fn validate(&self) -> Result<f64> {
        let v = &self.data.validation;
        let mut unused = rng::stream(0, &[]);
        let z = in_chunks(&v.features, |c| {
            let mut g = Graph::new(&self.store);
            let x = g.input(c);
            let out = self.net.forward(&mut g, x, Gates::Open, Mode::Frozen, &mut unused)?;
            let z = self.net.classify_mask_head(&mut g, out.output, 0, Mode::Frozen)?;
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

/// Trains an unmasked two-layer network of width `kb_width · ratio` on `t`
/// alone.
pub fn train_reference(
    data: &TaskDataset,
    kb_width: usize,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<(ReferenceModel, FitSummary)> {
    require_validation(data)?;
    let hidden = ((kb_width as f64 * cfg.reference_ratio).round() as usize).max(1);
    let mut store = ParamStore::new();
    let mut net = KnowledgeBase::new(&mut store, data.input_dim(), hidden, cfg.reference_dropout, rng);
    net.register_task(&mut store, data.class_count(), rng);
    let mut model = Reference {
        store,
        net,
        data,
        lr: cfg.protocol.lr,
    };
    let summary = fit(&mut model, data.train.len(), &cfg.protocol, rng)?;
    let params = model.store.tensors().cloned().collect();
    Ok((
        ReferenceModel {
            hidden_width: hidden,
            params,
        },
        summary,
    ))
}

/// Outcome of detection for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub tsv: TaskSimilarityVector,
    pub reference_accuracy: f64,
    /// Best validation accuracy of the readout from each earlier task.
    pub transfer_accuracy: Vec<f64>,
}

/// Computes `TSV^(t)` against every stored mask `0..t`. Each sub-training
/// draws from its own seeded stream, so results do not depend on order.
pub fn detect(
    t: usize,
    data: &TaskDataset,
    kb: &KnowledgeBase,
    store: &ParamStore,
    masks: &MaskStore,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<DetectionRecord> {
    require_validation(data)?;
    let t64 = t as u64;
    let mut ref_rng = rng::stream(seed, &[label::DETECT, t64, label::REFERENCE]);
    let (_, reference) = train_reference(data, kb.width(), cfg, &mut ref_rng)?;
    let mut transfer_accuracy = Vec::with_capacity(t);
    let mut bits = Vec::with_capacity(t);
    for k in 0..t {
        let mask = masks.get(k)?;
        let mut r = rng::stream(seed, &[label::DETECT, t64, label::TRANSFER, k as u64]);
        let (_, s) = train_transfer(mask, data, kb, store, cfg, &mut r)?;
        bits.push(similarity_bit(s.best_accuracy, reference.best_accuracy));
        transfer_accuracy.push(s.best_accuracy);
    }
    Ok(DetectionRecord {
        tsv: TaskSimilarityVector { task_id: t, bits },
        reference_accuracy: reference.best_accuracy,
        transfer_accuracy,
    })
}

/// Lower-triangular TSV matrix: row `t`, column `k < t`; cells with
/// `k ≥ t` are left empty.
pub fn tsv_csv(rows: &[TaskSimilarityVector]) -> String {
    let n = rows.len();
    let mut out = String::from("task");
    for k in 0..n {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}", r.task_id);
        for k in 0..n {
            match r.bits.get(k) {
                Some(&b) => {
                    let _ = write!(out, ",{}", u8::from(b));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_rule() {
        assert!(similarity_bit(0.8, 0.7));
        assert!(!similarity_bit(0.7, 0.7));
        assert!(!similarity_bit(0.6, 0.7));
    }

    #[test]
    fn tsv_partitions_predecessors() {
        let v = TaskSimilarityVector {
            task_id: 4,
            bits: vec![true, false, false, true],
        };
        assert_eq!(v.similar(), vec![0, 3]);
        assert_eq!(v.dissimilar(), vec![1, 2]);
        assert!(v.any());
        assert!(!TaskSimilarityVector::uniform(0, true).any());
    }

    #[test]
    fn csv_is_lower_triangular() {
        let rows = vec![
            TaskSimilarityVector::uniform(0, false),
            TaskSimilarityVector::uniform(1, true),
            TaskSimilarityVector {
                task_id: 2,
                bits: vec![false, true],
            },
        ];
        assert_eq!(tsv_csv(&rows), "task,0,1,2\n0,,,\n1,1,,\n2,0,1,\n");
    }
}
