//! Saved task masks, their accumulation, and gradient blocking of units
//! owned by earlier dissimilar tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradHook, ParamStore};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, LAYERS};

/// Binary per-layer unit masks of one completed task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    pub task_id: usize,
    layers: Vec<Vec<bool>>,
}

impl TaskMask {
    pub fn new(task_id: usize, layers: Vec<Vec<bool>>) -> Self {
        Self { task_id, layers }
    }

    /// `σ(s_max · e_l) ≥ 0.5` per unit; a gate of exactly one half counts as
    /// used.
    pub fn from_store(task_id: usize, kb: &KnowledgeBase, store: &ParamStore, s_max: f64) -> Result<Self> {
        let layers = (0..LAYERS)
            .map(|l| {
                kb.mask_values(store, task_id, l, s_max)
                    .map(|m| m.into_iter().map(|v| v >= 0.5).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { task_id, layers })
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn layer_f64(&self, l: usize) -> Vec<f64> {
        self.layers[l].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn used(&self, l: usize) -> usize {
        self.layers[l].iter().filter(|&&b| b).count()
    }
}

/// Union (elementwise max) of a set of task masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatedMask {
    layers: Vec<Vec<bool>>,
}

impl AccumulatedMask {
    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&b| !b))
    }
}

/// Elementwise maximum over `masks`; all zeros for an empty set.
pub fn accumulate<'a>(widths: &[usize], masks: impl IntoIterator<Item = &'a TaskMask>) -> Result<AccumulatedMask> {
    let mut layers: Vec<Vec<bool>> = widths.iter().map(|&w| vec![false; w]).collect();
    for m in masks {
        if m.widths() != widths {
            return Err(Error::shape(
                "accumulate",
                format!("mask of task {} has widths {:?}, expected {widths:?}", m.task_id, m.widths()),
            ));
        }
        for (acc, layer) in layers.iter_mut().zip(&m.layers) {
            for (a, &b) in acc.iter_mut().zip(layer) {
                *a |= b;
            }
        }
    }
    Ok(AccumulatedMask { layers })
}

/// Blocks gradients into every used unit of `acc`: the gradient of each
/// incoming weight and the bias of unit `i` in layer `l` is multiplied by
/// `1 − acc_l[i]`.
pub fn install_blocking_hooks(store: &mut ParamStore, kb: &KnowledgeBase, acc: &AccumulatedMask) {
    for l in 0..LAYERS {
        let factors: Vec<f64> = acc.layers[l].iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        let (w, b) = kb.layer(l);
        store.set_hook(w, Some(GradHook::ScaleUnits(factors.clone())));
        store.set_hook(b, Some(GradHook::ScaleUnits(factors)));
    }
}

pub fn remove_blocking_hooks(store: &mut ParamStore, kb: &KnowledgeBase) {
    for l in 0..LAYERS {
        let (w, b) = kb.layer(l);
        store.set_hook(w, None);
        store.set_hook(b, None);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub used: usize,
    pub free: usize,
}

/// Append-only store of saved task masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStore {
    masks: BTreeMap<usize, TaskMask>,
}

impl MaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binarizes and stores the final gates of `task`.
    pub fn save_mask(&mut self, task: usize, kb: &KnowledgeBase, store: &ParamStore, s_max: f64) -> Result<&TaskMask> {
        if self.masks.contains_key(&task) {
            return Err(Error::State(format!("mask for task {task} already saved")));
        }
        let mask = TaskMask::from_store(task, kb, store, s_max)?;
        Ok(self.masks.entry(task).or_insert(mask))
    }

    pub fn insert(&mut self, mask: TaskMask) -> Result<()> {
        if self.masks.contains_key(&mask.task_id) {
            return Err(Error::State(format!("mask for task {} already saved", mask.task_id)));
        }
        self.masks.insert(mask.task_id, mask);
        Ok(())
    }

    pub fn get(&self, task: usize) -> Result<&TaskMask> {
        self.masks
            .get(&task)
            .ok_or_else(|| Error::State(format!("no stored mask for task {task}")))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskMask> {
        self.masks.values()
    }

    /// Per layer: units used by at least one stored task, and the rest.
    pub fn used_units_report(&self, widths: &[usize]) -> Result<Vec<LayerUsage>> {
        let acc = accumulate(widths, self.iter())?;
        Ok(acc
            .layers
            .iter()
            .map(|l| {
                let used = l.iter().filter(|&&b| b).count();
                LayerUsage {
                    used,
                    free: l.len() - used,
                }
            })
            .collect())
    }

    /// One `0`/`1` line per layer.
    pub fn export_text(&self, task: usize) -> Result<String> {
        let m = self.get(task)?;
        let mut out = String::new();
        for l in 0..m.layer_count() {
            let line: String = m.layer(l).iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(out, "{line}").expect("write to string");
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::rng;
    use proptest::prelude::*;

    fn mask(id: usize, a: &[u8], b: &[u8]) -> TaskMask {
        TaskMask::new(
            id,
            vec![a.iter().map(|&v| v == 1).collect(), b.iter().map(|&v| v == 1).collect()],
        )
    }

    #[test]
    fn accumulate_is_elementwise_max() {
        let a = mask(0, &[1, 0, 1], &[0, 0, 0]);
        let b = mask(1, &[0, 0, 1], &[0, 1, 0]);
        let acc = accumulate(&[3, 3], [&a, &b]).unwrap();
        assert_eq!(acc.layer(0), &[true, false, true]);
        assert_eq!(acc.layer(1), &[false, true, false]);
        let empty = accumulate(&[3, 3], []).unwrap();
        assert!(empty.is_empty());
        assert_eq!(accumulate(&[3, 3], [&a, &a]).unwrap().layer(0), a.layer(0));
    }

    #[test]
    fn accumulate_width_mismatch() {
        let a = mask(0, &[1, 0], &[0, 0]);
        assert!(matches!(accumulate(&[3, 3], [&a]), Err(Error::Shape { .. })));
    }

    #[test]
    fn save_mask_binarizes_with_upward_tie() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let mut kb = KnowledgeBase::new(&mut store, 2, 3, 0.0, &mut r);
        kb.register_task(&mut store, 2, &mut r);
        let e = kb.task(0).unwrap().embeddings[0];
        store.get_mut(e).values_mut().copy_from_slice(&[-0.5, 0.5, 0.0]);
        let mut masks = MaskStore::new();
        let m = masks.save_mask(0, &kb, &store, 140.0).unwrap();
        assert_eq!(m.layer(0), &[false, true, true]);
        assert!(matches!(masks.save_mask(0, &kb, &store, 140.0), Err(Error::State(_))));
        assert!(matches!(masks.get(1), Err(Error::State(_))));
    }

    #[test]
    fn hooks_zero_rows_of_used_units() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, &[]);
        let kb = KnowledgeBase::new(&mut store, 3, 2, 0.0, &mut r);
        let acc = accumulate(&[2, 2], [&mask(0, &[1, 0], &[1, 1])]).unwrap();
        install_blocking_hooks(&mut store, &kb, &acc);

        let grads = {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::uniform(4, 3, 1.0, &mut r));
            let out = kb
                .forward(&mut g, x, crate::kb::Gates::Open, crate::kb::Mode::Eval, &mut r)
                .unwrap()
                .output;
            let w = g.input(Tensor::uniform(2, 2, 1.0, &mut r));
            let logits = g.matmul(out, w).unwrap();
            let loss = g.softmax_cross_entropy(logits, &[0, 1, 1, 0]).unwrap();
            g.backward(loss).unwrap()
        };
        let (w1, _) = kb.layer(0);
        let raw_w1 = grads.param(w1).unwrap().to_vec();
        store.load_gradients(grads);
        let hooked = store.grad(w1).unwrap().values();
        for row in 0..3 {
            assert_eq!(hooked[row * 2], 0.0);
            assert_eq!(hooked[row * 2 + 1], raw_w1[row * 2 + 1]);
        }
        let (w2, b2) = kb.layer(1);
        assert!(store.grad(w2).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(store.grad(b2).unwrap().values().iter().all(|&v| v == 0.0));
        remove_blocking_hooks(&mut store, &kb);
        assert!(store.param(w2).hook.is_none());
    }

    #[test]
    fn usage_report_and_export() {
        let mut masks = MaskStore::new();
        assert_eq!(
            masks.used_units_report(&[4, 4]).unwrap(),
            vec![LayerUsage { used: 0, free: 4 }; 2]
        );
        masks.insert(mask(0, &[1, 1, 0, 0], &[1, 0, 0, 0])).unwrap();
        masks.insert(mask(1, &[0, 0, 1, 0], &[0, 0, 1, 1])).unwrap();
        let r = masks.used_units_report(&[4, 4]).unwrap();
        assert_eq!(r[0], LayerUsage { used: 3, free: 1 });
        assert_eq!(r[1], LayerUsage { used: 3, free: 1 });
        assert_eq!(masks.export_text(1).unwrap(), "0010\n0011\n");
    }

    fn arb_mask(id: usize) -> impl Strategy<Value = TaskMask> {
        (prop::collection::vec(any::<bool>(), 6), prop::collection::vec(any::<bool>(), 6))
            .prop_map(move |(a, b)| TaskMask::new(id, vec![a, b]))
    }

    proptest! {
        #[test]
        fn accumulate_is_a_semilattice(a in arb_mask(0), b in arb_mask(1), c in arb_mask(2)) {
            let w = [6, 6];
            let ab = accumulate(&w, [&a, &b]).unwrap();
            let ba = accumulate(&w, [&b, &a]).unwrap();
            prop_assert_eq!(&ab, &ba);
            let ab_mask = TaskMask::new(9, vec![ab.layer(0).to_vec(), ab.layer(1).to_vec()]);
            let bc = accumulate(&w, [&b, &c]).unwrap();
            let bc_mask = TaskMask::new(9, vec![bc.layer(0).to_vec(), bc.layer(1).to_vec()]);
            prop_assert_eq!(
                accumulate(&w, [&ab_mask, &c]).unwrap(),
                accumulate(&w, [&a, &bc_mask]).unwrap()
            );
            let aa = accumulate(&w, [&a, &a]).unwrap();
            prop_assert_eq!(aa.layer(0), a.layer(0));
            prop_assert_eq!(aa.layer(1), a.layer(1));
        }

        #[test]
        fn hooks_leave_unblocked_positions_untouched(
            m in arb_mask(0),
            grad in prop::collection::vec(-5.0f64..5.0, 24),
        ) {
            let mut store = ParamStore::new();
            let mut r = rng::stream(3, &[]);
            let kb = KnowledgeBase::new(&mut store, 4, 6, 0.0, &mut r);
            let acc = accumulate(&[6, 6], [&m]).unwrap();
            install_blocking_hooks(&mut store, &kb, &acc);
            let (w1, _) = kb.layer(0);
            let mut grads = crate::autodiff::Gradients::default();
            grads.insert(w1, grad.clone());
            store.load_gradients(grads);
            let hooked = store.grad(w1).unwrap().values();
            for i in 0..4 {
                for j in 0..6 {
                    let k = i * 6 + j;
                    if acc.layer(0)[j] {
                        prop_assert_eq!(hooked[k], 0.0);
                    } else {
                        prop_assert_eq!(hooked[k], grad[k]);
                    }
                }
            }
        }
    }
}
