//! The shared knowledge base: a two-layer rectifier network whose units are
//! gated per task by `σ(s · e_l)`, plus one classification head per task.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::masks::TaskMask;
use crate::rng::Rng;

pub const LAYERS: usize = 2;

/// `s` for batch `b` (1-based) of `total` within an epoch: a linear ramp
/// from `1/s_max` to `s_max`.
pub fn anneal_s(b: usize, total: usize, s_max: f64) -> Result<f64> {
    if total == 0 || b == 0 || b > total {
        return Err(Error::Input(format!("batch index {b} outside 1..={total}")));
    }
    if s_max <= 1.0 {
        return Err(Error::Input(format!("s_max must exceed 1, got {s_max}")));
    }
    let lo = 1.0 / s_max;
    if total == 1 {
        return Ok(lo);
    }
    Ok(lo + (s_max - lo) * (b - 1) as f64 / (total - 1) as f64)
}

/// How unit gates are obtained during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a> {
    /// No gating (plain network).
    Open,
    /// Trainable gates `σ(s · e_l)` of a registered task.
    Soft { task: usize, s: f64 },
    /// Saved binary masks, treated as constants.
    Stored(&'a TaskMask),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, gradients tracked.
    Train,
    /// Dropout off, gradients tracked.
    Eval,
    /// Dropout off, every parameter read as a constant.
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub struct KbOutput {
    pub hidden: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbTask {
    pub classes: usize,
    pub embeddings: [ParamId; LAYERS],
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    input_dim: usize,
    width: usize,
    dropout: f64,
    weights: [ParamId; LAYERS],
    biases: [ParamId; LAYERS],
    tasks: Vec<KbTask>,
}

impl KnowledgeBase {
    pub fn new(store: &mut ParamStore, input_dim: usize, width: usize, dropout: f64, rng: &mut Rng) -> Self {
        let w1 = store.add(Tensor::glorot(input_dim, width, rng));
        let b1 = store.add(Tensor::zeros(1, width));
        let w2 = store.add(Tensor::glorot(width, width, rng));
        let b2 = store.add(Tensor::zeros(1, width));
        Self {
            input_dim,
            width,
            dropout,
            weights: [w1, w2],
            biases: [b1, b2],
            tasks: Vec::new(),
        }
    }

    /// Adds embeddings (uniform in ±1) and a head for a new task.
    pub fn register_task(&mut self, store: &mut ParamStore, classes: usize, rng: &mut Rng) -> usize {
        let e1 = store.add(Tensor::uniform(1, self.width, 1.0, rng));
        let e2 = store.add(Tensor::uniform(1, self.width, 1.0, rng));
        let head_w = store.add(Tensor::glorot(self.width, classes, rng));
        let head_b = store.add(Tensor::zeros(1, classes));
        self.tasks.push(KbTask {
            classes,
            embeddings: [e1, e2],
            head_w,
            head_b,
        });
        self.tasks.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> Result<&KbTask> {
        self.tasks.get(t).ok_or_else(|| Error::unknown_task(t))
    }

    pub fn layer(&self, l: usize) -> (ParamId, ParamId) {
        (self.weights[l], self.biases[l])
    }

    /// `[W1, b1, W2, b2]`.
    pub fn shared_params(&self) -> Vec<ParamId> {
        vec![self.weights[0], self.biases[0], self.weights[1], self.biases[1]]
    }

    pub fn task_params(&self, t: usize) -> Result<Vec<ParamId>> {
        let k = self.task(t)?;
        Ok(vec![k.embeddings[0], k.embeddings[1], k.head_w, k.head_b])
    }

    fn leaf(g: &mut Graph, id: ParamId, mode: Mode) -> Var {
        match mode {
            Mode::Frozen => g.frozen(id),
            _ => g.param(id),
        }
    }

    /// Gate vector `σ(s · e_l)` for task `t`, layer `l` (0-based).
    pub fn mask_for(&self, g: &mut Graph, t: usize, l: usize, s: f64, mode: Mode) -> Result<Var> {
        let e = Self::leaf(g, self.task(t)?.embeddings[l], mode);
        let scaled = g.scale(e, s);
        Ok(g.sigmoid(scaled))
    }

    /// Gate values outside any graph.
    pub fn mask_values(&self, store: &ParamStore, t: usize, l: usize, s: f64) -> Result<Vec<f64>> {
        let e = store.get(self.task(t)?.embeddings[l]);
        Ok(e.values()
            .iter()
            .map(|&v| crate::autodiff::sigmoid(s * v))
            .collect())
    }

    /// `h_l = relu(h_{l-1} W_l + b_l) ⊙ m_l`, with dropout between layers in
    /// training mode.
    pub fn forward(&self, g: &mut Graph, x: Var, gates: Gates, mode: Mode, rng: &mut Rng) -> Result<KbOutput> {
        let [_, d] = g.shape(x);
        if d != self.input_dim {
            return Err(Error::shape(
                "kb forward",
                format!("input width {d}, expected {}", self.input_dim),
            ));
        }
        let mut h = x;
        let mut outs = [x; LAYERS];
        for l in 0..LAYERS {
            if l > 0 {
                h = g.dropout(h, self.dropout, mode == Mode::Train, rng)?;
            }
            let w = Self::leaf(g, self.weights[l], mode);
            let b = Self::leaf(g, self.biases[l], mode);
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            let a = g.relu(z);
            h = match gates {
                Gates::Open => a,
                Gates::Soft { task, s } => {
                    let m = self.mask_for(g, task, l, s, mode)?;
                    g.mul_row(a, m)?
                }
                Gates::Stored(mask) => {
                    let m = g.input(Tensor::row(mask.layer_f64(l)));
                    g.mul_row(a, m)?
                }
            };
            outs[l] = h;
        }
        Ok(KbOutput {
            hidden: outs[0],
            output: outs[1],
        })
    }

    pub fn forward_masked(
        &self,
        g: &mut Graph,
        x: Var,
        task: usize,
        s: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<KbOutput> {
        self.task(task)?;
        let mode = if training { Mode::Train } else { Mode::Eval };
        self.forward(g, x, Gates::Soft { task, s }, mode, rng)
    }

    /// Output of a completed task under its saved masks and the current
    /// weights, without dropout. Weights stay differentiable unless `frozen`.
    pub fn forward_as_previous_task(&self, g: &mut Graph, x: Var, mask: &TaskMask, frozen: bool) -> Result<Var> {
        let mode = if frozen { Mode::Frozen } else { Mode::Eval };
        // dropout is disabled in both modes, so the stream is never drawn
        let mut unused = crate::rng::stream(0, &[]);
        Ok(self.forward(g, x, Gates::Stored(mask), mode, &mut unused)?.output)
    }

    /// Linear `f_mask` head of task `t`.
    pub fn classify_mask_head(&self, g: &mut Graph, h: Var, t: usize, mode: Mode) -> Result<Var> {
        let k = self.task(t)?;
        let [_, w] = g.shape(h);
        if w != self.width {
            return Err(Error::shape("mask head", format!("width {w}, expected {}", self.width)));
        }
        let hw = Self::leaf(g, k.head_w, mode);
        let hb = Self::leaf(g, k.head_b, mode);
        let z = g.matmul(h, hw)?;
        g.add_row(z, hb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn kb(width: usize) -> (ParamStore, KnowledgeBase, Rng) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(11, &[]);
        let mut kb = KnowledgeBase::new(&mut store, 6, width, 0.5, &mut r);
        kb.register_task(&mut store, 3, &mut r);
        (store, kb, r)
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s_max = 140.0;
        assert_eq!(anneal_s(1, 9, s_max).unwrap(), 1.0 / 140.0);
        assert_eq!(anneal_s(9, 9, s_max).unwrap(), 140.0);
        let mid = anneal_s(5, 9, s_max).unwrap();
        assert!((mid - (1.0 / 140.0 + 140.0) / 2.0).abs() < 1e-12);
        assert_eq!(anneal_s(1, 1, s_max).unwrap(), 1.0 / 140.0);
        assert!(anneal_s(0, 9, s_max).is_err());
        assert!(anneal_s(10, 9, s_max).is_err());
        assert!(anneal_s(1, 9, 1.0).is_err());
    }

    #[test]
    fn anneal_is_monotone() {
        let v: Vec<f64> = (1..=17).map(|b| anneal_s(b, 17, 140.0).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_embedding_gives_half_gates() {
        let (mut store, kb, _) = kb(4);
        let e = kb.task(0).unwrap().embeddings[0];
        store.get_mut(e).values_mut().fill(0.0);
        assert_eq!(kb.mask_values(&store, 0, 0, 140.0).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn saturated_gates() {
        let (mut store, kb, _) = kb(4);
        let e = kb.task(0).unwrap().embeddings[1];
        store.get_mut(e).values_mut().copy_from_slice(&[1.0, -0.1, 0.1, 0.25]);
        let m = kb.mask_values(&store, 0, 1, 140.0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-10);
        for v in m {
            assert!((v - v.round()).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_task_is_lookup_error() {
        let (store, kb, mut r) = kb(4);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(2, 6));
        assert!(matches!(
            kb.forward_masked(&mut g, x, 3, 1.0, false, &mut r),
            Err(Error::Lookup { .. })
        ));
        assert!(matches!(kb.mask_values(&store, 5, 0, 1.0), Err(Error::Lookup { .. })));
    }

    #[test]
    fn open_gates_equal_plain_forward() {
        let (mut store, kb, mut r) = kb(5);
        for l in 0..LAYERS {
            // σ(large) == 1.0 exactly in f64
            let e = kb.task(0).unwrap().embeddings[l];
            store.get_mut(e).values_mut().fill(10.0);
        }
        let x = Tensor::uniform(3, 6, 1.0, &mut r);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let masked = kb.forward_masked(&mut g, xv, 0, 100.0, false, &mut r).unwrap().output;
        let plain = kb.forward(&mut g, xv, Gates::Open, Mode::Eval, &mut r).unwrap().output;
        assert_eq!(g.value(masked), g.value(plain));
    }

    #[test]
    fn closed_second_layer_gives_zero_output_and_logits_bias_only() {
        let (mut store, kb, mut r) = kb(5);
        let e = kb.task(0).unwrap().embeddings[1];
        store.get_mut(e).values_mut().fill(-10.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(2, 6, 1.0, &mut r));
        let out = kb.forward_masked(&mut g, x, 0, 140.0, false, &mut r).unwrap().output;
        assert!(g.value(out).iter().all(|&v| v.abs() < 1e-300));
        let logits = kb.classify_mask_head(&mut g, out, 0, Mode::Eval).unwrap();
        assert_eq!(g.shape(logits), [2, 3]);
        assert!(g.value(logits).iter().all(|&v| v.abs() < 1e-290));
    }

    #[test]
    fn zero_unit_contributes_nothing_to_logits() {
        let (mut store, kb, mut r) = kb(4);
        let t = kb.task(0).unwrap().clone();
        store.get_mut(t.embeddings[1]).values_mut().copy_from_slice(&[1.0, 1.0, -1.0, 1.0]);
        let x = Tensor::uniform(2, 6, 1.0, &mut r);
        let logits = |store: &ParamStore, r: &mut Rng| {
            let mut g = Graph::new(store);
            let xv = g.input(x.clone());
            let mask = TaskMask::from_store(0, &kb, store, 140.0).unwrap();
            let h = kb.forward_as_previous_task(&mut g, xv, &mask, true).unwrap();
            let _ = r;
            let l = kb.classify_mask_head(&mut g, h, 0, Mode::Frozen).unwrap();
            g.value(l).to_vec()
        };
        let before = logits(&store, &mut r);
        // rewrite the head weights of the closed unit (row 2 of head_w)
        let hw = store.get_mut(t.head_w);
        let cols = hw.cols();
        for c in 0..cols {
            hw.values_mut()[2 * cols + c] = 1e6;
        }
        assert_eq!(before, logits(&store, &mut r));
    }

    #[test]
    fn input_width_checked() {
        let (store, kb, mut r) = kb(4);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(1, 5));
        assert!(matches!(
            kb.forward(&mut g, x, Gates::Open, Mode::Eval, &mut r),
            Err(Error::Shape { .. })
        ));
    }
}
